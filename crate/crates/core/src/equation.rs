//! Parser and evaluator for extracted equation text such as
//! `dθ/dt = 1.0·ω ; dω/dt = -2.25·sin(1.0·θ + 0.0) + -0.3·ω`.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(String, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, vars: &HashMap<String, f64>) -> Result<f64> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(name) => *vars.get(name).ok_or_else(|| Error::Parse(format!("unbound symbol '{name}'")))?,
            Expr::Neg(e) => -e.eval(vars)?,
            Expr::Add(a, b) => a.eval(vars)? + b.eval(vars)?,
            Expr::Sub(a, b) => a.eval(vars)? - b.eval(vars)?,
            Expr::Mul(a, b) => a.eval(vars)? * b.eval(vars)?,
            Expr::Pow(a, n) => a.eval(vars)?.powi(*n),
            Expr::Call(f, a) => {
                let v = a.eval(vars)?;
                match f.as_str() {
                    "sin" => v.sin(),
                    "cos" => v.cos(),
                    _ => return Err(Error::Parse(format!("unknown function '{f}'"))),
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Times,
    Caret,
    Squared,
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1;
            }
            '*' | '·' => {
                out.push(Tok::Times);
                i += 1;
            }
            '^' => {
                out.push(Tok::Caret);
                i += 1;
            }
            '²' => {
                out.push(Tok::Squared);
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    i += 1;
                    if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                        i += 1;
                    }
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                let text: String = chars[start..i].iter().collect();
                out.push(Tok::Num(text.parse().map_err(|_| Error::Parse(format!("bad number '{text}'")))?));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len()
                    && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '\'')
                    && chars[i] != '²'
                {
                    i += 1;
                }
                out.push(Tok::Ident(chars[start..i].iter().collect()));
            }
            other => return Err(Error::Parse(format!("unexpected character '{other}'"))),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Times) = self.peek() {
            self.pos += 1;
            lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if let Some(Tok::Minus) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        match self.peek() {
            Some(Tok::Squared) => {
                self.pos += 1;
                Ok(Expr::Pow(Box::new(base), 2))
            }
            Some(Tok::Caret) => {
                self.pos += 1;
                match self.next() {
                    Some(Tok::Num(n)) if n.fract() == 0.0 => Ok(Expr::Pow(Box::new(base), n as i32)),
                    other => Err(Error::Parse(format!("expected integer exponent, got {other:?}"))),
                }
            }
            _ => Ok(base),
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Num(v)),
            Some(Tok::Ident(name)) => {
                if let Some(Tok::LParen) = self.peek() {
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    Ok(Expr::Call(name, Box::new(arg)))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            other => Err(Error::Parse(format!("unexpected token {other:?}"))),
        }
    }

    fn expect_rparen(&mut self) -> Result<()> {
        match self.next() {
            Some(Tok::RParen) => Ok(()),
            other => Err(Error::Parse(format!("expected ')', got {other:?}"))),
        }
    }
}

pub fn parse_expr(src: &str) -> Result<Expr> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(Error::Parse(format!("trailing input in '{src}'")));
    }
    Ok(e)
}

/// One parsed line `d<var>/dt = <expr>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Equation {
    pub var: String,
    pub rhs: Expr,
}

/// Parse the `;`-separated system produced by equation extraction.
pub fn parse_system(text: &str) -> Result<Vec<Equation>> {
    text.split(';')
        .map(|part| {
            let (lhs, rhs) = part.split_once('=').ok_or_else(|| Error::Parse(format!("missing '=' in '{part}'")))?;
            let lhs = lhs.trim();
            let var = lhs
                .strip_prefix('d')
                .and_then(|s| s.strip_suffix("/dt"))
                .ok_or_else(|| Error::Parse(format!("left side '{lhs}' is not d<x>/dt")))?;
            Ok(Equation { var: var.to_string(), rhs: parse_expr(rhs.trim())? })
        })
        .collect()
}

/// Evaluate a parsed system at state `x` whose coordinates are `names`.
pub fn eval_system(eqs: &[Equation], names: &[String], x: &[f64]) -> Result<Vec<f64>> {
    let vars: HashMap<String, f64> = names.iter().cloned().zip(x.iter().copied()).collect();
    names
        .iter()
        .map(|n| {
            let eq = eqs.iter().find(|e| &e.var == n).ok_or_else(|| Error::Parse(format!("no equation for '{n}'")))?;
            eq.rhs.eval(&vars)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_unicode() {
        let e = parse_expr("-2.5e-1·sin(1.0·θ + -0.5) + 3*ω² - ω^2").unwrap();
        let vars: HashMap<String, f64> = [("θ".to_string(), 0.7), ("ω".to_string(), 2.0)].into_iter().collect();
        let expect = -0.25 * (0.7f64 - 0.5).sin() + 3.0 * 4.0 - 4.0;
        assert!((e.eval(&vars).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn system_lines() {
        let eqs = parse_system("dx1/dt = 0 ; dx2/dt = 2·x1·x2").unwrap();
        let v = eval_system(&eqs, &["x1".into(), "x2".into()], &[3.0, 4.0]).unwrap();
        assert_eq!(v, vec![0.0, 24.0]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_expr("sin(").is_err());
        assert!(parse_system("x = 1").is_err());
        assert!(parse_expr("1 +").is_err());
    }
}
