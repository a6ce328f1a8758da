//! A small arithmetic expression grammar over `t`, `x`, `u`, `mean_x`,
//! `mean_u`, used for custom drift components and custom stage costs.
//!
//! Grammar (precedence climbing): `+ -` < `* /` < unary `-` < `^` (right
//! associative). Vector variables are indexed as `x[1]`; a bare `x` means
//! `x[0]`. Functions: `abs exp ln sqrt sin cos tanh min max clip`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    T,
    X(usize),
    U(usize),
    MeanX(usize),
    MeanU(usize),
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Func {
    Abs,
    Exp,
    Ln,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    Min,
    Max,
    Clip,
}

impl Func {
    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            Func::Clip => 3,
            _ => 1,
        }
    }
}

/// Compiled expression; evaluation is allocation-free.
#[derive(Clone, Debug, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

/// Values bound to the variables during evaluation. The `mean_*` slots are
/// optional: expressions referencing them fail validation when unavailable.
#[derive(Clone, Copy, Debug)]
pub struct EvalCtx<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub u: &'a [f64],
    pub mean_x: Option<&'a [f64]>,
    pub mean_u: Option<&'a [f64]>,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr> {
        let tokens = tokenize(source)?;
        let mut p = Parser { tokens, pos: 0 };
        let root = p.expr(0)?;
        if p.pos != p.tokens.len() {
            return Err(Error::ParseError(format!(
                "unexpected trailing input at token {} in `{source}`",
                p.pos
            )));
        }
        Ok(Expr {
            source: source.to_string(),
            root,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Checks variable indices against the given dimensions and whether
    /// measure means are available.
    pub fn validate(&self, d: usize, m: usize, has_measures: bool) -> Result<()> {
        fn walk(n: &Node, d: usize, m: usize, has_measures: bool, src: &str) -> Result<()> {
            match n {
                Node::Num(_) => Ok(()),
                Node::Var(v) => {
                    let ok = match *v {
                        Var::T => true,
                        Var::X(i) => i < d,
                        Var::U(i) => i < m,
                        Var::MeanX(i) => has_measures && i < d,
                        Var::MeanU(i) => has_measures && i < m,
                    };
                    if ok {
                        Ok(())
                    } else {
                        Err(Error::ParseError(format!(
                            "variable out of range or unavailable in `{src}` (d={d}, m={m}, measures={has_measures})"
                        )))
                    }
                }
                Node::Neg(a) => walk(a, d, m, has_measures, src),
                Node::Add(a, b)
                | Node::Sub(a, b)
                | Node::Mul(a, b)
                | Node::Div(a, b)
                | Node::Pow(a, b) => {
                    walk(a, d, m, has_measures, src)?;
                    walk(b, d, m, has_measures, src)
                }
                Node::Call(_, args) => {
                    for a in args {
                        walk(a, d, m, has_measures, src)?;
                    }
                    Ok(())
                }
            }
        }
        walk(&self.root, d, m, has_measures, &self.source)
    }

    pub fn eval(&self, ctx: &EvalCtx) -> f64 {
        eval_node(&self.root, ctx)
    }

    /// True when the expression references `mean_x` or `mean_u`.
    pub fn uses_measures(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match n {
                Node::Var(Var::MeanX(_)) | Node::Var(Var::MeanU(_)) => true,
                Node::Num(_) | Node::Var(_) => false,
                Node::Neg(a) => walk(a),
                Node::Add(a, b)
                | Node::Sub(a, b)
                | Node::Mul(a, b)
                | Node::Div(a, b)
                | Node::Pow(a, b) => walk(a) || walk(b),
                Node::Call(_, args) => args.iter().any(walk),
            }
        }
        walk(&self.root)
    }
}

fn eval_node(n: &Node, ctx: &EvalCtx) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Var(v) => match *v {
            Var::T => ctx.t,
            Var::X(i) => ctx.x[i],
            Var::U(i) => ctx.u[i],
            Var::MeanX(i) => ctx.mean_x.expect("mean_x unavailable")[i],
            Var::MeanU(i) => ctx.mean_u.expect("mean_u unavailable")[i],
        },
        Node::Neg(a) => -eval_node(a, ctx),
        Node::Add(a, b) => eval_node(a, ctx) + eval_node(b, ctx),
        Node::Sub(a, b) => eval_node(a, ctx) - eval_node(b, ctx),
        Node::Mul(a, b) => eval_node(a, ctx) * eval_node(b, ctx),
        Node::Div(a, b) => eval_node(a, ctx) / eval_node(b, ctx),
        Node::Pow(a, b) => eval_node(a, ctx).powf(eval_node(b, ctx)),
        Node::Call(f, args) => {
            let a0 = eval_node(&args[0], ctx);
            match f {
                Func::Abs => a0.abs(),
                Func::Exp => a0.exp(),
                Func::Ln => a0.ln(),
                Func::Sqrt => a0.sqrt(),
                Func::Sin => a0.sin(),
                Func::Cos => a0.cos(),
                Func::Tanh => a0.tanh(),
                Func::Min => a0.min(eval_node(&args[1], ctx)),
                Func::Max => a0.max(eval_node(&args[1], ctx)),
                Func::Clip => {
                    let lo = eval_node(&args[1], ctx);
                    let hi = eval_node(&args[2], ctx);
                    a0.max(lo).min(hi)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            '[' => {
                out.push(Tok::LBracket);
                i += 1;
            }
            ']' => {
                out.push(Tok::RBracket);
                i += 1;
            }
            ',' => {
                out.push(Tok::Comma);
                i += 1;
            }
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            '/' => {
                out.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                out.push(Tok::Caret);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == b'.'
                        || bytes[i] == b'e'
                        || bytes[i] == b'E'
                        || ((bytes[i] == b'+' || bytes[i] == b'-')
                            && i > start
                            && (bytes[i - 1] == b'e' || bytes[i - 1] == b'E')))
                {
                    i += 1;
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| Error::ParseError(format!("bad number `{text}` at byte {start}")))?;
                out.push(Tok::Num(v));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Tok::Ident(src[start..i].to_string()));
            }
            other => {
                return Err(Error::ParseError(format!(
                    "unexpected character `{other}` at byte {i} in `{src}`"
                )))
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            other => Err(Error::ParseError(format!(
                "expected {want:?}, found {other:?}"
            ))),
        }
    }

    fn expr(&mut self, min_bp: u8) -> Result<Node> {
        let mut lhs = self.atom()?;
        loop {
            let (op, lbp, rbp) = match self.peek() {
                Some(Tok::Plus) => ('+', 1, 2),
                Some(Tok::Minus) => ('-', 1, 2),
                Some(Tok::Star) => ('*', 3, 4),
                Some(Tok::Slash) => ('/', 3, 4),
                Some(Tok::Caret) => ('^', 8, 7),
                _ => break,
            };
            if lbp < min_bp {
                break;
            }
            self.next();
            let rhs = self.expr(rbp)?;
            lhs = match op {
                '+' => Node::Add(Box::new(lhs), Box::new(rhs)),
                '-' => Node::Sub(Box::new(lhs), Box::new(rhs)),
                '*' => Node::Mul(Box::new(lhs), Box::new(rhs)),
                '/' => Node::Div(Box::new(lhs), Box::new(rhs)),
                _ => Node::Pow(Box::new(lhs), Box::new(rhs)),
            };
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Node::Num(v)),
            Some(Tok::Minus) => Ok(Node::Neg(Box::new(self.expr(5)?))),
            Some(Tok::LParen) => {
                let inner = self.expr(0)?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => self.ident(name),
            other => Err(Error::ParseError(format!("unexpected token {other:?}"))),
        }
    }

    fn ident(&mut self, name: String) -> Result<Node> {
        let func = match name.as_str() {
            "abs" => Some(Func::Abs),
            "exp" => Some(Func::Exp),
            "ln" => Some(Func::Ln),
            "sqrt" => Some(Func::Sqrt),
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "tanh" => Some(Func::Tanh),
            "min" => Some(Func::Min),
            "max" => Some(Func::Max),
            "clip" => Some(Func::Clip),
            _ => None,
        };
        if let Some(f) = func {
            self.expect(Tok::LParen)?;
            let mut args = vec![self.expr(0)?];
            while matches!(self.peek(), Some(Tok::Comma)) {
                self.next();
                args.push(self.expr(0)?);
            }
            self.expect(Tok::RParen)?;
            if args.len() != f.arity() {
                return Err(Error::ParseError(format!(
                    "{name} takes {} arguments, got {}",
                    f.arity(),
                    args.len()
                )));
            }
            return Ok(Node::Call(f, args));
        }

        let index = if matches!(self.peek(), Some(Tok::LBracket)) {
            self.next();
            let idx = match self.next() {
                Some(Tok::Num(v)) if v >= 0.0 && v.fract() == 0.0 => v as usize,
                other => {
                    return Err(Error::ParseError(format!(
                        "expected nonnegative integer index, found {other:?}"
                    )))
                }
            };
            self.expect(Tok::RBracket)?;
            Some(idx)
        } else {
            None
        };
        let i = index.unwrap_or(0);
        match name.as_str() {
            "t" if index.is_none() => Ok(Node::Var(Var::T)),
            "x" => Ok(Node::Var(Var::X(i))),
            "u" => Ok(Node::Var(Var::U(i))),
            "mean_x" => Ok(Node::Var(Var::MeanX(i))),
            "mean_u" => Ok(Node::Var(Var::MeanU(i))),
            _ => Err(Error::ParseError(format!("unknown identifier `{name}`"))),
        }
    }
}

impl Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Expr::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<'a>(t: f64, x: &'a [f64], u: &'a [f64]) -> EvalCtx<'a> {
        EvalCtx {
            t,
            x,
            u,
            mean_x: None,
            mean_u: None,
        }
    }

    #[test]
    fn arithmetic_and_precedence() {
        let e = Expr::parse("1 + 2 * 3 ^ 2 - 4 / 2").unwrap();
        assert_eq!(e.eval(&ctx(0.0, &[0.0], &[0.0])), 1.0 + 18.0 - 2.0);
        let e = Expr::parse("-x^2").unwrap();
        assert_eq!(e.eval(&ctx(0.0, &[3.0], &[0.0])), -9.0);
        let e = Expr::parse("2^3^2").unwrap();
        assert_eq!(e.eval(&ctx(0.0, &[0.0], &[0.0])), 512.0);
    }

    #[test]
    fn variables_and_indexing() {
        let e = Expr::parse("t + x[1] * u - mean_x").unwrap();
        let mx = [5.0, 0.0];
        let c = EvalCtx {
            t: 0.5,
            x: &[1.0, 2.0],
            u: &[3.0],
            mean_x: Some(&mx),
            mean_u: None,
        };
        assert_eq!(e.eval(&c), 0.5 + 6.0 - 5.0);
        assert!(e.uses_measures());
        assert!(e.validate(2, 1, true).is_ok());
        assert!(e.validate(2, 1, false).is_err());
        assert!(e.validate(1, 1, true).is_err());
    }

    #[test]
    fn functions() {
        let e = Expr::parse("clip(tanh(x), -0.5, max(0.25, u))").unwrap();
        assert_eq!(e.eval(&ctx(0.0, &[10.0], &[0.0])), 0.25);
        assert!(Expr::parse("min(1)").is_err());
        assert!(Expr::parse("nope(1)").is_err());
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("x[").is_err());
    }

    #[test]
    fn serde_round_trip() {
        let e = Expr::parse("tanh(mean_x - x) + 0.1*u").unwrap();
        let s = serde_json::to_string(&e).unwrap();
        let back: Expr = serde_json::from_str(&s).unwrap();
        assert_eq!(e, back);
    }
}
