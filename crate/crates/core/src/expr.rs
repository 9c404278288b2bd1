//! A small arithmetic expression language.
//!
//! The same grammar serves two callers: aggregation conditions (numeric
//! expressions and tuples over parameter names) and plot template
//! directives (which also allow string literals, dotted binding names and
//! `&` text concatenation).
//!
//! ```text
//! expr     := additive ('&' additive)*
//! additive := term (('+' | '-') term)*
//! term     := unary (('*' | '/') unary)*
//! unary    := '-' unary | power
//! power    := primary ('^' unary)?
//! primary  := number | string | name | func '(' expr ')'
//!           | '(' expr (',' expr)* ')'
//! func     := 'log' | 'exp' | 'floor'
//! ```

use std::fmt;

use thiserror::Error;

use crate::num::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Concat,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
            BinOp::Concat => " & ",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Concat => 1,
            BinOp::Add | BinOp::Sub => 2,
            BinOp::Mul | BinOp::Div => 3,
            BinOp::Pow => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Log,
    Exp,
    Floor,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        match name {
            "log" => Some(Func::Log),
            "exp" => Some(Func::Exp),
            "floor" => Some(Func::Floor),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Log => "log",
            Func::Exp => "exp",
            Func::Floor => "floor",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Str(String),
    /// A parameter or binding name; may be dotted (`table.final.file`).
    Var(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
    Tuple(Vec<Expr>),
}

/// The result of evaluating an expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Text(String),
    List(Vec<Value>),
}

impl Value {
    /// Canonical text: shortest round-trip numbers, lists joined by spaces.
    pub fn to_text(&self) -> String {
        match self {
            Value::Num(x) => fmt_f64(*x),
            Value::Text(s) => s.clone(),
            Value::List(items) => items
                .iter()
                .map(Value::to_text)
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unknown name `{0}`")]
    UnknownName(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("`{0}` is not numeric")]
    NotNumeric(String),
    #[error("non-finite result")]
    NonFinite,
}

/// Name resolution for evaluation.
pub trait Env {
    fn lookup(&self, name: &str) -> Option<Value>;
}

impl<F> Env for F
where
    F: Fn(&str) -> Option<Value>,
{
    fn lookup(&self, name: &str) -> Option<Value> {
        self(name)
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ExprError> {
        let mut p = Parser::new(src)?;
        let e = p.expr()?;
        p.expect_end()?;
        Ok(e)
    }

    /// Parses a comma-separated list of expressions (`a, b*2, (c, d)`).
    pub fn parse_list(src: &str) -> Result<Vec<Expr>, ExprError> {
        let mut p = Parser::new(src)?;
        let mut out = vec![p.expr()?];
        while p.eat(&Tok::Comma) {
            out.push(p.expr()?);
        }
        p.expect_end()?;
        Ok(out)
    }

    /// Every name referenced, in first-occurrence order.
    pub fn names(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_names(&mut out);
        out
    }

    fn collect_names<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Var(n) => {
                if !out.contains(&n.as_str()) {
                    out.push(n);
                }
            }
            Expr::Neg(e) | Expr::Call(_, e) => e.collect_names(out),
            Expr::Binary(_, a, b) => {
                a.collect_names(out);
                b.collect_names(out);
            }
            Expr::Tuple(items) => items.iter().for_each(|e| e.collect_names(out)),
            Expr::Num(_) | Expr::Str(_) => {}
        }
    }

    /// True if the expression uses only numeric constructs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Expr::Num(_) | Expr::Var(_) => true,
            Expr::Str(_) => false,
            Expr::Neg(e) | Expr::Call(_, e) => e.is_numeric(),
            Expr::Binary(op, a, b) => *op != BinOp::Concat && a.is_numeric() && b.is_numeric(),
            Expr::Tuple(items) => items.iter().all(Expr::is_numeric),
        }
    }

    /// Number of scalar components the expression produces (tuples flatten).
    pub fn arity(&self) -> usize {
        match self {
            Expr::Tuple(items) => items.iter().map(Expr::arity).sum(),
            _ => 1,
        }
    }

    /// Scalar sub-expressions with tuples flattened.
    pub fn components(&self) -> Vec<&Expr> {
        match self {
            Expr::Tuple(items) => items.iter().flat_map(Expr::components).collect(),
            e => vec![e],
        }
    }

    pub fn eval(&self, env: &dyn Env) -> Result<Value, ExprError> {
        match self {
            Expr::Num(x) => Ok(Value::Num(*x)),
            Expr::Str(s) => Ok(Value::Text(s.clone())),
            Expr::Var(n) => env
                .lookup(n)
                .ok_or_else(|| ExprError::UnknownName(n.clone())),
            Expr::Tuple(items) => Ok(Value::List(
                items.iter().map(|e| e.eval(env)).collect::<Result<_, _>>()?,
            )),
            Expr::Neg(e) => num(-as_num(e, env)?),
            Expr::Call(f, e) => {
                let x = as_num(e, env)?;
                match f {
                    Func::Log if x <= 0.0 => Err(ExprError::LogDomain(x)),
                    Func::Log => num(x.ln()),
                    Func::Exp => num(x.exp()),
                    Func::Floor => num(x.floor()),
                }
            }
            Expr::Binary(BinOp::Concat, a, b) => {
                let mut s = a.eval(env)?.to_text();
                s.push_str(&b.eval(env)?.to_text());
                Ok(Value::Text(s))
            }
            Expr::Binary(op, a, b) => {
                let x = as_num(a, env)?;
                let y = as_num(b, env)?;
                match op {
                    BinOp::Add => num(x + y),
                    BinOp::Sub => num(x - y),
                    BinOp::Mul => num(x * y),
                    BinOp::Div if y == 0.0 => Err(ExprError::DivisionByZero),
                    BinOp::Div => num(x / y),
                    BinOp::Pow => num(x.powf(y)),
                    BinOp::Concat => unreachable!(),
                }
            }
        }
    }

    /// Evaluates to a flat tuple of numbers.
    pub fn eval_numbers(&self, env: &dyn Env) -> Result<Vec<f64>, ExprError> {
        fn flatten(v: Value, out: &mut Vec<f64>) -> Result<(), ExprError> {
            match v {
                Value::Num(x) => out.push(x),
                Value::List(items) => {
                    for item in items {
                        flatten(item, out)?;
                    }
                }
                Value::Text(s) => return Err(ExprError::NotNumeric(s)),
            }
            Ok(())
        }
        let mut out = Vec::new();
        flatten(self.eval(env)?, &mut out)?;
        Ok(out)
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, ..) => op.precedence(),
            Expr::Neg(_) => 4,
            _ => 6,
        }
    }

    fn fmt_child(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        if self.precedence() < min {
            write!(f, "({})", self)
        } else {
            write!(f, "{}", self)
        }
    }
}

fn num(x: f64) -> Result<Value, ExprError> {
    if x.is_finite() {
        Ok(Value::Num(x))
    } else {
        Err(ExprError::NonFinite)
    }
}

fn as_num(e: &Expr, env: &dyn Env) -> Result<f64, ExprError> {
    match e.eval(env)? {
        Value::Num(x) => Ok(x),
        other => Err(ExprError::NotNumeric(other.to_text())),
    }
}

/// Canonical text; parsing it yields an identical tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(x) => write!(f, "{}", fmt_f64(*x)),
            Expr::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        c => write!(f, "{}", c)?,
                    }
                }
                f.write_str("\"")
            }
            Expr::Var(n) => f.write_str(n),
            Expr::Neg(e) => {
                f.write_str("-")?;
                e.fmt_child(f, 4)
            }
            Expr::Call(func, e) => write!(f, "{}({})", func.name(), e),
            Expr::Tuple(items) => {
                f.write_str("(")?;
                for (i, e) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{}", e)?;
                }
                f.write_str(")")
            }
            Expr::Binary(BinOp::Pow, a, b) => {
                a.fmt_child(f, 6)?;
                f.write_str("^")?;
                b.fmt_child(f, 4)
            }
            Expr::Binary(op, a, b) => {
                let p = op.precedence();
                a.fmt_child(f, p)?;
                f.write_str(op.symbol())?;
                b.fmt_child(f, p + 1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Str(String),
    Name(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    len: usize,
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ExprError> {
    let err = |offset, message: &str| ExprError::Parse {
        offset,
        message: message.to_string(),
    };
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (at, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '+' | '-' | '*' | '/' | '^' | '&' => {
                out.push((at, Tok::Op(c)));
                i += 1;
            }
            '·' => {
                out.push((at, Tok::Op('*')));
                i += 1;
            }
            '(' => {
                out.push((at, Tok::LParen));
                i += 1;
            }
            ')' => {
                out.push((at, Tok::RParen));
                i += 1;
            }
            ',' => {
                out.push((at, Tok::Comma));
                i += 1;
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(err(at, "unterminated string")),
                        Some((_, '"')) => break,
                        Some((_, '\\')) => match chars.get(i + 1) {
                            Some((_, e @ ('"' | '\\'))) => {
                                s.push(*e);
                                i += 2;
                            }
                            _ => return Err(err(chars[i].0, "bad escape")),
                        },
                        Some((_, c)) => {
                            s.push(*c);
                            i += 1;
                        }
                    }
                }
                i += 1;
                out.push((at, Tok::Str(s)));
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_ascii_digit() || chars[i].1 == '.') {
                    i += 1;
                }
                if i < chars.len() && matches!(chars[i].1, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && matches!(chars[j].1, '+' | '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].1.is_ascii_digit() {
                        i = j;
                        while i < chars.len() && chars[i].1.is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let end = chars.get(i).map_or(src.len(), |(b, _)| *b);
                let text = &src[at..end];
                let v: f64 = text.parse().map_err(|_| err(chars[start].0, "bad number"))?;
                out.push((at, Tok::Num(v)));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < chars.len()
                    && (chars[i].1.is_ascii_alphanumeric() || chars[i].1 == '_' || chars[i].1 == '.')
                {
                    i += 1;
                }
                let end = chars.get(i).map_or(src.len(), |(b, _)| *b);
                let name = &src[at..end];
                if name.ends_with('.') || name.contains("..") {
                    return Err(err(at, "malformed dotted name"));
                }
                out.push((at, Tok::Name(name.to_string())));
            }
            _ => return Err(err(at, &format!("unexpected character `{}`", c))),
        }
    }
    Ok(out)
}

impl Parser {
    fn new(src: &str) -> Result<Parser, ExprError> {
        Ok(Parser {
            toks: lex(src)?,
            pos: 0,
            len: src.len(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.len, |(o, _)| *o)
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == Some(t) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn fail<T>(&self, message: &str) -> Result<T, ExprError> {
        Err(ExprError::Parse {
            offset: self.offset(),
            message: message.to_string(),
        })
    }

    fn expect_end(&self) -> Result<(), ExprError> {
        if self.pos == self.toks.len() {
            Ok(())
        } else {
            self.fail("expected end of expression")
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.additive()?;
        while self.eat(&Tok::Op('&')) {
            let rhs = self.additive()?;
            lhs = Expr::Binary(BinOp::Concat, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn additive(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Op('+')) => BinOp::Add,
                Some(Tok::Op('-')) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Op('*')) => BinOp::Mul,
                Some(Tok::Op('/')) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(&Tok::Op('-')) {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.eat(&Tok::Op('^')) {
            let exp = self.unary()?;
            Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp)))
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let Some(tok) = self.peek().cloned() else {
            return self.fail("unexpected end of expression");
        };
        self.pos += 1;
        match tok {
            Tok::Num(x) => Ok(Expr::Num(x)),
            Tok::Str(s) => Ok(Expr::Str(s)),
            Tok::Name(n) => match Func::from_name(&n) {
                Some(f) if self.peek() == Some(&Tok::LParen) => {
                    self.pos += 1;
                    let arg = self.expr()?;
                    if !self.eat(&Tok::RParen) {
                        return self.fail("expected `)`");
                    }
                    Ok(Expr::Call(f, Box::new(arg)))
                }
                _ => Ok(Expr::Var(n)),
            },
            Tok::LParen => {
                let first = self.expr()?;
                if self.eat(&Tok::RParen) {
                    return Ok(first);
                }
                let mut items = vec![first];
                while self.eat(&Tok::Comma) {
                    items.push(self.expr()?);
                }
                if !self.eat(&Tok::RParen) {
                    return self.fail("expected `)` or `,`");
                }
                Ok(Expr::Tuple(items))
            }
            _ => {
                self.pos -= 1;
                self.fail("expected a value")
            }
        }
    }
}
