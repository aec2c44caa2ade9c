use std::fmt;

use thiserror::Error;

use super::{Expr, Func, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnexpectedChar(char),
    UnexpectedToken(String),
    UnexpectedEnd,
    UnknownIdentifier(String),
    BadNumber(String),
    NonIntegerExponent,
    ChainedPower,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::UnexpectedChar(c) => write!(f, "unexpected character {c:?}"),
            ParseErrorKind::UnexpectedToken(t) => write!(f, "unexpected '{t}'"),
            ParseErrorKind::UnexpectedEnd => f.write_str("unexpected end of input"),
            ParseErrorKind::UnknownIdentifier(id) => write!(f, "unknown identifier '{id}'"),
            ParseErrorKind::BadNumber(n) => write!(f, "malformed number '{n}'"),
            ParseErrorKind::NonIntegerExponent => f.write_str("exponent must be an integer literal"),
            ParseErrorKind::ChainedPower => {
                f.write_str("chained '^' is ambiguous, use parentheses")
            }
        }
    }
}

/// Parse failure with the byte offset of the offending input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at byte {offset}: {kind}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

impl Tok {
    fn text(&self) -> String {
        match self {
            Tok::Num(v) => v.to_string(),
            Tok::Ident(s) => s.clone(),
            Tok::Plus => "+".into(),
            Tok::Minus => "-".into(),
            Tok::Star => "*".into(),
            Tok::Slash => "/".into(),
            Tok::Caret => "^".into(),
            Tok::LParen => "(".into(),
            Tok::RParen => ")".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let tok = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let lit = &text[start..i];
                let v = lit.parse::<f64>().map_err(|_| ParseError {
                    offset: start,
                    kind: ParseErrorKind::BadNumber(lit.to_string()),
                })?;
                out.push((start, Tok::Num(v)));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_string())));
                continue;
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('\u{fffd}');
                return Err(ParseError {
                    offset: start,
                    kind: ParseErrorKind::UnexpectedChar(ch),
                });
            }
        };
        out.push((start, tok));
        i += 1;
    }
    Ok(out)
}

fn variable(name: &str) -> Option<Var> {
    if name == "t" {
        return Some(Var::T);
    }
    let (head, digits) = name.split_at(1);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    let index: usize = digits.parse().ok()?;
    match head {
        "x" => Some(Var::X(index - 1)),
        "u" => Some(Var::U(index - 1)),
        _ => None,
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn error(&self) -> ParseError {
        let kind = match self.peek() {
            Some(t) => ParseErrorKind::UnexpectedToken(t.text()),
            None => ParseErrorKind::UnexpectedEnd,
        };
        ParseError {
            offset: self.offset(),
            kind,
        }
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(&Tok::Plus) {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(&Tok::Minus) {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(&Tok::Star) {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(&Tok::Slash) {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat(&Tok::Minus) {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if !self.eat(&Tok::Caret) {
            return Ok(base);
        }
        let start = self.offset();
        let negative = self.eat(&Tok::Minus);
        let exp = match self.peek() {
            Some(Tok::Num(v)) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => *v as i32,
            Some(Tok::Num(_)) => {
                return Err(ParseError {
                    offset: start,
                    kind: ParseErrorKind::NonIntegerExponent,
                })
            }
            _ => return Err(self.error()),
        };
        self.pos += 1;
        if self.peek() == Some(&Tok::Caret) {
            return Err(ParseError {
                offset: self.offset(),
                kind: ParseErrorKind::ChainedPower,
            });
        }
        Ok(Expr::Pow(Box::new(base), if negative { -exp } else { exp }))
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(&Tok::RParen) {
                    return Err(self.error());
                }
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if let Some(func) = Func::from_name(&name) {
                    if !self.eat(&Tok::LParen) {
                        return Err(self.error());
                    }
                    let arg = self.expr()?;
                    if !self.eat(&Tok::RParen) {
                        return Err(self.error());
                    }
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                variable(&name).map(Expr::Var).ok_or(ParseError {
                    offset,
                    kind: ParseErrorKind::UnknownIdentifier(name),
                })
            }
            _ => Err(self.error()),
        }
    }
}

/// Parses an expression. Precedence, tightest first: `^`, unary `-`, `* /`, `+ -`.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(p.error());
    }
    Ok(e)
}
