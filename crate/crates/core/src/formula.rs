//! Mean and covariance formula parsing.
//!
//! ```text
//! mean       := term ('+' term)*
//! term       := '1' | IDENT | IDENT '.' IDENT
//! cov        := cterm ('+' cterm)*
//! cterm      := 'I' | 'E' '(' factorexpr ')' | KERNEL '(' IDENT ')'
//! factorexpr := IDENT | IDENT '.' IDENT
//! KERNEL     := 'exch' | 'bm' | 'spl3' | 'slope'
//! IDENT      := [A-Za-z_][A-Za-z0-9_]*
//! ```
//!
//! Whitespace is insignificant and identifiers are case-sensitive. A
//! covariance formula always carries the identity term first; it is
//! inserted when omitted.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariance::{CovarianceTerm, KernelKind};
use crate::design::{FactorExpr, MeanTerm};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at offset {offset}")]
pub struct FormulaError {
    pub kind: FormulaErrorKind,
    /// Byte offset into the formula text.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormulaErrorKind {
    #[error("expected {expected}, found {found}")]
    Unexpected {
        expected: &'static str,
        found: String,
    },
    #[error("unexpected character {0:?}")]
    BadChar(char),
    #[error("crosses of more than two factors are not supported")]
    NestedCross,
    #[error("duplicate term `{0}`")]
    DuplicateTerm(String),
    #[error("duplicate identity term")]
    DuplicateIdentity,
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeanFormulaAst {
    pub terms: Vec<MeanTerm>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CovFormulaAst {
    pub terms: Vec<CovarianceTerm>,
}

impl fmt::Display for MeanFormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_joined(f, &self.terms)
    }
}

impl fmt::Display for CovFormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_joined(f, &self.terms)
    }
}

fn write_joined<T: fmt::Display>(f: &mut fmt::Formatter<'_>, items: &[T]) -> fmt::Result {
    for (i, t) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(" + ")?;
        }
        write!(f, "{t}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
enum Tok<'a> {
    One,
    Ident(&'a str),
    Plus,
    Dot,
    LParen,
    RParen,
    End,
}

impl Tok<'_> {
    fn describe(&self) -> String {
        match self {
            Tok::One => "`1`".into(),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Dot => "`.`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    peeked: Option<(Tok<'a>, usize)>,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            pos: 0,
            peeked: None,
        }
    }

    fn lex(&mut self) -> Result<(Tok<'a>, usize), FormulaError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&b) = bytes.get(start) else {
            return Ok((Tok::End, start));
        };
        let single = match b {
            b'+' => Some(Tok::Plus),
            b'.' => Some(Tok::Dot),
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            _ => None,
        };
        if let Some(tok) = single {
            self.pos += 1;
            return Ok((tok, start));
        }
        if b.is_ascii_alphabetic() || b == b'_' {
            let mut end = start + 1;
            while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                end += 1;
            }
            self.pos = end;
            return Ok((Tok::Ident(&self.src[start..end]), start));
        }
        if b.is_ascii_digit() {
            let mut end = start + 1;
            while end < bytes.len() && bytes[end].is_ascii_alphanumeric() {
                end += 1;
            }
            if &self.src[start..end] == "1" {
                self.pos = end;
                return Ok((Tok::One, start));
            }
            return Err(FormulaError {
                kind: FormulaErrorKind::Unexpected {
                    expected: "`1` or an identifier",
                    found: format!("`{}`", &self.src[start..end]),
                },
                offset: start,
            });
        }
        let ch = self.src[start..].chars().next().unwrap_or('\u{fffd}');
        Err(FormulaError {
            kind: FormulaErrorKind::BadChar(ch),
            offset: start,
        })
    }

    fn peek(&mut self) -> Result<(Tok<'a>, usize), FormulaError> {
        if self.peeked.is_none() {
            self.peeked = Some(self.lex()?);
        }
        Ok(self.peeked.clone().unwrap())
    }

    fn next(&mut self) -> Result<(Tok<'a>, usize), FormulaError> {
        match self.peeked.take() {
            Some(t) => Ok(t),
            None => self.lex(),
        }
    }

    fn expect_ident(&mut self, what: &'static str) -> Result<(&'a str, usize), FormulaError> {
        match self.next()? {
            (Tok::Ident(s), at) => Ok((s, at)),
            (tok, at) => Err(unexpected(what, &tok, at)),
        }
    }

    fn expect(&mut self, want: Tok<'static>, what: &'static str) -> Result<(), FormulaError> {
        let (tok, at) = self.next()?;
        if tok == want {
            Ok(())
        } else {
            Err(unexpected(what, &tok, at))
        }
    }

    /// After a term: `+` (returns true) or end of input (returns false).
    fn separator(&mut self) -> Result<bool, FormulaError> {
        match self.next()? {
            (Tok::Plus, _) => Ok(true),
            (Tok::End, _) => Ok(false),
            (tok, at) => Err(unexpected("`+` or end of input", &tok, at)),
        }
    }
}

fn unexpected(expected: &'static str, tok: &Tok<'_>, offset: usize) -> FormulaError {
    FormulaError {
        kind: FormulaErrorKind::Unexpected {
            expected,
            found: tok.describe(),
        },
        offset,
    }
}

/// `IDENT` or `IDENT '.' IDENT`, the first identifier already consumed.
fn factor_tail<'a>(lx: &mut Lexer<'a>) -> Result<Option<&'a str>, FormulaError> {
    if let (Tok::Dot, _) = lx.peek()? {
        lx.next()?;
        let (second, _) = lx.expect_ident("an identifier after `.`")?;
        if let (Tok::Dot, at) = lx.peek()? {
            return Err(FormulaError {
                kind: FormulaErrorKind::NestedCross,
                offset: at,
            });
        }
        Ok(Some(second))
    } else {
        Ok(None)
    }
}

fn same_mean_term(a: &MeanTerm, b: &MeanTerm) -> bool {
    match (a, b) {
        (MeanTerm::Cross(a1, b1), MeanTerm::Cross(a2, b2)) => {
            (a1 == a2 && b1 == b2) || (a1 == b2 && b1 == a2)
        }
        _ => a == b,
    }
}

pub fn parse_mean(text: &str) -> Result<MeanFormulaAst, FormulaError> {
    let mut lx = Lexer::new(text);
    let mut terms: Vec<MeanTerm> = Vec::new();
    loop {
        let (tok, at) = lx.next()?;
        let term = match tok {
            Tok::One => MeanTerm::Intercept,
            Tok::Ident(name) => match factor_tail(&mut lx)? {
                Some(second) => MeanTerm::Cross(name.to_string(), second.to_string()),
                None => MeanTerm::Name(name.to_string()),
            },
            other => return Err(unexpected("a term", &other, at)),
        };
        if terms.iter().any(|t| same_mean_term(t, &term)) {
            return Err(FormulaError {
                kind: FormulaErrorKind::DuplicateTerm(term.to_string()),
                offset: at,
            });
        }
        terms.push(term);
        if !lx.separator()? {
            break;
        }
    }
    Ok(MeanFormulaAst { terms })
}

pub fn parse_cov(text: &str) -> Result<CovFormulaAst, FormulaError> {
    let mut lx = Lexer::new(text);
    let mut terms: Vec<CovarianceTerm> = Vec::new();
    let mut has_identity = false;
    loop {
        let (tok, at) = lx.next()?;
        let Tok::Ident(name) = tok else {
            return Err(unexpected("`I`, `E(...)` or a kernel term", &tok, at));
        };
        let is_call = matches!(lx.peek()?, (Tok::LParen, _));
        let term = if !is_call {
            if name != "I" {
                return Err(unexpected(
                    "`I`, `E(...)` or a kernel term",
                    &Tok::Ident(name),
                    at,
                ));
            }
            if has_identity {
                return Err(FormulaError {
                    kind: FormulaErrorKind::DuplicateIdentity,
                    offset: at,
                });
            }
            has_identity = true;
            CovarianceTerm::Identity
        } else if name == "E" {
            lx.next()?;
            let (first, _) = lx.expect_ident("a factor name")?;
            let expr = match factor_tail(&mut lx)? {
                Some(second) => FactorExpr::Cross(first.to_string(), second.to_string()),
                None => FactorExpr::Single(first.to_string()),
            };
            lx.expect(Tok::RParen, "`)`")?;
            CovarianceTerm::Block(expr)
        } else {
            let kind = KernelKind::from_keyword(name).ok_or_else(|| FormulaError {
                kind: FormulaErrorKind::UnknownKernel(name.to_string()),
                offset: at,
            })?;
            lx.next()?;
            let (cov, _) = lx.expect_ident("a covariate name")?;
            lx.expect(Tok::RParen, "`)`")?;
            CovarianceTerm::Kernel(kind, cov.to_string())
        };
        let duplicate = terms.iter().any(|t| match (t, &term) {
            (
                CovarianceTerm::Block(FactorExpr::Cross(a1, b1)),
                CovarianceTerm::Block(FactorExpr::Cross(a2, b2)),
            ) => (a1 == a2 && b1 == b2) || (a1 == b2 && b1 == a2),
            (a, b) => a == b,
        });
        if duplicate {
            return Err(FormulaError {
                kind: FormulaErrorKind::DuplicateTerm(term.to_string()),
                offset: at,
            });
        }
        terms.push(term);
        if !lx.separator()? {
            break;
        }
    }
    terms.retain(|t| *t != CovarianceTerm::Identity);
    terms.insert(0, CovarianceTerm::Identity);
    Ok(CovFormulaAst { terms })
}
