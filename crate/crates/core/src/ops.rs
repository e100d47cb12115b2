//! The line-oriented memory operation grammar.
//!
//! ```text
//! ADD(<path>, "<value>")
//! UPDATE(<path>, "<value>")
//! DELETE(<path>, None)
//! NO_OP()
//! ```
//!
//! Values are double-quoted; `\"` and `\\` are the only recognised escapes and
//! any other backslash is kept literally. `DELETE(<path>, "<value>")` is also
//! accepted and normalised to a plain delete, with the discarded value kept in
//! the diagnostics.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::{is_name_char, NodePath};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MemOp {
    Add { path: NodePath, value: String },
    Update { path: NodePath, value: String },
    Delete { path: NodePath },
    NoOp,
}

impl MemOp {
    pub fn path(&self) -> Option<&NodePath> {
        match self {
            MemOp::Add { path, .. } | MemOp::Update { path, .. } | MemOp::Delete { path } => {
                Some(path)
            }
            MemOp::NoOp => None,
        }
    }

    pub fn value(&self) -> Option<&str> {
        match self {
            MemOp::Add { value, .. } | MemOp::Update { value, .. } => Some(value),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            MemOp::Add { .. } => "ADD",
            MemOp::Update { .. } => "UPDATE",
            MemOp::Delete { .. } => "DELETE",
            MemOp::NoOp => "NO_OP",
        }
    }
}

impl fmt::Display for MemOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_op(self))
    }
}

/// Why a line was not accepted as an operation.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum Rejection {
    #[error("malformed operation head")]
    MalformedHead,
    #[error("missing parenthesis")]
    MissingParen,
    #[error("missing value")]
    MissingValue,
    #[error("unbalanced quote")]
    UnbalancedQuote,
    #[error("bad path: {0}")]
    BadPath(String),
    #[error("stray text: {0}")]
    StrayText(String),
    #[error("embedded newline")]
    EmbeddedNewline,
}

/// Escapes a value for the quoted form.
pub fn escape_value(value: &str) -> String {
    let mut out = String::with_capacity(value.len() + 2);
    for c in value.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out
}

pub fn render_op(op: &MemOp) -> String {
    match op {
        MemOp::Add { path, value } => format!("ADD({path}, \"{}\")", escape_value(value)),
        MemOp::Update { path, value } => format!("UPDATE({path}, \"{}\")", escape_value(value)),
        MemOp::Delete { path } => format!("DELETE({path}, None)"),
        MemOp::NoOp => "NO_OP()".to_string(),
    }
}

pub fn render_ops(ops: &[MemOp]) -> String {
    let mut out = String::new();
    for op in ops {
        out.push_str(&render_op(op));
        out.push('\n');
    }
    out
}

/// An accepted line together with anything the parser dropped while normalising.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedLine {
    pub op: MemOp,
    pub discarded_delete_value: Option<String>,
}

struct Cursor<'a> {
    chars: Vec<char>,
    pos: usize,
    _src: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            chars: src.chars().collect(),
            pos: 0,
            _src: src,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> String {
        let start = self.pos;
        while self.peek().is_some_and(&pred) {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn rest(&self) -> String {
        self.chars[self.pos..].iter().collect()
    }

    fn at_end(&self) -> bool {
        self.pos >= self.chars.len()
    }
}

/// Parses one operation line.
pub fn parse_op_line(line: &str) -> Result<MemOp, Rejection> {
    parse_line_detailed(line).map(|p| p.op)
}

pub fn parse_line_detailed(line: &str) -> Result<ParsedLine, Rejection> {
    if line.contains(['\n', '\r']) {
        return Err(Rejection::EmbeddedNewline);
    }
    let mut text = line.trim();
    // inline code formatting: `NO_OP()`
    if text.len() >= 2 && text.starts_with('`') && text.ends_with('`') && !text.starts_with("``") {
        text = text[1..text.len() - 1].trim();
    }
    let mut cur = Cursor::new(text);
    let head = cur.take_while(|c| c.is_ascii_alphabetic() || c == '_');
    cur.skip_ws();
    if !matches!(head.as_str(), "ADD" | "UPDATE" | "DELETE" | "NO_OP") {
        return Err(Rejection::MalformedHead);
    }
    if !cur.eat('(') {
        return Err(if cur.at_end() {
            Rejection::MissingParen
        } else {
            Rejection::MalformedHead
        });
    }
    cur.skip_ws();

    if head == "NO_OP" {
        if !cur.eat(')') {
            return Err(if cur.at_end() {
                Rejection::MissingParen
            } else {
                Rejection::StrayText(cur.rest())
            });
        }
        finish(&mut cur)?;
        return Ok(ParsedLine {
            op: MemOp::NoOp,
            discarded_delete_value: None,
        });
    }

    let path = parse_path(&mut cur)?;
    cur.skip_ws();
    match cur.peek() {
        Some(',') => {
            cur.bump();
        }
        Some(')') => return Err(Rejection::MissingValue),
        None => return Err(Rejection::MissingParen),
        Some(_) => return Err(Rejection::StrayText(cur.rest())),
    }
    cur.skip_ws();

    let (op, discarded) = if head == "DELETE" {
        if cur.peek() == Some('"') {
            let value = parse_quoted(&mut cur)?;
            (MemOp::Delete { path }, Some(value))
        } else {
            let word = cur.take_while(|c| c.is_ascii_alphabetic());
            match word.as_str() {
                "None" => (MemOp::Delete { path }, None),
                "" if cur.peek() == Some(')') || cur.at_end() => {
                    return Err(Rejection::MissingValue)
                }
                _ => return Err(Rejection::StrayText(format!("{word}{}", cur.rest()))),
            }
        }
    } else {
        match cur.peek() {
            Some('"') => {}
            Some(')') | None => return Err(Rejection::MissingValue),
            Some(_) => return Err(Rejection::StrayText(cur.rest())),
        }
        let value = parse_quoted(&mut cur)?;
        let op = if head == "ADD" {
            MemOp::Add { path, value }
        } else {
            MemOp::Update { path, value }
        };
        (op, None)
    };

    cur.skip_ws();
    if !cur.eat(')') {
        return Err(if cur.at_end() {
            Rejection::MissingParen
        } else {
            Rejection::StrayText(cur.rest())
        });
    }
    finish(&mut cur)?;
    Ok(ParsedLine {
        op,
        discarded_delete_value: discarded,
    })
}

fn finish(cur: &mut Cursor<'_>) -> Result<(), Rejection> {
    cur.skip_ws();
    if cur.at_end() {
        Ok(())
    } else {
        Err(Rejection::StrayText(cur.rest()))
    }
}

fn parse_path(cur: &mut Cursor<'_>) -> Result<NodePath, Rejection> {
    let raw = cur.take_while(|c| is_name_char(c) || c == '.');
    if raw.is_empty() {
        return Err(Rejection::BadPath(match cur.peek() {
            Some(c) => format!("unexpected {c:?}"),
            None => "empty path".into(),
        }));
    }
    // a path must be followed by whitespace, ',' or ')'
    if let Some(c) = cur.peek() {
        if !(c.is_whitespace() || c == ',' || c == ')') {
            return Err(Rejection::BadPath(format!(
                "invalid character {c:?} in `{raw}`"
            )));
        }
    }
    raw.parse()
        .map_err(|e: crate::path::PathError| Rejection::BadPath(e.to_string()))
}

fn parse_quoted(cur: &mut Cursor<'_>) -> Result<String, Rejection> {
    debug_assert_eq!(cur.peek(), Some('"'));
    cur.bump();
    let mut value = String::new();
    loop {
        match cur.bump() {
            None => return Err(Rejection::UnbalancedQuote),
            Some('"') => return Ok(value),
            Some('\\') => match cur.peek() {
                Some('"') => {
                    cur.bump();
                    value.push('"');
                }
                Some('\\') => {
                    cur.bump();
                    value.push('\\');
                }
                _ => value.push('\\'),
            },
            Some(c) => value.push(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LineOutcome {
    Accepted {
        op: MemOp,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        discarded_delete_value: Option<String>,
    },
    Skipped {
        reason: Rejection,
        text: String,
    },
    /// A markdown code fence line.
    Fence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineDiagnostic {
    /// 1-based.
    pub line: usize,
    pub outcome: LineOutcome,
}

/// One entry per non-blank input line.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    pub lines: Vec<LineDiagnostic>,
}

impl ParseDiagnostics {
    pub fn skipped(&self) -> impl Iterator<Item = &LineDiagnostic> {
        self.lines
            .iter()
            .filter(|d| matches!(d.outcome, LineOutcome::Skipped { .. }))
    }

    pub fn skipped_count(&self) -> usize {
        self.skipped().count()
    }
}

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

/// Parses a model completion. Never fails: bad lines become diagnostics.
pub fn parse_op_list(text: &str) -> (Vec<MemOp>, ParseDiagnostics) {
    let mut ops = Vec::new();
    let mut diags = ParseDiagnostics::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let outcome = if is_fence(line) {
            LineOutcome::Fence
        } else {
            match parse_line_detailed(line) {
                Ok(parsed) => {
                    ops.push(parsed.op.clone());
                    LineOutcome::Accepted {
                        op: parsed.op,
                        discarded_delete_value: parsed.discarded_delete_value,
                    }
                }
                Err(reason) => LineOutcome::Skipped {
                    reason,
                    text: line.to_string(),
                },
            }
        };
        diags.lines.push(LineDiagnostic {
            line: i + 1,
            outcome,
        });
    }
    (ops, diags)
}

/// Byte-level entry point; invalid UTF-8 is replaced, never rejected.
pub fn parse_op_bytes(bytes: &[u8]) -> (Vec<MemOp>, ParseDiagnostics) {
    parse_op_list(&String::from_utf8_lossy(bytes))
}

/// Canonical re-rendering of the accepted lines of `text`.
pub fn normalize_op_text(text: &str) -> String {
    render_ops(&parse_op_list(text).0)
}
