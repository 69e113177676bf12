//! Minimal template language.
//!
//! * `{name}` is replaced by the value of slot `name`.
//! * `[[?name body]]` keeps `body` only when slot `name` is set and non-blank.
//!   One space after the name separates it from the body. Blocks do not nest.
//! * Leading lines starting with `##` are comments and are dropped.
//!
//! Slot values are inserted verbatim except that braces become parentheses
//! and `[[` loses its second bracket, so rendered text never carries template
//! syntax.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("slot {0:?} has no value")]
    MissingSlot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Piece(Piece),
    Block { guard: String, body: Vec<Piece> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

pub type Slots = BTreeMap<&'static str, String>;

fn is_ident(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn strip_comments(src: &str) -> &str {
    let mut rest = src;
    while rest.starts_with("##") {
        rest = match rest.find('\n') {
            Some(i) => &rest[i + 1..],
            None => "",
        };
    }
    rest
}

/// Parses text pieces and `{slot}` references up to `end` (or end of input).
fn parse_pieces(src: &str, base: usize, stop_at_block_end: bool) -> Result<(Vec<Piece>, usize), TemplateError> {
    let mut pieces = Vec::new();
    let mut text = String::new();
    let mut i = 0;
    while i < src.len() {
        let rest = &src[i..];
        if stop_at_block_end && rest.starts_with("]]") {
            if !text.is_empty() {
                pieces.push(Piece::Text(std::mem::take(&mut text)));
            }
            return Ok((pieces, i + 2));
        }
        if rest.starts_with("[[?") {
            if stop_at_block_end {
                return Err(TemplateError::Syntax {
                    offset: base + i,
                    message: "blocks cannot nest".into(),
                });
            }
            break;
        }
        let c = rest.chars().next().expect("non-empty");
        if c == '{' {
            let name: String = rest[1..].chars().take_while(|&c| is_ident(c)).collect();
            if name.is_empty() || !rest[1 + name.len()..].starts_with('}') {
                return Err(TemplateError::Syntax {
                    offset: base + i,
                    message: "expected {identifier}".into(),
                });
            }
            if !text.is_empty() {
                pieces.push(Piece::Text(std::mem::take(&mut text)));
            }
            i += name.len() + 2;
            pieces.push(Piece::Slot(name));
            continue;
        }
        if c == '}' {
            return Err(TemplateError::Syntax {
                offset: base + i,
                message: "unmatched '}'".into(),
            });
        }
        text.push(c);
        i += c.len_utf8();
    }
    if stop_at_block_end {
        return Err(TemplateError::Syntax {
            offset: base + i,
            message: "unterminated [[? block".into(),
        });
    }
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    Ok((pieces, i))
}

impl Template {
    pub fn parse(src: &str) -> Result<Template, TemplateError> {
        let body = strip_comments(src);
        let offset0 = src.len() - body.len();
        let mut segments = Vec::new();
        let mut i = 0;
        while i < body.len() {
            let rest = &body[i..];
            if let Some(after) = rest.strip_prefix("[[?") {
                let guard: String = after.chars().take_while(|&c| is_ident(c)).collect();
                if guard.is_empty() {
                    return Err(TemplateError::Syntax {
                        offset: offset0 + i,
                        message: "block needs a slot name".into(),
                    });
                }
                let mut start = 3 + guard.len();
                if body[i + start..].starts_with(' ') {
                    start += 1;
                }
                let (pieces, used) = parse_pieces(&body[i + start..], offset0 + i + start, true)?;
                segments.push(Segment::Block { guard, body: pieces });
                i += start + used;
            } else {
                let (pieces, used) = parse_pieces(rest, offset0 + i, false)?;
                segments.extend(pieces.into_iter().map(Segment::Piece));
                i += used;
            }
        }
        Ok(Template { segments })
    }

    /// Every slot name the template mentions, guards included.
    pub fn slot_names(&self) -> Vec<&str> {
        let mut names = Vec::new();
        for seg in &self.segments {
            match seg {
                Segment::Piece(Piece::Slot(n)) => names.push(n.as_str()),
                Segment::Piece(Piece::Text(_)) => {}
                Segment::Block { guard, body } => {
                    names.push(guard.as_str());
                    names.extend(body.iter().filter_map(|p| match p {
                        Piece::Slot(n) => Some(n.as_str()),
                        Piece::Text(_) => None,
                    }));
                }
            }
        }
        names.sort_unstable();
        names.dedup();
        names
    }

    /// Literal text of the template with every slot and block dropped.
    pub fn fixed_text(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Piece(Piece::Text(t)) => Some(t.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn render(&self, slots: &Slots) -> Result<String, TemplateError> {
        let mut out = String::new();
        let fill = |out: &mut String, piece: &Piece| -> Result<(), TemplateError> {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => {
                    let v = slots
                        .get(name.as_str())
                        .ok_or_else(|| TemplateError::MissingSlot(name.clone()))?;
                    out.push_str(&sanitize(v));
                }
            }
            Ok(())
        };
        for seg in &self.segments {
            match seg {
                Segment::Piece(p) => fill(&mut out, p)?,
                Segment::Block { guard, body } => {
                    if slots.get(guard.as_str()).is_some_and(|v| !v.trim().is_empty()) {
                        for p in body {
                            fill(&mut out, p)?;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn sanitize(value: &str) -> String {
    value
        .replace('{', "(")
        .replace('}', ")")
        .replace("[[", "[")
}

/// True if `text` still contains `{identifier}` or a block opener.
pub fn has_template_syntax(text: &str) -> bool {
    if text.contains("[[?") {
        return true;
    }
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'{' {
            let ident = bytes[i + 1..].iter().take_while(|&&c| is_ident(c as char)).count();
            if ident > 0 && bytes.get(i + 1 + ident) == Some(&b'}') {
                return true;
            }
        }
    }
    false
}
