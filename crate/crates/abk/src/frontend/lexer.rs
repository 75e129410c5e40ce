//! Line-aware lexer. Block markers (`// ===NAME START===`) and annotation
//! directives (`%NAME value...`) are recognized at line granularity; all
//! other `//` comments are skipped.

use super::FrontendError;
use crate::ssa::Span;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tok {
    Ident(String),
    Int(u64),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Semi,
    Colon,
    Comma,
    Assign,
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    Caret,
    Amp,
    Pipe,
    Tilde,
    Shl,
    Shr,
    EqEq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Question,
    DotDot,
    Marker { name: String, start: bool },
    Annot { name: String, text: String },
    Eof,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub tok: Tok,
    pub span: Span,
}

fn marker_of(comment: &str) -> Option<(String, bool)> {
    // // ===ACC1 START===
    let t = comment.trim();
    let t = t.strip_prefix("===")?;
    let t = t.strip_suffix("===")?;
    let mut parts = t.split_whitespace();
    let name = parts.next()?.to_string();
    let kind = parts.next()?;
    if parts.next().is_some() || name.is_empty() {
        return None;
    }
    match kind {
        "START" => Some((name, true)),
        "END" => Some((name, false)),
        _ => None,
    }
}

pub fn lex(src: &str) -> Result<Vec<Token>, FrontendError> {
    let mut out = Vec::new();
    for (lineno, line) in src.lines().enumerate() {
        let line_no = lineno as u32 + 1;
        lex_line(line, line_no, &mut out)?;
    }
    out.push(Token { tok: Tok::Eof, span: Span { line: src.lines().count() as u32 + 1, col: 1 } });
    Ok(out)
}

fn lex_line(line: &str, line_no: u32, out: &mut Vec<Token>) -> Result<(), FrontendError> {
    let bytes = line.as_bytes();
    let mut i = 0usize;
    // Annotation directive lines start with '%' after leading whitespace.
    let trimmed = line.trim_start();
    if let Some(rest) = trimmed.strip_prefix('%') {
        let name_end = rest.find(|c: char| !c.is_ascii_alphanumeric() && c != '_').unwrap_or(rest.len());
        let (name, text) = rest.split_at(name_end);
        if name.is_empty() {
            return Err(FrontendError::Annotation {
                line: line_no,
                msg: "empty annotation name".to_string(),
            });
        }
        out.push(Token {
            tok: Tok::Annot { name: name.to_string(), text: text.trim().to_string() },
            span: Span { line: line_no, col: 1 },
        });
        return Ok(());
    }
    while i < bytes.len() {
        let c = bytes[i] as char;
        let col = i as u32 + 1;
        let span = Span { line: line_no, col };
        match c {
            ' ' | '\t' | '\r' => {
                i += 1;
            }
            '/' if i + 1 < bytes.len() && bytes[i + 1] == b'/' => {
                let comment = &line[i + 2..];
                if let Some((name, start)) = marker_of(comment) {
                    out.push(Token { tok: Tok::Marker { name, start }, span });
                }
                return Ok(());
            }
            '0'..='9' => {
                let (v, next) = lex_int(line, i, line_no)?;
                out.push(Token { tok: Tok::Int(v), span });
                i = next;
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Token { tok: Tok::Ident(line[start..i].to_string()), span });
            }
            '(' => {
                out.push(Token { tok: Tok::LParen, span });
                i += 1;
            }
            ')' => {
                out.push(Token { tok: Tok::RParen, span });
                i += 1;
            }
            '{' => {
                out.push(Token { tok: Tok::LBrace, span });
                i += 1;
            }
            '}' => {
                out.push(Token { tok: Tok::RBrace, span });
                i += 1;
            }
            '[' => {
                out.push(Token { tok: Tok::LBracket, span });
                i += 1;
            }
            ']' => {
                out.push(Token { tok: Tok::RBracket, span });
                i += 1;
            }
            ';' => {
                out.push(Token { tok: Tok::Semi, span });
                i += 1;
            }
            ':' => {
                out.push(Token { tok: Tok::Colon, span });
                i += 1;
            }
            ',' => {
                out.push(Token { tok: Tok::Comma, span });
                i += 1;
            }
            '+' => {
                out.push(Token { tok: Tok::Plus, span });
                i += 1;
            }
            '-' => {
                out.push(Token { tok: Tok::Minus, span });
                i += 1;
            }
            '*' => {
                out.push(Token { tok: Tok::Star, span });
                i += 1;
            }
            '/' => {
                out.push(Token { tok: Tok::Slash, span });
                i += 1;
            }
            '%' => {
                out.push(Token { tok: Tok::Percent, span });
                i += 1;
            }
            '^' => {
                out.push(Token { tok: Tok::Caret, span });
                i += 1;
            }
            '&' => {
                out.push(Token { tok: Tok::Amp, span });
                i += 1;
            }
            '|' => {
                out.push(Token { tok: Tok::Pipe, span });
                i += 1;
            }
            '~' => {
                out.push(Token { tok: Tok::Tilde, span });
                i += 1;
            }
            '?' => {
                out.push(Token { tok: Tok::Question, span });
                i += 1;
            }
            '<' => {
                if bytes.get(i + 1) == Some(&b'<') {
                    out.push(Token { tok: Tok::Shl, span });
                    i += 2;
                } else if bytes.get(i + 1) == Some(&b'=') {
                    out.push(Token { tok: Tok::Le, span });
                    i += 2;
                } else {
                    out.push(Token { tok: Tok::Lt, span });
                    i += 1;
                }
            }
            '>' => {
                if bytes.get(i + 1) == Some(&b'>') {
                    out.push(Token { tok: Tok::Shr, span });
                    i += 2;
                } else if bytes.get(i + 1) == Some(&b'=') {
                    out.push(Token { tok: Tok::Ge, span });
                    i += 2;
                } else {
                    out.push(Token { tok: Tok::Gt, span });
                    i += 1;
                }
            }
            '=' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    out.push(Token { tok: Tok::EqEq, span });
                    i += 2;
                } else {
                    out.push(Token { tok: Tok::Assign, span });
                    i += 1;
                }
            }
            '!' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    out.push(Token { tok: Tok::Ne, span });
                    i += 2;
                } else {
                    return Err(FrontendError::Syntax {
                        line: line_no,
                        col,
                        msg: "unexpected '!'".to_string(),
                    });
                }
            }
            '.' => {
                if bytes.get(i + 1) == Some(&b'.') {
                    out.push(Token { tok: Tok::DotDot, span });
                    i += 2;
                } else {
                    return Err(FrontendError::Syntax {
                        line: line_no,
                        col,
                        msg: "unexpected '.'".to_string(),
                    });
                }
            }
            other => {
                return Err(FrontendError::Syntax {
                    line: line_no,
                    col,
                    msg: format!("unexpected character {other:?}"),
                });
            }
        }
    }
    Ok(())
}

fn lex_int(line: &str, start: usize, line_no: u32) -> Result<(u64, usize), FrontendError> {
    let bytes = line.as_bytes();
    let mut i = start;
    let radix;
    let digits_start;
    if bytes[i] == b'0' && bytes.get(i + 1).map(|b| *b | 32) == Some(b'x') {
        radix = 16;
        i += 2;
        digits_start = i;
    } else {
        radix = 10;
        digits_start = i;
    }
    while i < bytes.len() && (bytes[i] as char).is_digit(radix) {
        i += 1;
    }
    if i == digits_start {
        return Err(FrontendError::Syntax {
            line: line_no,
            col: start as u32 + 1,
            msg: "malformed integer literal".to_string(),
        });
    }
    let v = u64::from_str_radix(&line[digits_start..i], radix).map_err(|_| FrontendError::Syntax {
        line: line_no,
        col: start as u32 + 1,
        msg: "integer literal does not fit in 64 bits".to_string(),
    })?;
    Ok((v, i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexes_markers_and_annotations() {
        let toks = lex("%IN_SIZE 16\n// ===ACC1 START===\nx = 1;\n// plain comment\n// ===ACC1 END===\n").unwrap();
        assert!(matches!(&toks[0].tok, Tok::Annot { name, text } if name == "IN_SIZE" && text == "16"));
        assert!(matches!(&toks[1].tok, Tok::Marker { name, start: true } if name == "ACC1"));
        assert!(matches!(&toks.last().unwrap().tok, Tok::Eof));
    }

    #[test]
    fn lexes_operators() {
        let toks = lex("a = b << 2 ^ 0x1f;").unwrap();
        let kinds: Vec<&Tok> = toks.iter().map(|t| &t.tok).collect();
        assert!(matches!(kinds[2], Tok::Ident(n) if n == "b"));
        assert!(matches!(kinds[3], Tok::Shl));
        assert!(matches!(kinds[5], Tok::Caret));
        assert!(matches!(kinds[6], Tok::Int(0x1f)));
    }

    #[test]
    fn rejects_stray_bang() {
        assert!(lex("a ! b").is_err());
    }
}
