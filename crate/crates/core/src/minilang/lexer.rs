use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tok {
    Let,
    Return,
    Ident(String),
    Int(i64),
    Plus,
    Minus,
    Star,
    LParen,
    RParen,
    Assign,
    Semi,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Let => f.write_str("let"),
            Tok::Return => f.write_str("return"),
            Tok::Ident(s) => f.write_str(s),
            Tok::Int(v) => write!(f, "{v}"),
            Tok::Plus => f.write_str("+"),
            Tok::Minus => f.write_str("-"),
            Tok::Star => f.write_str("*"),
            Tok::LParen => f.write_str("("),
            Tok::RParen => f.write_str(")"),
            Tok::Assign => f.write_str("="),
            Tok::Semi => f.write_str(";"),
        }
    }
}

/// A token and the byte offset where it starts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Spanned {
    pub tok: Tok,
    pub pos: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum LexError {
    #[error("unexpected character {ch:?} at {pos}")]
    UnknownChar { ch: char, pos: usize },
    #[error("integer literal at {pos} does not fit in 64 bits")]
    IntOverflow { pos: usize },
}

pub fn lex(text: &str) -> Result<Vec<Spanned>, LexError> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, ch)) = chars.peek() {
        let single = match ch {
            ' ' | '\t' | '\n' | '\r' => {
                chars.next();
                continue;
            }
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '=' => Some(Tok::Assign),
            ';' => Some(Tok::Semi),
            _ => None,
        };
        if let Some(tok) = single {
            chars.next();
            out.push(Spanned { tok, pos });
            continue;
        }
        if ch.is_ascii_digit() {
            let mut value: i64 = 0;
            let mut overflow = false;
            while let Some(&(_, c)) = chars.peek() {
                let Some(d) = c.to_digit(10) else { break };
                match value.checked_mul(10).and_then(|v| v.checked_add(d as i64)) {
                    Some(v) => value = v,
                    None => overflow = true,
                }
                chars.next();
            }
            if overflow {
                return Err(LexError::IntOverflow { pos });
            }
            out.push(Spanned { tok: Tok::Int(value), pos });
        } else if ch.is_ascii_alphabetic() || ch == '_' {
            let mut word = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if c.is_ascii_alphanumeric() || c == '_' {
                    word.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            let tok = match word.as_str() {
                "let" => Tok::Let,
                "return" => Tok::Return,
                _ => Tok::Ident(word),
            };
            out.push(Spanned { tok, pos });
        } else {
            return Err(LexError::UnknownChar { ch, pos });
        }
    }
    Ok(out)
}
