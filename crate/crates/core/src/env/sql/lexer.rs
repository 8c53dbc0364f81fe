#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Word(String),
    /// Backtick-quoted identifier.
    Quoted(String),
    Int(i64),
    Float(f64),
    Str(String),
    Comma,
    LParen,
    RParen,
    Star,
    Dot,
    Semi,
    Minus,
    Op(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Token {
    pub tok: Tok,
    /// Byte offset in the source, for "near '...'" diagnostics.
    pub pos: usize,
}

/// Offset of the first character the lexer could not make sense of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LexError(pub usize);

pub(crate) fn lex(src: &str) -> Result<Vec<Token>, LexError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let tok = match c {
            ',' => {
                i += 1;
                Tok::Comma
            }
            '(' => {
                i += 1;
                Tok::LParen
            }
            ')' => {
                i += 1;
                Tok::RParen
            }
            '*' => {
                i += 1;
                Tok::Star
            }
            '.' if !bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit()) => {
                i += 1;
                Tok::Dot
            }
            ';' => {
                i += 1;
                Tok::Semi
            }
            '-' => {
                i += 1;
                Tok::Minus
            }
            '=' => {
                i += 1;
                Tok::Op("=")
            }
            '!' if bytes.get(i + 1) == Some(&b'=') => {
                i += 2;
                Tok::Op("!=")
            }
            '<' => match bytes.get(i + 1) {
                Some(b'=') => {
                    i += 2;
                    Tok::Op("<=")
                }
                Some(b'>') => {
                    i += 2;
                    Tok::Op("!=")
                }
                _ => {
                    i += 1;
                    Tok::Op("<")
                }
            },
            '>' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    i += 2;
                    Tok::Op(">=")
                } else {
                    i += 1;
                    Tok::Op(">")
                }
            }
            '\'' | '"' => {
                let quote = bytes[i];
                i += 1;
                let mut text = String::new();
                loop {
                    match bytes.get(i) {
                        None => return Err(LexError(start)),
                        Some(&b) if b == quote => {
                            if bytes.get(i + 1) == Some(&quote) {
                                text.push(quote as char);
                                i += 2;
                            } else {
                                i += 1;
                                break;
                            }
                        }
                        Some(b'\\') if i + 1 < bytes.len() => {
                            let ch = src[i + 1..].chars().next().expect("in bounds");
                            text.push(ch);
                            i += 1 + ch.len_utf8();
                        }
                        Some(_) => {
                            let ch = src[i..].chars().next().expect("in bounds");
                            text.push(ch);
                            i += ch.len_utf8();
                        }
                    }
                }
                Tok::Str(text)
            }
            '`' => {
                let end = src[i + 1..].find('`').ok_or(LexError(start))?;
                let name = src[i + 1..i + 1 + end].to_string();
                i += end + 2;
                Tok::Quoted(name)
            }
            c if c.is_ascii_digit() || c == '.' => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let mut float = false;
                if i < bytes.len() && bytes[i] == b'.' {
                    float = true;
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i].is_ascii_alphabetic() || bytes[i] == b'_') {
                    return Err(LexError(start));
                }
                let text = &src[start..i];
                if float {
                    Tok::Float(text.parse().map_err(|_| LexError(start))?)
                } else {
                    Tok::Int(text.parse().map_err(|_| LexError(start))?)
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                Tok::Word(src[start..i].to_string())
            }
            _ => return Err(LexError(start)),
        };
        out.push(Token { tok, pos: start });
    }
    Ok(out)
}
