use std::fmt;

use super::SafeError;

/// One lexical unit of a SAFE fragment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lexeme {
    /// Organic-subset symbol (`C`, `Cl`, `c`, `*`) or bracket atom, verbatim.
    Atom(String),
    /// Attachment stub `[n*]`; `[*]` carries label 0.
    Stub {
        label: u16,
        text: String,
    },
    Bond(char),
    BranchOpen,
    BranchClose,
    /// Ring/attachment closure digit, or `%NN` when `percent`.
    Closure {
        label: u16,
        percent: bool,
    },
}

impl Lexeme {
    pub fn closure(label: u16) -> Self {
        Lexeme::Closure {
            label,
            percent: label >= 10,
        }
    }

    pub fn is_atom(&self) -> bool {
        matches!(self, Lexeme::Atom(_) | Lexeme::Stub { .. })
    }
}

impl fmt::Display for Lexeme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lexeme::Atom(s) => f.write_str(s),
            Lexeme::Stub { text, .. } => f.write_str(text),
            Lexeme::Bond(c) => write!(f, "{c}"),
            Lexeme::BranchOpen => f.write_str("("),
            Lexeme::BranchClose => f.write_str(")"),
            Lexeme::Closure {
                label,
                percent: true,
            } => write!(f, "%{label:02}"),
            Lexeme::Closure {
                label,
                percent: false,
            } => write!(f, "{label}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum Item {
    Lex(Lexeme),
    Dot,
}

pub(crate) const BOND_CHARS: &[char] = &['-', '=', '#', '$', ':', '/', '\\'];

fn bracket_content_ok(content: &str) -> bool {
    !content.is_empty()
        && content
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '@' | '+' | '-' | ':' | '*'))
        && content.chars().any(|c| c.is_ascii_alphabetic() || c == '*')
}

/// `[*]`, `[2*]`, `[14*]`; returns the label.
fn stub_label(content: &str) -> Option<u16> {
    let digits = content.strip_suffix('*')?;
    if digits.is_empty() {
        return Some(0);
    }
    if !digits.chars().all(|c| c.is_ascii_digit()) || digits.len() > 4 {
        return None;
    }
    digits.parse().ok()
}

/// Splits SAFE text into lexemes and fragment separators with byte offsets.
pub(crate) fn lex(text: &str) -> Result<Vec<(usize, Item)>, SafeError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        let item = match c {
            '.' => {
                i += 1;
                Item::Dot
            }
            '(' => {
                i += 1;
                Item::Lex(Lexeme::BranchOpen)
            }
            ')' => {
                i += 1;
                Item::Lex(Lexeme::BranchClose)
            }
            '0'..='9' => {
                i += 1;
                Item::Lex(Lexeme::Closure {
                    label: (c as u8 - b'0') as u16,
                    percent: false,
                })
            }
            '%' => {
                let d = bytes
                    .get(i + 1..i + 3)
                    .filter(|d| d.iter().all(u8::is_ascii_digit));
                let Some(d) = d else {
                    return Err(SafeError::Lex { pos: i, ch: '%' });
                };
                i += 3;
                Item::Lex(Lexeme::Closure {
                    label: ((d[0] - b'0') * 10 + (d[1] - b'0')) as u16,
                    percent: true,
                })
            }
            '[' => {
                let Some(rel) = text[i + 1..].find(']') else {
                    return Err(SafeError::UnterminatedBracket { pos: i });
                };
                let content = &text[i + 1..i + 1 + rel];
                if !bracket_content_ok(content) {
                    return Err(SafeError::InvalidBracketAtom {
                        pos: i,
                        content: content.to_string(),
                    });
                }
                let full = &text[i..i + rel + 2];
                i += rel + 2;
                match stub_label(content) {
                    Some(label) => Item::Lex(Lexeme::Stub {
                        label,
                        text: full.to_string(),
                    }),
                    None => Item::Lex(Lexeme::Atom(full.to_string())),
                }
            }
            'C' if bytes.get(i + 1) == Some(&b'l') => {
                i += 2;
                Item::Lex(Lexeme::Atom("Cl".into()))
            }
            'B' if bytes.get(i + 1) == Some(&b'r') => {
                i += 2;
                Item::Lex(Lexeme::Atom("Br".into()))
            }
            'B' | 'C' | 'N' | 'O' | 'P' | 'S' | 'F' | 'I' | 'b' | 'c' | 'n' | 'o' | 'p' | 's'
            | '*' => {
                i += 1;
                Item::Lex(Lexeme::Atom(c.to_string()))
            }
            c if BOND_CHARS.contains(&c) => {
                i += 1;
                Item::Lex(Lexeme::Bond(c))
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(SafeError::Lex { pos: i, ch });
            }
        };
        out.push((start, item));
    }
    Ok(out)
}

/// Lexemes of text that must not contain fragment separators.
pub fn lex_fragment(text: &str) -> Result<Vec<Lexeme>, SafeError> {
    lex(text)?
        .into_iter()
        .map(|(pos, item)| match item {
            Item::Lex(l) => Ok(l),
            Item::Dot => Err(SafeError::Grammar {
                pos,
                msg: "fragment separator inside a fragment",
            }),
        })
        .collect()
}
