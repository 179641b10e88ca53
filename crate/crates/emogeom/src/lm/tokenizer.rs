use std::path::Path;

use crate::error::{Error, Result};

pub const BYTE_BOS: u32 = 256;
pub const BYTE_EOS: u32 = 257;
pub const BYTE_VOCAB: usize = 262;
const BYTE_SPECIALS: [(&str, u32); 4] = [
    ("<|user|>", 258),
    ("<|assistant|>", 259),
    ("<|end|>", 260),
    ("<|pad|>", 261),
];

pub enum Tokenizer {
    /// Raw UTF-8 bytes plus a handful of control tokens; used by the
    /// built-in models.
    Bytes,
    Hf(Box<tokenizers::Tokenizer>),
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Bytes => f.write_str("Tokenizer::Bytes"),
            Self::Hf(_) => f.write_str("Tokenizer::Hf"),
        }
    }
}

impl Tokenizer {
    pub fn from_file(path: &Path) -> Result<Self> {
        let t = tokenizers::Tokenizer::from_file(path).map_err(|e| Error::parse(path, e))?;
        Ok(Self::Hf(Box::new(t)))
    }

    /// `add_special` applies the tokenizer's own special-token rule (a BOS
    /// prefix for the byte tokenizer).
    pub fn encode(&self, text: &str, add_special: bool) -> Result<Vec<u32>> {
        match self {
            Self::Bytes => {
                let mut ids = Vec::with_capacity(text.len() + 1);
                if add_special {
                    ids.push(BYTE_BOS);
                }
                let mut rest = text;
                'outer: while !rest.is_empty() {
                    for (s, id) in BYTE_SPECIALS {
                        if let Some(r) = rest.strip_prefix(s) {
                            ids.push(id);
                            rest = r;
                            continue 'outer;
                        }
                    }
                    let ch = rest.chars().next().expect("non-empty");
                    let mut buf = [0u8; 4];
                    ids.extend(ch.encode_utf8(&mut buf).bytes().map(u32::from));
                    rest = &rest[ch.len_utf8()..];
                }
                Ok(ids)
            }
            Self::Hf(t) => Ok(t
                .encode(text, add_special)
                .map_err(|e| Error::Model(format!("tokenizer: {e}")))?
                .get_ids()
                .to_vec()),
        }
    }

    /// Decodes skipping special tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        match self {
            Self::Bytes => {
                let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
            Self::Hf(t) => t.decode(ids, true).map_err(|e| Error::Model(format!("tokenizer: {e}"))),
        }
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        match self {
            Self::Bytes => BYTE_SPECIALS.iter().find(|(s, _)| *s == token).map(|&(_, id)| id),
            Self::Hf(t) => t.token_to_id(token),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip_with_specials() {
        let t = Tokenizer::Bytes;
        let ids = t.encode("<|user|>héllo<|end|>", true).unwrap();
        assert_eq!(ids[0], BYTE_BOS);
        assert_eq!(ids[1], 258);
        assert_eq!(*ids.last().unwrap(), 260);
        assert_eq!(ids.len(), 1 + 1 + 6 + 1);
        assert_eq!(t.decode(&ids).unwrap(), "héllo");
    }
}
