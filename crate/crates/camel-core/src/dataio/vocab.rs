//! Token vocabulary with reserved entries and per-token language classification.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Language role of a token. `Cn` plays the Mandarin role (language A),
/// `En` the English role (language B).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Lang {
    En,
    Cn,
}

impl Lang {
    pub fn tag(self) -> &'static str {
        match self {
            Lang::En => "EN",
            Lang::Cn => "CN",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "EN" => Ok(Lang::En),
            "CN" => Ok(Lang::Cn),
            other => Err(Error::Config(format!("unknown language tag '{other}'"))),
        }
    }
}

pub const BLANK_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const SOS_EOS_ID: usize = 2;
pub const LANG_EN_ID: usize = 3;
pub const LANG_CN_ID: usize = 4;
pub const RESERVED: usize = 5;

const RESERVED_TOKENS: [&str; RESERVED] = ["<blank>", "<pad>", "<sos/eos>", "<EN>", "<CN>"];

/// Ordered token list: blank, pad, sos/eos, `<EN>`, `<CN>`, then the
/// Mandarin-role segment, then the English-role segment.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    a_len: usize,
    b_len: usize,
}

impl Vocabulary {
    pub fn new(a_tokens: Vec<String>, b_tokens: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let (a_len, b_len) = (a_tokens.len(), b_tokens.len());
        tokens.extend(a_tokens);
        tokens.extend(b_tokens);
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::Config(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Self {
            tokens,
            a_len,
            b_len,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn a_len(&self) -> usize {
        self.a_len
    }

    pub fn b_len(&self) -> usize {
        self.b_len
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidToken {
                id,
                detail: format!("vocabulary has {} entries", self.size()),
            })
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < RESERVED
    }

    /// Language of a non-reserved token.
    pub fn language(&self, id: usize) -> Result<Lang> {
        if id < RESERVED || id >= self.size() {
            return Err(Error::InvalidToken {
                id,
                detail: "no language: reserved or out-of-range token".into(),
            });
        }
        if id < RESERVED + self.a_len {
            Ok(Lang::Cn)
        } else {
            Ok(Lang::En)
        }
    }

    /// Shared placeholder ID for a language: `<EN>` or `<CN>`. The same IDs
    /// feed both the language-wise CTC targets and the diarization decoder.
    pub fn lang_token_id(lang: Lang) -> usize {
        match lang {
            Lang::En => LANG_EN_ID,
            Lang::Cn => LANG_CN_ID,
        }
    }

    /// One token per line, index = line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Load a vocabulary file. Non-reserved tokens are classified by
    /// spelling: `cn*` is Mandarin-role, `en*` English-role (the layout the
    /// synthetic corpus writes). The two segments must be contiguous.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        let ferr = |offset: usize, detail: String| Error::Format {
            path: path.display().to_string(),
            offset: offset as u64,
            detail,
        };
        if lines.len() < RESERVED {
            return Err(ferr(0, format!("fewer than {RESERVED} reserved tokens")));
        }
        for (i, expect) in RESERVED_TOKENS.iter().enumerate() {
            if lines[i] != *expect {
                return Err(ferr(i, format!("line {i}: expected '{expect}', got '{}'", lines[i])));
            }
        }
        let mut a_tokens = Vec::new();
        let mut b_tokens = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(RESERVED) {
            if line.starts_with("cn") {
                if !b_tokens.is_empty() {
                    return Err(ferr(i, "Mandarin-role token after English-role segment".into()));
                }
                a_tokens.push(line.to_string());
            } else if line.starts_with("en") {
                b_tokens.push(line.to_string());
            } else {
                return Err(ferr(i, format!("cannot classify token '{line}'")));
            }
        }
        Vocabulary::new(a_tokens, b_tokens)
    }

    /// IDs of the Mandarin-role segment.
    pub fn cn_ids(&self) -> std::ops::Range<usize> {
        RESERVED..RESERVED + self.a_len
    }

    /// IDs of the English-role segment.
    pub fn en_ids(&self) -> std::ops::Range<usize> {
        RESERVED + self.a_len..RESERVED + self.a_len + self.b_len
    }
}

/// Map each token to its language's shared placeholder ID: `<CN>` for
/// Mandarin-role tokens, `<EN>` for English-role.
pub fn derive_language_sequence(tokens: &[usize], vocab: &Vocabulary) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|&t| vocab.language(t).map(Vocabulary::lang_token_id))
        .collect()
}

/// Language-wise CTC target: for `which = En` every Mandarin-role token
/// becomes `<CN>` (English tokens unchanged); symmetrically for `which = Cn`.
pub fn derive_langwise_ctc_targets(
    tokens: &[usize],
    vocab: &Vocabulary,
    which: Lang,
) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|&t| {
            let lang = vocab.language(t)?;
            Ok(if lang == which {
                t
            } else {
                Vocabulary::lang_token_id(lang)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocabulary {
        // Mandarin-role: 中, 文; English-role: hello.
        Vocabulary::new(
            vec!["中".into(), "文".into()],
            vec!["hello".into()],
        )
        .unwrap()
    }

    #[test]
    fn layout_and_language() {
        let v = toy_vocab();
        assert_eq!(v.size(), 8);
        assert_eq!(v.id("<blank>"), Some(0));
        assert_eq!(v.id("<EN>"), Some(LANG_EN_ID));
        assert_eq!(v.id("<CN>"), Some(LANG_CN_ID));
        assert_eq!(v.language(5).unwrap(), Lang::Cn);
        assert_eq!(v.language(7).unwrap(), Lang::En);
        assert!(v.language(0).is_err());
    }

    #[test]
    fn language_sequence_mixed() {
        let v = toy_vocab();
        // [中, 文, hello] -> [<CN>, <CN>, <EN>]
        assert_eq!(
            derive_language_sequence(&[5, 6, 7], &v).unwrap(),
            vec![LANG_CN_ID, LANG_CN_ID, LANG_EN_ID]
        );
        assert_eq!(derive_language_sequence(&[], &v).unwrap(), Vec::<usize>::new());
        assert_eq!(
            derive_language_sequence(&[7, 7, 7, 7, 7], &v).unwrap(),
            vec![LANG_EN_ID; 5]
        );
        assert!(derive_language_sequence(&[0], &v).is_err());
    }

    #[test]
    fn langwise_targets_worked_example() {
        let v = toy_vocab();
        let tokens = [5, 6, 7]; // 中 文 hello
        assert_eq!(
            derive_langwise_ctc_targets(&tokens, &v, Lang::En).unwrap(),
            vec![LANG_CN_ID, LANG_CN_ID, 7]
        );
        assert_eq!(
            derive_langwise_ctc_targets(&tokens, &v, Lang::Cn).unwrap(),
            vec![5, 6, LANG_EN_ID]
        );
        // Monolingual Mandarin input: EN-target is all <CN>.
        assert_eq!(
            derive_langwise_ctc_targets(&[5, 5, 6], &v, Lang::En).unwrap(),
            vec![LANG_CN_ID; 3]
        );
    }

    #[test]
    fn duplicate_tokens_rejected() {
        assert!(Vocabulary::new(vec!["x".into(), "x".into()], vec![]).is_err());
    }
}
