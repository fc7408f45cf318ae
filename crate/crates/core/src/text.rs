//! Whitespace tokenization with lowercasing, and the shared vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const EOS: TokenId = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOS]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

/// Token ids with the byte span each came from in the source text.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenizedSequence {
    pub ids: Vec<TokenId>,
    pub spans: Vec<(usize, usize)>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sequence without source offsets (generated or synthetic ids).
    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        let spans = (0..ids.len()).map(|i| (i, i)).collect();
        TokenizedSequence { ids, spans }
    }
}

/// Lowercased tokens and their byte spans in `text`.
pub fn tokenize(text: &str) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((text[s..i].to_lowercase(), (s, i)));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((text[s..].to_lowercase(), (s, text.len())));
    }
    out
}

/// Lowercase and collapse whitespace to single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text)
        .into_iter()
        .map(|(t, _)| t)
        .collect::<Vec<_>>()
        .join(" ")
}

impl Vocab {
    /// Reserved tokens, then every token seen at least `min_count` times,
    /// ordered by descending frequency and then lexicographically.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::invalid("min_count must be >= 1"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for (tok, _) in tokenize(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocab::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    /// Vocabulary from non-reserved tokens in id order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Vocab> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode(&self, text: &str) -> TokenizedSequence {
        let (ids, spans) = tokenize(text)
            .into_iter()
            .map(|(t, span)| (self.id(&t).unwrap_or(UNK), span))
            .unzip();
        TokenizedSequence { ids, spans }
    }

    pub fn encode_ids(&self, text: &str) -> Vec<TokenId> {
        self.encode(text).ids
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| self.token(i).ok_or(Error::UnknownToken(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// One token per line, reserved tokens first; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Vocab> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::invalid("vocabulary file must start with the reserved tokens"));
        }
        Vocab::from_tokens(lines[RESERVED.len()..].iter().map(|s| s.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::parse(&text)
    }
}
