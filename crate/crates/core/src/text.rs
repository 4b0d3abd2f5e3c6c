//! Vocabulary construction, task-prefixed encoding, padding and masking.
//!
//! Tokenization is whitespace word-level with lowercase folding. The first
//! four ids are reserved: PAD=0, BOS=1, EOS=2, UNK=3.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Default maximum sequence length; sequences are padded to this.
pub const DEFAULT_MAX_LEN: usize = 50;

/// Default vocabulary cap.
pub const DEFAULT_VOCAB_SIZE: usize = 16_000;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary file {path}: {reason}")]
    BadVocabFile { path: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Immutable token <-> id bijection with fixed reserved ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the most frequent corpus tokens up to `max_size - 4`, ties
    /// broken lexicographically. Reserved tokens always occupy ids 0..3.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self, TextError> {
        if corpus.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        assert!(
            max_size >= 4,
            "vocabulary must have room for the reserved tokens"
        );
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                if RESERVED_TOKENS.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - 4);

        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Rebuilds a vocabulary from an explicit token list, validating the
    /// reserved header. Used when a vocabulary is embedded in another file.
    pub(crate) fn from_raw_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        if tokens.len() < 4 || tokens[..4] != RESERVED_TOKENS.map(String::from) {
            return Err(TextError::BadVocabFile {
                path: "<embedded>".into(),
                reason: "first four tokens must be the reserved tokens".into(),
            });
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token_of(&self, id: usize) -> &str {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .unwrap_or(RESERVED_TOKENS[UNK])
    }

    /// FNV-1a over the token list; identifies the vocabulary in checkpoints.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for tok in &self.tokens {
            for byte in tok.as_bytes() {
                h ^= *byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= b'\n' as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// One token per line, line number = id; first four lines are reserved.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(out.as_bytes())?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let body = fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        if tokens.len() < 4 || tokens[..4] != RESERVED_TOKENS.map(String::from) {
            return Err(TextError::BadVocabFile {
                path: path.display().to_string(),
                reason: "first four lines must be the reserved tokens".into(),
            });
        }
        Ok(Self::from_tokens(tokens))
    }

    /// Prefix + text tokens, truncated to `max_len - 1`, terminated by EOS,
    /// padded with PAD to exactly `max_len` ids.
    pub fn encode(&self, text: &str, prefix: &str, max_len: usize) -> Row {
        assert!(max_len >= 2, "encode: max_len must be at least 2");
        let mut toks = tokenize(prefix);
        toks.extend(tokenize(text));
        toks.truncate(max_len - 1);
        let mut ids: Vec<usize> = toks.iter().map(|t| self.id_of(t)).collect();
        ids.push(EOS);
        let len = ids.len();
        ids.resize(max_len, PAD);
        Row { ids, len }
    }

    /// Tokens joined by single spaces, stopping at the first EOS and
    /// skipping PAD/BOS. Unknown ids render as the UNK literal.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut parts: Vec<&str> = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if id == PAD || id == BOS {
                continue;
            }
            parts.push(self.token_of(id));
        }
        parts.join(" ")
    }

    /// Like [`Vocabulary::decode`] but also drops a leading task prefix when
    /// present.
    pub fn decode_stripping(&self, ids: &[usize], prefix: &str) -> String {
        let decoded = self.decode(ids);
        let prefix_toks = tokenize(prefix);
        if prefix_toks.is_empty() {
            return decoded;
        }
        let toks: Vec<&str> = decoded.split(' ').collect();
        if toks.len() >= prefix_toks.len()
            && toks[..prefix_toks.len()]
                .iter()
                .zip(&prefix_toks)
                .all(|(a, b)| a == b)
        {
            return toks[prefix_toks.len()..].join(" ");
        }
        decoded
    }
}

/// One encoded sequence: padded ids plus the unmasked length
/// (everything before and including EOS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub ids: Vec<usize>,
    pub len: usize,
}

impl Row {
    /// Mask row: ones through EOS, zeros after.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.len).collect()
    }

    /// The row with padding removed; mask becomes all ones.
    pub fn trimmed(&self) -> Row {
        Row {
            ids: self.ids[..self.len].to_vec(),
            len: self.len,
        }
    }

    pub fn padded_len(&self) -> usize {
        self.ids.len()
    }
}

/// A batch of encoded rows sharing one max length.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub rows: Vec<Row>,
    pub max_len: usize,
}

impl SequenceBatch {
    pub fn encode_all<S: AsRef<str>>(
        vocab: &Vocabulary,
        texts: &[S],
        prefix: &str,
        max_len: usize,
    ) -> Self {
        let rows = texts
            .iter()
            .map(|t| vocab.encode(t.as_ref(), prefix, max_len))
            .collect();
        SequenceBatch { rows, max_len }
    }
}
