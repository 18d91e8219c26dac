//! Text to padded token-id batches.
//!
//! Text is split on whitespace with ASCII punctuation isolated into its own
//! tokens. A word missing from the vocabulary is split greedily into
//! `##`-continuation pieces when the vocabulary has any, then mapped to
//! `[UNK]` when present, else hashed to an id above the vocabulary range.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use thiserror::Error;

pub const DEFAULT_MAX_INPUT_LENGTH: usize = 512;

/// Size of the id range hashed out-of-vocabulary tokens land in.
const FALLBACK_BUCKETS: u64 = 1 << 24;

const UNK_TOKENS: [&str; 2] = ["[UNK]", "<unk>"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("text {0} is empty after trimming")]
    EmptyText(usize),
    #[error("invalid tokenizer spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Casing {
    Preserve,
    Lower,
}

impl fmt::Display for Casing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Casing::Preserve => "preserve",
            Casing::Lower => "lower",
        })
    }
}

impl FromStr for Casing {
    type Err = TokenizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "preserve" => Ok(Casing::Preserve),
            "lower" => Ok(Casing::Lower),
            other => Err(TokenizerError::InvalidSpec(format!("unknown casing {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerSpec {
    vocabulary: HashMap<String, u32>,
    eos_token_id: u32,
    max_input_length: usize,
    casing: Casing,
    /// Ids placed before / after every sequence (e.g. CLS and SEP).
    prefix: Vec<u32>,
    suffix: Vec<u32>,
    unk_id: Option<u32>,
    wordpiece: bool,
    fallback_base: u32,
}

impl TokenizerSpec {
    /// Builds a spec; the EOS id is registered as `</s>` if no vocabulary
    /// entry carries it yet.
    pub fn new(
        mut vocabulary: HashMap<String, u32>,
        eos_token_id: u32,
        max_input_length: usize,
        casing: Casing,
    ) -> Result<Self, TokenizerError> {
        if !vocabulary.values().any(|&id| id == eos_token_id) {
            if vocabulary.contains_key("</s>") {
                return Err(TokenizerError::InvalidSpec(
                    "eos id absent and </s> already bound to another id".into(),
                ));
            }
            vocabulary.insert("</s>".into(), eos_token_id);
        }
        Self::assemble(
            vocabulary,
            eos_token_id,
            max_input_length,
            casing,
            Vec::new(),
            Vec::new(),
        )
    }

    /// Empty vocabulary: every token hashes to a fallback id.
    pub fn whitespace(eos_token_id: u32, max_input_length: usize) -> Self {
        Self::new(HashMap::new(), eos_token_id, max_input_length, Casing::Preserve)
            .expect("empty vocabulary is always valid")
    }

    pub fn with_special_tokens(mut self, prefix: Vec<u32>, suffix: Vec<u32>) -> Result<Self, TokenizerError> {
        if prefix.len() + suffix.len() >= self.max_input_length {
            return Err(TokenizerError::InvalidSpec(
                "special tokens leave no room for text".into(),
            ));
        }
        self.prefix = prefix;
        self.suffix = suffix;
        Ok(self)
    }

    pub fn with_max_input_length(mut self, max_input_length: usize) -> Result<Self, TokenizerError> {
        if max_input_length == 0 || self.prefix.len() + self.suffix.len() >= max_input_length {
            return Err(TokenizerError::InvalidSpec(format!(
                "max_len {max_input_length} too small"
            )));
        }
        self.max_input_length = max_input_length;
        Ok(self)
    }

    fn assemble(
        vocabulary: HashMap<String, u32>,
        eos_token_id: u32,
        max_input_length: usize,
        casing: Casing,
        prefix: Vec<u32>,
        suffix: Vec<u32>,
    ) -> Result<Self, TokenizerError> {
        if max_input_length == 0 {
            return Err(TokenizerError::InvalidSpec("max_len must be >= 1".into()));
        }
        if prefix.len() + suffix.len() >= max_input_length {
            return Err(TokenizerError::InvalidSpec(
                "special tokens leave no room for text".into(),
            ));
        }
        if !vocabulary.values().any(|&id| id == eos_token_id) {
            return Err(TokenizerError::InvalidSpec(format!(
                "eos id {eos_token_id} not in vocabulary"
            )));
        }
        let unk_id = UNK_TOKENS.iter().find_map(|t| vocabulary.get(*t).copied());
        let wordpiece = vocabulary.keys().any(|k| k.starts_with("##"));
        let fallback_base = vocabulary.values().copied().max().unwrap_or(0).saturating_add(1);
        Ok(Self {
            vocabulary,
            eos_token_id,
            max_input_length,
            casing,
            prefix,
            suffix,
            unk_id,
            wordpiece,
            fallback_base,
        })
    }

    pub fn eos_token_id(&self) -> u32 {
        self.eos_token_id
    }

    pub fn max_input_length(&self) -> usize {
        self.max_input_length
    }

    pub fn casing(&self) -> Casing {
        self.casing
    }

    pub fn vocabulary(&self) -> &HashMap<String, u32> {
        &self.vocabulary
    }

    /// Largest id `encode` can emit.
    pub fn max_token_id(&self) -> u32 {
        if self.unk_id.is_some() {
            self.fallback_base - 1
        } else {
            self.fallback_base.saturating_add((FALLBACK_BUCKETS - 1) as u32)
        }
    }

    /// Parses the tab-separated spec file: `eos_id=`, `max_len=`,
    /// `casing=`, optional `prefix=` / `suffix=` (comma-separated ids) and
    /// one `token<TAB>id` line per vocabulary entry.
    pub fn parse(text: &str) -> Result<Self, TokenizerError> {
        let invalid = |line: usize, msg: String| TokenizerError::InvalidSpec(format!("line {line}: {msg}"));
        let mut vocabulary = HashMap::new();
        let mut eos = None;
        let mut max_len = DEFAULT_MAX_INPUT_LENGTH;
        let mut casing = Casing::Preserve;
        let mut prefix = Vec::new();
        let mut suffix = Vec::new();

        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some((token, id)) = line.rsplit_once('\t') {
                let id: u32 = id.trim().parse().map_err(|_| invalid(n, format!("bad id {id:?}")))?;
                if vocabulary.insert(token.to_string(), id).is_some() {
                    return Err(invalid(n, format!("duplicate token {token:?}")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(n, "expected key=value or token<TAB>id".into()))?;
            let parse_ids = |v: &str| -> Result<Vec<u32>, TokenizerError> {
                v.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse().map_err(|_| invalid(n, format!("bad id {s:?}"))))
                    .collect()
            };
            match key.trim() {
                "eos_id" => eos = Some(value.trim().parse().map_err(|_| invalid(n, "bad eos_id".into()))?),
                "max_len" => max_len = value.trim().parse().map_err(|_| invalid(n, "bad max_len".into()))?,
                "casing" => casing = value.trim().parse()?,
                "prefix" => prefix = parse_ids(value)?,
                "suffix" => suffix = parse_ids(value)?,
                other => return Err(invalid(n, format!("unknown header {other:?}"))),
            }
        }
        let eos = eos.ok_or_else(|| TokenizerError::InvalidSpec("missing eos_id".into()))?;
        Self::assemble(vocabulary, eos, max_len, casing, prefix, suffix)
    }

    /// Inverse of [`TokenizerSpec::parse`]; entries ordered by id then token.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "eos_id={}\nmax_len={}\ncasing={}\n",
            self.eos_token_id, self.max_input_length, self.casing
        );
        let join = |ids: &[u32]| ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        if !self.prefix.is_empty() {
            out.push_str(&format!("prefix={}\n", join(&self.prefix)));
        }
        if !self.suffix.is_empty() {
            out.push_str(&format!("suffix={}\n", join(&self.suffix)));
        }
        let mut entries: Vec<_> = self.vocabulary.iter().collect();
        entries.sort_by(|a, b| a.1.cmp(b.1).then_with(|| a.0.cmp(b.0)));
        for (token, id) in entries {
            out.push_str(&format!("{token}\t{id}\n"));
        }
        out
    }

    /// Token ids for one text, special tokens included, truncated to
    /// `max_input_length`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let text = match self.casing {
            Casing::Preserve => text.to_string(),
            Casing::Lower => text.to_lowercase(),
        };
        let budget = self.max_input_length - self.prefix.len() - self.suffix.len();
        let mut ids = self.prefix.clone();
        let mut body = 0;
        'words: for word in pre_tokenize(&text) {
            for id in self.word_ids(word) {
                if body == budget {
                    break 'words;
                }
                ids.push(id);
                body += 1;
            }
        }
        ids.extend_from_slice(&self.suffix);
        ids
    }

    fn word_ids(&self, word: &str) -> Vec<u32> {
        if let Some(&id) = self.vocabulary.get(word) {
            return vec![id];
        }
        if self.wordpiece {
            if let Some(pieces) = self.wordpiece_split(word) {
                return pieces;
            }
        }
        vec![self.unk_id.unwrap_or_else(|| self.fallback_id(word))]
    }

    fn wordpiece_split(&self, word: &str) -> Option<Vec<u32>> {
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < word.len() {
            let mut end = word.len();
            let mut found = None;
            while end > start {
                if word.is_char_boundary(end) {
                    let piece = &word[start..end];
                    let id = if start == 0 {
                        self.vocabulary.get(piece)
                    } else {
                        self.vocabulary.get(&format!("##{piece}"))
                    };
                    if let Some(&id) = id {
                        found = Some(id);
                        break;
                    }
                }
                end -= 1;
            }
            pieces.push(found?);
            start = end;
        }
        Some(pieces)
    }

    fn fallback_id(&self, token: &str) -> u32 {
        self.fallback_base + (fnv1a64(token.as_bytes()) % FALLBACK_BUCKETS) as u32
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn pre_tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|chunk| {
        let mut parts = Vec::new();
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if c.is_ascii_punctuation() {
                if start < i {
                    parts.push(&chunk[start..i]);
                }
                parts.push(&chunk[i..i + 1]);
                start = i + 1;
            }
        }
        if start < chunk.len() {
            parts.push(&chunk[start..]);
        }
        parts
    })
}

/// Padded batch; padding positions hold the EOS id and a zero mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Array2<u32>,
    pub attention_mask: Array2<u8>,
    /// Unpadded length of each row.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Builds a batch from already-encoded rows, padding to the longest.
    pub fn from_rows(rows: &[Vec<u32>], pad_id: u32) -> Self {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Array2::from_elem((rows.len(), width), pad_id);
        let mut mask = Array2::zeros((rows.len(), width));
        for (i, row) in rows.iter().enumerate() {
            for (t, &id) in row.iter().enumerate() {
                ids[[i, t]] = id;
                mask[[i, t]] = 1;
            }
        }
        Self {
            ids,
            attention_mask: mask,
            lengths: rows.iter().map(Vec::len).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.ncols()
    }
}

pub fn tokenize_batch<S: AsRef<str>>(texts: &[S], spec: &TokenizerSpec) -> Result<TokenBatch, TokenizerError> {
    if texts.is_empty() {
        return Err(TokenizerError::EmptyBatch);
    }
    let rows = texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let t = t.as_ref().trim();
            if t.is_empty() {
                Err(TokenizerError::EmptyText(i))
            } else {
                Ok(spec.encode(t))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TokenBatch::from_rows(&rows, spec.eos_token_id))
}
