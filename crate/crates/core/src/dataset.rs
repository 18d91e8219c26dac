//! MedMCQA-style question records, the subject vocabulary and split summaries.
//!
//! Input files carry one JSON object per line with the keys `id`, `question`,
//! `opa`..`opd`, `cop`, `subject_name` and `topic_name`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("missing field {field:?} at line {line}")]
    MissingField { field: &'static str, line: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::UnknownSplit(other.to_string())),
        }
    }
}

/// One exam question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionRecord {
    pub id: String,
    /// Trimmed, never empty.
    pub question_text: String,
    /// Options a..d; absent options are empty strings.
    pub options: [String; 4],
    /// Zero-based index of the correct option.
    pub correct_option: Option<u8>,
    pub subject_name: String,
    pub topic_name: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Interpret `cop` as 1..4 instead of 0..3.
    pub cop_one_based: bool,
}

const OPTION_KEYS: [&str; 4] = ["opa", "opb", "opc", "opd"];

/// Parses one record per non-blank line, in file order.
pub fn parse_records<R: BufRead>(source: R, split: Split) -> Result<Vec<QuestionRecord>, DatasetError> {
    parse_records_with(source, split, ParseOptions::default())
}

pub fn parse_records_with<R: BufRead>(
    source: R,
    split: Split,
    options: ParseOptions,
) -> Result<Vec<QuestionRecord>, DatasetError> {
    let mut records = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(&line, idx + 1, split, options)?);
    }
    Ok(records)
}

fn parse_line(line: &str, line_no: usize, split: Split, options: ParseOptions) -> Result<QuestionRecord, DatasetError> {
    let malformed = |reason: String| DatasetError::MalformedRecord { line: line_no, reason };
    let value: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(malformed("expected a JSON object".into()));
    };

    let id = match obj.get("id") {
        None | Some(Value::Null) => {
            return Err(DatasetError::MissingField {
                field: "id",
                line: line_no,
            })
        }
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(malformed("\"id\" must be a string or number".into())),
    };

    let question_text = required_text(&obj, "question", line_no)?;
    let subject_name = required_text(&obj, "subject_name", line_no)?;

    let mut opts: [String; 4] = Default::default();
    for (slot, key) in opts.iter_mut().zip(OPTION_KEYS) {
        *slot = optional_text(&obj, key, line_no)?.unwrap_or_default();
    }

    let correct_option = match obj.get("cop") {
        None | Some(Value::Null) => None,
        Some(Value::Number(n)) => {
            let raw = n
                .as_i64()
                .ok_or_else(|| malformed("\"cop\" must be an integer".into()))?;
            let idx = if options.cop_one_based { raw - 1 } else { raw };
            if raw < 0 {
                // unlabelled rows use a negative sentinel
                None
            } else if (0..4).contains(&idx) {
                Some(idx as u8)
            } else {
                return Err(malformed(format!("\"cop\" out of range: {raw}")));
            }
        }
        Some(_) => return Err(malformed("\"cop\" must be an integer".into())),
    };

    let topic_name = optional_text(&obj, "topic_name", line_no)?.filter(|t| !t.is_empty());

    Ok(QuestionRecord {
        id,
        question_text,
        options: opts,
        correct_option,
        subject_name,
        topic_name,
        split,
    })
}

fn optional_text(obj: &Map<String, Value>, key: &'static str, line: usize) -> Result<Option<String>, DatasetError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.trim().to_string())),
        Some(_) => Err(DatasetError::MalformedRecord {
            line,
            reason: format!("{key:?} must be a string"),
        }),
    }
}

fn required_text(obj: &Map<String, Value>, key: &'static str, line: usize) -> Result<String, DatasetError> {
    match optional_text(obj, key, line)? {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(DatasetError::MissingField { field: key, line }),
    }
}

/// Serializes records in the same line format `parse_records` reads.
pub fn write_records<W: Write>(records: &[QuestionRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        let mut obj = Map::new();
        obj.insert("id".into(), Value::String(r.id.clone()));
        obj.insert("question".into(), Value::String(r.question_text.clone()));
        for (key, opt) in OPTION_KEYS.iter().zip(&r.options) {
            obj.insert((*key).into(), Value::String(opt.clone()));
        }
        obj.insert("cop".into(), r.correct_option.map_or(Value::Null, Value::from));
        obj.insert("subject_name".into(), Value::String(r.subject_name.clone()));
        obj.insert(
            "topic_name".into(),
            r.topic_name.clone().map_or(Value::Null, Value::String),
        );
        serde_json::to_writer(&mut out, &Value::Object(obj))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Subject names mapped to contiguous class indices, sorted by byte order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectVocabulary {
    names: Vec<String>,
    index_of: HashMap<String, usize>,
}

impl SubjectVocabulary {
    pub fn from_names<I, S>(names: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(DatasetError::EmptyInput);
        }
        names.sort();
        names.dedup();
        let index_of = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { names, index_of })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index_of.get(name).copied()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    /// One name per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.names {
            s.push_str(n);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        Self::from_names(text.lines().filter(|l| !l.is_empty()))
    }
}

/// Builds the class vocabulary from (training) records.
pub fn build_vocabulary(records: &[QuestionRecord]) -> Result<SubjectVocabulary, DatasetError> {
    SubjectVocabulary::from_names(records.iter().map(|r| r.subject_name.as_str()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRecord {
    pub id: String,
    pub split: Split,
    pub subject_name: String,
}

/// Per-split, per-subject counts. Records whose subject is outside the
/// vocabulary are listed in `rejects` and excluded from `counts`/`totals`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSummary {
    pub subjects: Vec<String>,
    pub counts: BTreeMap<Split, Vec<u64>>,
    pub totals: BTreeMap<Split, u64>,
    pub rejects: Vec<RejectedRecord>,
}

impl SplitSummary {
    pub fn count(&self, split: Split, subject: usize) -> u64 {
        self.counts.get(&split).map_or(0, |c| c[subject])
    }

    pub fn total(&self, split: Split) -> u64 {
        self.totals.get(&split).copied().unwrap_or(0)
    }

    pub fn render(&self) -> String {
        let width = self.subjects.iter().map(String::len).max().unwrap_or(7).max(7);
        let mut out = format!("{:<width$} {:>8} {:>8} {:>8}\n", "subject", "train", "dev", "test");
        for (k, name) in self.subjects.iter().enumerate() {
            out.push_str(&format!(
                "{:<width$} {:>8} {:>8} {:>8}\n",
                name,
                self.count(Split::Train, k),
                self.count(Split::Dev, k),
                self.count(Split::Test, k)
            ));
        }
        out.push_str(&format!(
            "{:<width$} {:>8} {:>8} {:>8}\n",
            "total",
            self.total(Split::Train),
            self.total(Split::Dev),
            self.total(Split::Test)
        ));
        out.push_str(&format!("classes={}\n", self.subjects.len()));
        out.push_str(&format!("rejected={}\n", self.rejects.len()));
        for r in &self.rejects {
            out.push_str(&format!("  reject {} {} {:?}\n", r.split, r.id, r.subject_name));
        }
        out
    }
}

pub fn summarize_splits(records: &[QuestionRecord], vocab: &SubjectVocabulary) -> SplitSummary {
    let mut counts: BTreeMap<Split, Vec<u64>> = Split::ALL.iter().map(|&s| (s, vec![0; vocab.len()])).collect();
    let mut rejects = Vec::new();
    for r in records {
        match vocab.index_of(&r.subject_name) {
            Some(k) => counts.get_mut(&r.split).expect("all splits present")[k] += 1,
            None => rejects.push(RejectedRecord {
                id: r.id.clone(),
                split: r.split,
                subject_name: r.subject_name.clone(),
            }),
        }
    }
    let totals = counts.iter().map(|(&s, c)| (s, c.iter().sum())).collect();
    SplitSummary {
        subjects: vocab.names().to_vec(),
        counts,
        totals,
        rejects,
    }
}
