//! Per-user message streams, tokenization, block segmentation, synthetic
//! corpora and user splits.

mod blocks;
mod split;
mod synthetic;
mod vocab;

pub use blocks::{segment_into_blocks, segment_token_messages, Block, BlockSequence, Span};
pub use split::{split_users, SplitFractions, Splits};
pub use synthetic::{
    arc_half, generate_document_task, generate_synthetic_corpus, generate_user_task,
    DocumentTaskConfig, SyntheticConfig, SyntheticCorpus, UserStyle, UserTaskConfig,
};
pub use vocab::{Vocabulary, INSEP, INSEP_TOKEN, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("cannot segment an empty message list")]
    EmptyMessages,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("split needs {needed} users, corpus has {available}")]
    TooFewUsers { needed: usize, available: usize },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    /// Seconds since an arbitrary epoch.
    pub timestamp: i64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserMessages {
    pub user_id: String,
    pub messages: Vec<Message>,
}

impl UserMessages {
    pub fn word_count(&self) -> usize {
        self.messages
            .iter()
            .map(|m| m.text.split_whitespace().count())
            .sum()
    }
}

/// Temporally ordered message streams keyed by user.
///
/// Users keep first-appearance order; each user's messages are sorted by
/// timestamp with ties kept in input order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserCorpus {
    pub users: Vec<UserMessages>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub users: usize,
    pub messages: usize,
    /// Users whose records appeared in more than one contiguous run.
    pub merged_users: Vec<String>,
}

impl UserCorpus {
    /// Builds a corpus from possibly interleaved records, grouping by user
    /// and sorting each user's messages.
    pub fn from_records(
        records: impl IntoIterator<Item = (String, Message)>,
    ) -> (Self, Vec<String>) {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut users: Vec<UserMessages> = Vec::new();
        let mut last: Option<usize> = None;
        let mut merged = Vec::new();
        for (uid, msg) in records {
            let i = match index.get(&uid) {
                Some(&i) => {
                    if last != Some(i) && !merged.contains(&uid) {
                        merged.push(uid.clone());
                    }
                    i
                }
                None => {
                    index.insert(uid.clone(), users.len());
                    users.push(UserMessages {
                        user_id: uid,
                        messages: Vec::new(),
                    });
                    users.len() - 1
                }
            };
            users[i].messages.push(msg);
            last = Some(i);
        }
        for u in &mut users {
            u.messages.sort_by_key(|m| m.timestamp);
        }
        (Self { users }, merged)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn num_messages(&self) -> usize {
        self.users.iter().map(|u| u.messages.len()).sum()
    }

    pub fn user(&self, id: &str) -> Option<&UserMessages> {
        self.users.iter().find(|u| u.user_id == id)
    }

    /// Keeps users with at least `min_messages` messages and `min_words` words.
    pub fn filter_users(&self, min_messages: usize, min_words: usize) -> Self {
        let users = self
            .users
            .iter()
            .filter(|u| u.messages.len() >= min_messages && u.word_count() >= min_words)
            .cloned()
            .collect();
        Self { users }
    }

    /// Canonical line-delimited serialization, `user_id<TAB>timestamp<TAB>text`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for u in &self.users {
            for m in &u.messages {
                out.push_str(&escape_field(&u.user_id));
                out.push('\t');
                out.push_str(&m.timestamp.to_string());
                out.push('\t');
                out.push_str(&escape_field(&m.text));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<(Self, LoadStats), CorpusError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let (Some(uid), Some(ts), Some(body)) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    reason: "expected 3 tab-separated fields".into(),
                });
            };
            if uid.is_empty() {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    reason: "empty user id".into(),
                });
            }
            let timestamp = ts
                .trim()
                .parse::<i64>()
                .map_err(|e| CorpusError::Malformed {
                    line: line_no,
                    reason: format!("bad timestamp `{ts}`: {e}"),
                })?;
            let text = unescape_field(body).map_err(|reason| CorpusError::Malformed {
                line: line_no,
                reason,
            })?;
            records.push((
                unescape_field(uid).map_err(|reason| CorpusError::Malformed {
                    line: line_no,
                    reason,
                })?,
                Message { timestamp, text },
            ));
        }
        let (corpus, merged_users) = Self::from_records(records);
        for u in &merged_users {
            log::warn!("user `{u}` appears in more than one block of records; merged");
        }
        let stats = LoadStats {
            users: corpus.len(),
            messages: corpus.num_messages(),
            merged_users,
        };
        Ok((corpus, stats))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// Reads a corpus file; see [`UserCorpus::parse_tsv`].
pub fn load_corpus(path: &Path) -> Result<(UserCorpus, LoadStats), CorpusError> {
    let text = fs::read_to_string(path)?;
    let (corpus, stats) = UserCorpus::parse_tsv(&text)?;
    log::info!(
        "loaded {} users / {} messages from {}",
        stats.users,
        stats.messages,
        path.display()
    );
    Ok((corpus, stats))
}

/// Escapes backslash, newline, carriage return and tab so that a field fits
/// on one tab-separated line.
pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => return Err(format!("unknown escape `\\{other}`")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}
