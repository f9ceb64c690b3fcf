//! Synthetic users with a latent lexical style.
//!
//! Content words sit on a ring of `vocab_size` ids. Each user prefers a
//! contiguous arc of `subvocab_size` words starting at a random offset;
//! every token comes from that arc with probability `bias` and otherwise
//! uniformly from the words outside it. With `bias = subvocab_size /
//! vocab_size` every word is equally likely, which gives a control corpus
//! carrying no user signal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Message, UserCorpus, UserMessages, Vocabulary};
use crate::finetune::{
    LabeledDocument, LabeledDocumentSet, LabeledUser, LabeledUserSet, TaskSplit,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub messages_min: usize,
    pub messages_max: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub vocab_size: usize,
    pub subvocab_size: usize,
    /// Per-user bias is drawn uniformly from `[bias_min, bias_max]`.
    pub bias_min: f64,
    pub bias_max: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            messages_min: 10,
            messages_max: 14,
            tokens_min: 6,
            tokens_max: 12,
            vocab_size: 200,
            subvocab_size: 20,
            bias_min: 0.85,
            bias_max: 0.85,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidConfig(m));
        if self.n_users == 0 {
            return bad("n_users must be positive".into());
        }
        if self.messages_min == 0 || self.messages_min > self.messages_max {
            return bad(format!(
                "messages range [{}, {}] invalid",
                self.messages_min, self.messages_max
            ));
        }
        if self.tokens_min == 0 || self.tokens_min > self.tokens_max {
            return bad(format!(
                "tokens range [{}, {}] invalid",
                self.tokens_min, self.tokens_max
            ));
        }
        if self.subvocab_size == 0 || self.subvocab_size >= self.vocab_size {
            return bad(format!(
                "subvocab_size {} must be in [1, vocab_size)",
                self.subvocab_size
            ));
        }
        for b in [self.bias_min, self.bias_max] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("bias {b} must lie in (0, 1)"));
            }
        }
        if self.bias_min > self.bias_max {
            return bad("bias_min exceeds bias_max".into());
        }
        Ok(())
    }

    /// Bias under which the corpus carries no user-specific signal.
    pub fn null_bias(&self) -> f64 {
        self.subvocab_size as f64 / self.vocab_size as f64
    }

    pub fn word(&self, i: usize) -> String {
        let width = (self.vocab_size.max(2) - 1).to_string().len();
        format!("w{i:0width$}")
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_words((0..self.vocab_size).map(|i| self.word(i)))
    }
}

/// Generator state for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserStyle {
    pub user_id: String,
    /// First word id of the preferred arc.
    pub window_start: usize,
    pub bias: f64,
}

impl UserStyle {
    pub fn in_window(&self, word: usize, cfg: &SyntheticConfig) -> bool {
        (word + cfg.vocab_size - self.window_start) % cfg.vocab_size < cfg.subvocab_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: UserCorpus,
    pub styles: Vec<UserStyle>,
    pub vocab: Vocabulary,
}

fn sample_word(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    window_start: usize,
    bias: f64,
) -> usize {
    let v = cfg.vocab_size;
    let s = cfg.subvocab_size;
    if rng.gen::<f64>() < bias {
        (window_start + rng.gen_range(0..s)) % v
    } else {
        (window_start + s + rng.gen_range(0..v - s)) % v
    }
}

fn sample_text(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    window_start: usize,
    bias: f64,
    n: usize,
) -> String {
    (0..n)
        .map(|_| cfg.word(sample_word(rng, cfg, window_start, bias)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn user_id(i: usize) -> String {
    format!("u{i:05}")
}

fn generate_user(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    i: usize,
) -> (UserMessages, UserStyle) {
    let window_start = rng.gen_range(0..cfg.vocab_size);
    let bias = if cfg.bias_max > cfg.bias_min {
        rng.gen_range(cfg.bias_min..=cfg.bias_max)
    } else {
        cfg.bias_min
    };
    let n_msgs = rng.gen_range(cfg.messages_min..=cfg.messages_max);
    let mut ts: i64 = 1_500_000_000 + rng.gen_range(0..10_000_000);
    let mut messages = Vec::with_capacity(n_msgs);
    for _ in 0..n_msgs {
        ts += rng.gen_range(60..86_400);
        let n = rng.gen_range(cfg.tokens_min..=cfg.tokens_max);
        messages.push(Message {
            timestamp: ts,
            text: sample_text(rng, cfg, window_start, bias, n),
        });
    }
    let uid = user_id(i);
    (
        UserMessages {
            user_id: uid.clone(),
            messages,
        },
        UserStyle {
            user_id: uid,
            window_start,
            bias,
        },
    )
}

/// Deterministic in `cfg.seed`.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut users = Vec::with_capacity(cfg.n_users);
    let mut styles = Vec::with_capacity(cfg.n_users);
    for i in 0..cfg.n_users {
        let (u, s) = generate_user(&mut rng, cfg, i);
        users.push(u);
        styles.push(s);
    }
    Ok(SyntheticCorpus {
        corpus: UserCorpus { users },
        styles,
        vocab: cfg.vocabulary(),
    })
}

fn assign_splits(
    rng: &mut ChaCha8Rng,
    n: usize,
    train: f64,
    dev: f64,
) -> Result<Vec<TaskSplit>, CorpusError> {
    if !(train > 0.0 && dev >= 0.0 && train + dev < 1.0) {
        return Err(CorpusError::InvalidConfig(format!(
            "task split fractions train={train} dev={dev}"
        )));
    }
    let n_train = (n as f64 * train).round() as usize;
    let n_dev = (n as f64 * dev).round() as usize;
    if n_train == 0 || n_train + n_dev >= n {
        return Err(CorpusError::TooFewUsers {
            needed: n_train.max(1) + n_dev + 1,
            available: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut splits = vec![TaskSplit::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            TaskSplit::Train
        } else if rank < n_train + n_dev {
            TaskSplit::Dev
        } else {
            TaskSplit::Test
        };
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentTaskConfig {
    /// History generator; one labeled document per user.
    pub corpus: SyntheticConfig,
    /// Probability that a labeled-message token is drawn from the author's arc.
    pub labeled_bias: f64,
    pub labeled_tokens_min: usize,
    pub labeled_tokens_max: usize,
    pub train_fraction: f64,
    pub dev_fraction: f64,
}

impl Default for DocumentTaskConfig {
    fn default() -> Self {
        Self {
            corpus: SyntheticConfig {
                seed: 1,
                ..SyntheticConfig::default()
            },
            labeled_bias: 0.2,
            labeled_tokens_min: 6,
            labeled_tokens_max: 10,
            train_fraction: 0.5,
            dev_fraction: 0.1,
        }
    }
}

pub const DOCUMENT_CLASSES: [&str; 2] = ["lower", "upper"];

/// Which half of the vocabulary holds the centre of the author's arc.
pub fn arc_half(window_start: usize, cfg: &SyntheticConfig) -> usize {
    let centre = (window_start + cfg.subvocab_size / 2) % cfg.vocab_size;
    usize::from(2 * centre >= cfg.vocab_size)
}

/// Document task: every user gets one labeled message after their history.
/// The label is a trait of the author, the half of the vocabulary holding
/// their arc. The labeled message draws from that arc only with
/// `labeled_bias`, so it carries a weak trace of the label and the history a
/// strong one.
pub fn generate_document_task(
    cfg: &DocumentTaskConfig,
) -> Result<(SyntheticCorpus, LabeledDocumentSet), CorpusError> {
    let base = &cfg.corpus;
    if !(0.0..=1.0).contains(&cfg.labeled_bias) {
        return Err(CorpusError::InvalidConfig(
            "labeled_bias must lie in [0, 1]".into(),
        ));
    }
    if cfg.labeled_tokens_min == 0 || cfg.labeled_tokens_min > cfg.labeled_tokens_max {
        return Err(CorpusError::InvalidConfig(
            "labeled token range invalid".into(),
        ));
    }
    let history = generate_synthetic_corpus(base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed ^ 0x5eed_d0c5);
    let splits = assign_splits(&mut rng, base.n_users, cfg.train_fraction, cfg.dev_fraction)?;
    let mut documents = Vec::with_capacity(base.n_users);
    for (i, (user, style)) in history.corpus.users.iter().zip(&history.styles).enumerate() {
        let n = rng.gen_range(cfg.labeled_tokens_min..=cfg.labeled_tokens_max);
        let last_ts = user.messages.last().map_or(0, |m| m.timestamp);
        let message = Message {
            timestamp: last_ts + rng.gen_range(60..86_400),
            text: sample_text(&mut rng, base, style.window_start, cfg.labeled_bias, n),
        };
        documents.push(LabeledDocument {
            user_id: user.user_id.clone(),
            message,
            label: arc_half(style.window_start, base),
            split: splits[i],
        });
    }
    let classes = DOCUMENT_CLASSES.iter().map(|s| s.to_string()).collect();
    Ok((history, LabeledDocumentSet { classes, documents }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserTaskConfig {
    pub corpus: SyntheticConfig,
    pub train_fraction: f64,
    pub dev_fraction: f64,
}

impl Default for UserTaskConfig {
    fn default() -> Self {
        Self {
            corpus: SyntheticConfig {
                seed: 2,
                bias_min: 0.3,
                bias_max: 0.95,
                ..SyntheticConfig::default()
            },
            train_fraction: 0.6,
            dev_fraction: 0.1,
        }
    }
}

/// User task: the target of each user is their generator bias.
pub fn generate_user_task(
    cfg: &UserTaskConfig,
) -> Result<(SyntheticCorpus, LabeledUserSet), CorpusError> {
    let data = generate_synthetic_corpus(&cfg.corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.corpus.seed ^ 0x05e7_7a59);
    let splits = assign_splits(
        &mut rng,
        cfg.corpus.n_users,
        cfg.train_fraction,
        cfg.dev_fraction,
    )?;
    let users = data
        .styles
        .iter()
        .zip(splits)
        .map(|(s, split)| LabeledUser {
            user_id: s.user_id.clone(),
            target: s.bias,
            split,
        })
        .collect();
    Ok((data, LabeledUserSet { users }))
}
