//! Task heads on top of a pre-trained model.
//!
//! Documents are represented by the hidden state at the last token of the
//! labeled message, which is laid out after the author's earlier messages.
//! Users are represented by the mean of their block states. Both heads are
//! a layer norm followed by a linear map.

use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    escape_field, segment_token_messages, unescape_field, BlockSequence, CorpusError, Message,
    UserCorpus, Vocabulary,
};
use crate::hart::{forward_blocks, recurrence_param_names, ForwardMode, HartModel, U0};
use crate::model::{self, Dropout, ModelError};
use crate::numerics::{Bound, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::training::{clip_global_norm, derive_seed, AdamW};

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("labeled message of user {user} does not fit in {cap} blocks")]
    LabeledTruncated { user: String, cap: usize },
    #[error("user {0} has no non-pad blocks")]
    NoBlocks(String),
    #[error("user {0} missing from the history corpus")]
    UnknownUser(String),
    #[error("no {0} instances")]
    NoData(&'static str),
    #[error("fine-tuning diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid fine-tuning config: {0}")]
    InvalidConfig(String),
    #[error("empty prediction list")]
    EmptyPredictions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSplit {
    Train,
    Dev,
    Test,
}

impl TaskSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskSplit::Train => "train",
            TaskSplit::Dev => "dev",
            TaskSplit::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(TaskSplit::Train),
            "dev" => Some(TaskSplit::Dev),
            "test" => Some(TaskSplit::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDocument {
    pub user_id: String,
    pub message: Message,
    pub label: usize,
    pub split: TaskSplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDocumentSet {
    pub classes: Vec<String>,
    pub documents: Vec<LabeledDocument>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledUser {
    pub user_id: String,
    pub target: f64,
    pub split: TaskSplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledUserSet {
    pub users: Vec<LabeledUser>,
}

fn parse_labeled_line(line: &str, n: usize) -> Result<[String; 5], CorpusError> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 5 {
        return Err(CorpusError::Malformed {
            line: n,
            reason: format!("expected 5 tab-separated fields, found {}", f.len()),
        });
    }
    let text = unescape_field(f[4]).map_err(|reason| CorpusError::Malformed { line: n, reason })?;
    Ok([
        f[0].to_string(),
        f[1].to_string(),
        f[2].to_string(),
        f[3].to_string(),
        text,
    ])
}

fn parse_split(s: &str, n: usize) -> Result<TaskSplit, CorpusError> {
    TaskSplit::parse(s).ok_or_else(|| CorpusError::Malformed {
        line: n,
        reason: format!("unknown split `{s}`"),
    })
}

impl LabeledDocumentSet {
    /// `user_id<TAB>timestamp<TAB>split<TAB>label<TAB>text`, label as class name.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for d in &self.documents {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                d.user_id,
                d.message.timestamp,
                d.split.as_str(),
                self.classes[d.label],
                escape_field(&d.message.text)
            ));
        }
        s
    }

    /// Classes are the distinct labels in sorted order.
    pub fn parse_tsv(text: &str) -> Result<Self, CorpusError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            rows.push((i + 1, parse_labeled_line(line, i + 1)?));
        }
        let mut classes: Vec<String> = rows.iter().map(|(_, r)| r[3].clone()).collect();
        classes.sort();
        classes.dedup();
        let documents = rows
            .into_iter()
            .map(|(n, [user_id, ts, split, label, text])| {
                let timestamp = ts.parse().map_err(|_| CorpusError::Malformed {
                    line: n,
                    reason: format!("bad timestamp `{ts}`"),
                })?;
                Ok(LabeledDocument {
                    user_id,
                    message: Message { timestamp, text },
                    label: classes
                        .binary_search(&label)
                        .expect("label collected above"),
                    split: parse_split(&split, n)?,
                })
            })
            .collect::<Result<_, CorpusError>>()?;
        Ok(Self { classes, documents })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::parse_tsv(&fs::read_to_string(path)?)
    }
}

impl LabeledUserSet {
    /// Same record layout as documents; timestamp 0 and empty text.
    pub fn to_tsv(&self) -> String {
        self.users
            .iter()
            .map(|u| format!("{}\t0\t{}\t{}\t\n", u.user_id, u.split.as_str(), u.target))
            .collect()
    }

    pub fn parse_tsv(text: &str) -> Result<Self, CorpusError> {
        let mut users: Vec<LabeledUser> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let n = i + 1;
            let [user_id, _, split, label, _] = parse_labeled_line(line, n)?;
            let target: f64 = label.parse().map_err(|_| CorpusError::Malformed {
                line: n,
                reason: format!("bad target `{label}`"),
            })?;
            if users.iter().any(|u| u.user_id == user_id) {
                return Err(CorpusError::Malformed {
                    line: n,
                    reason: format!("second target for user {user_id}"),
                });
            }
            users.push(LabeledUser {
                user_id,
                target,
                split: parse_split(&split, n)?,
            });
        }
        Ok(Self { users })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::parse_tsv(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freeze {
    /// Everything except `U0` trains.
    None,
    /// Only the head trains.
    All,
    /// The head, `W_U`, `W_H` and the insert layer's extended query train.
    RecurrenceOnly,
}

impl Freeze {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Freeze::None),
            "all" => Some(Freeze::All),
            "recurrence_only" => Some(Freeze::RecurrenceOnly),
            _ => None,
        }
    }
}

/// Which hidden state represents a document.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Final layer after `ln_f`.
    Final,
    /// Extract-layer output.
    Extract,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub mode: ForwardMode,
    pub freeze: Freeze,
    pub representation: Representation,
    /// Block cap while training.
    pub train_max_blocks: usize,
    /// Block cap for dev and test instances.
    pub eval_max_blocks: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            patience: 2,
            seed: 0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            mode: ForwardMode::Full,
            freeze: Freeze::None,
            representation: Representation::Final,
            train_max_blocks: 8,
            eval_max_blocks: 16,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        let bad = |m: &str| Err(FinetuneError::InvalidConfig(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 || self.train_max_blocks == 0 || self.eval_max_blocks == 0 {
            return bad("batch_size and block caps must be >= 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    fn trainable(&self, cfg: &model::ModelConfig) -> impl Fn(&str) -> bool + Sync {
        let recurrence = recurrence_param_names(cfg);
        let freeze = self.freeze;
        move |name: &str| {
            if name.starts_with(HEAD_PREFIX) {
                return true;
            }
            match freeze {
                Freeze::None => name != U0,
                Freeze::All => false,
                Freeze::RecurrenceOnly => recurrence.iter().any(|r| r == name),
            }
        }
    }
}

pub const HEAD_PREFIX: &str = "head.";

/// Layer norm plus linear map, stored as `head.ln.g`, `head.ln.b`,
/// `head.w` (`[d, outputs]`) and `head.b`.
pub fn init_head(d_model: usize, outputs: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    p.insert("head.ln.g", Tensor::full(&[d_model], 1.0));
    p.insert("head.ln.b", Tensor::zeros(&[d_model]));
    p.insert(
        "head.w",
        model::normal_tensor(&mut rng, &[d_model, outputs], model::INIT_STD),
    );
    p.insert("head.b", Tensor::zeros(&[outputs]));
    p
}

/// `[1, d]` representation to `[1, outputs]` head output.
pub fn apply_head(tape: &mut Tape, p: &Bound, rep: Var, eps: f64) -> Result<Var, NumericsError> {
    let h = tape.layer_norm(rep, p.var("head.ln.g")?, p.var("head.ln.b")?, eps)?;
    let y = tape.matmul(h, p.var("head.w")?)?;
    tape.add_row(y, p.var("head.b")?)
}

fn merged(model: &HartModel, head: &ParamStore) -> ParamStore {
    let mut all = model.params.clone();
    for (n, t) in head.iter() {
        all.insert(n, t.clone());
    }
    all
}

fn split_merged(all: ParamStore, model: &mut HartModel, head: &mut ParamStore) {
    for (n, t) in all.iter() {
        if n.starts_with(HEAD_PREFIX) {
            *head.get_mut(n).expect("head tensor") = t.clone();
        } else {
            *model.params.get_mut(n).expect("model tensor") = t.clone();
        }
    }
}

/// A labeled document laid out after its author's history.
#[derive(Clone, Debug)]
pub struct DocumentInstance {
    pub user_id: String,
    pub seq: BlockSequence,
    /// Block and position of the labeled message's last token.
    pub position: (usize, usize),
    pub label: usize,
    pub split: TaskSplit,
    /// History messages kept in front of the labeled message.
    pub history_messages: usize,
}

/// Lays out the user's messages older than the labeled one, then the
/// labeled message. When the whole stream exceeds `max_blocks`, the oldest
/// history messages are dropped until it fits. With `with_history = false`
/// only the labeled message is laid out.
pub fn build_document_instance(
    doc: &LabeledDocument,
    history: &UserCorpus,
    vocab: &Vocabulary,
    block_size: usize,
    max_blocks: usize,
    with_history: bool,
) -> Result<DocumentInstance, FinetuneError> {
    let user = history
        .user(&doc.user_id)
        .ok_or_else(|| FinetuneError::UnknownUser(doc.user_id.clone()))?;
    let mut msgs: Vec<Vec<usize>> = if with_history {
        user.messages
            .iter()
            .filter(|m| m.timestamp < doc.message.timestamp)
            .map(|m| vocab.encode(&m.text))
            .collect()
    } else {
        Vec::new()
    };
    let labeled = vocab.encode(&doc.message.text);
    if labeled.is_empty() {
        return Err(FinetuneError::InvalidConfig(format!(
            "labeled message of user {} is empty",
            doc.user_id
        )));
    }
    // stream length with h history messages: tokens + separators
    let len = |m: &[Vec<usize>]| m.iter().map(Vec::len).sum::<usize>() + m.len() + labeled.len();
    let mut start = 0;
    while len(&msgs[start..]) > block_size * max_blocks {
        if start == msgs.len() {
            return Err(FinetuneError::LabeledTruncated {
                user: doc.user_id.clone(),
                cap: max_blocks,
            });
        }
        start += 1;
    }
    let mut kept = msgs.split_off(start);
    let history_messages = kept.len();
    kept.push(labeled);
    let seq = segment_token_messages(&doc.user_id, &kept, block_size, Some(max_blocks))?;
    let position = seq.message_last_token(history_messages).ok_or_else(|| {
        FinetuneError::LabeledTruncated {
            user: doc.user_id.clone(),
            cap: max_blocks,
        }
    })?;
    Ok(DocumentInstance {
        user_id: doc.user_id.clone(),
        seq,
        position,
        label: doc.label,
        split: doc.split,
        history_messages,
    })
}

pub fn build_document_instances(
    data: &LabeledDocumentSet,
    history: &UserCorpus,
    vocab: &Vocabulary,
    block_size: usize,
    max_blocks: usize,
    with_history: bool,
    split: TaskSplit,
) -> Result<Vec<DocumentInstance>, FinetuneError> {
    data.documents
        .iter()
        .filter(|d| d.split == split)
        .map(|d| build_document_instance(d, history, vocab, block_size, max_blocks, with_history))
        .collect()
}

fn document_rep(
    tape: &mut Tape,
    p: &Bound,
    m: &model::ModelConfig,
    inst: &DocumentInstance,
    mode: ForwardMode,
    repr: Representation,
    dropout: Option<&mut Dropout>,
) -> Result<Var, FinetuneError> {
    let fwd = forward_blocks(tape, p, m, &inst.seq, mode, dropout)?;
    let (b, pos) = inst.position;
    let out = fwd.blocks[b]
        .as_ref()
        .ok_or_else(|| FinetuneError::InvalidConfig("labeled block did not run".into()))?;
    let h = match repr {
        Representation::Final => out.final_hidden,
        Representation::Extract => out.hidden[m.extract_layer],
    };
    let n = tape.value(h).rows();
    let mut sel = vec![0.0; n];
    sel[pos] = 1.0;
    let sel = tape.constant(Tensor::new(vec![1, n], sel)?);
    Ok(tape.matmul(sel, h)?)
}

/// Class logits for every instance.
pub fn document_logits(
    model: &HartModel,
    head: &ParamStore,
    data: &[DocumentInstance],
    mode: ForwardMode,
    repr: Representation,
) -> Result<Vec<Vec<f64>>, FinetuneError> {
    let all = merged(model, head);
    data.par_iter()
        .map(|inst| {
            let mut tape = Tape::new();
            let p = all.bind(&mut tape, |_| false);
            let rep = document_rep(&mut tape, &p, &model.config, inst, mode, repr, None)?;
            let y = apply_head(&mut tape, &p, rep, model.config.layer_norm_eps)?;
            Ok(tape.value(y).data().to_vec())
        })
        .collect()
}

/// Argmax with ties to the lowest class id.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn mean_ce(logits: &[Vec<f64>], data: &[DocumentInstance]) -> f64 {
    let s: f64 = logits
        .iter()
        .zip(data)
        .map(|(l, d)| crate::training::neg_log_softmax(l, d.label))
        .sum();
    s / data.len() as f64
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: HartModel,
    pub head: ParamStore,
    /// Dev loss after each epoch; empty without a dev set.
    pub dev_losses: Vec<f64>,
    pub train_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Generic epoch loop shared by both tasks. `loss_fn` builds the summed
/// loss of one instance on the tape; `dev_loss` scores the current weights.
fn train_loop<T: Sync>(
    cfg: &FinetuneConfig,
    model: HartModel,
    head: ParamStore,
    train: &[T],
    loss_fn: impl Fn(&mut Tape, &Bound, &T, Option<&mut Dropout>) -> Result<Var, FinetuneError> + Sync,
    dev_loss: impl Fn(&HartModel, &ParamStore) -> Result<Option<f64>, FinetuneError>,
) -> Result<FinetuneOutcome, FinetuneError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(FinetuneError::NoData("training"));
    }
    let trainable = cfg.trainable(&model.config);
    let mut all = merged(&model, &head);
    let mask: Vec<bool> = all.names().map(&trainable).collect();
    let mut opt = AdamW::new(&all, 0.9, 0.999, 1e-8, cfg.weight_decay);
    let (mut model, mut head) = (model, head);
    let mut best_dev = dev_loss(&model, &head)?.unwrap_or(f64::INFINITY);
    let mut best = all.clone();
    let mut best_epoch = 0;
    let mut since = 0;
    let mut dev_losses = Vec::new();
    let mut train_losses = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut ep_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<(Vec<Vec<f64>>, f64)> = batch
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new();
                    let p = all.bind(&mut tape, &trainable);
                    let mut drop = (model.config.dropout > 0.0).then(|| {
                        Dropout::new(
                            model.config.dropout,
                            derive_seed(cfg.seed, (step << 24) ^ i as u64),
                        )
                    });
                    let l = loss_fn(&mut tape, &p, &train[i], drop.as_mut())?;
                    let v = tape.value(l).data()[0];
                    let g = tape.backward(l)?;
                    Ok((p.collect_grads(&tape, &g), v))
                })
                .collect::<Result<_, FinetuneError>>()?;
            let mut grads: Vec<Vec<f64>> = all.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            let mut loss = 0.0;
            for (g, v) in parts {
                for (a, b) in grads.iter_mut().zip(g) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
                loss += v;
            }
            if !loss.is_finite() {
                return Err(FinetuneError::Diverged { epoch, loss });
            }
            let n = batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.update(&mut all, &grads, &mask, cfg.learning_rate);
            ep_loss += loss;
            step += 1;
        }
        split_merged(all.clone(), &mut model, &mut head);
        train_losses.push(ep_loss / train.len() as f64);
        let Some(d) = dev_loss(&model, &head)? else {
            info!(
                "finetune epoch {epoch}: train {:.4}",
                ep_loss / train.len() as f64
            );
            best = all.clone();
            best_epoch = epoch;
            continue;
        };
        if !d.is_finite() {
            return Err(FinetuneError::Diverged { epoch, loss: d });
        }
        info!(
            "finetune epoch {epoch}: train {:.4} dev {d:.4}",
            ep_loss / train.len() as f64
        );
        dev_losses.push(d);
        if d < best_dev {
            best_dev = d;
            best = all.clone();
            best_epoch = epoch;
            since = 0;
        } else {
            since += 1;
            if since > cfg.patience {
                break;
            }
        }
    }
    split_merged(best, &mut model, &mut head);
    Ok(FinetuneOutcome {
        model,
        head,
        dev_losses,
        train_losses,
        best_epoch,
    })
}

/// Cross-entropy fine-tuning of a document classifier. Early stopping on
/// dev cross-entropy; with an empty dev set every epoch is kept.
pub fn finetune_document(
    cfg: &FinetuneConfig,
    model: HartModel,
    n_classes: usize,
    train: &[DocumentInstance],
    dev: &[DocumentInstance],
) -> Result<FinetuneOutcome, FinetuneError> {
    let head = init_head(
        model.config.d_model,
        n_classes,
        derive_seed(cfg.seed, 0x4ead),
    );
    let mcfg = model.config.clone();
    let (mode, repr) = (cfg.mode, cfg.representation);
    let loss = |tape: &mut Tape, p: &Bound, inst: &DocumentInstance, drop: Option<&mut Dropout>| {
        let rep = document_rep(tape, p, &mcfg, inst, mode, repr, drop)?;
        let y = apply_head(tape, p, rep, mcfg.layer_norm_eps)?;
        Ok(tape.nll(y, &[Some(inst.label)])?)
    };
    let dev_loss = |m: &HartModel, h: &ParamStore| {
        if dev.is_empty() {
            return Ok(None);
        }
        Ok(Some(mean_ce(&document_logits(m, h, dev, mode, repr)?, dev)))
    };
    train_loop(cfg, model, head, train, loss, dev_loss)
}

/// A user's messages segmented under a block cap.
#[derive(Clone, Debug)]
pub struct UserInstance {
    pub user_id: String,
    pub seq: BlockSequence,
    pub target: f64,
    pub split: TaskSplit,
}

pub fn build_user_instances(
    data: &LabeledUserSet,
    corpus: &UserCorpus,
    vocab: &Vocabulary,
    block_size: usize,
    max_blocks: usize,
    split: TaskSplit,
) -> Result<Vec<UserInstance>, FinetuneError> {
    data.users
        .iter()
        .filter(|u| u.split == split)
        .map(|u| {
            let msgs = corpus
                .user(&u.user_id)
                .ok_or_else(|| FinetuneError::UnknownUser(u.user_id.clone()))?;
            if msgs.messages.is_empty() {
                return Err(FinetuneError::NoBlocks(u.user_id.clone()));
            }
            let seq = crate::corpus::segment_into_blocks(
                &u.user_id,
                &msgs.messages,
                vocab,
                block_size,
                max_blocks,
            )?;
            if seq.num_nonpad_blocks == 0 {
                return Err(FinetuneError::NoBlocks(u.user_id.clone()));
            }
            Ok(UserInstance {
                user_id: u.user_id.clone(),
                seq,
                target: u.target,
                split: u.split,
            })
        })
        .collect()
}

/// Mean of the block states `U_1..U_n` as a `[1, d]` node.
pub fn user_rep(
    tape: &mut Tape,
    p: &Bound,
    m: &model::ModelConfig,
    seq: &BlockSequence,
    mode: ForwardMode,
    dropout: Option<&mut Dropout>,
) -> Result<Var, FinetuneError> {
    let fwd = forward_blocks(tape, p, m, seq, mode, dropout)?;
    let states: Vec<Var> = fwd.block_states().collect();
    if states.is_empty() {
        return Err(FinetuneError::NoBlocks(seq.user_id.clone()));
    }
    let mut acc = states[0];
    for &s in &states[1..] {
        acc = tape.add(acc, s)?;
    }
    Ok(tape.scale(acc, 1.0 / states.len() as f64))
}

pub fn user_predictions(
    model: &HartModel,
    head: &ParamStore,
    data: &[UserInstance],
    mode: ForwardMode,
) -> Result<Vec<f64>, FinetuneError> {
    let all = merged(model, head);
    data.par_iter()
        .map(|inst| {
            let mut tape = Tape::new();
            let p = all.bind(&mut tape, |_| false);
            let rep = user_rep(&mut tape, &p, &model.config, &inst.seq, mode, None)?;
            let y = apply_head(&mut tape, &p, rep, model.config.layer_norm_eps)?;
            Ok(tape.value(y).data()[0])
        })
        .collect()
}

/// Squared-error fine-tuning of a user-level regressor.
pub fn finetune_user(
    cfg: &FinetuneConfig,
    model: HartModel,
    train: &[UserInstance],
    dev: &[UserInstance],
) -> Result<FinetuneOutcome, FinetuneError> {
    let mut head = init_head(model.config.d_model, 1, derive_seed(cfg.seed, 0x05e7));
    // start the bias at the training mean so early steps fit the spread
    let mean = train.iter().map(|u| u.target).sum::<f64>() / train.len().max(1) as f64;
    head.get_mut("head.b")?.data_mut()[0] = mean;
    let mcfg = model.config.clone();
    let mode = cfg.mode;
    let loss = |tape: &mut Tape, p: &Bound, inst: &UserInstance, drop: Option<&mut Dropout>| {
        let rep = user_rep(tape, p, &mcfg, &inst.seq, mode, drop)?;
        let y = apply_head(tape, p, rep, mcfg.layer_norm_eps)?;
        let t = tape.constant(Tensor::full(&[1, 1], inst.target));
        let e = tape.sub(y, t)?;
        let sq = tape.mul(e, e)?;
        Ok(tape.sum(sq))
    };
    let dev_loss = |m: &HartModel, h: &ParamStore| {
        if dev.is_empty() {
            return Ok(None);
        }
        let preds = user_predictions(m, h, dev, mode)?;
        Ok(Some(
            preds
                .iter()
                .zip(dev)
                .map(|(p, u)| (p - u.target).powi(2))
                .sum::<f64>()
                / dev.len() as f64,
        ))
    };
    train_loop(cfg, model, head, train, loss, dev_loss)
}

/// Arithmetic mean of per-message predictions for one user.
pub fn baseline_user_predict(predictions: &[f64]) -> Result<f64, FinetuneError> {
    if predictions.is_empty() {
        return Err(FinetuneError::EmptyPredictions);
    }
    Ok(predictions.iter().sum::<f64>() / predictions.len() as f64)
}
