//! HuLM pre-training: next-token loss over each user's block chain,
//! AdamW with global-norm clipping, and early stopping on dev NLL.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Block, BlockSequence};
use crate::hart::{forward_blocks, run_sequence, ForwardMode, HartModel, SequenceForward, U0};
use crate::model::{Dropout, ModelError};
use crate::numerics::{NumericsError, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training instances")]
    NoData,
}

impl From<crate::corpus::CorpusError> for TrainError {
    fn from(e: crate::corpus::CorpusError) -> Self {
        TrainError::InvalidConfig(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Users per optimizer step.
    pub batch_size: usize,
    pub max_blocks: usize,
    pub epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// `full` or `no_recurrence`.
    pub mode: ForwardMode,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 8,
            max_blocks: 8,
            epochs: 5,
            patience: 2,
            seed: 0,
            weight_decay: 0.01,
            mode: ForwardMode::Full,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            warmup_steps: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.max_blocks == 0 {
            return bad("max_blocks must be >= 1");
        }
        if !matches!(self.mode, ForwardMode::Full | ForwardMode::NoRecurrence) {
            return bad("mode must be full or no_recurrence");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Next-token targets within one block: position `p` predicts `p + 1`
/// when that position is real. PAD is never a target; INSEP is.
pub fn block_targets(block: &Block) -> Vec<Option<usize>> {
    let n = block.token_ids.len();
    (0..n)
        .map(|p| {
            (p + 1 < n && block.attention_mask[p] == 1 && block.attention_mask[p + 1] == 1)
                .then(|| block.token_ids[p + 1])
        })
        .collect()
}

/// Summed NLL node over every block that ran, and the number of targets.
pub fn hulm_loss_tape(
    tape: &mut Tape,
    fwd: &SequenceForward,
    seq: &BlockSequence,
) -> Result<(Option<Var>, usize), TrainError> {
    if fwd.blocks.len() != seq.blocks.len() {
        return Err(NumericsError::ShapeMismatch(format!(
            "{} block outputs for {} blocks",
            fwd.blocks.len(),
            seq.blocks.len()
        ))
        .into());
    }
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (out, block) in fwd.blocks.iter().zip(&seq.blocks) {
        let Some(out) = out else { continue };
        let targets = block_targets(block);
        let n = targets.iter().filter(|t| t.is_some()).count();
        if n == 0 {
            continue;
        }
        let l = tape.nll(out.logits, &targets)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
        count += n;
    }
    Ok((total, count))
}

/// Summed NLL and target count from plain logits, one entry per block
/// (`None` for blocks that did not run).
pub fn hulm_loss_sum(
    logits: &[Option<Tensor>],
    seq: &BlockSequence,
) -> Result<(f64, usize), TrainError> {
    if logits.len() != seq.blocks.len() {
        return Err(NumericsError::ShapeMismatch(format!(
            "{} logit blocks for {} blocks",
            logits.len(),
            seq.blocks.len()
        ))
        .into());
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (l, block) in logits.iter().zip(&seq.blocks) {
        let Some(l) = l else { continue };
        if l.rows() != block.token_ids.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "logits {:?} for block of {}",
                l.shape(),
                block.token_ids.len()
            ))
            .into());
        }
        for (p, t) in block_targets(block).into_iter().enumerate() {
            if let Some(t) = t {
                sum += neg_log_softmax(l.row(p), t);
                count += 1;
            }
        }
    }
    Ok((sum, count))
}

/// Mean NLL and target count; see [`hulm_loss_sum`].
pub fn hulm_loss(
    logits: &[Option<Tensor>],
    seq: &BlockSequence,
) -> Result<(f64, usize), TrainError> {
    let (sum, count) = hulm_loss_sum(logits, seq)?;
    Ok((if count == 0 { 0.0 } else { sum / count as f64 }, count))
}

pub(crate) fn neg_log_softmax(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

/// Token-weighted NLL of `model` over `seqs`: `(sum, count)`.
pub fn evaluate_nll(
    model: &HartModel,
    seqs: &[BlockSequence],
    mode: ForwardMode,
) -> Result<(f64, usize), TrainError> {
    let parts: Vec<(f64, usize)> = seqs
        .par_iter()
        .map(|s| {
            let out = run_sequence(model, s, mode)?;
            hulm_loss_sum(&out.logits, s)
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(parts
        .into_iter()
        .fold((0.0, 0), |(a, n), (b, m)| (a + b, n + m)))
}

/// Adam moments for one parameter store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter with `trainable[i]`. Others, including
    /// their moments, are left untouched. Decay applies to matrices only.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &[Vec<f64>],
        trainable: &[bool],
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let decay = if p.shape().len() == 2 {
                self.weight_decay
            } else {
                0.0
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + decay * *w);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Per-user gradient of the summed loss: `(grads, loss_sum, count)`.
pub fn sequence_gradients(
    model: &HartModel,
    seq: &BlockSequence,
    mode: ForwardMode,
    trainable: &(dyn Fn(&str) -> bool + Sync),
    dropout_seed: Option<u64>,
) -> Result<(Vec<Vec<f64>>, f64, usize), TrainError> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, trainable);
    let mut dropout = dropout_seed
        .filter(|_| model.config.dropout > 0.0)
        .map(|s| Dropout::new(model.config.dropout, s));
    let fwd = forward_blocks(
        &mut tape,
        &bound,
        &model.config,
        seq,
        mode,
        dropout.as_mut(),
    )?;
    let (loss, count) = hulm_loss_tape(&mut tape, &fwd, seq)?;
    match loss {
        Some(l) => {
            let value = tape.value(l).data()[0];
            let g = tape.backward(l)?;
            Ok((bound.collect_grads(&tape, &g), value, count))
        }
        None => Ok((
            model
                .params
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect(),
            0.0,
            0,
        )),
    }
}

/// Mixes the master seed with a counter (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_nll: f64,
    pub dev_nll: Option<f64>,
    pub ppl: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: HartModel,
    pub optimizer: AdamW,
    pub log: Vec<LogRecord>,
    /// Epoch (1-based) whose parameters were kept; 0 if none improved.
    pub best_epoch: usize,
    pub best_dev_nll: f64,
    pub steps: usize,
}

/// Trains every parameter except `U0`. Dev NLL is measured after each
/// epoch in the training mode and the best epoch's parameters are kept.
pub fn pretrain(
    cfg: &TrainConfig,
    init: HartModel,
    train: &[BlockSequence],
    dev: &[BlockSequence],
    mut on_log: impl FnMut(&LogRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::NoData);
    }
    let trainable = |name: &str| name != U0;
    let mask: Vec<bool> = init.params.names().map(trainable).collect();
    let mut model = init;
    let mut opt = AdamW::new(
        &model.params,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
        cfg.weight_decay,
    );
    let mut log = Vec::new();
    let dev_nll = |m: &HartModel| -> Result<f64, TrainError> {
        let (s, n) = evaluate_nll(m, dev, cfg.mode)?;
        Ok(if n == 0 { f64::NAN } else { s / n as f64 })
    };

    let mut best = (model.params.clone(), opt.clone());
    let mut best_dev = if dev.is_empty() {
        f64::INFINITY
    } else {
        dev_nll(&model)?
    };
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut ep_sum, mut ep_count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let parts: Vec<(Vec<Vec<f64>>, f64, usize)> = batch
                .par_iter()
                .map(|&i| {
                    let salt = ((step as u64) << 20) ^ i as u64;
                    sequence_gradients(
                        &model,
                        &train[i],
                        cfg.mode,
                        &trainable,
                        Some(derive_seed(cfg.seed, salt)),
                    )
                })
                .collect::<Result<_, _>>()?;
            let mut grads: Vec<Vec<f64>> = model
                .params
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect();
            let (mut sum, mut count) = (0.0, 0usize);
            for (g, s, n) in parts {
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                }
                sum += s;
                count += n;
            }
            if count == 0 {
                continue;
            }
            let loss = sum / count as f64;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss });
            }
            grads.iter_mut().flatten().for_each(|g| *g /= count as f64);
            let norm = clip_global_norm(&mut grads, cfg.grad_clip);
            let lr = if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
                cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64
            } else {
                cfg.learning_rate
            };
            opt.update(&mut model.params, &grads, &mask, lr);
            if !model.params.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            step += 1;
            ep_sum += sum;
            ep_count += count;
            debug!("epoch {epoch} step {step} loss {loss:.4} grad_norm {norm:.3}");
        }
        let train_nll = if ep_count == 0 {
            f64::NAN
        } else {
            ep_sum / ep_count as f64
        };
        let d = if dev.is_empty() {
            None
        } else {
            Some(dev_nll(&model)?)
        };
        if let Some(d) = d {
            if !d.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    loss: d,
                });
            }
        }
        let rec = LogRecord {
            step,
            epoch,
            train_nll,
            dev_nll: d,
            ppl: d.map(f64::exp),
        };
        info!("epoch {epoch}: train_nll {train_nll:.4} dev_nll {:?}", d);
        on_log(&rec);
        log.push(rec);
        match d {
            Some(d) if d < best_dev => {
                best_dev = d;
                best = (model.params.clone(), opt.clone());
                best_epoch = epoch;
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best > cfg.patience {
                    break;
                }
            }
            None => {
                best = (model.params.clone(), opt.clone());
                best_epoch = epoch;
            }
        }
    }
    model.params = best.0;
    Ok(TrainOutcome {
        model,
        optimizer: best.1,
        log,
        best_epoch,
        best_dev_nll: best_dev,
        steps: step,
    })
}

/// Segments every user of `corpus` for training with the given block cap.
pub fn build_instances(
    corpus: &crate::corpus::UserCorpus,
    vocab: &crate::corpus::Vocabulary,
    block_size: usize,
    max_blocks: usize,
) -> Result<Vec<BlockSequence>, TrainError> {
    corpus
        .users
        .iter()
        .map(|u| {
            Ok(crate::corpus::segment_into_blocks(
                &u.user_id,
                &u.messages,
                vocab,
                block_size,
                max_blocks,
            )?)
        })
        .collect()
}
