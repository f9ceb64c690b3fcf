//! Recurrent user state threaded through a user's blocks.
//!
//! For block `i` the insert layer's query sees `U_{i-1}`; after the block,
//! `U_i = tanh(U_{i-1} W_U + pool(H^E) W_H)` with `pool` the masked mean of
//! the extract-layer outputs. The extended query weight is stored as two
//! halves: the insert layer's own `attn.w_q` (hidden half) and
//! [`W_Q_USER`] (user half), so `[h; u] W_q = h w_q + u w_q_user`.

use rayon::prelude::*;

use crate::corpus::{Block, BlockSequence};
use crate::model::{self, forward_block, BlockForward, Dropout, ModelConfig, ModelError};
use crate::numerics::{Bound, NumericsError, ParamStore, Tape, Tensor, Var};

pub const W_U: &str = "hart.w_u";
pub const W_H: &str = "hart.w_h";
pub const W_Q_USER: &str = "hart.w_q_user";
pub const U0: &str = "hart.u0";

/// Names of the recurrence parameters plus the insert layer's query, i.e.
/// everything that stays trainable under the recurrence-only freeze.
pub fn recurrence_param_names(cfg: &ModelConfig) -> Vec<String> {
    vec![
        W_U.to_string(),
        W_H.to_string(),
        W_Q_USER.to_string(),
        model::layer_param(cfg.insert_layer, "attn.w_q"),
        model::layer_param(cfg.insert_layer, "attn.b_q"),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// State recurs across blocks.
    Full,
    /// Only the last non-pad block runs, conditioned on `U0`.
    NoHistory,
    /// Every block conditioned on `U0`; the trajectory is `U0` throughout.
    FrozenState,
    /// Every block conditioned on `U0`. Per-block states are still computed
    /// from `U0` and returned, but never fed to a later block.
    NoRecurrence,
}

impl ForwardMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Self::Full),
            "no_history" => Some(Self::NoHistory),
            "frozen_state" => Some(Self::FrozenState),
            "no_recurrence" => Some(Self::NoRecurrence),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoHistory => "no_history",
            Self::FrozenState => "frozen_state",
            Self::NoRecurrence => "no_recurrence",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateInit {
    Zeros,
    CorpusAverage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserState {
    pub u: Vec<f64>,
    /// 0 for `U0`, otherwise the 1-based index of the block just absorbed.
    pub block_index: usize,
}

/// Transformer weights plus recurrence parameters.
#[derive(Clone, Debug)]
pub struct HartModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl HartModel {
    /// Fresh model. New matrices are drawn from N(0, 0.02²); `U0` starts at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut params = model::init_transformer(&config, seed)?;
        let d = config.d_model;
        let mut rng =
            <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x4841_5254);
        params.insert(
            W_U,
            model::normal_tensor(&mut rng, &[d, d], model::INIT_STD),
        );
        params.insert(
            W_H,
            model::normal_tensor(&mut rng, &[d, d], model::INIT_STD),
        );
        params.insert(
            W_Q_USER,
            model::normal_tensor(&mut rng, &[d, d], model::INIT_STD),
        );
        params.insert(U0, Tensor::zeros(&[1, d]));
        Ok(Self { config, params })
    }

    /// Wraps existing tensors after checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let reference = Self::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(ModelError::Invalid(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            got.ensure_finite(name)?;
        }
        if params.len() != reference.params.len() {
            return Err(ModelError::Invalid(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn u0(&self) -> &[f64] {
        self.params.get(U0).expect("u0 present").data()
    }

    pub fn set_u0(&mut self, u: &[f64]) -> Result<(), ModelError> {
        let t = self.params.get_mut(U0)?;
        if u.len() != t.numel() {
            return Err(ModelError::Invalid(format!(
                "u0 of length {} for d_model {}",
                u.len(),
                t.numel()
            )));
        }
        t.data_mut().copy_from_slice(u);
        Ok(())
    }

    /// Zeroes the user-state pathway: `W_U`, `W_H` and the query's user half.
    pub fn zero_user_pathway(&mut self) {
        for name in [W_U, W_H, W_Q_USER] {
            for v in self
                .params
                .get_mut(name)
                .expect("hart params present")
                .data_mut()
            {
                *v = 0.0;
            }
        }
    }
}

/// `U0` under the requested initialization. Corpus average is the mean of
/// extract-layer outputs (no user conditioning) over every non-PAD position
/// of `sample`.
pub fn init_user_state(
    model: &HartModel,
    mode: StateInit,
    sample: Option<&[BlockSequence]>,
) -> Result<UserState, ModelError> {
    let d = model.config.d_model;
    match mode {
        StateInit::Zeros => Ok(UserState {
            u: vec![0.0; d],
            block_index: 0,
        }),
        StateInit::CorpusAverage => {
            let sample = sample.ok_or_else(|| {
                ModelError::Invalid("corpus_average needs a sample corpus".into())
            })?;
            let blocks: Vec<&Block> = sample
                .iter()
                .flat_map(|s| s.nonpad_blocks().map(|(_, b)| b))
                .collect();
            let partial: Vec<(Vec<f64>, usize)> = blocks
                .par_iter()
                .map(|b| {
                    let mut tape = Tape::new();
                    let bound = model.params.bind(&mut tape, |_| false);
                    let out = model::forward_block_plain(
                        &mut tape,
                        &bound,
                        &model.config,
                        &b.token_ids,
                        &b.attention_mask,
                    )?;
                    let h = tape.value(out.hidden[model.config.extract_layer]);
                    let mut acc = vec![0.0; d];
                    let mut n = 0;
                    for (p, &m) in b.attention_mask.iter().enumerate() {
                        if m == 1 {
                            for (a, x) in acc.iter_mut().zip(h.row(p)) {
                                *a += x;
                            }
                            n += 1;
                        }
                    }
                    Ok((acc, n))
                })
                .collect::<Result<_, ModelError>>()?;
            let mut sum = vec![0.0; d];
            let mut count = 0usize;
            for (acc, n) in partial {
                for (s, a) in sum.iter_mut().zip(acc) {
                    *s += a;
                }
                count += n;
            }
            if count == 0 {
                return Err(ModelError::Invalid(
                    "corpus_average sample has no tokens".into(),
                ));
            }
            Ok(UserState {
                u: sum.into_iter().map(|s| s / count as f64).collect(),
                block_index: 0,
            })
        }
    }
}

/// Masked mean of `hidden` rows over non-PAD positions, as a `[1, d]` node.
pub fn pool_extract(
    tape: &mut Tape,
    hidden: Var,
    attention_mask: &[u8],
) -> Result<Var, ModelError> {
    let n = attention_mask.iter().filter(|&&m| m == 1).count();
    if n == 0 {
        return Err(ModelError::AllPadBlock);
    }
    if tape.value(hidden).rows() != attention_mask.len() {
        return Err(NumericsError::ShapeMismatch(format!(
            "pool over {} rows with mask of {}",
            tape.value(hidden).rows(),
            attention_mask.len()
        ))
        .into());
    }
    let w: Vec<f64> = attention_mask
        .iter()
        .map(|&m| if m == 1 { 1.0 / n as f64 } else { 0.0 })
        .collect();
    let w = tape.constant(Tensor::new(vec![1, w.len()], w)?);
    Ok(tape.matmul(w, hidden)?)
}

/// `tanh(u_prev W_U + pooled W_H)` on `[1, d]` rows.
pub fn update_user_state(
    tape: &mut Tape,
    u_prev: Var,
    pooled: Var,
    w_u: Var,
    w_h: Var,
) -> Result<Var, NumericsError> {
    let a = tape.matmul(u_prev, w_u)?;
    let b = tape.matmul(pooled, w_h)?;
    let s = tape.add(a, b)?;
    Ok(tape.tanh(s))
}

/// `h w_q + b_q + u w_q_user`, with the `[1, d]` user row broadcast to every
/// position. Equal to `[h; u] W_q + b_q` for the stacked `W_q`.
pub fn user_conditioned_query(
    tape: &mut Tape,
    h: Var,
    u: Var,
    w_q: Var,
    w_q_user: Var,
    b_q: Var,
) -> Result<Var, NumericsError> {
    let q = tape.matmul(h, w_q)?;
    let q = tape.add_row(q, b_q)?;
    let uq = tape.matmul(u, w_q_user)?;
    tape.add_row(q, uq)
}

/// Tape handles produced by [`forward_blocks`].
#[derive(Clone, Debug)]
pub struct SequenceForward {
    /// Per block; `None` for PAD blocks and blocks a mode does not run.
    pub blocks: Vec<Option<BlockForward>>,
    /// `U0` followed by one state per processed block, with its 1-based index.
    pub states: Vec<(usize, Var)>,
}

impl SequenceForward {
    /// States after each processed block (the trajectory without `U0`).
    pub fn block_states(&self) -> impl Iterator<Item = Var> + '_ {
        self.states.iter().skip(1).map(|&(_, v)| v)
    }
}

/// Block-by-block forward pass over one user's sequence.
pub fn forward_blocks(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    seq: &BlockSequence,
    mode: ForwardMode,
    mut dropout: Option<&mut Dropout>,
) -> Result<SequenceForward, ModelError> {
    let last_nonpad = seq
        .blocks
        .iter()
        .rposition(|b| !b.is_pad_block)
        .ok_or(ModelError::EmptySequence)?;
    let u0 = p.var(U0)?;
    let w_u = p.var(W_U)?;
    let w_h = p.var(W_H)?;
    let mut blocks = Vec::with_capacity(seq.blocks.len());
    let mut states = vec![(0, u0)];
    let mut u = u0;
    for (i, block) in seq.blocks.iter().enumerate() {
        let skip = block.is_pad_block || (mode == ForwardMode::NoHistory && i != last_nonpad);
        if skip {
            blocks.push(None);
            continue;
        }
        let u_in = if mode == ForwardMode::Full { u } else { u0 };
        let out = forward_block(
            tape,
            p,
            cfg,
            &block.token_ids,
            &block.attention_mask,
            Some(u_in),
            dropout.as_deref_mut(),
        )?;
        let next = match mode {
            ForwardMode::FrozenState => u0,
            _ => {
                let pooled =
                    pool_extract(tape, out.hidden[cfg.extract_layer], &block.attention_mask)?;
                update_user_state(tape, u_in, pooled, w_u, w_h)?
            }
        };
        u = next;
        states.push((i + 1, next));
        blocks.push(Some(out));
    }
    Ok(SequenceForward { blocks, states })
}

/// Gradient-free forward result.
#[derive(Clone, Debug)]
pub struct SequenceOutput {
    /// `[block_size, vocab]` logits per block; `None` where the block did not run.
    pub logits: Vec<Option<Tensor>>,
    /// Final (post `ln_f`) hidden states per block.
    pub final_hidden: Vec<Option<Tensor>>,
    pub trajectory: Vec<UserState>,
}

pub fn run_sequence(
    model: &HartModel,
    seq: &BlockSequence,
    mode: ForwardMode,
) -> Result<SequenceOutput, ModelError> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, |_| false);
    let fwd = forward_blocks(&mut tape, &bound, &model.config, seq, mode, None)?;
    let logits = fwd
        .blocks
        .iter()
        .map(|b| b.as_ref().map(|b| tape.value(b.logits).clone()))
        .collect();
    let final_hidden = fwd
        .blocks
        .iter()
        .map(|b| b.as_ref().map(|b| tape.value(b.final_hidden).clone()))
        .collect();
    let trajectory = fwd
        .states
        .iter()
        .map(|&(i, v)| UserState {
            u: tape.value(v).data().to_vec(),
            block_index: i,
        })
        .collect();
    Ok(SequenceOutput {
        logits,
        final_hidden,
        trajectory,
    })
}

/// [`run_sequence`] over many users in parallel; output order follows input.
pub fn run_batch(
    model: &HartModel,
    seqs: &[BlockSequence],
    mode: ForwardMode,
) -> Result<Vec<SequenceOutput>, ModelError> {
    seqs.par_iter()
        .map(|s| run_sequence(model, s, mode))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::segment_token_messages;

    fn tiny() -> HartModel {
        let mut cfg = ModelConfig::new(12, 8, 2, 2, 6);
        cfg.dropout = 0.0;
        HartModel::init(cfg, 3).unwrap()
    }

    #[test]
    fn pool_two_rows() {
        let mut tape = Tape::new();
        let h = tape.constant(
            Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0], vec![9.0, -9.0]]).unwrap(),
        );
        let p = pool_extract(&mut tape, h, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 2.0]);
        assert!(matches!(
            pool_extract(&mut tape, h, &[0, 0, 0]),
            Err(ModelError::AllPadBlock)
        ));
    }

    #[test]
    fn update_with_identity_recurrence() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::new(vec![1, 2], vec![0.1, 0.0]).unwrap());
        let pooled = tape.constant(Tensor::new(vec![1, 2], vec![5.0, -3.0]).unwrap());
        let wu = tape.constant(Tensor::identity(2));
        let wh = tape.constant(Tensor::zeros(&[2, 2]));
        let next = update_user_state(&mut tape, u, pooled, wu, wh).unwrap();
        let got = tape.value(next).data();
        assert!((got[0] - 0.09966799462495582).abs() < 1e-15);
        assert_eq!(got[1], 0.0);
    }

    #[test]
    fn query_two_dim_hand_case() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let u = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let wq = tape.constant(Tensor::identity(2));
        let wqu = tape.constant(Tensor::identity(2));
        let b = tape.constant(Tensor::zeros(&[2]));
        let q = user_conditioned_query(&mut tape, h, u, wq, wqu, b).unwrap();
        assert_eq!(tape.value(q).data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_input_query_is_bias() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[3, 2]));
        let u = tape.constant(Tensor::zeros(&[1, 2]));
        let wq = tape.constant(Tensor::full(&[2, 2], 0.7));
        let wqu = tape.constant(Tensor::full(&[2, 2], -0.3));
        let b = tape.constant(Tensor::row_vector(vec![0.25, -2.0]));
        let q = user_conditioned_query(&mut tape, h, u, wq, wqu, b).unwrap();
        assert_eq!(tape.value(q).data(), &[0.25, -2.0, 0.25, -2.0, 0.25, -2.0]);
    }

    #[test]
    fn pad_blocks_carry_state_and_no_history_runs_last_block() {
        let m = tiny();
        let seq =
            segment_token_messages("u", &[vec![3, 4, 5], vec![6, 7, 8, 9]], 6, Some(4)).unwrap();
        assert_eq!(seq.num_nonpad_blocks, 2);
        let full = run_sequence(&m, &seq, ForwardMode::Full).unwrap();
        assert_eq!(full.trajectory.len(), 3);
        assert!(full.logits[2].is_none() && full.logits[3].is_none());
        let nh = run_sequence(&m, &seq, ForwardMode::NoHistory).unwrap();
        assert!(nh.logits[0].is_none() && nh.logits[1].is_some());
        let frozen = run_sequence(&m, &seq, ForwardMode::FrozenState).unwrap();
        assert!(frozen.trajectory.iter().all(|s| s.u == m.u0()));
    }

    #[test]
    fn zeros_init_is_zero_vector() {
        let m = tiny();
        let s = init_user_state(&m, StateInit::Zeros, None).unwrap();
        assert_eq!(s.u, vec![0.0; 8]);
        assert!(init_user_state(&m, StateInit::CorpusAverage, None).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [
            ForwardMode::Full,
            ForwardMode::NoHistory,
            ForwardMode::FrozenState,
            ForwardMode::NoRecurrence,
        ] {
            assert_eq!(ForwardMode::parse(m.as_str()), Some(m));
        }
    }
}
