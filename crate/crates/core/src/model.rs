//! GPT-2 style causal decoder over a single block.
//!
//! Pre-layer-norm residual blocks, learned absolute position embeddings that
//! restart at zero for every block, and an unembedding tied to the token
//! embedding. Row-vector convention throughout: activations are `[n, d]`
//! and weights are `[d_in, d_out]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Bound, NumericsError, ParamStore, Tape, Tensor, Var};

/// Standard deviation for freshly initialized weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("block has {got} positions, model expects {expected}")]
    BlockLength { got: usize, expected: usize },
    #[error("sequence has no non-pad blocks")]
    EmptySequence,
    #[error("cannot pool a block without non-pad positions")]
    AllPadBlock,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Positions per block.
    pub block_size: usize,
    /// 1-based layer whose query transform sees the user state.
    pub insert_layer: usize,
    /// 1-based layer whose outputs update the user state.
    pub extract_layer: usize,
    /// Cap on blocks per training instance.
    pub max_blocks: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Insert at layer 2 and extract at the penultimate layer when the
    /// depth allows it; shallower models fall back to layers 1 and
    /// `n_layers - 1` (or `n_layers` for a 2-layer model).
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        block_size: usize,
    ) -> Self {
        let (insert_layer, extract_layer) = if n_layers >= 4 {
            (2, n_layers - 1)
        } else if n_layers == 3 {
            (1, 2)
        } else {
            (1, n_layers)
        };
        Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            block_size,
            insert_layer,
            extract_layer,
            max_blocks: 8,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(1 <= self.insert_layer
            && self.insert_layer < self.extract_layer
            && self.extract_layer <= self.n_layers)
        {
            return bad(format!(
                "need 1 <= insert_layer ({}) < extract_layer ({}) <= n_layers ({})",
                self.insert_layer, self.extract_layer, self.n_layers
            ));
        }
        if self.block_size < 2 {
            return bad("block_size must be >= 2".into());
        }
        if self.max_blocks == 0 {
            return bad("max_blocks must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_width(&self) -> usize {
        4 * self.d_model
    }
}

/// Parameter name for layer `l` (1-based).
pub fn layer_param(l: usize, name: &str) -> String {
    format!("h{l}.{name}")
}

pub const TOKEN_EMBEDDING: &str = "wte";
pub const POSITION_EMBEDDING: &str = "wpe";

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = dist.sample(rng);
    }
    t
}

/// Randomly initialized transformer weights (no user-state extras).
pub fn init_transformer(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let f = cfg.mlp_width();
    let mut p = ParamStore::new();
    p.insert(
        TOKEN_EMBEDDING,
        normal_tensor(&mut rng, &[cfg.vocab_size, d], INIT_STD),
    );
    p.insert(
        POSITION_EMBEDDING,
        normal_tensor(&mut rng, &[cfg.block_size, d], INIT_STD),
    );
    for l in 1..=cfg.n_layers {
        p.insert(layer_param(l, "ln1.g"), Tensor::full(&[d], 1.0));
        p.insert(layer_param(l, "ln1.b"), Tensor::zeros(&[d]));
        for w in ["q", "k", "v", "o"] {
            p.insert(
                layer_param(l, &format!("attn.w_{w}")),
                normal_tensor(&mut rng, &[d, d], INIT_STD),
            );
            p.insert(layer_param(l, &format!("attn.b_{w}")), Tensor::zeros(&[d]));
        }
        p.insert(layer_param(l, "ln2.g"), Tensor::full(&[d], 1.0));
        p.insert(layer_param(l, "ln2.b"), Tensor::zeros(&[d]));
        p.insert(
            layer_param(l, "mlp.w_fc"),
            normal_tensor(&mut rng, &[d, f], INIT_STD),
        );
        p.insert(layer_param(l, "mlp.b_fc"), Tensor::zeros(&[f]));
        p.insert(
            layer_param(l, "mlp.w_proj"),
            normal_tensor(&mut rng, &[f, d], INIT_STD),
        );
        p.insert(layer_param(l, "mlp.b_proj"), Tensor::zeros(&[d]));
    }
    p.insert("ln_f.g", Tensor::full(&[d], 1.0));
    p.insert("ln_f.b", Tensor::zeros(&[d]));
    Ok(p)
}

/// Inverted dropout driven by a seeded generator.
#[derive(Debug)]
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        use rand::Rng;
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.p);
        let shape = tape.value(x).shape().to_vec();
        let mut mask = Tensor::zeros(&shape);
        for v in mask.data_mut() {
            *v = if self.rng.gen::<f64>() < self.p {
                0.0
            } else {
                keep
            };
        }
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

fn maybe_dropout(
    dropout: &mut Option<&mut Dropout>,
    tape: &mut Tape,
    x: Var,
) -> Result<Var, NumericsError> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// `true` where query `i` must not see key `j`: future positions and PAD keys.
pub fn causal_pad_mask(attention_mask: &[u8]) -> Vec<bool> {
    let n = attention_mask.len();
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = j > i || attention_mask[j] == 0;
        }
    }
    m
}

/// Multi-head scaled dot-product attention. `q`, `k`, `v` are `[n, d]`;
/// `masked` is `[n*n]` with `true` for disallowed pairs. Returns the head
/// outputs concatenated to `[n, d]` (before the output projection).
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    masked: &[bool],
    n_heads: usize,
) -> Result<Var, NumericsError> {
    let d = tape.value(q).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                tape.slice_cols(k, h * dh, (h + 1) * dh)?,
                tape.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.masked_fill(scores, masked)?;
        let weights = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        tape.concat_cols(&heads)
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

#[derive(Clone, Debug)]
pub struct BlockForward {
    /// `[block_size, vocab_size]`.
    pub logits: Var,
    /// Residual stream: `hidden[0]` is the embedding sum, `hidden[l]` the
    /// output of layer `l`.
    pub hidden: Vec<Var>,
    /// Final layer-normed states fed to the unembedding.
    pub final_hidden: Var,
}

/// One block through the decoder. With `user_state = Some(u)` (a `[1, d]`
/// node), the insert layer's query becomes the user-conditioned query.
pub fn forward_block(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    token_ids: &[usize],
    attention_mask: &[u8],
    user_state: Option<Var>,
    mut dropout: Option<&mut Dropout>,
) -> Result<BlockForward, ModelError> {
    let n = token_ids.len();
    if n != cfg.block_size || attention_mask.len() != n {
        return Err(ModelError::BlockLength {
            got: n,
            expected: cfg.block_size,
        });
    }
    if let Some(&id) = token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let eps = cfg.layer_norm_eps;
    let wte = p.var(TOKEN_EMBEDDING)?;
    let tok = tape.gather(wte, token_ids)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather(p.var(POSITION_EMBEDDING)?, &positions)?;
    let mut x = tape.add(tok, pos)?;
    x = maybe_dropout(&mut dropout, tape, x)?;
    let masked = causal_pad_mask(attention_mask);

    let mut hidden = vec![x];
    for l in 1..=cfg.n_layers {
        let v = |name: &str| p.var(&layer_param(l, name));
        let h = tape.layer_norm(x, v("ln1.g")?, v("ln1.b")?, eps)?;
        let q = match user_state {
            Some(u) if l == cfg.insert_layer => crate::hart::user_conditioned_query(
                tape,
                h,
                u,
                v("attn.w_q")?,
                p.var(crate::hart::W_Q_USER)?,
                v("attn.b_q")?,
            )?,
            _ => linear(tape, h, v("attn.w_q")?, v("attn.b_q")?)?,
        };
        let k = linear(tape, h, v("attn.w_k")?, v("attn.b_k")?)?;
        let val = linear(tape, h, v("attn.w_v")?, v("attn.b_v")?)?;
        let a = attention(tape, q, k, val, &masked, cfg.n_heads)?;
        let a = linear(tape, a, v("attn.w_o")?, v("attn.b_o")?)?;
        let a = maybe_dropout(&mut dropout, tape, a)?;
        x = tape.add(x, a)?;

        let h = tape.layer_norm(x, v("ln2.g")?, v("ln2.b")?, eps)?;
        let m = linear(tape, h, v("mlp.w_fc")?, v("mlp.b_fc")?)?;
        let m = tape.gelu(m);
        let m = linear(tape, m, v("mlp.w_proj")?, v("mlp.b_proj")?)?;
        let m = maybe_dropout(&mut dropout, tape, m)?;
        x = tape.add(x, m)?;
        hidden.push(x);
    }
    let final_hidden = tape.layer_norm(x, p.var("ln_f.g")?, p.var("ln_f.b")?, eps)?;
    let logits = tape.matmul_t(final_hidden, wte)?;
    Ok(BlockForward {
        logits,
        hidden,
        final_hidden,
    })
}

/// The standard language model on one block: no user state anywhere.
pub fn forward_block_plain(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    token_ids: &[usize],
    attention_mask: &[u8],
) -> Result<BlockForward, ModelError> {
    forward_block(tape, p, cfg, token_ids, attention_mask, None, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let ok = ModelConfig::new(50, 16, 2, 2, 16);
        assert!(ok.validate().is_ok());
        assert_eq!((ok.insert_layer, ok.extract_layer), (1, 2));
        let deep = ModelConfig::new(50, 16, 12, 2, 16);
        assert_eq!((deep.insert_layer, deep.extract_layer), (2, 11));
        assert!(ModelConfig {
            n_heads: 3,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            insert_layer: 2,
            extract_layer: 2,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            extract_layer: 3,
            ..ok
        }
        .validate()
        .is_err());
    }

    #[test]
    fn single_position_attention_returns_value_row() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::row_vector(vec![0.3, -1.0]));
        let k = tape.constant(Tensor::row_vector(vec![2.0, 0.5]));
        let v = tape.constant(Tensor::row_vector(vec![7.0, -3.0]));
        let out = attention(&mut tape, q, k, v, &[false], 1).unwrap();
        assert_eq!(tape.value(out).data(), &[7.0, -3.0]);
    }

    #[test]
    fn identical_keys_split_attention_evenly() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.4, 2.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let out = attention(&mut tape, q, k, v, &[false; 4], 1).unwrap();
        for x in tape.value(out).row(1) {
            assert!((x - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let cfg = ModelConfig::new(10, 8, 2, 2, 4);
        let p = init_transformer(&cfg, 0).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| false);
        let r = forward_block_plain(&mut tape, &b, &cfg, &[1, 2, 10, 0], &[1, 1, 1, 0]);
        assert!(matches!(r, Err(ModelError::TokenOutOfRange { id: 10, .. })));
    }
}
