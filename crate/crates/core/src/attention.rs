//! Cross-attention block and depth-1 self-attention encoders.
//!
//! One block is multi-head attention followed by residual + LayerNorm, then a
//! gated feed-forward with its own residual + LayerNorm (post-norm order):
//!
//! ```text
//! x = LN(Q + MHA(Q, K, V, mask))
//! y = LN(x + W2 · drop(a ⊙ silu(b)))     where [a | b] = W1 · x
//! ```

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub dropout_p: f64,
    pub ffn_mult: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0,1)", self.dropout_p)));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }
}

/// Weight matrix `[fan_in, fan_out]` drawn from `Uniform(±1/sqrt(fan_in))`.
pub fn uniform_weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = 1.0 / libm::sqrt(fan_in as f64);
    let dist = Uniform::new_inclusive(-a, a).expect("valid bounds");
    Tensor::from_fn([fan_in, fan_out], |_| dist.sample(rng))
}

/// Parameter handles of one cross-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionBlock {
    pub cfg: AttentionConfig,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ffn_in_w: ParamId,
    pub ffn_in_b: ParamId,
    pub ffn_out_w: ParamId,
    pub ffn_out_b: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

/// Output of multi-head attention plus the per-head weight matrices.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl CrossAttentionBlock {
    /// Registers a fresh block under `prefix` (e.g. `"fusion"`).
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let h = cfg.hidden();
        let mut reg = |name: &str, t: Tensor| store.register(format!("{prefix}.{name}"), t);
        Ok(CrossAttentionBlock {
            cfg,
            wq: reg("attn.wq", uniform_weight(rng, d, d))?,
            bq: reg("attn.bq", Tensor::zeros([d]))?,
            wk: reg("attn.wk", uniform_weight(rng, d, d))?,
            bk: reg("attn.bk", Tensor::zeros([d]))?,
            wv: reg("attn.wv", uniform_weight(rng, d, d))?,
            bv: reg("attn.bv", Tensor::zeros([d]))?,
            wo: reg("attn.wo", uniform_weight(rng, d, d))?,
            bo: reg("attn.bo", Tensor::zeros([d]))?,
            norm1_gain: reg("norm1.gain", Tensor::ones([d]))?,
            norm1_bias: reg("norm1.bias", Tensor::zeros([d]))?,
            ffn_in_w: reg("ffn.in.w", uniform_weight(rng, d, 2 * h))?,
            ffn_in_b: reg("ffn.in.b", Tensor::zeros([2 * h]))?,
            ffn_out_w: reg("ffn.out.w", uniform_weight(rng, h, d))?,
            ffn_out_b: reg("ffn.out.b", Tensor::zeros([d]))?,
            norm2_gain: reg("norm2.gain", Tensor::ones([d]))?,
            norm2_bias: reg("norm2.bias", Tensor::zeros([d]))?,
        })
    }

    /// Number of learnable scalars in one block.
    pub fn param_count(cfg: &AttentionConfig) -> usize {
        let d = cfg.d_model;
        let h = cfg.hidden();
        // projections + their biases, two norms, FFN weights + biases
        4 * d * d + 4 * d + 2 * (2 * d) + d * 2 * h + 2 * h + h * d + d
    }

    pub fn param_ids(&self) -> [ParamId; 16] {
        [
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.norm1_gain,
            self.norm1_bias,
            self.ffn_in_w,
            self.ffn_in_b,
            self.ffn_out_w,
            self.ffn_out_b,
            self.norm2_gain,
            self.norm2_bias,
        ]
    }

    /// Scaled dot-product multi-head attention. `mask`, when given, is a
    /// row-major `[Tq, Tk]` boolean matrix; false entries receive zero weight.
    pub fn multi_head_attention(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        let d = self.cfg.d_model;
        let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sq[1] != d || sk[1] != d || sv != sk {
            return Err(Error::dim("multi_head_attention", &sq, &sk));
        }
        let (tq, tk) = (sq[0], sk[0]);
        if let Some(m) = mask {
            if m.len() != tq * tk {
                return Err(Error::dim("attention mask", &[m.len()], &[tq, tk]));
            }
        }
        let p = |g: &mut Graph, id| g.param(store, id);
        let (wq, bq, wk, bk, wv, bv) = (
            p(g, self.wq),
            p(g, self.bq),
            p(g, self.wk),
            p(g, self.bk),
            p(g, self.wv),
            p(g, self.bv),
        );
        let qp = g.linear(q, wq, Some(bq))?;
        let kp = g.linear(k, wk, Some(bk))?;
        let vp = g.linear(v, wv, Some(bv))?;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / libm::sqrt(hd as f64);
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        let mut weights = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = g.slice(qp, 1, h * hd, hd)?;
            let kh = g.slice(kp, 1, h * hd, hd)?;
            let vh = g.slice(vp, 1, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale)?;
            let att = match mask {
                Some(m) => g.masked_softmax(logits, m)?,
                None => g.softmax(logits, 1)?,
            };
            weights.push(att);
            let att = g.dropout(att, self.cfg.dropout_p)?;
            heads.push(g.matmul(att, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        let (wo, bo) = (p(g, self.wo), p(g, self.bo));
        let out = g.linear(cat, wo, Some(bo))?;
        Ok(AttentionOutput { out, weights })
    }

    /// Full block: attention, Add→Norm, gated FFN, Add→Norm.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let att = self.multi_head_attention(g, store, q, k, v, mask)?.out;
        let res = g.add(q, att)?;
        let (g1, b1) = (g.param(store, self.norm1_gain), g.param(store, self.norm1_bias));
        let x = g.layer_norm(res, g1, b1, LN_EPS)?;
        let f = self.ffn(g, store, x)?;
        let res = g.add(x, f)?;
        let (g2, b2) = (g.param(store, self.norm2_gain), g.param(store, self.norm2_bias));
        g.layer_norm(res, g2, b2, LN_EPS)
    }

    fn ffn(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.cfg.hidden();
        let (w1, b1) = (g.param(store, self.ffn_in_w), g.param(store, self.ffn_in_b));
        let z = g.linear(x, w1, Some(b1))?;
        let a = g.slice(z, 1, 0, h)?;
        let gate = g.slice(z, 1, h, h)?;
        let gate = g.silu(gate)?;
        let hidden = g.mul(a, gate)?;
        let hidden = g.dropout(hidden, self.cfg.dropout_p)?;
        let (w2, b2) = (g.param(store, self.ffn_out_w), g.param(store, self.ffn_out_b));
        g.linear(hidden, w2, Some(b2))
    }

    /// Depth-1 self-attention encoder: the block with `Q = K = V = x`.
    /// `key_mask[t]` marks valid positions of `x`.
    pub fn self_encode(&self, g: &mut Graph, store: &ParameterStore, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let t = g.shape(x)[0];
        let full = key_mask.map(|m| key_mask_matrix(t, m));
        self.forward(g, store, x, x, x, full.as_deref())
    }
}

/// `[tq, tk]` mask that lets every query see exactly the valid keys.
pub fn key_mask_matrix(tq: usize, key_mask: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(tq * key_mask.len());
    for _ in 0..tq {
        m.extend_from_slice(key_mask);
    }
    m
}

/// Banded mask: query `i` may attend key `j` when `|i - j| <= radius` and the
/// key is valid. Queries whose band is empty fall back to all valid keys.
pub fn banded_mask(tq: usize, key_mask: &[bool], radius: usize) -> Vec<bool> {
    let tk = key_mask.len();
    let mut m = Vec::with_capacity(tq * tk);
    for i in 0..tq {
        let row: Vec<bool> = (0..tk).map(|j| key_mask[j] && i.abs_diff(j) <= radius).collect();
        if row.iter().any(|&b| b) {
            m.extend(row);
        } else {
            m.extend_from_slice(key_mask);
        }
    }
    m
}
