//! Multi-head attention over tape nodes.
//!
//! The free function [`multi_head_attention`] is the bare scaled-dot-product
//! core; [`AttnBlock`] wraps it in the pre-norm residual form used by every
//! attention site in the model:
//!
//! ```text
//! out = q + MHA(LN(q), LN(kv))
//! ```
//!
//! Positional terms are added to the normalized queries and keys only;
//! values are projected from the normalized source without position, so
//! content and position never mix in the value path. Output projections
//! start at zero, which makes a fresh block the identity on its residual
//! stream.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::init::{register_layer_norm, register_linear, register_zeros};
use crate::numerics::tensor::{AttentionConfig, ParamId, ParamSet};

/// Epsilon for every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

/// Additive score offset that zeroes a key's weight after softmax.
pub const MASK_OFF: f64 = -1e9;

/// The four projection matrices of one attention operator, each `[C, C]`.
#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MhaParams {
    /// Query/key/value projections draw from the init stream; the output
    /// projection starts at zero so the residual stream is untouched until
    /// training moves it.
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<MhaParams> {
        let c = cfg.model_dim;
        Ok(MhaParams {
            wq: register_linear(params, &format!("{prefix}.wq"), rng, c, c)?,
            wk: register_linear(params, &format!("{prefix}.wk"), rng, c, c)?,
            wv: register_linear(params, &format!("{prefix}.wv"), rng, c, c)?,
            wo: register_zeros(params, &format!("{prefix}.wo"), &[c, c])?,
        })
    }
}

/// Splits `[B, L, C]` into `[B*heads, L, C/heads]` with the head index
/// fastest within the batch axis.
fn split_heads(g: &mut Graph, x: NodeId, heads: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (b, l, c) = (s[0], s[1], s[2]);
    let d = c / heads;
    let r = g.reshape(x, &[b, l, heads, d])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[b * heads, l, d])
}

/// Inverse of [`split_heads`].
fn merge_heads(g: &mut Graph, x: NodeId, b: usize, heads: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (l, d) = (s[1], s[2]);
    let r = g.reshape(x, &[b, heads, l, d])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[b, l, heads * d])
}

/// Rank-2 variant for a batch-shared key/value source: `[L, C]` becomes
/// `[heads, L, C/heads]`, which the batched matmul cycles across `B*heads`
/// because the head index is fastest there.
fn split_heads_shared(g: &mut Graph, x: NodeId, heads: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (l, c) = (s[0], s[1]);
    let d = c / heads;
    let r = g.reshape(x, &[l, heads, d])?;
    g.permute(r, &[1, 0, 2])
}

/// Scaled dot-product attention with `cfg.num_heads` heads.
///
/// `q` is `[B, Lq, C]`. `kv` is `[B, Lk, C]`, or `[Lk, C]` to share one
/// key/value sequence across the whole batch. `q_pos` / `kv_pos` are added
/// to queries and keys before projection (never to values) and must match
/// the corresponding operand shape. `key_mask` is an additive `[Lk]` bias
/// on the scores; use [`MASK_OFF`] entries to remove keys.
///
/// Returns `[B, Lq, C]`. No residual, no normalization: callers own both.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    params: &ParamSet,
    mha: &MhaParams,
    cfg: &AttentionConfig,
    q: NodeId,
    kv: NodeId,
    q_pos: Option<NodeId>,
    kv_pos: Option<NodeId>,
    key_mask: Option<NodeId>,
) -> Result<NodeId> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 3 || qs[2] != cfg.model_dim {
        return Err(Error::shape(format!(
            "attention: query must be [B, Lq, {}], got {qs:?}",
            cfg.model_dim
        )));
    }
    let kvs = g.shape(kv).to_vec();
    let shared = match kvs.len() {
        2 if kvs[1] == cfg.model_dim => true,
        3 if kvs[2] == cfg.model_dim && kvs[0] == qs[0] => false,
        _ => {
            return Err(Error::shape(format!(
                "attention: key/value must be [B, Lk, {c}] or [Lk, {c}], got {kvs:?} for query {qs:?}",
                c = cfg.model_dim
            )))
        }
    };
    let b = qs[0];
    let lk = if shared { kvs[0] } else { kvs[1] };
    let heads = cfg.num_heads;
    let d = cfg.head_dim();

    let q_in = match q_pos {
        Some(p) => g.add(q, p)?,
        None => q,
    };
    let k_in = match kv_pos {
        Some(p) => g.add(kv, p)?,
        None => kv,
    };

    let wq = g.param(params, mha.wq);
    let wk = g.param(params, mha.wk);
    let wv = g.param(params, mha.wv);
    let wo = g.param(params, mha.wo);
    let qp = g.matmul(q_in, wq)?;
    let kp = g.matmul(k_in, wk)?;
    let vp = g.matmul(kv, wv)?;

    let qh = split_heads(g, qp, heads)?;
    let (kh, vh) = if shared {
        (
            split_heads_shared(g, kp, heads)?,
            split_heads_shared(g, vp, heads)?,
        )
    } else {
        (split_heads(g, kp, heads)?, split_heads(g, vp, heads)?)
    };

    let scores = g.matmul_t(qh, kh)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let masked = match key_mask {
        Some(m) => {
            let ms = g.shape(m).to_vec();
            if ms == [lk] {
                g.add_bias(scaled, m)?
            } else if ms == [qs[1], lk] {
                // Per-query mask, broadcast over batch and heads.
                let wide = g.reshape(m, &[1, qs[1], lk])?;
                let tiled = g.repeat(wide, 0, b * heads)?;
                g.add(scaled, tiled)?
            } else {
                return Err(Error::shape(format!(
                    "attention: mask must be [{lk}] or [{lq}, {lk}], got {ms:?}",
                    lq = qs[1]
                )));
            }
        }
        None => scaled,
    };
    let attn = g.softmax(masked, 2)?;
    let ctx = g.matmul(attn, vh)?;
    let merged = merge_heads(g, ctx, b, heads)?;
    g.matmul(merged, wo)
}

/// Pre-norm residual attention block: `q + MHA(LN(q), LN(kv))`.
#[derive(Debug, Clone, Copy)]
pub struct AttnBlock {
    pub ln_q: (ParamId, ParamId),
    pub ln_kv: (ParamId, ParamId),
    pub mha: MhaParams,
}

impl AttnBlock {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<AttnBlock> {
        let ln_q = register_layer_norm(params, &format!("{prefix}.ln_q"), cfg.model_dim)?;
        let ln_kv = register_layer_norm(params, &format!("{prefix}.ln_kv"), cfg.model_dim)?;
        let mha = MhaParams::register(params, prefix, cfg, rng)?;
        Ok(AttnBlock { ln_q, ln_kv, mha })
    }

    /// Runs the block. `q` must be rank 3; `kv` may be rank 2 (shared) or
    /// rank 3. Self-attention passes the same node for both, which reuses
    /// the query norm so keys and queries see identical activations.
    #[allow(clippy::too_many_arguments)]
    pub fn apply(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        cfg: &AttentionConfig,
        q: NodeId,
        kv: NodeId,
        q_pos: Option<NodeId>,
        kv_pos: Option<NodeId>,
        key_mask: Option<NodeId>,
    ) -> Result<NodeId> {
        let gq = g.param(params, self.ln_q.0);
        let bq = g.param(params, self.ln_q.1);
        let q_n = g.layer_norm(q, gq, bq, LN_EPS)?;
        let kv_n = if kv == q {
            q_n
        } else {
            let gk = g.param(params, self.ln_kv.0);
            let bk = g.param(params, self.ln_kv.1);
            g.layer_norm(kv, gk, bk, LN_EPS)?
        };
        let attended = multi_head_attention(g, params, &self.mha, cfg, q_n, kv_n, q_pos, kv_pos, key_mask)?;
        g.add(q, attended)
    }
}
