//! Cross-modality interaction encoding.
//!
//! A stack of K identical-shape stages carries two streams: video tokens
//! `[T, HW, C]` and proxy queries `[T, N, C]`. Each stage applies, in order:
//!
//! 1. decoupled video self-attention (spatial per frame, temporal per
//!    location, parallel branches summed),
//! 2. proxy-conditioned video encoding (video queries cross-attend to
//!    proxies; decoupled the same way),
//! 3. text-conditioned proxy encoding (all T*N proxies attend to the
//!    original text features, which are re-injected at every stage),
//! 4. video-conditioned proxy encoding (proxies cross-attend to the
//!    stage-input video stream; decoupled),
//!
//! with the stage output `Q^k` being the sum of steps 3 and 4 outputs.
//! Every decoupled operator sums two residual branches, so its zero-init
//! floor is twice its input; composing the floors gives exactly 4x on the
//! video stream and 3x on the proxy stream per stage, which tests assert
//! bit-for-bit.
//!
//! Branch layouts:
//! - spatial:  queries `[T, HW, C]` (per-frame token sets)
//! - temporal: queries `[HW, T, C]` (per-location frame tracks)
//! - pooled key sequences (`[T, C]`) are shared rank-2 operands; the
//!   batched matmul cycles them across lanes without copying.
//!
//! Decoupling is also what the cost model prices: full attention scores
//! scale with `(T*S)^2` while the decoupled form scales with
//! `T*S^2 + S*T^2`, and the proxy cross terms replace a key-set size with
//! the proxy count N.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::attention::{multi_head_attention, AttnBlock, MASK_OFF};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::init::xavier_uniform;
use crate::numerics::tensor::{AttentionConfig, ParamId, ParamSet, Tensor};

/// Pooling operator used when a token set is collapsed to one vector per
/// frame (proxies in step 2, video tokens in step 4).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

impl Default for PoolKind {
    fn default() -> Self {
        PoolKind::Mean
    }
}

/// Stage wiring choices. Defaults follow the reference composition.
#[derive(Debug, Clone, Copy)]
pub struct CmieOptions {
    pub pool: PoolKind,
    /// Step 4 reads the stage-input video stream by default; setting this
    /// makes it read the stage-updated stream instead.
    pub v2p_reads_updated: bool,
    /// Disables step 2 entirely (video stream skips proxy conditioning);
    /// used by the ablation harness.
    pub use_p2v: bool,
}

impl Default for CmieOptions {
    fn default() -> Self {
        CmieOptions {
            pool: PoolKind::Mean,
            v2p_reads_updated: false,
            use_p2v: true,
        }
    }
}

fn pool(g: &mut Graph, x: NodeId, axis: usize, kind: PoolKind) -> Result<NodeId> {
    match kind {
        PoolKind::Mean => g.mean_axis(x, axis),
        PoolKind::Max => g.max_axis(x, axis),
    }
}

/// Sinusoidal row for one position: `sin` on even channels, `cos` on odd,
/// with the classic 10000^(2i/dim) frequency ladder. Values lie in [-1, 1].
fn sinusoid_row(pos: usize, dim: usize, out: &mut [f64]) {
    debug_assert_eq!(dim % 2, 0);
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = pos as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
}

/// 1-D temporal encoding `[t, c]`. `c` must be even.
pub fn temporal_encoding(t: usize, c: usize) -> Result<Tensor> {
    if c % 2 != 0 || c == 0 || t == 0 {
        return Err(Error::invalid(format!(
            "temporal encoding needs t >= 1 and even c, got t={t}, c={c}"
        )));
    }
    let mut data = vec![0.0; t * c];
    for p in 0..t {
        sinusoid_row(p, c, &mut data[p * c..(p + 1) * c]);
    }
    Tensor::from_vec(&[t, c], data)
}

/// 2-D spatial encoding `[h*w, c]`: the first half of the channels encodes
/// the row index, the second half the column index. `c` must be a multiple
/// of 4 so each half is itself even.
pub fn spatial_encoding(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c % 4 != 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "spatial encoding needs h, w >= 1 and c % 4 == 0, got h={h}, w={w}, c={c}"
        )));
    }
    let half = c / 2;
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        let mut yrow = vec![0.0; half];
        sinusoid_row(y, half, &mut yrow);
        for x in 0..w {
            let base = (y * w + x) * c;
            data[base..base + half].copy_from_slice(&yrow);
            sinusoid_row(x, half, &mut data[base + half..base + c]);
        }
    }
    Tensor::from_vec(&[h * w, c], data)
}

/// Tiles `[r, c]` rows into `[b, r, c]`.
fn tile_batch(base: &Tensor, b: usize) -> Tensor {
    let (r, c) = (base.shape()[0], base.shape()[1]);
    let mut data = Vec::with_capacity(b * r * c);
    for _ in 0..b {
        data.extend_from_slice(base.data());
    }
    Tensor::from_vec(&[b, r, c], data).expect("tile shape consistent")
}

/// Learned proxy embeddings: a per-query row shared across frames plus a
/// per-frame row shared across queries. Their sum is both the initial
/// proxy state and the proxies' positional term.
#[derive(Debug, Clone, Copy)]
pub struct ProxyEmbed {
    pub q_init: ParamId,
    pub q_time: ParamId,
    pub n: usize,
    pub t_max: usize,
}

impl ProxyEmbed {
    pub fn register(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        n: usize,
        t_max: usize,
        c: usize,
    ) -> Result<ProxyEmbed> {
        if n == 0 || t_max == 0 {
            return Err(Error::Config(format!(
                "proxy embedding needs n >= 1 and t_max >= 1, got n={n}, t_max={t_max}"
            )));
        }
        let q_init = params.register("proxy.init", xavier_uniform(rng, &[n, c], n, c))?;
        let q_time = params.register("proxy.time", xavier_uniform(rng, &[t_max, c], t_max, c))?;
        Ok(ProxyEmbed {
            q_init,
            q_time,
            n,
            t_max,
        })
    }

    /// Builds the `[T, N, C]` initial proxy tensor for a clip of length `t`.
    pub fn q0(&self, g: &mut Graph, params: &ParamSet, t: usize) -> Result<NodeId> {
        if t == 0 || t > self.t_max {
            return Err(Error::invalid(format!(
                "clip length {t} outside the supported range 1..={}",
                self.t_max
            )));
        }
        let c = g_param_cols(g, params, self.q_init);
        let init = g.param(params, self.q_init);
        let time = g.param(params, self.q_time);
        let rows: Vec<usize> = (0..t).collect();
        let time_t = g.gather_rows(time, &rows)?;
        let init3 = g.reshape(init, &[1, self.n, c])?;
        let init_tiled = g.repeat(init3, 0, t)?;
        let time3 = g.reshape(time_t, &[t, 1, c])?;
        let time_tiled = g.repeat(time3, 1, self.n)?;
        g.add(init_tiled, time_tiled)
    }
}

fn g_param_cols(g: &mut Graph, params: &ParamSet, id: ParamId) -> usize {
    let node = g.param(params, id);
    *g.shape(node).last().unwrap()
}

/// Per-graph positional nodes shared by all stages.
pub struct PosNodes {
    /// `[T, HW, C]` sinusoidal 2-D, repeated per frame.
    pub spatial_q: NodeId,
    /// `[HW, T, C]` sinusoidal 1-D, repeated per location.
    pub temporal_q: NodeId,
    /// `[T, C]` sinusoidal 1-D for pooled per-frame key sequences.
    pub temporal_kv: NodeId,
    /// `[T, N, C]` learned proxy embedding (also the initial proxy state).
    pub q0: NodeId,
    /// `[1, T*N, C]` view of `q0` for the flattened text step.
    pub q0_flat: NodeId,
    /// `[N, T, C]` view of `q0` for the temporal proxy branch.
    pub q0_perm: NodeId,
}

impl PosNodes {
    pub fn build(
        g: &mut Graph,
        params: &ParamSet,
        proxy: &ProxyEmbed,
        t: usize,
        h: usize,
        w: usize,
        c: usize,
    ) -> Result<PosNodes> {
        let spatial = spatial_encoding(h, w, c)?;
        let temporal = temporal_encoding(t, c)?;
        let hw = h * w;
        let spatial_q = g.input(tile_batch(&spatial, t));
        let temporal_q = g.input(tile_batch(&temporal, hw));
        let temporal_kv = g.input(temporal);
        let q0 = proxy.q0(g, params, t)?;
        let n = proxy.n;
        let q0_flat = g.reshape(q0, &[1, t * n, c])?;
        let q0_perm = g.permute(q0, &[1, 0, 2])?;
        Ok(PosNodes {
            spatial_q,
            temporal_q,
            temporal_kv,
            q0,
            q0_flat,
            q0_perm,
        })
    }
}

/// One interaction stage: seven pre-norm attention blocks.
#[derive(Debug, Clone, Copy)]
pub struct CmieStage {
    pub vs_spatial: AttnBlock,
    pub vs_temporal: AttnBlock,
    pub p2v_spatial: AttnBlock,
    pub p2v_temporal: AttnBlock,
    pub t2p: AttnBlock,
    pub v2p_spatial: AttnBlock,
    pub v2p_temporal: AttnBlock,
}

impl CmieStage {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        cfg: &AttentionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<CmieStage> {
        Ok(CmieStage {
            vs_spatial: AttnBlock::register(params, &format!("{prefix}.vs_spatial"), cfg, rng)?,
            vs_temporal: AttnBlock::register(params, &format!("{prefix}.vs_temporal"), cfg, rng)?,
            p2v_spatial: AttnBlock::register(params, &format!("{prefix}.p2v_spatial"), cfg, rng)?,
            p2v_temporal: AttnBlock::register(params, &format!("{prefix}.p2v_temporal"), cfg, rng)?,
            t2p: AttnBlock::register(params, &format!("{prefix}.t2p"), cfg, rng)?,
            v2p_spatial: AttnBlock::register(params, &format!("{prefix}.v2p_spatial"), cfg, rng)?,
            v2p_temporal: AttnBlock::register(params, &format!("{prefix}.v2p_temporal"), cfg, rng)?,
        })
    }
}

/// Decoupled self-attention over the video stream (step 1).
///
/// Both branches read the same input and keep their own residual:
/// `out = (F + S(F)) + (F + T(F))`, so the zero-init floor is `2F`.
pub fn video_self_attention(
    g: &mut Graph,
    params: &ParamSet,
    stage: &CmieStage,
    cfg: &AttentionConfig,
    f_v: NodeId,
    pos: &PosNodes,
) -> Result<NodeId> {
    let spatial = stage.vs_spatial.apply(
        g,
        params,
        cfg,
        f_v,
        f_v,
        Some(pos.spatial_q),
        Some(pos.spatial_q),
        None,
    )?;
    let f_perm = g.permute(f_v, &[1, 0, 2])?;
    let temporal_p = stage.vs_temporal.apply(
        g,
        params,
        cfg,
        f_perm,
        f_perm,
        Some(pos.temporal_q),
        Some(pos.temporal_q),
        None,
    )?;
    let temporal = g.permute(temporal_p, &[1, 0, 2])?;
    g.add(spatial, temporal)
}

/// Proxy-conditioned video encoding (step 2): video tokens query the
/// proxies per frame (spatial) and the per-frame proxy pools per location
/// (temporal). Zero-init floor `2F`.
pub fn proxy_to_video(
    g: &mut Graph,
    params: &ParamSet,
    stage: &CmieStage,
    cfg: &AttentionConfig,
    opts: &CmieOptions,
    f_hat: NodeId,
    proxies: NodeId,
    pos: &PosNodes,
) -> Result<NodeId> {
    let fs = g.shape(f_hat).to_vec();
    let qs = g.shape(proxies).to_vec();
    if fs[0] != qs[0] {
        return Err(Error::invalid(format!(
            "proxy_to_video: video has T={} but proxies have T={}",
            fs[0], qs[0]
        )));
    }
    let spatial = stage.p2v_spatial.apply(
        g,
        params,
        cfg,
        f_hat,
        proxies,
        Some(pos.spatial_q),
        Some(pos.q0),
        None,
    )?;
    let f_perm = g.permute(f_hat, &[1, 0, 2])?;
    // Pooled proxies form a frame-indexed sequence, so they carry the
    // temporal encoding rather than the per-query embedding.
    let pooled = pool(g, proxies, 1, opts.pool)?;
    let temporal_p = stage.p2v_temporal.apply(
        g,
        params,
        cfg,
        f_perm,
        pooled,
        Some(pos.temporal_q),
        Some(pos.temporal_kv),
        None,
    )?;
    let temporal = g.permute(temporal_p, &[1, 0, 2])?;
    g.add(spatial, temporal)
}

/// Text-conditioned proxy encoding (step 3): every proxy across all frames
/// attends to the original text features. Single branch; floor `1Q`.
pub fn text_to_proxy(
    g: &mut Graph,
    params: &ParamSet,
    stage: &CmieStage,
    cfg: &AttentionConfig,
    proxies: NodeId,
    f_t: NodeId,
    pos: &PosNodes,
) -> Result<NodeId> {
    let qs = g.shape(proxies).to_vec();
    let (t, n, c) = (qs[0], qs[1], qs[2]);
    let flat = g.reshape(proxies, &[1, t * n, c])?;
    let out = stage
        .t2p
        .apply(g, params, cfg, flat, f_t, Some(pos.q0_flat), None, None)?;
    g.reshape(out, &[t, n, c])
}

/// Video-conditioned proxy encoding (step 4): proxies query the frame's
/// tokens (spatial) and the spatially pooled frames (temporal).
/// Zero-init floor `2Q`.
pub fn video_to_proxy(
    g: &mut Graph,
    params: &ParamSet,
    stage: &CmieStage,
    cfg: &AttentionConfig,
    opts: &CmieOptions,
    proxies: NodeId,
    f_v: NodeId,
    pos: &PosNodes,
) -> Result<NodeId> {
    let fs = g.shape(f_v).to_vec();
    let qs = g.shape(proxies).to_vec();
    if fs[0] != qs[0] {
        return Err(Error::invalid(format!(
            "video_to_proxy: video has T={} but proxies have T={}",
            fs[0], qs[0]
        )));
    }
    let spatial = stage.v2p_spatial.apply(
        g,
        params,
        cfg,
        proxies,
        f_v,
        Some(pos.q0),
        Some(pos.spatial_q),
        None,
    )?;
    let q_perm = g.permute(proxies, &[1, 0, 2])?;
    let pooled = pool(g, f_v, 1, opts.pool)?;
    let temporal_p = stage.v2p_temporal.apply(
        g,
        params,
        cfg,
        q_perm,
        pooled,
        Some(pos.q0_perm),
        Some(pos.temporal_kv),
        None,
    )?;
    let temporal = g.permute(temporal_p, &[1, 0, 2])?;
    g.add(spatial, temporal)
}

/// One full stage. Returns the updated `(video, proxies)` pair.
///
/// The proxy output sums the text step with the video step applied to it:
/// `Q^k = Q~ + V2P(Q~, F_kv)` where `Q~ = T2P(Q^{k-1})` and `F_kv` is the
/// stage-input video stream unless `v2p_reads_updated` is set. Floors:
/// video 2*2 = 4x (steps 1 then 2), proxies 1 + 2 = 3x (step 3 output plus
/// step 4's two residual branches over it).
#[allow(clippy::too_many_arguments)]
pub fn cmie_forward(
    g: &mut Graph,
    params: &ParamSet,
    stage: &CmieStage,
    cfg: &AttentionConfig,
    opts: &CmieOptions,
    f_v: NodeId,
    proxies: NodeId,
    f_t: NodeId,
    pos: &PosNodes,
) -> Result<(NodeId, NodeId)> {
    let f_hat = video_self_attention(g, params, stage, cfg, f_v, pos)?;
    let f_next = if opts.use_p2v {
        proxy_to_video(g, params, stage, cfg, opts, f_hat, proxies, pos)?
    } else {
        f_hat
    };
    let q_tilde = text_to_proxy(g, params, stage, cfg, proxies, f_t, pos)?;
    let v2p_src = if opts.v2p_reads_updated { f_next } else { f_v };
    let v2p_out = video_to_proxy(g, params, stage, cfg, opts, q_tilde, v2p_src, pos)?;
    let q_next = g.add(q_tilde, v2p_out)?;
    Ok((f_next, q_next))
}

/// Stream pair threaded through the stack.
#[derive(Debug, Clone, Copy)]
pub struct CmieState {
    pub video: NodeId,
    pub proxies: NodeId,
    pub stage: usize,
}

/// The K-stage stack; every stage has independent parameters.
pub struct CmieParams {
    stages: Vec<CmieStage>,
}

impl CmieParams {
    pub fn register(
        params: &mut ParamSet,
        cfg: &AttentionConfig,
        rng: &mut ChaCha8Rng,
        k: usize,
    ) -> Result<CmieParams> {
        if k == 0 {
            return Err(Error::Config(
                "interaction stack needs at least one stage".to_string(),
            ));
        }
        let stages = (0..k)
            .map(|i| CmieStage::register(params, &format!("cmie.{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(CmieParams { stages })
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, k: usize) -> Option<&CmieStage> {
        self.stages.get(k)
    }

    /// Advances one stage; refuses a state that is already past the end.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_stage(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        cfg: &AttentionConfig,
        opts: &CmieOptions,
        state: CmieState,
        f_t: NodeId,
        pos: &PosNodes,
    ) -> Result<CmieState> {
        let stage = self.stages.get(state.stage).ok_or_else(|| {
            Error::invalid(format!(
                "encoder state at stage {} but the stack has {}",
                state.stage,
                self.stages.len()
            ))
        })?;
        let (video, proxies) = cmie_forward(
            g, params, stage, cfg, opts, state.video, state.proxies, f_t, pos,
        )?;
        Ok(CmieState {
            video,
            proxies,
            stage: state.stage + 1,
        })
    }

    /// Runs all K stages. The same text node is injected at every stage.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        cfg: &AttentionConfig,
        opts: &CmieOptions,
        video: NodeId,
        proxies: NodeId,
        f_t: NodeId,
        pos: &PosNodes,
    ) -> Result<(NodeId, NodeId)> {
        let mut state = CmieState {
            video,
            proxies,
            stage: 0,
        };
        for _ in 0..self.stages.len() {
            state = self.forward_stage(g, params, cfg, opts, state, f_t, pos)?;
        }
        Ok((state.video, state.proxies))
    }
}

/// Reference: one full attention pass over all `T*HW` tokens at once,
/// using a spatial block's parameters. With `frame_mask` set, scores
/// between tokens of different frames are removed, which must reproduce
/// the per-frame spatial branch exactly.
pub fn full_video_self_attention(
    g: &mut Graph,
    params: &ParamSet,
    block: &AttnBlock,
    cfg: &AttentionConfig,
    f_v: NodeId,
    spatial_q: NodeId,
    frame_mask: bool,
) -> Result<NodeId> {
    let s = g.shape(f_v).to_vec();
    let (t, hw, c) = (s[0], s[1], s[2]);
    let flat = g.reshape(f_v, &[1, t * hw, c])?;
    let pos_flat = g.reshape(spatial_q, &[1, t * hw, c])?;
    let mask = if frame_mask {
        let l = t * hw;
        let data: Vec<f64> = (0..l * l)
            .map(|i| {
                let (qi, ki) = (i / l, i % l);
                if qi / hw == ki / hw {
                    0.0
                } else {
                    MASK_OFF
                }
            })
            .collect();
        Some(g.input(Tensor::from_vec(&[l, l], data)?))
    } else {
        None
    };
    let gq = g.param(params, block.ln_q.0);
    let bq = g.param(params, block.ln_q.1);
    let normed = g.layer_norm(flat, gq, bq, crate::numerics::attention::LN_EPS)?;
    let attended = multi_head_attention(
        g,
        params,
        &block.mha,
        cfg,
        normed,
        normed,
        Some(pos_flat),
        Some(pos_flat),
        mask,
    )?;
    let out = g.add(flat, attended)?;
    g.reshape(out, &[t, hw, c])
}

/// Attention operator priced by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    /// Joint attention over all T*S tokens.
    Full,
    /// Spatial and temporal branches, each over its own axis.
    Decoupled,
    /// Decoupled cross-attention against N proxies / pooled frames.
    Proxy,
}

/// Multiply-accumulate counts for one attention operator at width C.
///
/// `score_mix` counts Q.K score products plus attention-times-value mixing
/// (the quadratic part); `projections` counts the Q/K/V/output linear maps.
/// Comparisons between modes are made on `score_mix`: the projection term
/// is linear in the token count for every mode and identical in shape, so
/// the quadratic term is what distinguishes the operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionCost {
    pub score_mix: u128,
    pub projections: u128,
}

impl AttentionCost {
    pub fn total(&self) -> u128 {
        self.score_mix + self.projections
    }
}

/// Closed-form MAC counts.
///
/// With T frames, S spatial tokens per frame, N proxies, width C:
///
/// - full:      score 2*C*(T*S)^2,                    proj 4*T*S*C^2
/// - decoupled: score 2*C*(T*S^2 + S*T^2 - T*S),      proj 8*T*S*C^2
/// - proxy:     score 2*C*(T*S*N + S*T^2),            proj (4*T*S + 2*T*N + 2*T)*C^2
///
/// The decoupled score subtracts the T*S self-pairs that both branches
/// count once each, so the single-token case (T=1, S=1) collapses to the
/// full cost exactly. Proxy mode prices the video-side cross attention:
/// per-frame tokens against N proxies plus per-location tracks against
/// frame pools.
pub fn attention_flops(t: usize, s: usize, n: usize, c: usize, mode: CostMode) -> Result<AttentionCost> {
    if t == 0 || s == 0 || n == 0 || c == 0 {
        return Err(Error::invalid(format!(
            "attention_flops: all counts must be >= 1, got T={t}, S={s}, N={n}, C={c}"
        )));
    }
    let (t, s, n, c) = (t as u128, s as u128, n as u128, c as u128);
    Ok(match mode {
        CostMode::Full => AttentionCost {
            score_mix: 2 * c * (t * s) * (t * s),
            projections: 4 * t * s * c * c,
        },
        CostMode::Decoupled => AttentionCost {
            score_mix: 2 * c * (t * s * s + s * t * t - t * s),
            projections: 8 * t * s * c * c,
        },
        CostMode::Proxy => AttentionCost {
            score_mix: 2 * c * (t * s * n + s * t * t),
            projections: (4 * t * s + 2 * t * n + 2 * t) * c * c,
        },
    })
}
