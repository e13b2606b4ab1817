//! Prediction heads: mask decoder, dynamic-kernel mask head, reference
//! (class + box) head, and the joint-embedding head used by the semantic
//! consistency loss.
//!
//! The mask path works at stride 4 relative to the padded canvas: the
//! decoder fuses the three backbone levels top-down into `[T, H/4, W/4,
//! C_seg]` features, each proxy query is mapped to a per-frame 1x1 kernel,
//! and the kernel/feature dot product gives stride-4 logits. Training
//! consumes those directly; evaluation upsamples to the padded canvas and
//! crops away the padding.
//!
//! Cold-start contract: the final layers of the kernel, class, box, and
//! joint heads start at zero, so a fresh model predicts probability 0.5,
//! box (0.5, 0.5, 0.5, 0.5), all-zero mask logits, and a zero joint
//! vector regardless of the encoder output. The zero joint vector makes
//! every contrastive dot product start at zero, so the consistency loss
//! opens at exactly ln(batch) instead of an arbitrary scale-dependent
//! value.

use rand_chacha::ChaCha8Rng;

use crate::backbone::VideoPyramid;
use crate::error::{Error, Result};
use crate::numerics::attention::LN_EPS;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::init::{register_conv, register_layer_norm, register_linear, register_zeros};
use crate::numerics::tensor::{ParamId, ParamSet, Tensor};

/// How the pooled video and text vectors are merged before the joint
/// projection. `Concat` is the reference behavior; `Sum` is the literal
/// elementwise alternative kept for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointCombine {
    Concat,
    Sum,
}

impl Default for JointCombine {
    fn default() -> Self {
        JointCombine::Concat
    }
}

/// All head parameters. One instance per model; no per-stage copies.
pub struct HeadParams {
    // Mask decoder (top-down pathway).
    fpn_proj16: (ParamId, ParamId),
    fpn_lat8: (ParamId, ParamId),
    fpn_lat4: (ParamId, ParamId),
    fpn_out: (ParamId, ParamId),
    fpn_norm: (ParamId, ParamId),
    // Dynamic kernel head.
    kernel_w1: ParamId,
    kernel_b1: ParamId,
    kernel_w2: ParamId,
    kernel_b2: ParamId,
    // Reference head.
    class_w: ParamId,
    class_b: ParamId,
    box_w1: ParamId,
    box_b1: ParamId,
    box_w2: ParamId,
    box_b2: ParamId,
    box_w3: ParamId,
    box_b3: ParamId,
    // Joint-embedding head.
    joint_w: ParamId,
    joint_b: ParamId,
    pub combine: JointCombine,
    pub model_dim: usize,
    pub seg_dim: usize,
}

impl HeadParams {
    pub fn register(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        c: usize,
        c_seg: usize,
        combine: JointCombine,
    ) -> Result<HeadParams> {
        if c % 4 != 0 {
            return Err(Error::Config(format!(
                "head width {c} must be divisible by 4 to match the backbone levels"
            )));
        }
        let joint_in = match combine {
            JointCombine::Concat => 2 * c,
            JointCombine::Sum => c,
        };
        Ok(HeadParams {
            fpn_proj16: (
                register_conv(params, "fpn.proj16.w", rng, 1, 1, c, c)?,
                register_zeros(params, "fpn.proj16.b", &[c])?,
            ),
            fpn_lat8: (
                register_conv(params, "fpn.lat8.w", rng, 1, 1, c / 2, c)?,
                register_zeros(params, "fpn.lat8.b", &[c])?,
            ),
            fpn_lat4: (
                register_conv(params, "fpn.lat4.w", rng, 1, 1, c / 4, c)?,
                register_zeros(params, "fpn.lat4.b", &[c])?,
            ),
            fpn_out: (
                register_conv(params, "fpn.out.w", rng, 3, 3, c, c_seg)?,
                register_zeros(params, "fpn.out.b", &[c_seg])?,
            ),
            fpn_norm: register_layer_norm(params, "fpn.norm", c)?,
            kernel_w1: register_linear(params, "kernel.w1", rng, c, c)?,
            kernel_b1: register_zeros(params, "kernel.b1", &[c])?,
            kernel_w2: register_zeros(params, "kernel.w2", &[c, c_seg])?,
            kernel_b2: register_zeros(params, "kernel.b2", &[c_seg])?,
            class_w: register_zeros(params, "class.w", &[c, 1])?,
            class_b: register_zeros(params, "class.b", &[1])?,
            box_w1: register_linear(params, "box.w1", rng, c, c)?,
            box_b1: register_zeros(params, "box.b1", &[c])?,
            box_w2: register_linear(params, "box.w2", rng, c, c)?,
            box_b2: register_zeros(params, "box.b2", &[c])?,
            box_w3: register_zeros(params, "box.w3", &[c, 4])?,
            box_b3: register_zeros(params, "box.b3", &[4])?,
            joint_w: register_zeros(params, "joint.w", &[joint_in, c])?,
            joint_b: register_zeros(params, "joint.b", &[c])?,
            combine,
            model_dim: c,
            seg_dim: c_seg,
        })
    }
}

/// `x [.., C_in] @ w [C_in, C_out] + b`, for rank-2 or rank-3 `x`.
fn linear(
    g: &mut Graph,
    params: &ParamSet,
    x: NodeId,
    w: ParamId,
    b: ParamId,
) -> Result<NodeId> {
    let wn = g.param(params, w);
    let bn = g.param(params, b);
    let y = g.matmul(x, wn)?;
    g.add_bias(y, bn)
}

/// Top-down decoder: project the encoded stride-16 features, upsample x2,
/// fuse the stride-8 lateral, upsample x2, fuse the stride-4 lateral,
/// normalize channels, then a final 3x3 convolution down to `C_seg`
/// channels. The norm keeps the fused features O(1), so mask logits are
/// bounded by the product of the two remaining weight norms; without it
/// feature growth compounds through the pyramid and the kernel/feature
/// dot product drifts into sigmoid saturation where mask gradients die.
pub fn fpn_decode(
    g: &mut Graph,
    params: &ParamSet,
    heads: &HeadParams,
    pyramid: &VideoPyramid,
    encoded: NodeId,
) -> Result<NodeId> {
    let es = g.shape(encoded).to_vec();
    let l16s = g.shape(pyramid.l16).to_vec();
    if es.len() != 4 || es[0] != l16s[0] || es[1] != l16s[1] || es[2] != l16s[2] {
        return Err(Error::invalid(format!(
            "mask decoder: encoded video {es:?} does not sit on the stride-16 grid {l16s:?}"
        )));
    }
    if es[3] != heads.model_dim {
        return Err(Error::invalid(format!(
            "mask decoder: encoded width {} != head width {}",
            es[3], heads.model_dim
        )));
    }
    let (wp, bp) = heads.fpn_proj16;
    let w16 = g.param(params, wp);
    let b16 = g.param(params, bp);
    let p16 = g.conv2d(encoded, w16, Some(b16), 1, 0)?;

    let up8 = g.upsample_bilinear(p16, 2 * es[1], 2 * es[2])?;
    let (wl8, bl8) = heads.fpn_lat8;
    let w8 = g.param(params, wl8);
    let b8 = g.param(params, bl8);
    let lat8 = g.conv2d(pyramid.l8, w8, Some(b8), 1, 0)?;
    let sum8 = g.add(up8, lat8)?;
    let p8 = g.relu(sum8);

    let up4 = g.upsample_bilinear(p8, 4 * es[1], 4 * es[2])?;
    let (wl4, bl4) = heads.fpn_lat4;
    let w4 = g.param(params, wl4);
    let b4 = g.param(params, bl4);
    let lat4 = g.conv2d(pyramid.l4, w4, Some(b4), 1, 0)?;
    let sum4 = g.add(up4, lat4)?;
    let p4 = g.relu(sum4);

    let (ng, nb) = heads.fpn_norm;
    let gain = g.param(params, ng);
    let bias = g.param(params, nb);
    let normed = g.layer_norm(p4, gain, bias, LN_EPS)?;

    let (wo, bo) = heads.fpn_out;
    let won = g.param(params, wo);
    let bon = g.param(params, bo);
    g.conv2d(normed, won, Some(bon), 1, 1)
}

/// Two-layer perceptron from proxy queries `[T, N, C]` to per-query 1x1
/// kernels `[T, N, C_seg]`. Final layer starts at zero.
pub fn mask_kernels(
    g: &mut Graph,
    params: &ParamSet,
    heads: &HeadParams,
    proxies: NodeId,
) -> Result<NodeId> {
    let h = linear(g, params, proxies, heads.kernel_w1, heads.kernel_b1)?;
    let h = g.relu(h);
    linear(g, params, h, heads.kernel_w2, heads.kernel_b2)
}

/// Kernel / feature dot product at stride 4: `[T, N, H4, W4]` logits.
pub fn mask_logits_stride4(g: &mut Graph, kernels: NodeId, seg: NodeId) -> Result<NodeId> {
    let ks = g.shape(kernels).to_vec();
    let ss = g.shape(seg).to_vec();
    if ks.len() != 3 || ss.len() != 4 || ks[0] != ss[0] || ks[2] != ss[3] {
        return Err(Error::shape(format!(
            "mask head: kernels {ks:?} incompatible with seg features {ss:?}"
        )));
    }
    let (t, n) = (ks[0], ks[1]);
    let (h4, w4, cs) = (ss[1], ss[2], ss[3]);
    let seg_flat = g.reshape(seg, &[t, h4 * w4, cs])?;
    let logits = g.matmul_t(kernels, seg_flat)?;
    g.reshape(logits, &[t, n, h4, w4])
}

/// Bilinear upsampling of stride-4 logits to the padded canvas.
pub fn upsample_mask_logits(
    g: &mut Graph,
    logits_s4: NodeId,
    out_h: usize,
    out_w: usize,
) -> Result<NodeId> {
    let s = g.shape(logits_s4).to_vec();
    let (t, n, h4, w4) = (s[0], s[1], s[2], s[3]);
    let as_images = g.reshape(logits_s4, &[t * n, h4, w4, 1])?;
    let up = g.upsample_bilinear(as_images, out_h, out_w)?;
    g.reshape(up, &[t, n, out_h, out_w])
}

/// Removes canvas padding from full-resolution logits (plain tensor;
/// evaluation only, nothing differentiates through the crop).
pub fn crop_logits(logits: &Tensor, h0: usize, w0: usize) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 4 || s[2] < h0 || s[3] < w0 {
        return Err(Error::shape(format!(
            "crop: logits {s:?} smaller than target {h0}x{w0}"
        )));
    }
    let (t, n, hp, wp) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(t * n * h0 * w0);
    let data = logits.data();
    for tn in 0..t * n {
        for y in 0..h0 {
            let base = tn * hp * wp + y * wp;
            out.extend_from_slice(&data[base..base + w0]);
        }
    }
    Tensor::from_vec(&[t, n, h0, w0], out)
}

/// Class probability (linear + sigmoid, one logit per query) and box
/// regression (3-layer perceptron + sigmoid, normalized cx/cy/w/h).
pub fn reference_head(
    g: &mut Graph,
    params: &ParamSet,
    heads: &HeadParams,
    proxies: NodeId,
) -> Result<(NodeId, NodeId)> {
    let cls_logit = linear(g, params, proxies, heads.class_w, heads.class_b)?;
    let class_probs = g.sigmoid(cls_logit);
    let h = linear(g, params, proxies, heads.box_w1, heads.box_b1)?;
    let h = g.relu(h);
    let h = linear(g, params, h, heads.box_w2, heads.box_b2)?;
    let h = g.relu(h);
    let box_logit = linear(g, params, h, heads.box_w3, heads.box_b3)?;
    let boxes = g.sigmoid(box_logit);
    Ok((class_probs, boxes))
}

/// Nodes produced by the joint-embedding head.
pub struct JointNodes {
    /// `[N, C]`: proxies pooled over frames.
    pub video_queries: NodeId,
    /// `[C]`: the pooled row of the referred query.
    pub positive: NodeId,
    /// `[C]`: projected fusion of pooled video and pooled text features.
    pub joint: NodeId,
}

/// Temporal mean of the proxies, the selected positive row, and the joint
/// video-text vector `psi(combine(GAP(F_v), GAP(F_t)))`. Both GAPs average
/// over every non-channel axis.
pub fn joint_embed(
    g: &mut Graph,
    params: &ParamSet,
    heads: &HeadParams,
    proxies: NodeId,
    video_tokens: NodeId,
    text: NodeId,
    positive_index: usize,
) -> Result<JointNodes> {
    let qs = g.shape(proxies).to_vec();
    let (n, c) = (qs[1], qs[2]);
    if positive_index >= n {
        return Err(Error::invalid(format!(
            "positive query index {positive_index} out of range for {n} queries"
        )));
    }
    let video_queries = g.mean_axis(proxies, 0)?;
    let row = g.gather_rows(video_queries, &[positive_index])?;
    let positive = g.reshape(row, &[c])?;

    let v_frames = g.mean_axis(video_tokens, 1)?;
    let v_gap = g.mean_axis(v_frames, 0)?;
    let t_gap = g.mean_axis(text, 0)?;
    let fused = match heads.combine {
        JointCombine::Concat => g.concat_last(v_gap, t_gap)?,
        JointCombine::Sum => g.add(v_gap, t_gap)?,
    };
    let fused2 = {
        let len = g.shape(fused)[0];
        g.reshape(fused, &[1, len])?
    };
    let projected = linear(g, params, fused2, heads.joint_w, heads.joint_b)?;
    let joint = g.reshape(projected, &[c])?;
    Ok(JointNodes {
        video_queries,
        positive,
        joint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Hand-built pyramid on a padded 32x48 canvas with width `c`.
    fn pyramid(g: &mut Graph, t: usize, c: usize, seed: u64) -> VideoPyramid {
        VideoPyramid {
            l4: g.input(rand_tensor(&[t, 8, 12, c / 4], seed)),
            l8: g.input(rand_tensor(&[t, 4, 6, c / 2], seed + 1)),
            l16: g.input(rand_tensor(&[t, 2, 3, c], seed + 2)),
            padded: (32, 48),
            original: (32, 48),
        }
    }

    fn heads_fixture(c: usize, c_seg: usize, seed: u64) -> (ParamSet, HeadParams) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads =
            HeadParams::register(&mut ps, &mut rng, c, c_seg, JointCombine::Concat).unwrap();
        (ps, heads)
    }

    #[test]
    fn decoder_shape_and_zero_propagation() {
        let (ps, heads) = heads_fixture(8, 4, 1);
        let mut g = Graph::new(false);
        let pyr = pyramid(&mut g, 2, 8, 100);
        let enc = g.input(rand_tensor(&[2, 2, 3, 8], 103));
        let seg = fpn_decode(&mut g, &ps, &heads, &pyr, enc).unwrap();
        assert_eq!(g.shape(seg), &[2, 8, 12, 4]);

        // All-zero inputs stay zero through the whole pathway: the biases
        // start at zero and every stage is linear or ReLU.
        let z4 = g.input(Tensor::zeros(&[2, 8, 12, 2]));
        let z8 = g.input(Tensor::zeros(&[2, 4, 6, 4]));
        let z16 = g.input(Tensor::zeros(&[2, 2, 3, 8]));
        let zpyr = VideoPyramid {
            l4: z4,
            l8: z8,
            l16: z16,
            padded: (32, 48),
            original: (32, 48),
        };
        let zenc = g.input(Tensor::zeros(&[2, 2, 3, 8]));
        let zseg = fpn_decode(&mut g, &ps, &heads, &zpyr, zenc).unwrap();
        assert!(g.data(zseg).iter().all(|v| *v == 0.0));

        // Mismatched grid refused.
        let bad = g.input(rand_tensor(&[2, 3, 3, 8], 104));
        assert!(fpn_decode(&mut g, &ps, &heads, &pyr, bad).is_err());
    }

    #[test]
    fn decoder_gradient_reaches_all_three_levels() {
        let (mut ps, heads) = heads_fixture(8, 4, 2);
        let mut g = Graph::new(true);
        let l4 = g.input_grad(rand_tensor(&[1, 8, 12, 2], 200));
        let l8 = g.input_grad(rand_tensor(&[1, 4, 6, 4], 201));
        let l16 = g.input_grad(rand_tensor(&[1, 2, 3, 8], 202));
        let pyr = VideoPyramid {
            l4,
            l8,
            l16,
            padded: (32, 48),
            original: (32, 48),
        };
        let enc = g.input_grad(rand_tensor(&[1, 2, 3, 8], 203));
        let seg = fpn_decode(&mut g, &ps, &heads, &pyr, enc).unwrap();
        let sq = g.mul(seg, seg).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss, &mut ps).unwrap();
        // The stride-16 level enters through the encoded video; the raw
        // l16 input only anchors the shape check.
        for node in [l4, l8, enc] {
            let gr = g.grad(node).unwrap();
            assert!(gr.iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn fresh_heads_are_cold() {
        // Zero final layers: logits 0, probabilities 0.5, boxes 0.5.
        let (ps, heads) = heads_fixture(8, 4, 3);
        let mut g = Graph::new(false);
        let proxies = g.input(rand_tensor(&[2, 3, 8], 300));
        let seg = g.input(rand_tensor(&[2, 8, 12, 4], 301));
        let kernels = mask_kernels(&mut g, &ps, &heads, proxies).unwrap();
        assert!(g.data(kernels).iter().all(|v| *v == 0.0));
        let logits = mask_logits_stride4(&mut g, kernels, seg).unwrap();
        assert!(g.data(logits).iter().all(|v| *v == 0.0));
        let (probs, boxes) = reference_head(&mut g, &ps, &heads, proxies).unwrap();
        assert!(g.data(probs).iter().all(|v| *v == 0.5));
        assert!(g.data(boxes).iter().all(|v| *v == 0.5));
        assert_eq!(g.shape(probs), &[2, 3, 1]);
        assert_eq!(g.shape(boxes), &[2, 3, 4]);
    }

    #[test]
    fn mask_logits_constant_field_and_linearity() {
        let mut g = Graph::new(false);
        // C_seg = 1, kernel = [1], constant feature c: logits stay c after
        // upsampling.
        let seg = g.input(Tensor::filled(&[1, 2, 2, 1], 0.75));
        let k = g.input(Tensor::filled(&[1, 1, 1], 1.0));
        let logits = mask_logits_stride4(&mut g, k, seg).unwrap();
        let up = upsample_mask_logits(&mut g, logits, 8, 8).unwrap();
        assert_eq!(g.shape(up), &[1, 1, 8, 8]);
        assert!(g.data(up).iter().all(|v| *v == 0.75));

        // Linearity in the kernels, exact for dyadic values.
        let seg2 = g.input(Tensor::from_fn(&[1, 2, 2, 2], |i| 0.25 * (i as f64) - 0.5));
        let k1t = Tensor::from_fn(&[1, 2, 2], |i| 0.125 * (i as f64 + 1.0));
        let k2t = Tensor::from_fn(&[1, 2, 2], |i| -0.25 * (i as f64) + 0.5);
        let ksum = Tensor::from_fn(&[1, 2, 2], |i| k1t.data()[i] + k2t.data()[i]);
        let k1 = g.input(k1t);
        let k2 = g.input(k2t);
        let ks = g.input(ksum);
        let m1 = mask_logits_stride4(&mut g, k1, seg2).unwrap();
        let m2 = mask_logits_stride4(&mut g, k2, seg2).unwrap();
        let ms = mask_logits_stride4(&mut g, ks, seg2).unwrap();
        for ((a, b), s) in g.data(m1).iter().zip(g.data(m2)).zip(g.data(ms)) {
            assert_eq!((a + b).to_bits(), s.to_bits());
        }

        // Channel mismatch refused.
        let bad = g.input(Tensor::zeros(&[1, 1, 3]));
        assert!(mask_logits_stride4(&mut g, bad, seg).is_err());
    }

    #[test]
    fn crop_removes_padding_rows_and_columns() {
        let t = Tensor::from_fn(&[1, 1, 4, 6], |i| i as f64);
        let c = crop_logits(&t, 3, 5).unwrap();
        assert_eq!(c.shape(), &[1, 1, 3, 5]);
        for y in 0..3 {
            for x in 0..5 {
                assert_eq!(c.at(&[0, 0, y, x]), (y * 6 + x) as f64);
            }
        }
        assert!(crop_logits(&t, 5, 5).is_err());
    }

    #[test]
    fn reference_outputs_stay_in_unit_interval() {
        let (mut ps, heads) = heads_fixture(8, 4, 4);
        // Push the final layers off zero so the sigmoid sees real logits.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for name in ["class.w", "class.b", "box.w3", "box.b3"] {
            let id = ps.id_by_name(name).unwrap();
            for v in ps.value_mut(id).data_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
        }
        let mut g = Graph::new(false);
        let proxies = g.input(rand_tensor(&[3, 4, 8], 400));
        let (probs, boxes) = reference_head(&mut g, &ps, &heads, proxies).unwrap();
        assert!(g.data(probs).iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(g.data(boxes).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn joint_embed_pools_and_selects() {
        let (ps, heads) = heads_fixture(8, 4, 5);
        let mut g = Graph::new(false);

        // T = 1: pooled queries equal the single frame exactly.
        let q1 = rand_tensor(&[1, 3, 8], 500);
        let qn = g.input(q1.clone());
        let vid = g.input(rand_tensor(&[1, 6, 8], 501));
        let text = g.input(rand_tensor(&[2, 8], 502));
        let out = joint_embed(&mut g, &ps, &heads, qn, vid, text, 1).unwrap();
        assert_eq!(g.data(out.video_queries), q1.data());
        assert_eq!(g.data(out.positive), &q1.data()[8..16]);

        // Out-of-range positive index refused.
        assert!(joint_embed(&mut g, &ps, &heads, qn, vid, text, 3).is_err());

        // Two frames: pooling is permutation-invariant (two addends
        // commute exactly).
        let qa = rand_tensor(&[2, 2, 8], 503);
        let mut swapped = qa.data()[16..32].to_vec();
        swapped.extend_from_slice(&qa.data()[0..16]);
        let na = g.input(qa);
        let nb = g.input(Tensor::from_vec(&[2, 2, 8], swapped).unwrap());
        let va = g.mean_axis(na, 0).unwrap();
        let vb = g.mean_axis(nb, 0).unwrap();
        assert_eq!(g.data(va), g.data(vb));

        // Constant video and zero text with an identity-padded projection
        // recover the video constant.
        let (mut ps2, heads2) = heads_fixture(4, 4, 6);
        let wid = ps2.id_by_name("joint.w").unwrap();
        {
            let w = ps2.value_mut(wid);
            for v in w.data_mut() {
                *v = 0.0;
            }
            for i in 0..4 {
                w.set(&[i, i], 1.0);
            }
        }
        let mut g2 = Graph::new(false);
        let qn2 = g2.input(rand_tensor(&[1, 2, 4], 504));
        let vconst = g2.input(Tensor::filled(&[2, 3, 4], 1.5));
        let tzero = g2.input(Tensor::zeros(&[3, 4]));
        let out2 = joint_embed(&mut g2, &ps2, &heads2, qn2, vconst, tzero, 0).unwrap();
        assert!(g2.data(out2.joint).iter().all(|v| (*v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let (mut ps, heads) = heads_fixture(4, 2, 7);
        // Lift the zero layers so every path carries gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for name in ["kernel.w2", "class.w", "box.w3", "joint.w"] {
            let id = ps.id_by_name(name).unwrap();
            for v in ps.value_mut(id).data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let proxies_t = rand_tensor(&[1, 2, 4], 700);
        let l4_t = rand_tensor(&[1, 8, 12, 1], 701);
        let l8_t = rand_tensor(&[1, 4, 6, 2], 702);
        let l16_t = rand_tensor(&[1, 2, 3, 4], 703);
        let enc_t = rand_tensor(&[1, 2, 3, 4], 704);
        let text_t = rand_tensor(&[2, 4], 705);
        let report = finite_diff_check(&mut ps, 1e-5, 1e-4, |ps, g| {
            let pyr = VideoPyramid {
                l4: g.input(l4_t.clone()),
                l8: g.input(l8_t.clone()),
                l16: g.input(l16_t.clone()),
                padded: (32, 48),
                original: (32, 48),
            };
            let enc = g.input(enc_t.clone());
            let proxies = g.input(proxies_t.clone());
            let text = g.input(text_t.clone());
            let seg = fpn_decode(g, ps, &heads, &pyr, enc)?;
            let kernels = mask_kernels(g, ps, &heads, proxies)?;
            let logits = mask_logits_stride4(g, kernels, seg)?;
            let (probs, boxes) = reference_head(g, ps, &heads, proxies)?;
            let tokens = enc_tokens(g, enc)?;
            let jn = joint_embed(g, ps, &heads, proxies, tokens, text, 0)?;
            let l1 = g.mul(logits, logits)?;
            let l2 = g.mul(probs, probs)?;
            let l3 = g.mul(boxes, boxes)?;
            let l4n = g.mul(jn.joint, jn.joint)?;
            let l5 = g.mul(jn.positive, jn.positive)?;
            let s1 = g.sum_all(l1);
            let s2 = g.sum_all(l2);
            let s3 = g.sum_all(l3);
            let s4 = g.sum_all(l4n);
            let s5 = g.sum_all(l5);
            let a = g.add(s1, s2)?;
            let b = g.add(a, s3)?;
            let c = g.add(b, s4)?;
            g.add(c, s5)
        })
        .unwrap();
        assert!(report.passed(), "worst rel err {}", report.worst());
    }

    fn enc_tokens(g: &mut Graph, enc: NodeId) -> Result<NodeId> {
        let s = g.shape(enc).to_vec();
        g.reshape(enc, &[s[0], s[1] * s[2], s[3]])
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn sigmoid_heads_bounded(seed in 0u64..1000, t in 1usize..3, n in 1usize..4) {
            let (mut ps, heads) = heads_fixture(4, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            for name in ["class.w", "box.w3"] {
                let id = ps.id_by_name(name).unwrap();
                for v in ps.value_mut(id).data_mut() {
                    *v = rng.gen_range(-3.0..3.0);
                }
            }
            let mut g = Graph::new(false);
            let proxies = g.input(rand_tensor(&[t, n, 4], seed + 2));
            let (probs, boxes) = reference_head(&mut g, &ps, &heads, proxies).unwrap();
            proptest::prop_assert!(g.data(probs).iter().all(|v| (0.0..=1.0).contains(v)));
            proptest::prop_assert!(g.data(boxes).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
