//! Losses, instance matching, the optimizer, checkpoints, and the
//! training loop.
//!
//! Matching runs twice by design: a detached pass evaluates every query
//! trajectory in plain `f64` to pick the positive index, then the graph
//! rebuilds the same loss terms for that index only, so gradients flow
//! through exactly one trajectory per sample. Both passes share the same
//! scalar formulas (and the graph's own sigmoid), so the cost that
//! selected a query and the loss that trains it agree to the last bit.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::STRIDE_MULTIPLE;
use crate::config::{LossWeights, RunConfig};
use crate::error::{Error, Result};
use crate::heads::JointNodes;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Model, ModelOutputs};
use crate::numerics::graph::{stable_sigmoid, Graph, NodeId};
use crate::numerics::tensor::{ParamSet, Tensor};
use crate::synthdata::{load_index, load_sample, GroundTruth, LoadedSample};

/// Probabilities are clamped this far inside (0, 1) before any logarithm.
pub const PROB_FLOOR: f64 = 1e-7;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const DICE_SMOOTH: f64 = 1.0;
/// Floor for box areas in ratio denominators.
pub const AREA_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Scalar loss primitives. The detached matcher and the test oracles call
// these directly; the graph builders below mirror them operation for
// operation so both paths produce identical values.

/// Focal term for a single probability/target pair.
pub fn focal_term(p: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if target {
        let m = (1.0 - p).powf(gamma) * p.ln();
        -(alpha * m)
    } else {
        let m = p.powf(gamma) * (1.0 - p).ln();
        -((1.0 - alpha) * m)
    }
}

/// Smoothed Dice loss over one frame (or any flat slice pair).
pub fn dice_term(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "dice: {} prediction values vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (p, t) in pred.iter().zip(target) {
        inter += p * t;
        sp += p;
        st += t;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = (sp + st) + DICE_SMOOTH;
    Ok(1.0 - num / den)
}

fn corners(b: &[f64]) -> (f64, f64, f64, f64) {
    let hx = 0.5 * b[2];
    let hy = 0.5 * b[3];
    (b[0] - hx, b[1] - hy, b[0] + hx, b[1] + hy)
}

/// Generalized-IoU loss for one (cx, cy, w, h) pair. A zero-area box
/// degrades to IoU 0 with the hull spanned by the other box; the area
/// floors keep every ratio finite.
pub fn giou_loss_pair(pred: &[f64], gt: &[f64]) -> f64 {
    let (px0, py0, px1, py1) = corners(pred);
    let (gx0, gy0, gx1, gy1) = corners(gt);
    let iw = (px1.min(gx1) - px0.max(gx0)).max(0.0);
    let ih = (py1.min(gy1) - py0.max(gy0)).max(0.0);
    let inter = iw * ih;
    let area_p = (px1 - px0) * (py1 - py0);
    let area_g = (gx1 - gx0) * (gy1 - gy0);
    let union = (area_p + area_g) - inter;
    let iou = inter / union.max(AREA_EPS);
    let hull = (px1.max(gx1) - px0.min(gx0)) * (py1.max(gy1) - py0.min(gy0));
    let excess = (hull - union) / hull.max(AREA_EPS);
    1.0 - (iou - excess)
}

// ---------------------------------------------------------------------------
// Graph-side losses.

fn one_minus(g: &mut Graph, x: NodeId) -> NodeId {
    let neg = g.scale(x, -1.0);
    g.add_scalar(neg, 1.0)
}

fn ensure_finite(g: &Graph, node: NodeId, term: &str) -> Result<NodeId> {
    let v = g.scalar_value(node);
    if !v.is_finite() {
        return Err(Error::NonFinite {
            term: term.to_string(),
            value: v,
        });
    }
    Ok(node)
}

/// Mean focal loss of `probs` against a same-shape 0/1 target tensor.
pub fn focal_node(
    g: &mut Graph,
    probs: NodeId,
    targets: &Tensor,
    alpha: f64,
    gamma: f64,
) -> Result<NodeId> {
    if g.shape(probs) != targets.shape() {
        return Err(Error::shape(format!(
            "focal: probabilities {:?} vs targets {:?}",
            g.shape(probs),
            targets.shape()
        )));
    }
    let n = targets.numel();
    let p = g.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let q = one_minus(g, p);
    let ln_p = g.ln(p);
    let ln_q = g.ln(q);
    let qg = g.pow_scalar(q, gamma);
    let pg = g.pow_scalar(p, gamma);
    let m_pos = g.mul(qg, ln_p)?;
    let m_neg = g.mul(pg, ln_q)?;
    let pos = g.scale(m_pos, -alpha);
    let neg = g.scale(m_neg, -(1.0 - alpha));
    let mut inv = targets.clone();
    inv.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    let t = g.input(targets.clone());
    let u = g.input(inv);
    let tp = g.mul(t, pos)?;
    let un = g.mul(u, neg)?;
    let per = g.add(tp, un)?;
    let total = g.sum_all(per);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Per-frame Dice loss of `[V, A]` probabilities, averaged over frames.
pub fn dice_node(g: &mut Graph, probs: NodeId, targets: &Tensor) -> Result<NodeId> {
    if g.shape(probs) != targets.shape() || targets.rank() != 2 {
        return Err(Error::shape(format!(
            "dice: probabilities {:?} vs targets {:?} (need matching [frames, pixels])",
            g.shape(probs),
            targets.shape()
        )));
    }
    let t = g.input(targets.clone());
    let pt = g.mul(probs, t)?;
    let inter = g.sum_axis(pt, 1)?;
    let sp = g.sum_axis(probs, 1)?;
    let st = g.sum_axis(t, 1)?;
    let num = {
        let twice = g.scale(inter, 2.0);
        g.add_scalar(twice, DICE_SMOOTH)
    };
    let den = {
        let s = g.add(sp, st)?;
        g.add_scalar(s, DICE_SMOOTH)
    };
    let frac = g.div(num, den)?;
    let per_frame = one_minus(g, frac);
    g.mean_axis(per_frame, 0)
}

/// Per-frame L1 over the four box coordinates, averaged over frames.
pub fn l1_node(g: &mut Graph, pred: NodeId, targets: &Tensor) -> Result<NodeId> {
    if g.shape(pred) != targets.shape() || targets.rank() != 2 {
        return Err(Error::shape(format!(
            "l1: predictions {:?} vs targets {:?}",
            g.shape(pred),
            targets.shape()
        )));
    }
    let t = g.input(targets.clone());
    let d = g.sub(pred, t)?;
    let a = g.abs(d);
    let per_frame = g.sum_axis(a, 1)?;
    g.mean_axis(per_frame, 0)
}

/// Generalized-IoU loss of `[V, 4]` boxes, averaged over frames. Mirrors
/// [`giou_loss_pair`] operation for operation.
pub fn giou_node(g: &mut Graph, pred: NodeId, targets: &Tensor) -> Result<NodeId> {
    let shape = g.shape(pred).to_vec();
    if shape != targets.shape() || shape.len() != 2 || shape[1] != 4 {
        return Err(Error::shape(format!(
            "giou: predictions {:?} vs targets {:?} (need matching [frames, 4])",
            shape,
            targets.shape()
        )));
    }
    let v = shape[0];
    let gt = g.input(targets.clone());
    let col = |g: &mut Graph, x: NodeId, i: usize| g.gather_last(x, &[i]);
    let (pcx, pcy, pw, ph) = (
        col(g, pred, 0)?,
        col(g, pred, 1)?,
        col(g, pred, 2)?,
        col(g, pred, 3)?,
    );
    let (gcx, gcy, gw, gh) = (col(g, gt, 0)?, col(g, gt, 1)?, col(g, gt, 2)?, col(g, gt, 3)?);
    let corner = |g: &mut Graph, c: NodeId, e: NodeId| -> Result<(NodeId, NodeId)> {
        let half = g.scale(e, 0.5);
        Ok((g.sub(c, half)?, g.add(c, half)?))
    };
    let (px0, px1) = corner(g, pcx, pw)?;
    let (py0, py1) = corner(g, pcy, ph)?;
    let (gx0, gx1) = corner(g, gcx, gw)?;
    let (gy0, gy1) = corner(g, gcy, gh)?;

    let iw = {
        let hi = g.min_elem(px1, gx1)?;
        let lo = g.max_elem(px0, gx0)?;
        let d = g.sub(hi, lo)?;
        g.relu(d)
    };
    let ih = {
        let hi = g.min_elem(py1, gy1)?;
        let lo = g.max_elem(py0, gy0)?;
        let d = g.sub(hi, lo)?;
        g.relu(d)
    };
    let inter = g.mul(iw, ih)?;
    let area = |g: &mut Graph, x0: NodeId, y0: NodeId, x1: NodeId, y1: NodeId| -> Result<NodeId> {
        let w = g.sub(x1, x0)?;
        let h = g.sub(y1, y0)?;
        g.mul(w, h)
    };
    let area_p = area(g, px0, py0, px1, py1)?;
    let area_g = area(g, gx0, gy0, gx1, gy1)?;
    let union = {
        let s = g.add(area_p, area_g)?;
        g.sub(s, inter)?
    };
    let eps = g.input(Tensor::filled(&[v, 1], AREA_EPS));
    let union_floor = g.max_elem(union, eps)?;
    let iou = g.div(inter, union_floor)?;
    let hull = {
        let hx1 = g.max_elem(px1, gx1)?;
        let hx0 = g.min_elem(px0, gx0)?;
        let hy1 = g.max_elem(py1, gy1)?;
        let hy0 = g.min_elem(py0, gy0)?;
        area(g, hx0, hy0, hx1, hy1)?
    };
    let hull_floor = g.max_elem(hull, eps)?;
    let excess = {
        let gap = g.sub(hull, union)?;
        g.div(gap, hull_floor)?
    };
    let giou = g.sub(iou, excess)?;
    let per_frame = one_minus(g, giou);
    let m = g.mean_axis(per_frame, 0)?;
    // [V, 1] reduced over frames leaves [1]; flatten defensively.
    g.reshape(m, &[1])
}

/// Symmetric contrastive loss over B (positive query, joint embedding)
/// pairs: `-(1/2B) sum_i [log softmax_j(x_i . y_j)_i + log
/// softmax_j(x_j . y_i)_i]` on raw dot products. B = 1 yields exactly 0.
pub fn jsc_node(g: &mut Graph, queries: &[NodeId], joints: &[NodeId]) -> Result<NodeId> {
    if queries.is_empty() || queries.len() != joints.len() {
        return Err(Error::invalid(format!(
            "jsc: {} queries vs {} joint embeddings",
            queries.len(),
            joints.len()
        )));
    }
    let b = queries.len();
    let x = g.stack(queries)?;
    let y = g.stack(joints)?;
    let xs = g.shape(x).to_vec();
    let ys = g.shape(y).to_vec();
    if xs.len() != 2 || xs != ys {
        return Err(Error::shape(format!(
            "jsc: query block {xs:?} vs joint block {ys:?}"
        )));
    }
    let dots = g.matmul_t(x, y)?;
    let flat = g.reshape(dots, &[b * b, 1])?;
    let diag_idx: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let diag = g.gather_rows(flat, &diag_idx)?;
    let sum_diag = g.sum_all(diag);
    let row_lse = g.logsumexp(dots, 1)?;
    let col_lse = g.logsumexp(dots, 0)?;
    let sum_rows = g.sum_all(row_lse);
    let sum_cols = g.sum_all(col_lse);
    let lses = g.add(sum_rows, sum_cols)?;
    let twice_diag = g.scale(sum_diag, 2.0);
    let gap = g.sub(lses, twice_diag)?;
    Ok(g.scale(gap, 1.0 / (2.0 * b as f64)))
}

// ---------------------------------------------------------------------------
// Ground-truth preparation.

/// Downsamples binary `[T, H0, W0]` masks onto the stride-4 grid of the
/// padded canvas: a cell is foreground when at least half of its 4x4
/// pixel block is (pixels beyond the original frame count as background).
/// Integer counting keeps the &gt;= 1/2 threshold exact.
pub fn downsample_masks_s4(masks: &Tensor, padded_h: usize, padded_w: usize) -> Result<Tensor> {
    let s = masks.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!(
            "mask downsample: expected [T, H, W], got {s:?}"
        )));
    }
    let (t, h0, w0) = (s[0], s[1], s[2]);
    if padded_h < h0 || padded_w < w0 || padded_h % 4 != 0 || padded_w % 4 != 0 {
        return Err(Error::invalid(format!(
            "mask downsample: padded {padded_h}x{padded_w} incompatible with {h0}x{w0}"
        )));
    }
    let (h4, w4) = (padded_h / 4, padded_w / 4);
    let mut out = Tensor::zeros(&[t, h4, w4]);
    let src = masks.data();
    let dst = out.data_mut();
    for f in 0..t {
        for by in 0..h4 {
            for bx in 0..w4 {
                let mut ones = 0u32;
                for dy in 0..4 {
                    let y = by * 4 + dy;
                    if y >= h0 {
                        continue;
                    }
                    for dx in 0..4 {
                        let x = bx * 4 + dx;
                        if x >= w0 {
                            continue;
                        }
                        if src[(f * h0 + y) * w0 + x] != 0.0 {
                            ones += 1;
                        }
                    }
                }
                if ones >= 8 {
                    dst[(f * h4 + by) * w4 + bx] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Instance matching.

/// Detached view of one query's trajectory: values only, no graph.
pub struct TrajectoryView<'a> {
    /// Per-frame class probability, length T.
    pub class_probs: &'a [f64],
    /// Per-frame (cx, cy, w, h), length 4T.
    pub boxes: &'a [f64],
    /// Per-frame stride-4 mask probabilities, length T * area.
    pub mask_probs: &'a [f64],
}

/// Detached view of the supervision for one sample.
pub struct SupervisionView<'a> {
    pub valid: &'a [bool],
    /// Length 4T; entries on invisible frames are ignored.
    pub boxes: &'a [f64],
    /// Binary stride-4 targets, length T * area.
    pub masks4: &'a [f64],
}

/// Outcome of positive-query selection.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub positive_index: usize,
    pub per_query_costs: Vec<f64>,
}

/// Weighted matching cost of one trajectory against the ground truth:
/// classification focal over all frames plus box (L1 + GIoU) and mask
/// (Dice + focal) terms averaged over the visible frames. With no
/// visible frame, only the classification term remains.
pub fn matching_cost(
    pred: &TrajectoryView,
    gt: &SupervisionView,
    area: usize,
    w: &LossWeights,
) -> Result<f64> {
    let t = gt.valid.len();
    if pred.class_probs.len() != t
        || pred.boxes.len() != 4 * t
        || gt.boxes.len() != 4 * t
        || pred.mask_probs.len() != t * area
        || gt.masks4.len() != t * area
    {
        return Err(Error::invalid(format!(
            "matching: trajectory pieces disagree on T={t}, area={area}"
        )));
    }
    let mut cls = 0.0;
    for f in 0..t {
        cls += focal_term(pred.class_probs[f], gt.valid[f], FOCAL_ALPHA, FOCAL_GAMMA);
    }
    cls /= t as f64;
    let mut cost = w.cls * cls;

    let vids: Vec<usize> = (0..t).filter(|&f| gt.valid[f]).collect();
    if vids.is_empty() {
        return Ok(cost);
    }
    let v = vids.len() as f64;

    let mut l1 = 0.0;
    let mut giou = 0.0;
    for &f in &vids {
        let pb = &pred.boxes[4 * f..4 * f + 4];
        let gb = &gt.boxes[4 * f..4 * f + 4];
        let mut frame_l1 = 0.0;
        for i in 0..4 {
            frame_l1 += (pb[i] - gb[i]).abs();
        }
        l1 += frame_l1;
        giou += giou_loss_pair(pb, gb);
    }
    l1 /= v;
    giou /= v;

    let mut dice = 0.0;
    let mut focal = 0.0;
    for &f in &vids {
        let pm = &pred.mask_probs[f * area..(f + 1) * area];
        let gm = &gt.masks4[f * area..(f + 1) * area];
        dice += dice_term(pm, gm)?;
        for (p, m) in pm.iter().zip(gm) {
            focal += focal_term(*p, *m != 0.0, FOCAL_ALPHA, FOCAL_GAMMA);
        }
    }
    dice /= v;
    focal /= v * area as f64;

    cost += w.l1 * l1 + w.giou * giou + w.dice * dice + w.focal * focal;
    Ok(cost)
}

/// Evaluates every trajectory and picks the argmin; exact ties go to the
/// lowest index.
pub fn select_positive(
    queries: &[TrajectoryView],
    gt: &SupervisionView,
    area: usize,
    w: &LossWeights,
) -> Result<MatchResult> {
    if queries.is_empty() {
        return Err(Error::invalid("matching: no query trajectories".to_string()));
    }
    let mut costs = Vec::with_capacity(queries.len());
    for q in queries {
        costs.push(matching_cost(q, gt, area, w)?);
    }
    let mut best = 0usize;
    for (i, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = i;
        }
    }
    Ok(MatchResult {
        positive_index: best,
        per_query_costs: costs,
    })
}

// ---------------------------------------------------------------------------
// Per-sample and per-batch loss assembly.

/// Loss nodes for one sample.
pub struct SampleLossNodes {
    pub matched: MatchResult,
    /// Scalar matching loss on the positive trajectory.
    pub match_loss: NodeId,
    pub joint: JointNodes,
}

/// One training element, borrowed from the caller's storage.
pub struct BatchItem<'a> {
    pub frames: &'a Tensor,
    pub token_ids: &'a [usize],
    pub gt: &'a GroundTruth,
    /// Stride-4 downsampled targets `[T, H4, W4]`.
    pub masks4: &'a Tensor,
}

/// Scalar nodes of one optimization step.
pub struct BatchLossNodes {
    pub total: NodeId,
    pub match_mean: NodeId,
    pub jsc: NodeId,
    pub samples: Vec<SampleLossNodes>,
}

struct QueryBuffers {
    probs: Vec<f64>,
    boxes: Vec<f64>,
    masks: Vec<f64>,
}

/// Builds the matching loss for one sample: detached cost per query,
/// argmin selection, then graph-side loss terms. Classification covers
/// all queries (positive toward visibility, the rest toward zero); box
/// and mask terms cover the selected trajectory only.
pub fn sample_loss(
    g: &mut Graph,
    params: &ParamSet,
    model: &Model,
    out: &ModelOutputs,
    gt: &GroundTruth,
    masks4: &Tensor,
    w: &LossWeights,
) -> Result<SampleLossNodes> {
    let ls = g.shape(out.mask_logits).to_vec();
    let (t, n, h4, w4) = (ls[0], ls[1], ls[2], ls[3]);
    let area = h4 * w4;
    if gt.valid.len() != t {
        return Err(Error::invalid(format!(
            "sample loss: {} visibility flags vs {t} frames",
            gt.valid.len()
        )));
    }
    if masks4.shape() != [t, h4, w4] {
        return Err(Error::shape(format!(
            "sample loss: stride-4 targets {:?} vs logits grid [{t}, {h4}, {w4}]",
            masks4.shape()
        )));
    }

    // Detached matching over all N trajectories.
    let cp = g.data(out.class_probs);
    let bx = g.data(out.boxes);
    let ml = g.data(out.mask_logits);
    let buffers: Vec<QueryBuffers> = (0..n)
        .map(|q| {
            let mut probs = Vec::with_capacity(t);
            let mut boxes = Vec::with_capacity(4 * t);
            let mut masks = Vec::with_capacity(t * area);
            for f in 0..t {
                probs.push(cp[f * n + q]);
                boxes.extend_from_slice(&bx[(f * n + q) * 4..(f * n + q) * 4 + 4]);
                let base = (f * n + q) * area;
                masks.extend(ml[base..base + area].iter().map(|&l| stable_sigmoid(l)));
            }
            QueryBuffers { probs, boxes, masks }
        })
        .collect();
    let views: Vec<TrajectoryView> = buffers
        .iter()
        .map(|b| TrajectoryView {
            class_probs: &b.probs,
            boxes: &b.boxes,
            mask_probs: &b.masks,
        })
        .collect();
    let sup = SupervisionView {
        valid: &gt.valid,
        boxes: gt.boxes.data(),
        masks4: masks4.data(),
    };
    let matched = select_positive(&views, &sup, area, w)?;
    let pos = matched.positive_index;

    // Classification supervises every trajectory: the matched one toward
    // the per-frame visibility flags, the rest toward zero. Negatives are
    // essential; without them every query scores alike and the class head
    // cannot identify the referenced object at inference time. Box and
    // mask terms below stay positive-only.
    let probs_all = g.reshape(out.class_probs, &[t, n])?;
    let mut cls_targets = Tensor::zeros(&[t, n]);
    for (f, &ok) in gt.valid.iter().enumerate() {
        if ok {
            cls_targets.set(&[f, pos], 1.0);
        }
    }
    let cls = focal_node(g, probs_all, &cls_targets, FOCAL_ALPHA, FOCAL_GAMMA)?;
    ensure_finite(g, cls, "class focal")?;
    let mut match_loss = g.scale(cls, w.cls);

    let vids: Vec<usize> = (0..t).filter(|&f| gt.valid[f]).collect();
    if !vids.is_empty() {
        let vlen = vids.len();
        let boxes_pos = {
            let by_query = g.permute(out.boxes, &[1, 0, 2])?;
            let row = g.gather_rows(by_query, &[pos])?;
            let all = g.reshape(row, &[t, 4])?;
            g.gather_rows(all, &vids)?
        };
        let mut gt_boxes = Tensor::zeros(&[vlen, 4]);
        for (i, &f) in vids.iter().enumerate() {
            for j in 0..4 {
                gt_boxes.set(&[i, j], gt.boxes.at(&[f, j]));
            }
        }
        let l1 = l1_node(g, boxes_pos, &gt_boxes)?;
        ensure_finite(g, l1, "box l1")?;
        let giou = giou_node(g, boxes_pos, &gt_boxes)?;
        ensure_finite(g, giou, "box giou")?;

        let mask_probs_pos = {
            let by_query = g.permute(out.mask_logits, &[1, 0, 2, 3])?;
            let row = g.gather_rows(by_query, &[pos])?;
            let all = g.reshape(row, &[t, area])?;
            let picked = g.gather_rows(all, &vids)?;
            g.sigmoid(picked)
        };
        let mut gt_masks = Tensor::zeros(&[vlen, area]);
        for (i, &f) in vids.iter().enumerate() {
            let src = &masks4.data()[f * area..(f + 1) * area];
            gt_masks.data_mut()[i * area..(i + 1) * area].copy_from_slice(src);
        }
        let dice = dice_node(g, mask_probs_pos, &gt_masks)?;
        ensure_finite(g, dice, "mask dice")?;
        let focal = focal_node(g, mask_probs_pos, &gt_masks, FOCAL_ALPHA, FOCAL_GAMMA)?;
        ensure_finite(g, focal, "mask focal")?;

        for (node, weight) in [(l1, w.l1), (giou, w.giou), (dice, w.dice), (focal, w.focal)] {
            let term = g.scale(node, weight);
            match_loss = g.add(match_loss, term)?;
        }
    }

    let joint = crate::heads::joint_embed(
        g,
        params,
        &model.heads,
        out.proxies,
        out.video,
        out.text,
        pos,
    )?;
    Ok(SampleLossNodes {
        matched,
        match_loss,
        joint,
    })
}

/// Runs the model on every batch item and assembles the total objective:
/// the batch-mean matching loss plus the weighted contrastive term over
/// the batch's (positive query, joint embedding) pairs.
pub fn batch_loss(
    g: &mut Graph,
    params: &ParamSet,
    model: &Model,
    items: &[BatchItem],
    w: &LossWeights,
) -> Result<BatchLossNodes> {
    if items.is_empty() {
        return Err(Error::invalid("batch loss: empty batch".to_string()));
    }
    let t0 = items[0].frames.shape()[0];
    for it in items {
        if it.frames.shape()[0] != t0 {
            return Err(Error::invalid(format!(
                "batch loss: window length {} differs from {t0}; batches share one window",
                it.frames.shape()[0]
            )));
        }
    }
    let mut samples = Vec::with_capacity(items.len());
    for it in items {
        let out = model.forward(g, params, it.frames, it.token_ids)?;
        samples.push(sample_loss(g, params, model, &out, it.gt, it.masks4, w)?);
    }
    let match_nodes: Vec<NodeId> = samples.iter().map(|s| s.match_loss).collect();
    let match_mean = {
        let stacked = g.stack(&match_nodes)?;
        let m = g.mean_axis(stacked, 0)?;
        g.reshape(m, &[1])?
    };
    ensure_finite(g, match_mean, "matching loss")?;
    let queries: Vec<NodeId> = samples.iter().map(|s| s.joint.positive).collect();
    let joints: Vec<NodeId> = samples.iter().map(|s| s.joint.joint).collect();
    let jsc = jsc_node(g, &queries, &joints)?;
    ensure_finite(g, jsc, "jsc")?;
    let weighted = g.scale(jsc, w.jsc);
    let total = g.add(match_mean, weighted)?;
    ensure_finite(g, total, "total loss")?;
    Ok(BatchLossNodes {
        total,
        match_mean,
        jsc,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Optimizer.

/// Adam with bias correction and a single tenfold learning-rate drop at
/// the final third of the run (`floor(2/3 * total_steps)`).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    decay_at: usize,
    steps_done: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, total_steps: usize) -> Adam {
        let m = params
            .ids()
            .map(|id| vec![0.0; params.value(id).numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_at: total_steps * 2 / 3,
            steps_done: 0,
            m,
            v,
        }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        if self.steps_done >= self.decay_at {
            self.lr * 0.1
        } else {
            self.lr
        }
    }

    /// Applies one update from the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamSet) {
        let lr = self.current_lr();
        self.steps_done += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps_done as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps_done as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (vals, grads) = params.value_and_grad_mut(id);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..vals.len() {
                let gj = grads[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                vals[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }
}

// ---------------------------------------------------------------------------
// Checkpoints.

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PXF1CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ParamRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_json: String,
    pub config_hash: String,
    pub step: u64,
    pub records: Vec<ParamRecord>,
}

/// Serializes parameters with provenance. Layout (all integers little
/// endian): magic, version u32, config JSON (u64 length + bytes),
/// config hash (u64 length + hex bytes), step u64, record count u64,
/// then per record: name (u64 length + bytes), rank u32, dims as u32s,
/// value count u64, values as f64 bits.
pub fn checkpoint_bytes(params: &ParamSet, config: &RunConfig, step: u64) -> Vec<u8> {
    let config_json = serde_json::to_string(config).expect("config serializes");
    let hash = config.hash();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(hash.len() as u64).to_le_bytes());
    out.extend_from_slice(hash.as_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id);
        let value = params.value(id);
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(value.numel() as u64).to_le_bytes());
        for &x in value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, config: &RunConfig, step: u64) -> Result<()> {
    fs::write(path, checkpoint_bytes(params, config, step))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "{}: truncated at byte {} (needed {n} more)",
                self.origin, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        if len > 1 << 20 {
            return Err(Error::Format(format!(
                "{}: implausible string length {len} at byte {}",
                self.origin, self.pos
            )));
        }
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| Error::Format(format!("{}: invalid utf-8: {e}", self.origin)))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        origin,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{origin}: not a checkpoint (bad magic)")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{origin}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_json = r.text()?;
    let config_hash = r.text()?;
    let config: RunConfig = serde_json::from_str(&config_json)
        .map_err(|e| Error::Format(format!("{origin}: embedded config does not parse: {e}")))?;
    if config.hash() != config_hash {
        return Err(Error::Format(format!(
            "{origin}: embedded hash {config_hash} does not match the embedded config"
        )));
    }
    let step = r.u64()?;
    let count = r.u64()? as usize;
    if count > 1 << 20 {
        return Err(Error::Format(format!(
            "{origin}: implausible record count {count}"
        )));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.text()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!(
                "{origin}: parameter {name} claims rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n = r.u64()? as usize;
        let expect: usize = dims.iter().product();
        if n != expect {
            return Err(Error::Format(format!(
                "{origin}: parameter {name} count {n} != product of {dims:?}"
            )));
        }
        let raw = r.take(8 * n)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(ParamRecord { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{origin}: {} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        config_json,
        config_hash,
        step,
        records,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read checkpoint {}: {e}", path.display())))?;
    checkpoint_from_bytes(&bytes, &path.display().to_string())
}

/// Copies checkpoint values into a freshly registered parameter set. The
/// name sets must agree exactly and every shape must match.
pub fn restore_params(params: &mut ParamSet, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.records.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, the model has {}",
            ckpt.records.len(),
            params.len()
        )));
    }
    let by_name: std::collections::HashMap<&str, &ParamRecord> = ckpt
        .records
        .iter()
        .map(|rec| (rec.name.as_str(), rec))
        .collect();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let rec = by_name.get(name.as_str()).ok_or_else(|| {
            Error::Format(format!("checkpoint is missing parameter {name}"))
        })?;
        if rec.dims != params.value(id).shape() {
            return Err(Error::Format(format!(
                "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                rec.dims,
                params.value(id).shape()
            )));
        }
        params
            .value_mut(id)
            .data_mut()
            .copy_from_slice(&rec.values);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop.

const SHUFFLE_SALT: u64 = 0x243f_6a88_85a3_08d3;

/// One in-memory training element with precomputed stride-4 targets.
pub struct TrainSample {
    pub frames: Tensor,
    pub token_ids: Vec<usize>,
    pub gt: GroundTruth,
    pub masks4: Tensor,
}

impl TrainSample {
    pub fn from_loaded(s: LoadedSample, padded_h: usize, padded_w: usize) -> Result<TrainSample> {
        let masks4 = downsample_masks_s4(&s.gt.masks, padded_h, padded_w)?;
        Ok(TrainSample {
            frames: s.frames,
            token_ids: s.token_ids,
            gt: s.gt,
            masks4,
        })
    }

    pub fn item(&self) -> BatchItem<'_> {
        BatchItem {
            frames: &self.frames,
            token_ids: &self.token_ids,
            gt: &self.gt,
            masks4: &self.masks4,
        }
    }
}

/// Rounds a pixel extent up to the backbone's stride multiple.
pub fn padded_extent(x: usize) -> usize {
    x.div_ceil(STRIDE_MULTIPLE) * STRIDE_MULTIPLE
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub report: EvalReport,
    pub checkpoint: PathBuf,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct MetricLine<'a> {
    epoch: usize,
    step: usize,
    train_loss: f64,
    #[serde(flatten)]
    eval: &'a EvalReport,
}

/// Predicts every sample of a split and scores it against the ground
/// truth at full resolution.
pub fn evaluate_split(
    model: &Model,
    params: &ParamSet,
    samples: &[LoadedSample],
    thresholds: &[f64],
    config_hash: &str,
) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let p = model.predict(params, &s.frames, &s.token_ids)?;
        preds.push(p.masks);
        gts.push(s.gt.masks.clone());
    }
    evaluate(&preds, &gts, thresholds, config_hash)
}

fn load_split(
    root: &Path,
    entries: &[crate::synthdata::IndexEntry],
) -> Result<Vec<LoadedSample>> {
    entries.iter().map(|e| load_sample(root, e)).collect()
}

/// Runs the full training protocol: seeded shuffling, adaptive-moment
/// updates on the batch objective, a per-epoch held-out evaluation plus
/// checkpoint, and an append-only JSON-lines metric log. Deterministic:
/// identical config and dataset produce byte-identical artifacts.
pub fn train(
    config: &RunConfig,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let root = PathBuf::from(&config.data.path);
    let index = load_index(&root)?;
    if index.canvas != config.data.canvas || index.t != config.data.t {
        return Err(Error::invalid(format!(
            "dataset at {} holds {}x{} clips of {} frames, config wants {}x{} of {}",
            root.display(),
            index.canvas,
            index.canvas,
            index.t,
            config.data.canvas,
            config.data.canvas,
            config.data.t
        )));
    }
    if index.train.len() != config.data.train_count || index.val.len() != config.data.val_count {
        return Err(Error::invalid(format!(
            "dataset at {} holds {} train / {} val samples, config wants {} / {}",
            root.display(),
            index.train.len(),
            index.val.len(),
            config.data.train_count,
            config.data.val_count
        )));
    }

    let hp = padded_extent(config.data.canvas);
    let train_set: Vec<TrainSample> = load_split(&root, &index.train)?
        .into_iter()
        .map(|s| TrainSample::from_loaded(s, hp, hp))
        .collect::<Result<_>>()?;
    let val_set = load_split(&root, &index.val)?;

    let mut params = ParamSet::new();
    let model = Model::register(&mut params, config)?;
    let hash = config.hash();

    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = fs::File::create(&metrics_path)?;
    let final_checkpoint = out_dir.join("checkpoint.bin");

    let total = config.train.steps;
    if total == 0 {
        save_checkpoint(&final_checkpoint, &params, config, 0)?;
        return Ok(TrainOutcome {
            steps: 0,
            final_checkpoint,
            metrics_path,
            epochs: Vec::new(),
        });
    }

    let mut adam = Adam::new(&params, config.train.lr, total);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ SHUFFLE_SALT);
    let mut steps_done = 0usize;
    let mut epoch = 0usize;
    let mut epochs = Vec::new();

    while steps_done < total {
        epoch += 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut order_rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(config.train.batch) {
            if steps_done == total {
                break;
            }
            let items: Vec<BatchItem> = chunk.iter().map(|&i| train_set[i].item()).collect();
            let mut g = Graph::new(true);
            let nodes = batch_loss(&mut g, &params, &model, &items, &config.loss)?;
            params.zero_grads();
            g.backward(nodes.total, &mut params)?;
            adam.step(&mut params);
            losses.push(g.scalar_value(nodes.total));
            steps_done += 1;
        }

        let report = evaluate_split(&model, &params, &val_set, &config.eval.thresholds, &hash)?;
        let ckpt_path = out_dir.join(format!("ckpt_{epoch:03}.bin"));
        save_checkpoint(&ckpt_path, &params, config, steps_done as u64)?;
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let line = MetricLine {
            epoch,
            step: steps_done,
            train_loss,
            eval: &report,
        };
        writeln!(metrics_file, "{}", serde_json::to_string(&line)?)?;
        let rec = EpochRecord {
            epoch,
            step: steps_done,
            train_loss,
            report,
            checkpoint: ckpt_path,
        };
        on_epoch(&rec);
        epochs.push(rec);
    }

    save_checkpoint(&final_checkpoint, &params, config, steps_done as u64)?;
    Ok(TrainOutcome {
        steps: steps_done,
        final_checkpoint,
        metrics_path,
        epochs,
    })
}
