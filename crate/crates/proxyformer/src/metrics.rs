//! Evaluation protocol: region Jaccard J, boundary F-measure, their mean
//! J&F, Precision@K, mAP over an IoU threshold grid, and pooled/averaged
//! IoU summaries.
//!
//! Conventions, pinned here because the metrics must be exact:
//! - masks are binary; a pair of empty masks scores 1 (perfect agreement);
//! - boundaries are mask pixels 4-adjacent to background, with
//!   out-of-frame treated as background;
//! - boundary matching uses dilation by a Euclidean disk of radius
//!   `tolerance` = ceil(0.8% of the image diagonal);
//! - Precision@K counts IoU strictly greater than K;
//! - mAP averages Precision@K over K = 0.50, 0.55, ..., 0.95;
//! - per-sample IoU pools intersections/unions over the video's frames.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

fn check_binary_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::invalid(format!(
            "mask pair shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    for v in pred.data().iter().chain(gt.data()) {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::invalid("masks must be exactly binary"));
        }
    }
    Ok(())
}

fn intersection_union(pred: &[f64], gt: &[f64]) -> (usize, usize) {
    let mut inter = 0;
    let mut union = 0;
    for (p, g) in pred.iter().zip(gt) {
        let p = *p != 0.0;
        let g = *g != 0.0;
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    (inter, union)
}

/// Region similarity |pred ∩ gt| / |pred ∪ gt|; 1 when both masks are
/// empty.
pub fn jaccard(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_binary_pair(pred, gt)?;
    let (inter, union) = intersection_union(pred.data(), gt.data());
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mask pixels with at least one 4-neighbor outside the mask (the frame
/// border counts as background).
fn boundary(mask: &Tensor) -> Vec<bool> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let d = mask.data();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if d[y * w + x] == 0.0 {
                continue;
            }
            let bg = (y == 0 || d[(y - 1) * w + x] == 0.0)
                || (y + 1 == h || d[(y + 1) * w + x] == 0.0)
                || (x == 0 || d[y * w + x - 1] == 0.0)
                || (x + 1 == w || d[y * w + x + 1] == 0.0);
            out[y * w + x] = bg;
        }
    }
    out
}

/// Dilates a boundary map by a Euclidean disk of the given radius.
fn dilate(b: &[bool], h: usize, w: usize, tol: usize) -> Vec<bool> {
    let t = tol as i64;
    let mut out = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !b[y as usize * w + x as usize] {
                continue;
            }
            for dy in -t..=t {
                for dx in -t..=t {
                    if dx * dx + dy * dy > t * t {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                        out[ny as usize * w + nx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// DAVIS-convention boundary tolerance for an HxW frame.
pub fn boundary_tolerance(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    (0.008 * diag).ceil() as usize
}

/// Boundary F-measure: precision/recall of the two boundaries under
/// disk-tolerance matching, F = 2PR/(P+R). Both boundaries empty → 1;
/// P + R = 0 → 0.
pub fn boundary_f(pred: &Tensor, gt: &Tensor, tolerance: usize) -> Result<f64> {
    check_binary_pair(pred, gt)?;
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let pb = boundary(pred);
    let gb = boundary(gt);
    let np = pb.iter().filter(|v| **v).count();
    let ng = gb.iter().filter(|v| **v).count();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let gd = dilate(&gb, h, w, tolerance);
    let pd = dilate(&pb, h, w, tolerance);
    let matched_p = pb.iter().zip(&gd).filter(|(p, g)| **p && **g).count();
    let matched_g = gb.iter().zip(&pd).filter(|(g, p)| **g && **p).count();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Fraction of samples whose IoU strictly exceeds the threshold.
pub fn precision_at_k(ious: &[f64], k: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::invalid("precision@K needs at least one sample"));
    }
    let hits = ious.iter().filter(|v| **v > k).count();
    Ok(hits as f64 / ious.len() as f64)
}

/// Mean of Precision@K over K = 0.50, 0.55, ..., 0.95.
pub fn mean_ap(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::invalid("mAP needs at least one sample"));
    }
    let mut acc = 0.0;
    for i in 0..10 {
        let k = (50 + 5 * i) as f64 / 100.0;
        acc += precision_at_k(ious, k)?;
    }
    Ok(acc / 10.0)
}

/// Pooled and averaged IoU over a set of mask pairs: overall pools all
/// intersections/unions, mean averages per-pair IoU (empty pairs score 1).
pub fn overall_and_mean_iou(pairs: &[(&Tensor, &Tensor)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::invalid("IoU summary needs at least one pair"));
    }
    let mut total_inter = 0usize;
    let mut total_union = 0usize;
    let mut mean_acc = 0.0;
    for (pred, gt) in pairs {
        check_binary_pair(pred, gt)?;
        let (inter, union) = intersection_union(pred.data(), gt.data());
        total_inter += inter;
        total_union += union;
        mean_acc += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    let overall = if total_union == 0 {
        1.0
    } else {
        total_inter as f64 / total_union as f64
    };
    Ok((overall, mean_acc / pairs.len() as f64))
}

/// Evaluation summary. Field order is the serialized key order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub videos: usize,
    pub j: f64,
    pub f: f64,
    pub j_and_f: f64,
    /// Keys are the thresholds formatted with two decimals.
    pub precision_at: BTreeMap<String, f64>,
    pub map: f64,
    pub overall_iou: f64,
    pub mean_iou: f64,
}

/// Scores one predicted trajectory per video against ground truth.
///
/// J and F are averaged over frames within a video, then over videos.
/// Precision@K and mAP run on per-video pooled IoU. The IoU summaries
/// pool/average over every frame pair in the suite.
pub fn evaluate(
    preds: &[Tensor],
    gts: &[Tensor],
    thresholds: &[f64],
    config_hash: &str,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "evaluate: {} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("evaluate: empty suite"));
    }
    let mut j_videos = 0.0;
    let mut f_videos = 0.0;
    let mut sample_ious = Vec::with_capacity(preds.len());
    let mut frame_pairs: Vec<(Tensor, Tensor)> = Vec::new();
    for (pred, gt) in preds.iter().zip(gts) {
        if pred.shape() != gt.shape() || pred.rank() != 3 {
            return Err(Error::invalid(format!(
                "evaluate: video shapes differ or are not [T, H, W]: {:?} vs {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let (t, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
        let tol = boundary_tolerance(h, w);
        let mut j_frames = 0.0;
        let mut f_frames = 0.0;
        let mut inter_sum = 0usize;
        let mut union_sum = 0usize;
        for f in 0..t {
            let pf = frame_slice(pred, f)?;
            let gf = frame_slice(gt, f)?;
            j_frames += jaccard(&pf, &gf)?;
            f_frames += boundary_f(&pf, &gf, tol)?;
            let (inter, union) = intersection_union(pf.data(), gf.data());
            inter_sum += inter;
            union_sum += union;
            frame_pairs.push((pf, gf));
        }
        j_videos += j_frames / t as f64;
        f_videos += f_frames / t as f64;
        sample_ious.push(if union_sum == 0 {
            1.0
        } else {
            inter_sum as f64 / union_sum as f64
        });
    }
    let j = j_videos / preds.len() as f64;
    let f = f_videos / preds.len() as f64;
    let mut precision_at = BTreeMap::new();
    for k in thresholds {
        precision_at.insert(format!("{k:.2}"), precision_at_k(&sample_ious, *k)?);
    }
    let pair_refs: Vec<(&Tensor, &Tensor)> = frame_pairs.iter().map(|(a, b)| (a, b)).collect();
    let (overall_iou, mean_iou) = overall_and_mean_iou(&pair_refs)?;
    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        videos: preds.len(),
        j,
        f,
        j_and_f: (j + f) / 2.0,
        precision_at,
        map: mean_ap(&sample_ious)?,
        overall_iou,
        mean_iou,
    })
}

fn frame_slice(video: &Tensor, f: usize) -> Result<Tensor> {
    let (h, w) = (video.shape()[1], video.shape()[2]);
    let data = video.data()[f * h * w..(f + 1) * h * w].to_vec();
    Tensor::from_vec(&[h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(shape: &[usize], ones: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for (y, x) in ones {
            t.set(&[*y, *x], 1.0);
        }
        t
    }

    fn random_mask(h: usize, w: usize, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&[h, w], |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
    }

    #[test]
    fn jaccard_hand_cases() {
        let full = Tensor::filled(&[4, 4], 1.0);
        assert_eq!(jaccard(&full, &full).unwrap(), 1.0);
        let left = Tensor::from_fn(&[4, 4], |i| if i % 4 < 2 { 1.0 } else { 0.0 });
        assert_eq!(jaccard(&left, &full).unwrap(), 0.5);
        let right = Tensor::from_fn(&[4, 4], |i| if i % 4 >= 2 { 1.0 } else { 0.0 });
        assert_eq!(jaccard(&left, &right).unwrap(), 0.0);
        let empty = Tensor::zeros(&[4, 4]);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        assert!(jaccard(&empty, &Tensor::zeros(&[3, 3])).is_err());
        let nonbinary = Tensor::filled(&[4, 4], 0.5);
        assert!(jaccard(&nonbinary, &full).is_err());
    }

    #[test]
    fn jaccard_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_mask(6, 6, 0.4, &mut rng);
            let b = random_mask(6, 6, 0.4, &mut rng);
            assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
        }
    }

    #[test]
    fn boundary_extraction_matches_definition() {
        // 3x3 solid block inside 5x5: interior pixel is not boundary.
        let m = mask(
            &[5, 5],
            &[
                (1, 1),
                (1, 2),
                (1, 3),
                (2, 1),
                (2, 2),
                (2, 3),
                (3, 1),
                (3, 2),
                (3, 3),
            ],
        );
        let b = boundary(&m);
        assert!(!b[2 * 5 + 2]);
        let count = b.iter().filter(|v| **v).count();
        assert_eq!(count, 8);
        // A full frame's boundary is its border ring (frame edge counts
        // as background).
        let full = Tensor::filled(&[4, 4], 1.0);
        let fb = boundary(&full);
        assert_eq!(fb.iter().filter(|v| **v).count(), 12);
    }

    #[test]
    fn boundary_f_hand_cases() {
        let a = mask(&[6, 6], &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        assert_eq!(boundary_f(&a, &a, 1).unwrap(), 1.0);
        let empty = Tensor::zeros(&[6, 6]);
        assert_eq!(boundary_f(&empty, &a, 1).unwrap(), 0.0);
        assert_eq!(boundary_f(&empty, &empty, 1).unwrap(), 1.0);

        // 4x4 squares shifted by one pixel, tolerance 1: every boundary
        // pixel of each mask is within distance 1 of the other's.
        let sq = |oy: usize, ox: usize| {
            let mut t = Tensor::zeros(&[8, 8]);
            for y in 0..4 {
                for x in 0..4 {
                    t.set(&[y + oy, x + ox], 1.0);
                }
            }
            t
        };
        let s0 = sq(1, 1);
        let s1 = sq(1, 2);
        assert_eq!(boundary_f(&s0, &s1, 1).unwrap(), 1.0);
    }

    #[test]
    fn boundary_f_matches_brute_force_proximity() {
        // Independent oracle: per-pixel nearest-boundary distance check
        // instead of dilation.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let p = random_mask(8, 8, 0.3, &mut rng);
            let g = random_mask(8, 8, 0.3, &mut rng);
            let tol = 1usize;
            let got = boundary_f(&p, &g, tol).unwrap();

            let pb = boundary(&p);
            let gb = boundary(&g);
            let pts = |b: &[bool]| -> Vec<(i64, i64)> {
                b.iter()
                    .enumerate()
                    .filter(|(_, v)| **v)
                    .map(|(i, _)| ((i / 8) as i64, (i % 8) as i64))
                    .collect()
            };
            let pp = pts(&pb);
            let gg = pts(&gb);
            let expect = if pp.is_empty() && gg.is_empty() {
                1.0
            } else if pp.is_empty() || gg.is_empty() {
                0.0
            } else {
                let near = |a: &(i64, i64), set: &[(i64, i64)]| {
                    set.iter().any(|b| {
                        let (dy, dx) = (a.0 - b.0, a.1 - b.1);
                        dy * dy + dx * dx <= (tol * tol) as i64
                    })
                };
                let prec = pp.iter().filter(|a| near(a, &gg)).count() as f64 / pp.len() as f64;
                let rec = gg.iter().filter(|a| near(a, &pp)).count() as f64 / gg.len() as f64;
                if prec + rec == 0.0 {
                    0.0
                } else {
                    2.0 * prec * rec / (prec + rec)
                }
            };
            assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn tolerance_follows_the_diagonal() {
        assert_eq!(boundary_tolerance(64, 64), 1);
        assert_eq!(boundary_tolerance(480, 854), 8);
    }

    #[test]
    fn precision_hand_cases_and_monotonicity() {
        assert_eq!(precision_at_k(&[0.6, 0.4], 0.5).unwrap(), 0.5);
        let ones = [1.0; 5];
        for k in [0.5, 0.7, 0.9] {
            assert_eq!(precision_at_k(&ones, k).unwrap(), 1.0);
        }
        assert_eq!(precision_at_k(&ones, 1.0).unwrap(), 0.0);
        assert!(precision_at_k(&[], 0.5).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ious: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut last = 1.0;
        for i in 0..=10 {
            let k = i as f64 / 10.0;
            let p = precision_at_k(&ious, k).unwrap();
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn map_hand_cases_and_bound() {
        assert_eq!(mean_ap(&[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mean_ap(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(mean_ap(&[0.72]).unwrap(), 0.5);
        assert!(mean_ap(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let ious: Vec<f64> = (0..15).map(|_| rng.gen_range(0.0..1.0)).collect();
            assert!(mean_ap(&ious).unwrap() <= precision_at_k(&ious, 0.5).unwrap() + 1e-15);
        }
    }

    #[test]
    fn iou_summaries_pool_and_average() {
        let a = Tensor::filled(&[4, 4], 1.0);
        let (o, m) = overall_and_mean_iou(&[(&a, &a)]).unwrap();
        assert_eq!(o, 1.0);
        assert_eq!(m, 1.0);

        // IoU 1 and IoU 0 with equal union sizes: both summaries 0.5.
        let b = mask(&[4, 4], &[(0, 0), (0, 1)]);
        let c = mask(&[4, 4], &[(3, 3), (3, 2)]);
        let d = mask(&[4, 4], &[(0, 0)]);
        let (o, m) = overall_and_mean_iou(&[(&d, &d), (&b, &c)]).unwrap();
        // Pair 1: inter 1, union 1. Pair 2: inter 0, union 4.
        assert_eq!(o, 0.2);
        assert_eq!(m, 0.5);
        assert!(overall_and_mean_iou(&[]).is_err());
    }

    #[test]
    fn evaluate_identity_and_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let gt: Vec<Tensor> = (0..3)
            .map(|_| {
                let m = random_mask(8, 8, 0.3, &mut rng);
                let mut v = m.data().to_vec();
                v.extend_from_slice(m.data());
                Tensor::from_vec(&[2, 8, 8], v).unwrap()
            })
            .collect();
        let report = evaluate(&gt, &gt, &[0.5, 0.9], "h").unwrap();
        assert_eq!(report.j, 1.0);
        assert_eq!(report.f, 1.0);
        assert_eq!(report.j_and_f, 1.0);
        assert_eq!(report.map, 1.0);
        assert_eq!(report.overall_iou, 1.0);
        assert_eq!(report.mean_iou, 1.0);
        assert_eq!(report.precision_at["0.50"], 1.0);

        let empty: Vec<Tensor> = gt.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let floor = evaluate(&empty, &gt, &[0.5], "h").unwrap();
        assert_eq!(floor.j, 0.0);
        assert_eq!(floor.f, 0.0);
        assert_eq!(floor.j_and_f, 0.0);

        assert!(evaluate(&gt[0..1], &gt, &[0.5], "h").is_err());
    }

    #[test]
    fn evaluate_matches_brute_force_on_a_mixed_suite() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let t = 2usize;
        let (h, w) = (8usize, 8usize);
        let videos = 20usize;
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..videos {
            let make = |rng: &mut ChaCha8Rng| {
                Tensor::from_fn(&[t, h, w], |_| if rng.gen_bool(0.35) { 1.0 } else { 0.0 })
            };
            preds.push(make(&mut rng));
            gts.push(make(&mut rng));
        }
        let report = evaluate(&preds, &gts, &[0.5, 0.7], "fixture").unwrap();

        // Straight-line recomputation.
        let tol = boundary_tolerance(h, w);
        let mut j_sum = 0.0;
        let mut f_sum = 0.0;
        let mut ious = Vec::new();
        let mut inter_all = 0usize;
        let mut union_all = 0usize;
        let mut mean_frames = 0.0;
        for (p, g) in preds.iter().zip(&gts) {
            let mut jv = 0.0;
            let mut fv = 0.0;
            let mut vi = 0usize;
            let mut vu = 0usize;
            for f in 0..t {
                let pf = frame_slice(p, f).unwrap();
                let gf = frame_slice(g, f).unwrap();
                jv += jaccard(&pf, &gf).unwrap();
                fv += boundary_f(&pf, &gf, tol).unwrap();
                let (i, u) = intersection_union(pf.data(), gf.data());
                vi += i;
                vu += u;
                inter_all += i;
                union_all += u;
                mean_frames += if u == 0 { 1.0 } else { i as f64 / u as f64 };
            }
            j_sum += jv / t as f64;
            f_sum += fv / t as f64;
            ious.push(if vu == 0 { 1.0 } else { vi as f64 / vu as f64 });
        }
        let j = j_sum / videos as f64;
        let f = f_sum / videos as f64;
        assert!((report.j - j).abs() <= 1e-12);
        assert!((report.f - f).abs() <= 1e-12);
        assert_eq!(report.j_and_f, (report.j + report.f) / 2.0);
        assert!(
            (report.precision_at["0.50"] - precision_at_k(&ious, 0.5).unwrap()).abs() <= 1e-12
        );
        assert!((report.map - mean_ap(&ious).unwrap()).abs() <= 1e-12);
        assert!((report.overall_iou - inter_all as f64 / union_all as f64).abs() <= 1e-12);
        assert!((report.mean_iou - mean_frames / (videos * t) as f64).abs() <= 1e-12);
    }

    #[test]
    fn boundary_f_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..10 {
            let a = random_mask(7, 7, 0.35, &mut rng);
            let b = random_mask(7, 7, 0.35, &mut rng);
            assert_eq!(
                boundary_f(&a, &b, 1).unwrap(),
                boundary_f(&b, &a, 1).unwrap()
            );
        }
    }

    #[test]
    fn report_serializes_with_fixed_key_order() {
        let gt = vec![Tensor::filled(&[1, 4, 4], 1.0)];
        let report = evaluate(&gt, &gt, &[0.5], "abc").unwrap();
        let text = serde_json::to_string(&report).unwrap();
        let j_pos = text.find("\"j\"").unwrap();
        let f_pos = text.find("\"f\"").unwrap();
        let jf_pos = text.find("\"j_and_f\"").unwrap();
        let map_pos = text.find("\"map\"").unwrap();
        assert!(text.starts_with("{\"config_hash\""));
        assert!(j_pos < f_pos && f_pos < jf_pos && jf_pos < map_pos);
    }
}
