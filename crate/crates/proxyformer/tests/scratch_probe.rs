// Scratch diagnostic, not part of the suite. Delete before release.
#![allow(clippy::needless_range_loop)]

use proxyformer::config::RunConfig;
use proxyformer::model::Model;
use proxyformer::numerics::graph::Graph;
use proxyformer::synthdata::{load_index, load_sample};
use proxyformer::training::{
    dice_term, downsample_masks_s4, focal_term, load_checkpoint, padded_extent, restore_params,
    select_positive, SupervisionView, TrajectoryView,
};
use proxyformer::numerics::tensor::ParamSet;
use std::path::Path;

struct QueryBuffers {
    probs: Vec<f64>,
    boxes: Vec<f64>,
    masks: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn iou(pred: &[bool], gt: &[f64]) -> f64 {
    let mut i = 0usize;
    let mut u = 0usize;
    for (p, &g) in pred.iter().zip(gt) {
        let g = g > 0.5;
        if *p && g {
            i += 1;
        }
        if *p || g {
            u += 1;
        }
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

#[test]
#[ignore]
fn probe_run() {
    let ckpt = load_checkpoint(Path::new("/tmp/desk_run9/checkpoint.bin")).unwrap();
    let config: RunConfig = serde_json::from_str(&ckpt.config_json).unwrap();
    let mut params = ParamSet::new();
    let model = Model::register(&mut params, &config).unwrap();
    restore_params(&mut params, &ckpt).unwrap();

    let root = Path::new(&config.data.path);
    let index = load_index(root).unwrap();
    let entries: Vec<_> = index.val.iter().collect();

    let hp = padded_extent(config.data.canvas);
    let wp = hp;
    let (h4, w4) = (hp / 4, wp / 4);
    let area = h4 * w4;

    let mut sel_hits = 0usize;
    let mut sel_ious = Vec::new();
    let mut orc_ious = Vec::new();
    let mut per_query_counts = vec![0usize; config.model.n];

    for (vi, entry) in entries.iter().enumerate().take(30) {
        let s = load_sample(root, entry).unwrap();
        let mut g = Graph::new(false);
        let out = model.forward(&mut g, &params, &s.frames, &s.token_ids).unwrap();
        let t = s.frames.shape()[0];
        let n = config.model.n;
        let cp = g.data(out.class_probs).to_vec();
        let ml = g.data(out.mask_logits).to_vec();
        let masks4 = downsample_masks_s4(&s.gt.masks, hp, wp).unwrap();

        // stride-4 IoU per query, averaged over valid frames
        let mut q_iou = vec![0.0f64; n];
        for q in 0..n {
            let mut acc = 0.0;
            let mut cnt = 0usize;
            for f in 0..t {
                if !s.gt.valid[f] {
                    continue;
                }
                let base = (f * n + q) * area;
                let pred: Vec<bool> = ml[base..base + area].iter().map(|&l| l > 0.0).collect();
                let gtf = &masks4.data()[f * area..(f + 1) * area];
                acc += iou(&pred, gtf);
                cnt += 1;
            }
            q_iou[q] = if cnt > 0 { acc / cnt as f64 } else { 1.0 };
        }
        let mut sel = 0usize;
        let mut best_mean = f64::NEG_INFINITY;
        for q in 0..n {
            let m = (0..t).map(|f| cp[f * n + q]).sum::<f64>() / t as f64;
            if m > best_mean {
                best_mean = m;
                sel = q;
            }
        }
        let orc = (0..n)
            .max_by(|&a, &b| q_iou[a].partial_cmp(&q_iou[b]).unwrap())
            .unwrap();
        if sel == orc {
            sel_hits += 1;
        }
        sel_ious.push(q_iou[sel]);
        orc_ious.push(q_iou[orc]);

        // matched query per training-style matching
        let bx = g.data(out.boxes).to_vec();
        let buffers: Vec<QueryBuffers> = (0..n)
            .map(|q| {
                let mut probs = Vec::with_capacity(t);
                let mut boxes = Vec::with_capacity(4 * t);
                let mut masks = Vec::with_capacity(t * area);
                for f in 0..t {
                    probs.push(cp[f * n + q]);
                    boxes.extend_from_slice(&bx[(f * n + q) * 4..(f * n + q) * 4 + 4]);
                    let base = (f * n + q) * area;
                    masks.extend(ml[base..base + area].iter().map(|&l| sigmoid(l)));
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
            valid: &s.gt.valid,
            boxes: s.gt.boxes.data(),
            masks4: masks4.data(),
        };
        let matched = select_positive(&views, &sup, area, &config.loss).unwrap();
        per_query_counts[matched.positive_index] += 1;

        if vi < 6 {
            let scores: Vec<String> = (0..n)
                .map(|q| {
                    let m = (0..t).map(|f| cp[f * n + q]).sum::<f64>() / t as f64;
                    format!("{m:.3}")
                })
                .collect();
            println!(
                "video {vi}: expr={:?} sel={sel} orc={orc} matched={} sel_iou={:.3} orc_iou={:.3} scores=[{}] per_q_iou={:?}",
                s.meta.scene.expression,
                matched.positive_index,
                q_iou[sel],
                q_iou[orc],
                scores.join(","),
                q_iou.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
            );
        }
        // ASCII of frame 0 for first two videos: oracle query pred vs gt
        if vi < 2 {
            let f = 0usize;
            let base = (f * n + orc) * area;
            println!("frame0 oracle-query logits>0 ('#') vs gt ('o'), overlap '@':");
            for r in 0..h4 {
                let mut line = String::new();
                for c in 0..w4 {
                    let p = ml[base + r * w4 + c] > 0.0;
                    let gt = masks4.data()[f * area + r * w4 + c] > 0.5;
                    line.push(match (p, gt) {
                        (true, true) => '@',
                        (true, false) => '#',
                        (false, true) => 'o',
                        (false, false) => '.',
                    });
                }
                println!("{line}");
            }
            // logits stats for the oracle query
            let lo = ml[base..base + area]
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let hi = ml[base..base + area]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            println!("frame0 oracle logits range [{lo:.2}, {hi:.2}]");
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "videos={} sel_hits={} mean_sel_iou={:.4} mean_orc_iou={:.4} matched_hist={:?}",
        sel_ious.len(),
        sel_hits,
        mean(&sel_ious),
        mean(&orc_ious),
        per_query_counts
    );

    // per-term losses on the first 4 videos (positive-query terms)
    for (vi, entry) in entries.iter().enumerate().take(4) {
        let s = load_sample(root, entry).unwrap();
        let mut g = Graph::new(false);
        let out = model.forward(&mut g, &params, &s.frames, &s.token_ids).unwrap();
        let t = s.frames.shape()[0];
        let n = config.model.n;
        let cp = g.data(out.class_probs).to_vec();
        let ml = g.data(out.mask_logits).to_vec();
        let bx = g.data(out.boxes).to_vec();
        let masks4 = downsample_masks_s4(&s.gt.masks, hp, wp).unwrap();
        let buffers: Vec<QueryBuffers> = (0..n)
            .map(|q| {
                let mut probs = Vec::with_capacity(t);
                let mut boxes = Vec::with_capacity(4 * t);
                let mut masks = Vec::with_capacity(t * area);
                for f in 0..t {
                    probs.push(cp[f * n + q]);
                    boxes.extend_from_slice(&bx[(f * n + q) * 4..(f * n + q) * 4 + 4]);
                    let base = (f * n + q) * area;
                    masks.extend(ml[base..base + area].iter().map(|&l| sigmoid(l)));
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
            valid: &s.gt.valid,
            boxes: s.gt.boxes.data(),
            masks4: masks4.data(),
        };
        let matched = select_positive(&views, &sup, area, &config.loss).unwrap();
        let pos = matched.positive_index;

        // cls focal over all queries
        let mut cls = 0.0;
        for f in 0..t {
            for q in 0..n {
                let target = q == pos && s.gt.valid[f];
                cls += focal_term(cp[f * n + q], target, 0.25, 2.0);
            }
        }
        cls /= (t * n) as f64;

        let vids: Vec<usize> = (0..t).filter(|&f| s.gt.valid[f]).collect();
        let mut dice = 0.0;
        let mut focal = 0.0;
        let mut l1 = 0.0;
        for &f in &vids {
            let base = (f * n + pos) * area;
            let pred: Vec<f64> = ml[base..base + area].iter().map(|&l| sigmoid(l)).collect();
            let gtf = &masks4.data()[f * area..(f + 1) * area];
            dice += dice_term(&pred, gtf).unwrap();
            let mut fsum = 0.0;
            for (p, &gv) in pred.iter().zip(gtf) {
                fsum += focal_term(*p, gv > 0.5, 0.25, 2.0);
            }
            focal += fsum / area as f64;
            let bbase = (f * n + pos) * 4;
            for j in 0..4 {
                l1 += (bx[bbase + j] - s.gt.boxes.at(&[f, j])).abs();
            }
        }
        let vl = vids.len() as f64;
        dice /= vl;
        focal /= vl;
        l1 /= vl;
        println!(
            "video {vi}: cls={cls:.4} dice={dice:.4} focal={focal:.4} l1={l1:.4} weighted≈ cls*2={:.3} dice*5={:.3} focal*2={:.3} l1*5={:.3}",
            cls * 2.0,
            dice * 5.0,
            focal * 2.0,
            l1 * 5.0
        );
    }
}
