//! End-to-end assembly: convolutional backbone, text encoder, proxy
//! queries, the interaction stack, and the prediction heads under one
//! parameter set.
//!
//! Registration order is the initialization contract. Every module draws
//! from a single seeded stream, so inserting or reordering a parameter
//! would silently change every draw after the move; the order below is
//! frozen and the checkpoint loader verifies names against it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, TextEncoder, VideoPyramid, Vocabulary};
use crate::cmie::{CmieOptions, CmieParams, PosNodes, ProxyEmbed};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::heads::{
    crop_logits, fpn_decode, mask_kernels, mask_logits_stride4, reference_head,
    upsample_mask_logits, HeadParams,
};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::{AttentionConfig, ParamSet, Tensor};

/// The full network. Holds layout handles only; the parameter values
/// live in the caller's [`ParamSet`].
pub struct Model {
    pub vocab: Vocabulary,
    pub attn: AttentionConfig,
    pub opts: CmieOptions,
    pub backbone: Backbone,
    pub text: TextEncoder,
    pub proxy: ProxyEmbed,
    pub cmie: CmieParams,
    pub heads: HeadParams,
}

/// Graph handles produced by one forward pass over a clip.
pub struct ModelOutputs {
    pub pyramid: VideoPyramid,
    /// Encoded video tokens `[T, HW, C]` after the last stage.
    pub video: NodeId,
    /// Proxy queries `[T, N, C]` after the last stage.
    pub proxies: NodeId,
    /// Text features `[L, C]`.
    pub text: NodeId,
    /// Mask features `[T, H4, W4, C_seg]` on the stride-4 grid.
    pub seg: NodeId,
    /// Per-query mask logits `[T, N, H4, W4]`.
    pub mask_logits: NodeId,
    /// Per-query class probability `[T, N, 1]`.
    pub class_probs: NodeId,
    /// Per-query normalized boxes `[T, N, 4]` as (cx, cy, w, h).
    pub boxes: NodeId,
}

/// One decoded trajectory: the selected query and its per-frame outputs
/// at the original resolution.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub query: usize,
    /// `[T, H0, W0]` binary masks (probability strictly above 0.5).
    pub masks: Tensor,
    /// Per-frame (cx, cy, w, h), normalized.
    pub boxes: Vec<[f64; 4]>,
    /// Per-frame class probability of the selected query.
    pub scores: Vec<f64>,
}

impl Model {
    pub fn register(params: &mut ParamSet, config: &RunConfig) -> Result<Model> {
        config.validate()?;
        let c = config.model.c;
        let attn = AttentionConfig::new(c, config.model.heads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let vocab = Vocabulary::standard();
        let backbone = Backbone::register(params, &mut rng, c)?;
        let text = TextEncoder::register(params, &mut rng, &vocab, c)?;
        let proxy = ProxyEmbed::register(params, &mut rng, config.model.n, config.data.t, c)?;
        let cmie = CmieParams::register(params, &attn, &mut rng, config.model.k)?;
        let heads = HeadParams::register(
            params,
            &mut rng,
            c,
            config.model.c_seg,
            config.model.joint_combine.into(),
        )?;
        let opts = CmieOptions {
            pool: config.model.pool.into(),
            v2p_reads_updated: config.model.v2p_reads_updated,
            use_p2v: config.model.use_p2v,
        };
        Ok(Model {
            vocab,
            attn,
            opts,
            backbone,
            text,
            proxy,
            cmie,
            heads,
        })
    }

    /// Runs the whole pipeline on one clip and expression.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        frames: &Tensor,
        token_ids: &[usize],
    ) -> Result<ModelOutputs> {
        let pyramid = self.backbone.encode_video(g, params, frames)?;
        let tokens = self.backbone.tokens(g, &pyramid)?;
        let f_t = self.text.encode(g, params, token_ids)?;

        let t = frames.shape()[0];
        let (gh, gw) = pyramid.grid();
        let pos = PosNodes::build(g, params, &self.proxy, t, gh, gw, self.attn.model_dim)?;
        let (video, proxies) =
            self.cmie
                .forward(g, params, &self.attn, &self.opts, tokens, pos.q0, f_t, &pos)?;

        let encoded = g.reshape(video, &[t, gh, gw, self.attn.model_dim])?;
        let seg = fpn_decode(g, params, &self.heads, &pyramid, encoded)?;
        let kernels = mask_kernels(g, params, &self.heads, proxies)?;
        let mask_logits = mask_logits_stride4(g, kernels, seg)?;
        let (class_probs, boxes) = reference_head(g, params, &self.heads, proxies)?;

        Ok(ModelOutputs {
            pyramid,
            video,
            proxies,
            text: f_t,
            seg,
            mask_logits,
            class_probs,
            boxes,
        })
    }

    /// Full inference: select one query, decode its trajectory at the
    /// original resolution, and threshold the masks.
    pub fn predict(
        &self,
        params: &ParamSet,
        frames: &Tensor,
        token_ids: &[usize],
    ) -> Result<Prediction> {
        let mut g = Graph::new(false);
        let out = self.forward(&mut g, params, frames, token_ids)?;
        let cs = g.shape(out.class_probs).to_vec();
        let (t, n) = (cs[0], cs[1]);
        let query = select_query(g.data(out.class_probs), t, n)?;

        // Slice the chosen query before the upsample; decoding all N at
        // full resolution would multiply the dominant cost by N.
        let ls = g.shape(out.mask_logits).to_vec();
        let by_query = g.permute(out.mask_logits, &[1, 0, 2, 3])?;
        let picked = g.gather_rows(by_query, &[query])?;
        let picked = g.reshape(picked, &[t, 1, ls[2], ls[3]])?;
        let (hp, wp) = out.pyramid.padded;
        let up = upsample_mask_logits(&mut g, picked, hp, wp)?;

        let (h0, w0) = out.pyramid.original;
        let logits = crop_logits(&g.value_tensor(up), h0, w0)?;
        let mut masks = Tensor::zeros(&[t, h0, w0]);
        {
            let src = logits.data();
            let dst = masks.data_mut();
            for (d, &l) in dst.iter_mut().zip(src.iter()) {
                // sigmoid(l) > 0.5 iff l > 0; comparing logits avoids
                // round-off at the decision boundary.
                *d = if l > 0.0 { 1.0 } else { 0.0 };
            }
        }

        let box_data = g.data(out.boxes);
        let score_data = g.data(out.class_probs);
        let mut boxes = Vec::with_capacity(t);
        let mut scores = Vec::with_capacity(t);
        for f in 0..t {
            let base = (f * n + query) * 4;
            boxes.push([
                box_data[base],
                box_data[base + 1],
                box_data[base + 2],
                box_data[base + 3],
            ]);
            scores.push(score_data[f * n + query]);
        }
        Ok(Prediction {
            query,
            masks,
            boxes,
            scores,
        })
    }
}

/// Picks the query with the highest class probability averaged over
/// frames; exact ties go to the lowest index.
pub fn select_query(class_probs: &[f64], t: usize, n: usize) -> Result<usize> {
    if t == 0 || n == 0 || class_probs.len() != t * n {
        return Err(Error::invalid(format!(
            "select_query: {} probabilities do not form [{t}, {n}]",
            class_probs.len()
        )));
    }
    let mut best = 0usize;
    let mut best_mean = f64::NEG_INFINITY;
    for q in 0..n {
        let mean = (0..t).map(|f| class_probs[f * n + q]).sum::<f64>() / t as f64;
        if mean > best_mean {
            best_mean = mean;
            best = q;
        }
    }
    Ok(best)
}

/// Coarse grouping of parameter names for diagnostic reports: the prefix
/// before the first dot, folded into the owning pipeline stage.
pub fn module_label(param_name: &str) -> &'static str {
    match param_name.split('.').next().unwrap_or("") {
        "backbone" | "text" => "backbone",
        "proxy" | "cmie" => "cmie",
        "fpn" | "kernel" | "class" | "box" | "joint" => "heads",
        _ => "other",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene_for, render, Difficulty};

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.c = 8;
        cfg.model.k = 2;
        cfg.model.n = 2;
        cfg.model.heads = 2;
        cfg.model.c_seg = 4;
        cfg.train.omega = 2;
        cfg.data.t = 2;
        cfg.data.canvas = 32;
        cfg
    }

    fn tiny_sample(seed: u64) -> crate::synthdata::Sample {
        let scene = generate_scene_for(seed, Difficulty::Easy, 2, 32);
        render(&scene, 2, 32, 32).unwrap()
    }

    #[test]
    fn forward_produces_the_contracted_shapes() {
        let cfg = tiny_config();
        let mut params = ParamSet::new();
        let model = Model::register(&mut params, &cfg).unwrap();
        let sample = tiny_sample(3);
        let mut g = Graph::new(false);
        let out = model
            .forward(&mut g, &params, &sample.frames, &sample.token_ids)
            .unwrap();
        assert_eq!(g.shape(out.class_probs), &[2, 2, 1]);
        assert_eq!(g.shape(out.boxes), &[2, 2, 4]);
        assert_eq!(g.shape(out.mask_logits), &[2, 2, 8, 8]);
        assert_eq!(g.shape(out.seg), &[2, 8, 8, 4]);
        assert_eq!(g.shape(out.video), &[2, 4, 8]);
        assert_eq!(g.shape(out.proxies), &[2, 2, 8]);
    }

    #[test]
    fn fresh_model_is_cold_and_picks_query_zero() {
        let cfg = tiny_config();
        let mut params = ParamSet::new();
        let model = Model::register(&mut params, &cfg).unwrap();
        let sample = tiny_sample(11);
        let pred = model
            .predict(&params, &sample.frames, &sample.token_ids)
            .unwrap();
        // Zero-initialized heads: every class logit is 0, every mask logit
        // is 0, so probabilities sit at exactly 0.5 and the strict
        // threshold empties the masks.
        assert_eq!(pred.query, 0);
        assert!(pred.masks.data().iter().all(|&v| v == 0.0));
        assert!(pred.scores.iter().all(|&s| s == 0.5));
        assert!(pred
            .boxes
            .iter()
            .all(|b| b.iter().all(|&v| v == 0.5)));
        assert_eq!(pred.masks.shape(), &[2, 32, 32]);
    }

    #[test]
    fn predictions_are_deterministic() {
        let cfg = tiny_config();
        let mut params = ParamSet::new();
        let model = Model::register(&mut params, &cfg).unwrap();
        let sample = tiny_sample(29);
        let a = model
            .predict(&params, &sample.frames, &sample.token_ids)
            .unwrap();
        let b = model
            .predict(&params, &sample.frames, &sample.token_ids)
            .unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.masks), bits(&b.masks));
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn seeds_change_the_initialization() {
        let cfg_a = tiny_config();
        let mut cfg_b = tiny_config();
        cfg_b.train.seed = 43;
        let mut pa = ParamSet::new();
        let mut pb = ParamSet::new();
        Model::register(&mut pa, &cfg_a).unwrap();
        Model::register(&mut pb, &cfg_b).unwrap();
        let ids: Vec<_> = pa.ids().collect();
        let differs = ids
            .iter()
            .any(|&id| pa.value(id).data() != pb.value(id).data());
        assert!(differs);
    }

    #[test]
    fn every_parameter_maps_to_a_pipeline_stage() {
        let cfg = tiny_config();
        let mut params = ParamSet::new();
        Model::register(&mut params, &cfg).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for id in params.ids() {
            let label = module_label(params.name(id));
            assert_ne!(
                label,
                "other",
                "unclassified parameter {}",
                params.name(id)
            );
            seen.insert(label);
        }
        assert_eq!(
            seen.into_iter().collect::<Vec<_>>(),
            vec!["backbone", "cmie", "heads"]
        );
    }

    #[test]
    fn select_query_prefers_the_highest_mean_and_breaks_ties_low() {
        // [T=2, N=3]: means are 0.4, 0.55, 0.55.
        let probs = vec![0.4, 0.5, 0.6, 0.4, 0.6, 0.5];
        assert_eq!(select_query(&probs, 2, 3).unwrap(), 1);
        assert!(select_query(&probs, 3, 3).is_err());
    }

    #[test]
    fn rejects_clips_longer_than_the_time_embedding() {
        let cfg = tiny_config();
        let mut params = ParamSet::new();
        let model = Model::register(&mut params, &cfg).unwrap();
        let scene = generate_scene_for(5, Difficulty::Easy, 3, 32);
        let sample = render(&scene, 3, 32, 32).unwrap();
        let err = model
            .predict(&params, &sample.frames, &sample.token_ids)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
