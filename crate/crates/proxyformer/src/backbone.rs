//! Frame encoder and text pipeline.
//!
//! Video enters as `[T, H, W, 3]` RGB in `[0, 1]`. Frames are padded on the
//! right and bottom to multiples of 16 (mirror padding, edge excluded) and
//! pushed through a three-stage convolutional pyramid:
//!
//! ```text
//! stage 1: 4x4 / stride 4        3 -> C/4   relu   (stride  4 map)
//! stage 2: 3x3 / stride 2, pad 1 C/4 -> C/2 relu   (stride  8 map)
//! stage 3: 3x3 / stride 2, pad 1 C/2 -> C   linear (stride 16 map)
//! ```
//!
//! The stride-16 map feeds the interaction encoder; the finer maps feed the
//! mask decoder. Text is a fixed closed vocabulary; expressions embed as one
//! learned row per token with no positional term, since every word class
//! (color, shape, motion) is disjoint and order carries no extra meaning.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::init::{register_conv, register_zeros};
use crate::numerics::tensor::{ParamId, ParamSet, Tensor};

/// Spatial alignment required by the pyramid.
pub const STRIDE_MULTIPLE: usize = 16;

/// Fixed token budget per expression.
pub const MAX_TEXT_LEN: usize = 16;

pub const PAD_TOKEN: usize = 0;
pub const UNK_TOKEN: usize = 1;

/// Closed word list of the synthetic task.
///
/// Ids are stable: 0 and 1 are reserved for padding and unknown words, the
/// rest follow the order below.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<&'static str>,
}

const WORDS: &[&str] = &[
    "<pad>", "<unk>", "the", "moving", "red", "green", "blue", "yellow", "circle", "square",
    "triangle", "left", "right", "up", "down",
];

impl Vocabulary {
    pub fn standard() -> Vocabulary {
        Vocabulary {
            words: WORDS.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|&w| w == word)
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    /// Lowercases, splits on whitespace, maps unknown words to `<unk>`,
    /// clips to [`MAX_TEXT_LEN`] real tokens, and right-pads with `<pad>`.
    /// An expression with no tokens at all is refused.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .take(MAX_TEXT_LEN)
            .map(|w| {
                let lower = w.to_lowercase();
                self.id(&lower).unwrap_or(UNK_TOKEN)
            })
            .collect();
        if ids.is_empty() {
            return Err(Error::invalid("tokenize: empty expression".to_string()));
        }
        ids.resize(MAX_TEXT_LEN, PAD_TOKEN);
        Ok(ids)
    }
}

/// Learned word embeddings plus a learned positional table, so repeated
/// words still produce distinct feature rows.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub pos: ParamId,
}

impl TextEncoder {
    pub fn register(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        vocab: &Vocabulary,
        model_dim: usize,
    ) -> Result<TextEncoder> {
        let embed = params.register(
            "text.embed",
            crate::numerics::init::xavier_uniform(
                rng,
                &[vocab.len(), model_dim],
                vocab.len(),
                model_dim,
            ),
        )?;
        let pos = params.register(
            "text.pos",
            crate::numerics::init::xavier_uniform(
                rng,
                &[MAX_TEXT_LEN, model_dim],
                MAX_TEXT_LEN,
                model_dim,
            ),
        )?;
        Ok(TextEncoder { embed, pos })
    }

    /// Embeds the non-padding prefix of a token row as `[L, C]`:
    /// word embedding + positional embedding per slot.
    ///
    /// Trailing `<pad>` tokens are dropped rather than masked: every later
    /// consumer attends over exactly the real tokens.
    pub fn encode(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        tokens: &[usize],
    ) -> Result<NodeId> {
        let len = tokens
            .iter()
            .rposition(|&t| t != PAD_TOKEN)
            .map(|p| p + 1)
            .unwrap_or(0);
        if len == 0 {
            return Err(Error::invalid(
                "encode_text: expression has no real tokens".to_string(),
            ));
        }
        if len > MAX_TEXT_LEN {
            return Err(Error::invalid(format!(
                "encode_text: {len} tokens exceed the budget of {MAX_TEXT_LEN}"
            )));
        }
        let table = g.param(params, self.embed);
        let rows = g.shape(table)[0];
        for &t in &tokens[..len] {
            if t >= rows {
                return Err(Error::invalid(format!(
                    "encode_text: token id {t} outside vocabulary of {rows}"
                )));
            }
        }
        let words = g.gather_rows(table, &tokens[..len])?;
        let pos_table = g.param(params, self.pos);
        let slots: Vec<usize> = (0..len).collect();
        let pos_rows = g.gather_rows(pos_table, &slots)?;
        g.add(words, pos_rows)
    }
}

/// Mirror index for right/bottom padding, edge excluded
/// (`[a b c d] -> [a b c d c b a b ...]`).
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Pads `[T, H, W, ch]` data on the right and bottom to the next multiples
/// of [`STRIDE_MULTIPLE`] by mirroring. Returns the input unchanged when
/// already aligned.
pub fn pad_frames(frames: &Tensor) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!(
            "pad_frames: expected [T, H, W, ch], got {s:?}"
        )));
    }
    let (t, h, w, ch) = (s[0], s[1], s[2], s[3]);
    if h == 0 || w == 0 {
        return Err(Error::shape("pad_frames: empty frame".to_string()));
    }
    let ph = h.div_ceil(STRIDE_MULTIPLE) * STRIDE_MULTIPLE;
    let pw = w.div_ceil(STRIDE_MULTIPLE) * STRIDE_MULTIPLE;
    if ph == h && pw == w {
        return Ok(frames.clone());
    }
    let src = frames.data();
    let mut out = vec![0.0; t * ph * pw * ch];
    for ti in 0..t {
        for y in 0..ph {
            let sy = reflect_index(y, h);
            for x in 0..pw {
                let sx = reflect_index(x, w);
                let sbase = ((ti * h + sy) * w + sx) * ch;
                let dbase = ((ti * ph + y) * pw + x) * ch;
                out[dbase..dbase + ch].copy_from_slice(&src[sbase..sbase + ch]);
            }
        }
    }
    Tensor::from_vec(&[t, ph, pw, ch], out)
}

/// Stride 4 / 8 / 16 feature maps of one clip, all on the padded canvas.
pub struct VideoPyramid {
    /// `[T, H/4, W/4, C/4]`
    pub l4: NodeId,
    /// `[T, H/8, W/8, C/2]`
    pub l8: NodeId,
    /// `[T, H/16, W/16, C]`
    pub l16: NodeId,
    /// Padded canvas size (multiple of 16 each).
    pub padded: (usize, usize),
    /// Original frame size before padding.
    pub original: (usize, usize),
}

impl VideoPyramid {
    /// Stride-16 grid size `(h, w)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.padded.0 / 16, self.padded.1 / 16)
    }

    /// Stride-16 token count per frame.
    pub fn tokens_per_frame(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

/// The convolutional pyramid parameters.
#[derive(Debug, Clone, Copy)]
pub struct Backbone {
    pub model_dim: usize,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    conv3_w: ParamId,
    conv3_b: ParamId,
}

impl Backbone {
    pub fn register(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        model_dim: usize,
    ) -> Result<Backbone> {
        if model_dim % 4 != 0 || model_dim == 0 {
            return Err(Error::Config(format!(
                "model width must be a positive multiple of 4, got {model_dim}"
            )));
        }
        let c4 = model_dim / 4;
        let c2 = model_dim / 2;
        Ok(Backbone {
            model_dim,
            conv1_w: register_conv(params, "backbone.conv1.w", rng, 4, 4, 3, c4)?,
            conv1_b: register_zeros(params, "backbone.conv1.b", &[c4])?,
            conv2_w: register_conv(params, "backbone.conv2.w", rng, 3, 3, c4, c2)?,
            conv2_b: register_zeros(params, "backbone.conv2.b", &[c2])?,
            conv3_w: register_conv(params, "backbone.conv3.w", rng, 3, 3, c2, model_dim)?,
            conv3_b: register_zeros(params, "backbone.conv3.b", &[model_dim])?,
        })
    }

    /// Encodes `[T, H, W, 3]` frames into the three-level pyramid.
    pub fn encode_video(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        frames: &Tensor,
    ) -> Result<VideoPyramid> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::shape(format!(
                "encode_video: expected [T, H, W, 3], got {s:?}"
            )));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite {
                term: "encode_video input".to_string(),
                value: f64::NAN,
            });
        }
        let (h, w) = (s[1], s[2]);
        let padded = pad_frames(frames)?;
        let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
        let x = g.input(padded);

        let w1 = g.param(params, self.conv1_w);
        let b1 = g.param(params, self.conv1_b);
        let y1 = g.conv2d(x, w1, Some(b1), 4, 0)?;
        let l4 = g.relu(y1);

        let w2 = g.param(params, self.conv2_w);
        let b2 = g.param(params, self.conv2_b);
        let y2 = g.conv2d(l4, w2, Some(b2), 2, 1)?;
        let l8 = g.relu(y2);

        let w3 = g.param(params, self.conv3_w);
        let b3 = g.param(params, self.conv3_b);
        let l16 = g.conv2d(l8, w3, Some(b3), 2, 1)?;

        Ok(VideoPyramid {
            l4,
            l8,
            l16,
            padded: (ph, pw),
            original: (h, w),
        })
    }

    /// Flattens the stride-16 map to interaction tokens `[T, HW, C]`.
    pub fn tokens(&self, g: &mut Graph, pyramid: &VideoPyramid) -> Result<NodeId> {
        let s = g.shape(pyramid.l16).to_vec();
        g.reshape(pyramid.l16, &[s[0], s[1] * s[2], s[3]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check;
    use rand::SeedableRng;

    #[test]
    fn reflect_excludes_the_edge() {
        let got: Vec<usize> = (0..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(5, 1), 0);
        let two: Vec<usize> = (0..5).map(|i| reflect_index(i, 2)).collect();
        assert_eq!(two, vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn pad_is_identity_on_aligned_frames() {
        let frames = Tensor::from_fn(&[1, 32, 16, 3], |i| i as f64);
        let padded = pad_frames(&frames).unwrap();
        assert_eq!(padded.shape(), frames.shape());
        assert_eq!(padded.data(), frames.data());
    }

    #[test]
    fn pad_mirrors_right_and_bottom() {
        let frames = Tensor::from_fn(&[1, 17, 20, 3], |i| (i % 97) as f64);
        let padded = pad_frames(&frames).unwrap();
        assert_eq!(padded.shape(), &[1, 32, 32, 3]);
        // Row 17 mirrors row 15, column 20 mirrors column 18.
        for ch in 0..3 {
            let want_row = frames.at(&[0, 15, 4, ch]);
            assert_eq!(padded.at(&[0, 17, 4, ch]), want_row);
            let want_col = frames.at(&[0, 4, 18, ch]);
            assert_eq!(padded.at(&[0, 4, 20, ch]), want_col);
        }
    }

    #[test]
    fn pyramid_shapes_at_reference_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let bb = Backbone::register(&mut ps, &mut rng, 32).unwrap();
        let frames = Tensor::filled(&[2, 64, 64, 3], 0.25);
        let mut g = Graph::new(false);
        let pyr = bb.encode_video(&mut g, &ps, &frames).unwrap();
        assert_eq!(g.shape(pyr.l4), &[2, 16, 16, 8]);
        assert_eq!(g.shape(pyr.l8), &[2, 8, 8, 16]);
        assert_eq!(g.shape(pyr.l16), &[2, 4, 4, 32]);
        assert_eq!(pyr.grid(), (4, 4));
        assert_eq!(pyr.tokens_per_frame(), 16);
        let tok = bb.tokens(&mut g, &pyr).unwrap();
        assert_eq!(g.shape(tok), &[2, 16, 32]);
    }

    #[test]
    fn unaligned_input_pads_then_crops_nothing_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let bb = Backbone::register(&mut ps, &mut rng, 8).unwrap();
        let frames = Tensor::filled(&[1, 50, 70, 3], 0.5);
        let mut g = Graph::new(false);
        let pyr = bb.encode_video(&mut g, &ps, &frames).unwrap();
        assert_eq!(pyr.padded, (64, 80));
        assert_eq!(pyr.original, (50, 70));
        assert_eq!(g.shape(pyr.l16), &[1, 4, 5, 8]);
    }

    #[test]
    fn rejects_bad_widths_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        assert!(Backbone::register(&mut ps, &mut rng, 30).is_err());
        let bb = Backbone::register(&mut ps, &mut rng, 8).unwrap();
        let mut g = Graph::new(false);
        let bad = Tensor::zeros(&[1, 16, 16, 4]);
        assert!(bb.encode_video(&mut g, &ps, &bad).is_err());
        let nan = Tensor::filled(&[1, 16, 16, 3], f64::NAN);
        assert!(bb.encode_video(&mut g, &ps, &nan).is_err());
    }

    #[test]
    fn tokenizer_contract() {
        let vocab = Vocabulary::standard();
        let ids = vocab.tokenize("the RED circle moving left").unwrap();
        assert_eq!(ids.len(), MAX_TEXT_LEN);
        assert_eq!(
            &ids[..5],
            &[
                vocab.id("the").unwrap(),
                vocab.id("red").unwrap(),
                vocab.id("circle").unwrap(),
                vocab.id("moving").unwrap(),
                vocab.id("left").unwrap()
            ]
        );
        assert!(ids[5..].iter().all(|&t| t == PAD_TOKEN));

        let unk = vocab.tokenize("the purple blob").unwrap();
        assert_eq!(unk[1], UNK_TOKEN);
        assert_eq!(unk[2], UNK_TOKEN);

        let long: String = vec!["red"; 40].join(" ");
        let clipped = vocab.tokenize(&long).unwrap();
        assert!(clipped.iter().all(|&t| t == vocab.id("red").unwrap()));

        assert!(vocab.tokenize("   ").is_err());
    }

    #[test]
    fn text_encoding_trims_padding() {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let te = TextEncoder::register(&mut ps, &mut rng, &vocab, 8).unwrap();
        let tokens = vocab.tokenize("the blue square moving up").unwrap();
        let mut g = Graph::new(false);
        let f_t = te.encode(&mut g, &ps, &tokens).unwrap();
        assert_eq!(g.shape(f_t), &[5, 8]);
        // All-pad row is refused.
        assert!(te.encode(&mut g, &ps, &[PAD_TOKEN; 4]).is_err());
    }

    #[test]
    fn repeated_word_rows_differ_by_position() {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamSet::new();
        let te = TextEncoder::register(&mut ps, &mut rng, &vocab, 8).unwrap();
        let red = vocab.id("red").unwrap();
        let mut g = Graph::new(false);
        let f_t = te.encode(&mut g, &ps, &[red, red]).unwrap();
        let rows = g.data(f_t);
        assert_ne!(&rows[..8], &rows[8..]);
    }

    #[test]
    fn pyramid_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let bb = Backbone::register(&mut ps, &mut rng, 4).unwrap();
        let frames = Tensor::from_fn(&[1, 16, 16, 3], |i| ((i * 37 % 101) as f64) / 101.0);
        let report = finite_diff_check(&mut ps, 1e-5, 1e-6, |ps, g| {
            let pyr = bb.encode_video(g, ps, &frames)?;
            let sq4 = g.mul(pyr.l4, pyr.l4)?;
            let sq16 = g.mul(pyr.l16, pyr.l16)?;
            let s4 = g.sum_all(sq4);
            let s16 = g.sum_all(sq16);
            g.add(s4, s16)
        })
        .unwrap();
        assert!(report.passed(), "worst rel err {}", report.worst());
    }
}
