//! Deterministic synthetic referring-segmentation task: videos of moving
//! colored shapes with exact per-frame masks, boxes, and a templated
//! expression naming exactly one object.
//!
//! Everything is a pure function of the seed. Rasterization is hard
//! (no anti-aliasing), centers and velocities are integers, so a constant
//! velocity translates the silhouette pixel-for-pixel and ground truth is
//! exactly binary. Depth order is list order: later objects paint over
//! earlier ones, and the referred mask is what survives occlusion.
//!
//! Difficulty tiers:
//! - easy: every object has a unique (color, shape) pair and the
//!   expression is "the <color> <shape>";
//! - hard: a decoy shares the referred object's color and shape and only
//!   the motion word disambiguates: "the <color> <shape> moving <dir>".

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Vocabulary;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const FRAMES_MAGIC: &[u8; 4] = b"PXFR";
pub const MASKS_MAGIC: &[u8; 4] = b"PXMK";

/// Canonical task geometry used by the parameterless generator entry.
pub const DEFAULT_T: usize = 8;
pub const DEFAULT_CANVAS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    /// Dyadic components are exact in both f32 and f64, so the on-disk
    /// f32 payload round-trips bit-for-bit.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.125, 0.125],
            Color::Green => [0.125, 1.0, 0.125],
            Color::Blue => [0.125, 0.375, 1.0],
            Color::Yellow => [1.0, 1.0, 0.125],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    /// Unit step in (dx, dy); y grows downward.
    pub fn step(self) -> (i64, i64) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    /// Half-extent in pixels (circle radius, square half-side, triangle
    /// half-height).
    pub size: i64,
    /// Integer center at frame 0, (x, y).
    pub start: (i64, i64),
    /// Integer pixels per frame, axis-aligned.
    pub velocity: (i64, i64),
    pub direction: Direction,
}

impl ObjectSpec {
    pub fn center_at(&self, t: usize) -> (i64, i64) {
        (
            self.start.0 + self.velocity.0 * t as i64,
            self.start.1 + self.velocity.1 * t as i64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub objects: Vec<ObjectSpec>,
    pub referred_index: usize,
    pub expression: String,
    /// Geometry the trajectories were validated against.
    pub t: usize,
    pub canvas: usize,
}

/// Exact per-frame supervision for the referred object.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// `[T, H, W]` with values exactly 0 or 1.
    pub masks: Tensor,
    /// `[T, 4]` normalized (cx, cy, w, h); zeros on invisible frames.
    pub boxes: Tensor,
    /// Visibility per frame (mask nonempty after occlusion).
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// `[T, H, W, 3]` in [0, 1].
    pub frames: Tensor,
    pub token_ids: Vec<usize>,
    pub gt: GroundTruth,
    pub scene: SceneSpec,
}

/// Draws a scene for the canonical 8-frame 64x64 task.
pub fn generate_scene(seed: u64, difficulty: Difficulty) -> SceneSpec {
    generate_scene_for(seed, difficulty, DEFAULT_T, DEFAULT_CANVAS)
}

/// Draws a scene whose trajectories stay fully inside a `canvas`-sized
/// frame for `t` frames (objects never clip, so boxes stay tight to the
/// un-occluded silhouette).
pub fn generate_scene_for(seed: u64, difficulty: Difficulty, t: usize, canvas: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_objects = rng.gen_range(2..=3usize);

    // Distinct (color, shape) identities for the base cast.
    let mut identities: Vec<(Color, Shape)> = Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .collect();
    identities.shuffle(&mut rng);
    identities.truncate(n_objects);

    let mut objects: Vec<ObjectSpec> = identities
        .iter()
        .map(|&(color, shape)| place_object(&mut rng, shape, color, t, canvas, None))
        .collect();

    let referred_slot = rng.gen_range(0..objects.len());
    let expression;
    let referred_index;
    match difficulty {
        Difficulty::Easy => {
            referred_index = referred_slot;
            let o = &objects[referred_index];
            expression = format!("the {} {}", o.color.word(), o.shape.word());
        }
        Difficulty::Hard => {
            // Clone the referred identity into a decoy that moves along a
            // different axis-direction, then require the motion word.
            let base = objects[referred_slot].clone();
            let others: Vec<Direction> = Direction::ALL
                .iter()
                .copied()
                .filter(|d| *d != base.direction)
                .collect();
            let decoy_dir = *others.choose(&mut rng).unwrap();
            let decoy = place_object(
                &mut rng,
                base.shape,
                base.color,
                t,
                canvas,
                Some(decoy_dir),
            );
            let insert_at = rng.gen_range(0..=objects.len());
            objects.insert(insert_at, decoy);
            referred_index = if insert_at <= referred_slot {
                referred_slot + 1
            } else {
                referred_slot
            };
            let o = &objects[referred_index];
            expression = format!(
                "the {} {} moving {}",
                o.color.word(),
                o.shape.word(),
                o.direction.word()
            );
        }
    }

    SceneSpec {
        seed,
        difficulty,
        objects,
        referred_index,
        expression,
        t,
        canvas,
    }
}

/// Places one object: picks size, motion, and a start position such that
/// the whole silhouette stays inside the canvas for every frame.
fn place_object(
    rng: &mut ChaCha8Rng,
    shape: Shape,
    color: Color,
    t: usize,
    canvas: usize,
    forced_dir: Option<Direction>,
) -> ObjectSpec {
    let direction = forced_dir.unwrap_or_else(|| *Direction::ALL.choose(rng).unwrap());
    let speed = rng.gen_range(1..=2i64);
    let (ux, uy) = direction.step();
    let velocity = (ux * speed, uy * speed);
    let span = (t as i64 - 1).max(0);
    // Nominal half-extent 8..=12: large enough that the silhouette
    // survives stride-4 mask supervision, clamped so the whole
    // trajectory still fits inside the canvas.
    let max_fit = (canvas as i64 - 1 - speed * span) / 2;
    let hi = max_fit.min(12).max(1);
    let lo = hi.min(8);
    let size = rng.gen_range(lo..=hi);
    let lo_x = size + (-velocity.0 * span).max(0);
    let hi_x = canvas as i64 - 1 - size - (velocity.0 * span).max(0);
    let lo_y = size + (-velocity.1 * span).max(0);
    let hi_y = canvas as i64 - 1 - size - (velocity.1 * span).max(0);
    debug_assert!(lo_x <= hi_x && lo_y <= hi_y, "canvas too small for motion");
    let start = (rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y));
    ObjectSpec {
        shape,
        color,
        size,
        start,
        velocity,
        direction,
    }
}

/// Hard membership test for a shape silhouette centered at the origin.
fn covers(shape: Shape, size: i64, dx: i64, dy: i64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= size * size,
        Shape::Square => dx.abs() <= size && dy.abs() <= size,
        // Upward-pointing triangle: width grows linearly from apex (top)
        // to base (bottom).
        Shape::Triangle => dy.abs() <= size && 2 * dx.abs() <= dy + size,
    }
}

/// Rasterizes the scene. Frames are painted in list order (later objects
/// occlude earlier ones); the referred mask keeps only its visible pixels.
pub fn render(scene: &SceneSpec, t: usize, h0: usize, w0: usize) -> Result<Sample> {
    if t == 0 {
        return Err(Error::invalid("render: need at least one frame"));
    }
    if h0 < 32 || w0 < 32 {
        return Err(Error::invalid(format!(
            "render: canvas {h0}x{w0} below the 32x32 minimum"
        )));
    }
    if scene.referred_index >= scene.objects.len() {
        return Err(Error::invalid(format!(
            "render: referred index {} out of range for {} objects",
            scene.referred_index,
            scene.objects.len()
        )));
    }
    for (i, o) in scene.objects.iter().enumerate() {
        for f in 0..t {
            let (cx, cy) = o.center_at(f);
            if cx < 0 || cy < 0 || cx >= w0 as i64 || cy >= h0 as i64 {
                return Err(Error::invalid(format!(
                    "render: object {i} center leaves the frame at t={f} ({cx}, {cy})"
                )));
            }
        }
    }

    let mut frames = vec![0.0f64; t * h0 * w0 * 3];
    let mut masks = vec![0.0f64; t * h0 * w0];
    let mut boxes = vec![0.0f64; t * 4];
    let mut valid = vec![false; t];

    // owner[p] = index of the topmost object covering pixel p, painted in
    // list order so later objects win.
    let mut owner = vec![usize::MAX; h0 * w0];
    for f in 0..t {
        owner.iter_mut().for_each(|v| *v = usize::MAX);
        for (i, o) in scene.objects.iter().enumerate() {
            let (cx, cy) = o.center_at(f);
            let y0 = (cy - o.size).max(0);
            let y1 = (cy + o.size).min(h0 as i64 - 1);
            let x0 = (cx - o.size).max(0);
            let x1 = (cx + o.size).min(w0 as i64 - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if covers(o.shape, o.size, x - cx, y - cy) {
                        owner[y as usize * w0 + x as usize] = i;
                    }
                }
            }
        }
        let frame_base = f * h0 * w0;
        let mut min_x = w0 as i64;
        let mut max_x = -1i64;
        let mut min_y = h0 as i64;
        let mut max_y = -1i64;
        for y in 0..h0 {
            for x in 0..w0 {
                let idx = y * w0 + x;
                let own = owner[idx];
                if own == usize::MAX {
                    continue;
                }
                let rgb = scene.objects[own].color.rgb();
                let px = (frame_base + idx) * 3;
                frames[px] = rgb[0];
                frames[px + 1] = rgb[1];
                frames[px + 2] = rgb[2];
                if own == scene.referred_index {
                    masks[frame_base + idx] = 1.0;
                    min_x = min_x.min(x as i64);
                    max_x = max_x.max(x as i64);
                    min_y = min_y.min(y as i64);
                    max_y = max_y.max(y as i64);
                }
            }
        }
        if max_x >= 0 {
            valid[f] = true;
            let bw = (max_x - min_x + 1) as f64 / w0 as f64;
            let bh = (max_y - min_y + 1) as f64 / h0 as f64;
            let cx = (min_x + max_x + 1) as f64 / (2.0 * w0 as f64);
            let cy = (min_y + max_y + 1) as f64 / (2.0 * h0 as f64);
            boxes[f * 4] = cx;
            boxes[f * 4 + 1] = cy;
            boxes[f * 4 + 2] = bw;
            boxes[f * 4 + 3] = bh;
        }
    }

    let vocab = Vocabulary::standard();
    let token_ids = vocab.tokenize(&scene.expression)?;

    Ok(Sample {
        frames: Tensor::from_vec(&[t, h0, w0, 3], frames)?,
        token_ids,
        gt: GroundTruth {
            masks: Tensor::from_vec(&[t, h0, w0], masks)?,
            boxes: Tensor::from_vec(&[t, 4], boxes)?,
            valid,
        },
        scene: scene.clone(),
    })
}

/// Independent predicate matcher used by the uniqueness audit: which
/// objects satisfy every word of the expression?
pub fn matching_objects(scene: &SceneSpec) -> Vec<usize> {
    let words: Vec<&str> = scene.expression.split_whitespace().collect();
    let color = Color::ALL.iter().find(|c| words.contains(&c.word()));
    let shape = Shape::ALL.iter().find(|s| words.contains(&s.word()));
    let dir = if words.contains(&"moving") {
        Direction::ALL.iter().find(|d| words.contains(&d.word()))
    } else {
        None
    };
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            color.is_none_or(|c| o.color == *c)
                && shape.is_none_or(|s| o.shape == *s)
                && dir.is_none_or(|d| o.direction == *d)
        })
        .map(|(i, _)| i)
        .collect()
}

fn write_header(buf: &mut Vec<u8>, magic: &[u8; 4], t: u32, h: u32, w: u32, ch: u32) {
    buf.extend_from_slice(magic);
    for v in [t, h, w, ch] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_header(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 20 || &bytes[0..4] != magic {
        return Err(Error::Format(format!(
            "{}: missing {} header",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 4 + i * 4;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    Ok((dims[0], dims[1], dims[2], dims[3]))
}

/// Serializes `[T, H, W, 3]` frames: magic, four LE u32 dims, f32 payload.
pub fn frames_to_bytes(frames: &Tensor) -> Result<Vec<u8>> {
    let s = frames.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape(format!("frames must be [T,H,W,3], got {s:?}")));
    }
    let mut buf = Vec::with_capacity(20 + frames.numel() * 4);
    write_header(&mut buf, FRAMES_MAGIC, s[0] as u32, s[1] as u32, s[2] as u32, 3);
    for v in frames.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn frames_from_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (t, h, w, ch) = read_header(bytes, FRAMES_MAGIC, path)?;
    let count = t * h * w * ch;
    if ch != 3 || bytes.len() != 20 + count * 4 {
        return Err(Error::Format(format!(
            "{}: frame payload size mismatch",
            path.display()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = 20 + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Tensor::from_vec(&[t, h, w, ch], data)
}

/// Serializes `[T, H, W]` binary masks: magic, dims (channels = 1), u8
/// payload.
pub fn masks_to_bytes(masks: &Tensor) -> Result<Vec<u8>> {
    let s = masks.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("masks must be [T,H,W], got {s:?}")));
    }
    let mut buf = Vec::with_capacity(20 + masks.numel());
    write_header(&mut buf, MASKS_MAGIC, s[0] as u32, s[1] as u32, s[2] as u32, 1);
    for v in masks.data() {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::invalid("masks must be exactly binary"));
        }
        buf.push(*v as u8);
    }
    Ok(buf)
}

pub fn masks_from_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (t, h, w, ch) = read_header(bytes, MASKS_MAGIC, path)?;
    let count = t * h * w;
    if ch != 1 || bytes.len() != 20 + count {
        return Err(Error::Format(format!(
            "{}: mask payload size mismatch",
            path.display()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for b in &bytes[20..] {
        if *b > 1 {
            return Err(Error::Format(format!(
                "{}: mask byte {} is not binary",
                path.display(),
                b
            )));
        }
        data.push(*b as f64);
    }
    Tensor::from_vec(&[t, h, w], data)
}

/// Per-sample sidecar: everything needed to reconstruct supervision
/// without re-rendering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub scene: SceneSpec,
    pub token_ids: Vec<usize>,
    pub boxes: Vec<[f64; 4]>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: usize,
    pub path: String,
    pub seed: u64,
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config_hash: String,
    pub canvas: usize,
    pub t: usize,
    pub train: Vec<IndexEntry>,
    pub val: Vec<IndexEntry>,
}

#[derive(Debug)]
pub struct DatasetSummary {
    pub train_count: usize,
    pub val_count: usize,
    pub seed_range: (u64, u64),
    pub checksum: String,
}

fn dir_non_empty(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Renders one split sample. Sample seeds are `base + id` with train ids
/// `0..train_count` and val ids `train_count..train_count+val_count`, so
/// the split seed ranges are disjoint by construction.
pub fn dataset_sample(config: &RunConfig, id: usize) -> Result<Sample> {
    let seed = config.train.seed.wrapping_add(id as u64);
    let mut d_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let difficulty = if d_rng.gen_bool(config.data.hard_fraction) {
        Difficulty::Hard
    } else {
        Difficulty::Easy
    };
    let scene = generate_scene_for(seed, difficulty, config.data.t, config.data.canvas);
    render(&scene, config.data.t, config.data.canvas, config.data.canvas)
}

/// Writes the dataset tree:
/// `<path>/{train,val}/sample_<id>/{frames.bin, masks.bin, meta.json}`
/// plus a top-level `index.json`. Refuses a non-empty target unless
/// `overwrite` is set. Byte-identical for identical configs.
pub fn build_dataset(config: &RunConfig, overwrite: bool) -> Result<DatasetSummary> {
    let root = PathBuf::from(&config.data.path);
    if root.exists() && dir_non_empty(&root) {
        if !overwrite {
            return Err(Error::Refusal(format!(
                "{} already contains files; pass --overwrite to replace it",
                root.display()
            )));
        }
        fs::remove_dir_all(&root)?;
    }
    fs::create_dir_all(&root)?;

    let mut hasher = Sha256::new();
    let mut index = DatasetIndex {
        config_hash: config.hash(),
        canvas: config.data.canvas,
        t: config.data.t,
        train: Vec::new(),
        val: Vec::new(),
    };

    let total = config.data.train_count + config.data.val_count;
    for id in 0..total {
        let split = if id < config.data.train_count { "train" } else { "val" };
        let sample = dataset_sample(config, id)?;
        let rel = format!("{split}/sample_{id:05}");
        let dir = root.join(&rel);
        fs::create_dir_all(&dir)?;

        let frame_bytes = frames_to_bytes(&sample.frames)?;
        let mask_bytes = masks_to_bytes(&sample.gt.masks)?;
        let meta = SampleMeta {
            scene: sample.scene.clone(),
            token_ids: sample.token_ids.clone(),
            boxes: (0..config.data.t)
                .map(|f| {
                    [
                        sample.gt.boxes.at(&[f, 0]),
                        sample.gt.boxes.at(&[f, 1]),
                        sample.gt.boxes.at(&[f, 2]),
                        sample.gt.boxes.at(&[f, 3]),
                    ]
                })
                .collect(),
            valid: sample.gt.valid.clone(),
        };
        let meta_bytes = serde_json::to_vec_pretty(&meta)?;
        fs::write(dir.join("frames.bin"), &frame_bytes)?;
        fs::write(dir.join("masks.bin"), &mask_bytes)?;
        fs::write(dir.join("meta.json"), &meta_bytes)?;
        hasher.update(&frame_bytes);
        hasher.update(&mask_bytes);
        hasher.update(&meta_bytes);

        let entry = IndexEntry {
            id,
            path: rel,
            seed: config.train.seed.wrapping_add(id as u64),
            difficulty: sample.scene.difficulty,
        };
        if split == "train" {
            index.train.push(entry);
        } else {
            index.val.push(entry);
        }
    }

    let index_bytes = serde_json::to_vec_pretty(&index)?;
    fs::write(root.join("index.json"), &index_bytes)?;
    hasher.update(&index_bytes);

    let digest = hasher.finalize();
    Ok(DatasetSummary {
        train_count: config.data.train_count,
        val_count: config.data.val_count,
        seed_range: (
            config.train.seed,
            config.train.seed.wrapping_add(total as u64 - 1),
        ),
        checksum: digest.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// A sample loaded back from disk.
pub struct LoadedSample {
    pub frames: Tensor,
    pub token_ids: Vec<usize>,
    pub gt: GroundTruth,
    pub meta: SampleMeta,
}

pub fn load_index(dataset_root: &Path) -> Result<DatasetIndex> {
    let path = dataset_root.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Format(format!(
            "cannot read dataset index {}: {e}",
            path.display()
        ))
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_sample(dataset_root: &Path, entry: &IndexEntry) -> Result<LoadedSample> {
    let dir = dataset_root.join(&entry.path);
    let read = |name: &str| -> Result<Vec<u8>> {
        let mut f = fs::File::open(dir.join(name))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        Ok(buf)
    };
    let frames = frames_from_bytes(&read("frames.bin")?, &dir.join("frames.bin"))?;
    let masks = masks_from_bytes(&read("masks.bin")?, &dir.join("masks.bin"))?;
    let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let t = masks.shape()[0];
    let mut boxes = Tensor::zeros(&[t, 4]);
    for (f, b) in meta.boxes.iter().enumerate().take(t) {
        for (j, v) in b.iter().enumerate() {
            boxes.set(&[f, j], *v);
        }
    }
    Ok(LoadedSample {
        frames,
        token_ids: meta.token_ids.clone(),
        gt: GroundTruth {
            masks,
            boxes,
            valid: meta.valid.clone(),
        },
        meta,
    })
}

/// Streams every file of the dataset through SHA-256 in index order; the
/// digest must be reproducible across regenerations.
pub fn dataset_checksum(dataset_root: &Path) -> Result<String> {
    let index = load_index(dataset_root)?;
    let mut hasher = Sha256::new();
    for entry in index.train.iter().chain(index.val.iter()) {
        let dir = dataset_root.join(&entry.path);
        for name in ["frames.bin", "masks.bin", "meta.json"] {
            let mut f = fs::File::open(dir.join(name))?;
            let mut buf = Vec::new();
            f.read_to_end(&mut buf)?;
            hasher.update(&buf);
        }
    }
    let mut f = fs::File::open(dataset_root.join("index.json"))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    hasher.update(&buf);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes inference artifacts (predicted masks plus a metadata sidecar)
/// in the dataset's own format so they round-trip through the loaders.
pub fn write_prediction(
    dir: &Path,
    masks: &Tensor,
    meta_json: &serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bytes = masks_to_bytes(masks)?;
    let mut f = fs::File::create(dir.join("masks.bin"))?;
    f.write_all(&bytes)?;
    let text = serde_json::to_string_pretty(meta_json)?;
    fs::write(dir.join("meta.json"), text)?;
    Ok(())
}
