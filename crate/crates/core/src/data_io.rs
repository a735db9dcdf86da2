//! Clip loading, sliding windows and the synthetic moving-shapes benchmark.
//!
//! A dataset lives under one root directory:
//!
//! ```text
//! root/manifest.json
//! root/train/<clip id>/000000.png ...
//! root/test/<clip id>/000000.png ...
//! root/test/<clip id>/labels.txt      (one 0/1 per frame)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One frame as `[C, H, W]` with values in `[-1, 1]`.
pub type FrameTensor = Tensor<f32>;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub frames: Vec<FrameTensor>,
    /// Per-frame ground truth (1 = anomalous), present for test clips.
    pub labels: Option<Vec<u8>>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Frames `t - P .. t` predicting frame `t`.
#[derive(Clone, Copy, Debug)]
pub struct SlidingWindow<'a> {
    pub inputs: &'a [FrameTensor],
    pub target: &'a FrameTensor,
    pub target_index: usize,
}

/// Windows with targets at `P, P + stride, ...`. Clips with at most `P`
/// frames yield nothing.
pub fn windows(clip: &VideoClip, p: usize, stride: usize) -> Vec<SlidingWindow<'_>> {
    assert!(p >= 1 && stride >= 1, "window length and stride must be positive");
    (p..clip.frames.len())
        .step_by(stride)
        .map(|t| SlidingWindow {
            inputs: &clip.frames[t - p..t],
            target: &clip.frames[t],
            target_index: t,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Dataset root; relative paths are resolved against the manifest file.
    pub root: PathBuf,
    pub frame_size: usize,
    pub channels: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.txt";

impl DatasetManifest {
    pub fn clips(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, clip_id: &str) -> Option<Split> {
        if self.train.iter().any(|c| c == clip_id) {
            Some(Split::Train)
        } else if self.test.iter().any(|c| c == clip_id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn clip_dir(&self, split: Split, clip_id: &str) -> PathBuf {
        self.root.join(split.dir_name()).join(clip_id)
    }

    /// Reads a manifest. `path` may be the JSON file or the dataset root.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(file.clone()),
            _ => Error::io(&file, e),
        })?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
        if m.root.is_relative() {
            let base = file.parent().unwrap_or(Path::new("."));
            m.root = base.join(&m.root);
        }
        m.validate()?;
        Ok(m)
    }

    /// Writes the manifest into `dir` with a relative root so the dataset can
    /// be moved as a whole.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let file = dir.join(MANIFEST_FILE);
        let stored = DatasetManifest {
            root: PathBuf::from("."),
            ..self.clone()
        };
        let text = serde_json::to_string_pretty(&stored).expect("manifest serialises");
        fs::write(&file, text + "\n").map_err(|e| Error::io(&file, e))?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Validation(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.frame_size == 0 {
            return Err(Error::Validation("frame size must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for id in self.train.iter().chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::Validation(format!("clip id {id} is listed twice")));
            }
        }
        Ok(())
    }
}

/// Maps an 8-bit intensity to `[-1, 1]`.
pub fn normalize(pixel: u8) -> f32 {
    pixel as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize`], rounding to the nearest level.
pub fn denormalize(value: f32) -> u8 {
    ((value.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Loads a clip listed in the manifest, resizing every frame to the
/// manifest's frame size.
pub fn load_clip(manifest: &DatasetManifest, clip_id: &str) -> Result<VideoClip> {
    let split = manifest
        .split_of(clip_id)
        .ok_or_else(|| Error::NotFound(manifest.root.join(clip_id)))?;
    let dir = manifest.clip_dir(split, clip_id);
    let entries = fs::read_dir(&dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(dir.clone()),
        _ => Error::io(&dir, e),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    let frames = files
        .iter()
        .map(|f| read_frame(f, manifest.frame_size, manifest.channels))
        .collect::<Result<Vec<_>>>()?;
    let labels_path = dir.join(LABELS_FILE);
    let labels = if labels_path.exists() {
        let labels = read_labels(&labels_path)?;
        if labels.len() != frames.len() {
            return Err(Error::Validation(format!(
                "{} has {} labels for {} frames",
                labels_path.display(),
                labels.len(),
                frames.len()
            )));
        }
        Some(labels)
    } else {
        None
    };
    Ok(VideoClip {
        id: clip_id.to_string(),
        frames,
        labels,
    })
}

/// Loads every clip of a split, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<VideoClip>> {
    let ids = manifest.clips(split);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ids.par_iter().map(|id| load_clip(manifest, id)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ids.iter().map(|id| load_clip(manifest, id)).collect()
    }
}

fn read_frame(path: &Path, size: usize, channels: usize) -> Result<FrameTensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(err) => Error::io(path, err),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let side = size as u32;
    let same = img.width() == side && img.height() == side;
    let data = if channels == 1 {
        let g = img.to_luma8();
        if same {
            g.pixels().map(|p| normalize(p[0])).collect()
        } else {
            let f: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_fn(g.width(), g.height(), |x, y| Luma([g.get_pixel(x, y)[0] as f32]));
            let r = imageops::resize(&f, side, side, FilterType::Triangle);
            r.pixels().map(|p| p[0] / 127.5 - 1.0).collect()
        }
    } else {
        let rgb = img.to_rgb8();
        let planar = |get: &dyn Fn(u32, u32, usize) -> f32| {
            let mut out = Vec::with_capacity(3 * size * size);
            for c in 0..3 {
                for y in 0..side {
                    for x in 0..side {
                        out.push(get(x, y, c));
                    }
                }
            }
            out
        };
        if same {
            planar(&|x, y, c| normalize(rgb.get_pixel(x, y)[c]))
        } else {
            let f: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(rgb.width(), rgb.height(), |x, y| {
                let p = rgb.get_pixel(x, y);
                Rgb([p[0] as f32, p[1] as f32, p[2] as f32])
            });
            let r = imageops::resize(&f, side, side, FilterType::Triangle);
            planar(&|x, y, c| r.get_pixel(x, y)[c] / 127.5 - 1.0)
        }
    };
    let frame = Tensor::from_vec(&[channels, size, size], data)?;
    Ok(frame.map(|v| v.clamp(-1.0, 1.0)))
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| match l.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::Validation(format!(
                "{} line {}: label must be 0 or 1, got {other:?}",
                path.display(),
                i + 1
            ))),
        })
        .collect()
}

/// Writes a `[C, H, W]` frame in `[-1, 1]` as an 8-bit PNG.
pub fn write_frame(path: &Path, frame: &FrameTensor) -> Result<()> {
    let (c, h, w) = match frame.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => return Err(Error::Validation(format!("cannot write frame of shape {s:?}"))),
    };
    let d = frame.data();
    let result = if c == 1 {
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([denormalize(d[y as usize * w + x as usize])])
        })
        .save(path)
    } else {
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([
                denormalize(d[i]),
                denormalize(d[h * w + i]),
                denormalize(d[2 * h * w + i]),
            ])
        })
        .save(path)
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(err) => Error::io(path, err),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

// ----- synthetic benchmark -------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// One object moves three times faster.
    SpeedJump,
    /// A textured object of a class never seen in training appears.
    NewShape,
    /// One object reverses its direction every other frame.
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Number of training clips.
    pub num_clips: usize,
    pub num_test_clips: usize,
    pub frames_per_clip: usize,
    pub frame_size: usize,
    pub channels: usize,
    pub anomaly_kinds: Vec<AnomalyKind>,
    /// Fraction of each test clip covered by its anomaly segment.
    pub anomaly_rate: f64,
    /// Input length of the predictor; anomalies start at or after this frame.
    pub input_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_clips: 20,
            num_test_clips: 10,
            frames_per_clip: 100,
            frame_size: 64,
            channels: 3,
            anomaly_kinds: vec![AnomalyKind::SpeedJump, AnomalyKind::NewShape, AnomalyKind::Reverse],
            anomaly_rate: 0.25,
            input_len: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.frame_size < 32 {
            return fail(format!("frame size must be at least 32, got {}", self.frame_size));
        }
        if self.frames_per_clip < self.input_len + 1 {
            return fail(format!(
                "{} frames per clip leave no window of length {}",
                self.frames_per_clip, self.input_len
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return fail(format!("anomaly rate {} is outside [0, 1]", self.anomaly_rate));
        }
        if self.anomaly_rate > 0.0 && self.anomaly_kinds.is_empty() && self.num_test_clips > 0 {
            return fail("a positive anomaly rate needs at least one anomaly kind".into());
        }
        Ok(())
    }

    /// Length of the anomalous segment in every test clip.
    pub fn segment_len(&self) -> usize {
        let room = self.frames_per_clip - self.input_len;
        ((self.anomaly_rate * self.frames_per_clip as f64).round() as usize).min(room)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Square,
    Disc,
    Cross,
    Ring,
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    /// Centre in pixels.
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    /// Half extent in pixels.
    radius: f64,
    color: [f64; 3],
    textured: bool,
}

impl Object {
    /// Fraction of the `sub x sub` supersamples of pixel `(px, py)` inside the
    /// shape.
    fn coverage(&self, px: usize, py: usize, sub: usize) -> f64 {
        let mut hits = 0;
        for sy in 0..sub {
            for sx in 0..sub {
                let dx = px as f64 + (sx as f64 + 0.5) / sub as f64 - self.x;
                let dy = py as f64 + (sy as f64 + 0.5) / sub as f64 - self.y;
                if self.contains(dx, dy) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (sub * sub) as f64
    }

    fn contains(&self, dx: f64, dy: f64) -> bool {
        let r = self.radius;
        let d2 = dx * dx + dy * dy;
        match self.shape {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Disc => d2 <= r * r,
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
            }
            Shape::Ring => d2 <= r * r && d2 >= 0.25 * r * r,
        }
    }

    fn color_at(&self, px: usize, py: usize) -> [f64; 3] {
        if self.textured && ((px / 2) + (py / 2)) % 2 == 1 {
            [255.0 - self.color[0], 255.0 - self.color[1], 255.0 - self.color[2]]
        } else {
            self.color
        }
    }

    /// Moves by `scale` times the velocity and bounces off the borders.
    fn advance(&mut self, scale: f64, size: f64) {
        self.x += self.vx * scale;
        self.y += self.vy * scale;
        let (lo, hi) = (self.radius, size - self.radius);
        if self.x < lo {
            self.x = 2.0 * lo - self.x;
            self.vx = -self.vx;
        } else if self.x > hi {
            self.x = 2.0 * hi - self.x;
            self.vx = -self.vx;
        }
        if self.y < lo {
            self.y = 2.0 * lo - self.y;
            self.vy = -self.vy;
        } else if self.y > hi {
            self.y = 2.0 * hi - self.y;
            self.vy = -self.vy;
        }
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [230.0, 60.0, 50.0],
    [60.0, 180.0, 75.0],
    [255.0, 225.0, 25.0],
    [0.0, 130.0, 200.0],
    [245.0, 130.0, 48.0],
    [240.0, 50.0, 230.0],
];

const NOISE: i32 = 3;
const SUPERSAMPLE: usize = 4;

fn random_object(rng: &mut ChaCha8Rng, size: f64, shape: Shape) -> Object {
    let radius = rng.random_range(3.0..5.0);
    let speed = rng.random_range(1.0..2.0);
    // Direction from a random point on the unit square's border keeps the
    // arithmetic free of transcendental functions.
    let (dx, dy): (f64, f64) = match rng.random_range(0..4) {
        0 => (1.0, rng.random_range(-1.0..1.0)),
        1 => (-1.0, rng.random_range(-1.0..1.0)),
        2 => (rng.random_range(-1.0..1.0), 1.0),
        _ => (rng.random_range(-1.0..1.0), -1.0),
    };
    let norm = (dx * dx + dy * dy).sqrt();
    Object {
        shape,
        x: rng.random_range(radius..size - radius),
        y: rng.random_range(radius..size - radius),
        vx: speed * dx / norm,
        vy: speed * dy / norm,
        radius,
        color: PALETTE[rng.random_range(0..PALETTE.len())],
        textured: false,
    }
}

fn grayish(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    let level = rng.random_range(lo..hi);
    std::array::from_fn(|_| level + rng.random_range(-8.0..8.0))
}

/// Static scene shared by every clip of a dataset: a vertical gradient with a
/// few flat blocks, all close to gray so that every palette colour stands out.
fn background(config: &SynthConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let n = config.frame_size;
    let top = grayish(&mut rng, 50.0, 90.0);
    let bottom = grayish(&mut rng, 100.0, 140.0);
    let mut bg = vec![0.0; 3 * n * n];
    for c in 0..3 {
        for y in 0..n {
            let t = y as f64 / (n - 1) as f64;
            let v = top[c] * (1.0 - t) + bottom[c] * t;
            bg[(c * n + y) * n..(c * n + y + 1) * n].fill(v);
        }
    }
    for _ in 0..3 {
        let w = rng.random_range(n / 8..n / 4);
        let h = rng.random_range(n / 8..n / 3);
        let x0 = rng.random_range(0..n - w);
        let y0 = rng.random_range(0..n - h);
        let shade = grayish(&mut rng, 60.0, 160.0);
        for c in 0..3 {
            for y in y0..y0 + h {
                bg[(c * n + y) * n + x0..(c * n + y) * n + x0 + w].fill(shade[c]);
            }
        }
    }
    bg
}

fn render(bg: &[f64], objects: &[&Object], n: usize, channels: usize, rng: &mut ChaCha8Rng) -> FrameTensor {
    let mut img = bg.to_vec();
    for o in objects {
        let x0 = (o.x - o.radius - 1.0).floor().max(0.0) as usize;
        let y0 = (o.y - o.radius - 1.0).floor().max(0.0) as usize;
        let x1 = ((o.x + o.radius + 1.0).ceil() as usize).min(n);
        let y1 = ((o.y + o.radius + 1.0).ceil() as usize).min(n);
        for py in y0..y1 {
            for px in x0..x1 {
                let cov = o.coverage(px, py, SUPERSAMPLE);
                if cov == 0.0 {
                    continue;
                }
                let col = o.color_at(px, py);
                for (c, &v) in col.iter().enumerate() {
                    let i = (c * n + py) * n + px;
                    img[i] = img[i] * (1.0 - cov) + v * cov;
                }
            }
        }
    }
    let mut quantized = vec![0u8; 3 * n * n];
    for (q, v) in quantized.iter_mut().zip(&img) {
        let noise = rng.random_range(-NOISE..=NOISE);
        *q = (v.round() as i32 + noise).clamp(0, 255) as u8;
    }
    let data: Vec<f32> = if channels == 3 {
        quantized.iter().map(|&p| normalize(p)).collect()
    } else {
        // Integer luma so grayscale output stays exact.
        (0..n * n)
            .map(|i| {
                let (r, g, b) = (quantized[i] as u32, quantized[n * n + i] as u32, quantized[2 * n * n + i] as u32);
                normalize(((299 * r + 587 * g + 114 * b + 500) / 1000) as u8)
            })
            .collect()
    };
    Tensor::from_vec(&[channels, n, n], data).expect("frame shape")
}

/// Renders one clip. Returns the frames and the per-frame labels.
fn synth_clip(
    config: &SynthConfig,
    bg: &[f64],
    stream: u64,
    anomaly: Option<AnomalyKind>,
) -> (Vec<FrameTensor>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let n = config.frame_size;
    let size = n as f64;
    let count = rng.random_range(2..=3);
    let mut objects: Vec<Object> = (0..count)
        .map(|i| {
            let shape = if (i + rng.random_range(0..2)) % 2 == 0 { Shape::Square } else { Shape::Disc };
            random_object(&mut rng, size, shape)
        })
        .collect();
    let t_total = config.frames_per_clip;
    let seg_len = config.segment_len();
    let (start, end) = match anomaly {
        Some(_) if seg_len > 0 => {
            let start = rng.random_range(config.input_len..=t_total - seg_len);
            (start, start + seg_len)
        }
        _ => (t_total, t_total),
    };
    let mut intruder = {
        let shape = if rng.random_range(0..2) == 0 { Shape::Cross } else { Shape::Ring };
        let mut o = random_object(&mut rng, size, shape);
        o.radius = rng.random_range(6.0..8.0);
        o.x = o.x.clamp(o.radius, size - o.radius);
        o.y = o.y.clamp(o.radius, size - o.radius);
        o.textured = rng.random_range(0..2) == 0;
        o
    };
    let mut frames = Vec::with_capacity(t_total);
    let mut labels = vec![0u8; t_total];
    for (t, label) in labels.iter_mut().enumerate() {
        let active = t >= start && t < end;
        *label = active as u8;
        let mut visible: Vec<&Object> = objects.iter().collect();
        if active && anomaly == Some(AnomalyKind::NewShape) {
            visible.push(&intruder);
        }
        frames.push(render(bg, &visible, n, config.channels, &mut rng));
        let next_active = t + 1 >= start && t + 1 < end;
        for (k, o) in objects.iter_mut().enumerate() {
            let mut scale = 1.0;
            if next_active && k == 0 {
                match anomaly {
                    Some(AnomalyKind::SpeedJump) => scale = 3.0,
                    Some(AnomalyKind::Reverse) if (t + 1 - start) % 2 == 0 => {
                        o.vx = -o.vx;
                        o.vy = -o.vy;
                    }
                    _ => {}
                }
            }
            o.advance(scale, size);
        }
        if next_active && t + 1 > start {
            intruder.advance(1.0, size);
        }
    }
    (frames, labels)
}

fn render_clip(config: &SynthConfig, bg: &[f64], split: Split, index: usize) -> (Vec<FrameTensor>, Vec<u8>) {
    let anomaly = match split {
        Split::Train => None,
        Split::Test if config.anomaly_kinds.is_empty() => None,
        Split::Test => Some(config.anomaly_kinds[index % config.anomaly_kinds.len()]),
    };
    let stream = match split {
        Split::Train => index as u64,
        Split::Test => (1 << 32) + index as u64,
    };
    synth_clip(config, bg, stream, anomaly)
}

/// One clip of the synthetic benchmark, identical to what
/// [`generate_synthetic`] writes for `split` and `index`, without touching
/// the file system. Training clips carry no labels.
pub fn synthetic_clip(config: &SynthConfig, split: Split, index: usize) -> Result<VideoClip> {
    config.validate()?;
    let (frames, labels) = render_clip(config, &background(config), split, index);
    let id = match split {
        Split::Train => format!("train_{index:03}"),
        Split::Test => format!("test_{index:03}"),
    };
    Ok(VideoClip {
        id,
        frames,
        labels: (split == Split::Test).then_some(labels),
    })
}

/// Writes the synthetic benchmark under `root` and returns its manifest.
/// The output is a pure function of `config`.
pub fn generate_synthetic(config: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let bg = background(config);
    let train: Vec<String> = (0..config.num_clips).map(|i| format!("train_{i:03}")).collect();
    let test: Vec<String> = (0..config.num_test_clips).map(|i| format!("test_{i:03}")).collect();
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        frame_size: config.frame_size,
        channels: config.channels,
        train,
        test,
    };
    let write_clip = |split: Split, index: usize, id: &str| -> Result<()> {
        let (frames, labels) = render_clip(config, &bg, split, index);
        let dir = manifest.clip_dir(split, id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, f) in frames.iter().enumerate() {
            write_frame(&dir.join(format!("{t:06}.png")), f)?;
        }
        if split == Split::Test {
            let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
            let path = dir.join(LABELS_FILE);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    };
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let jobs: Vec<(Split, usize, &String)> = manifest
        .train
        .iter()
        .enumerate()
        .map(|(i, id)| (Split::Train, i, id))
        .chain(manifest.test.iter().enumerate().map(|(i, id)| (Split::Test, i, id)))
        .collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.par_iter().try_for_each(|&(s, i, id)| write_clip(s, i, id))?;
    }
    #[cfg(not(feature = "parallel"))]
    for &(s, i, id) in &jobs {
        write_clip(s, i, id)?;
    }
    manifest.save(root)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize) -> VideoClip {
        VideoClip {
            id: "c".into(),
            frames: (0..n).map(|i| Tensor::full(&[1, 2, 2], i as f32 / n as f32)).collect(),
            labels: None,
        }
    }

    #[test]
    fn window_counts() {
        let c = clip(10);
        let w = windows(&c, 8, 1);
        assert_eq!(w.iter().map(|w| w.target_index).collect::<Vec<_>>(), vec![8, 9]);
        assert_eq!(w[1].inputs.len(), 8);
        assert_eq!(w[1].inputs[0], c.frames[1]);
        assert!(windows(&clip(8), 8, 1).is_empty());
        let c12 = clip(12);
        let w = windows(&c12, 4, 4);
        assert_eq!(w.iter().map(|w| w.target_index).collect::<Vec<_>>(), vec![4, 8]);
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize(0), -1.0);
        assert_eq!(normalize(255), 1.0);
        for p in 0..=255u8 {
            assert_eq!(denormalize(normalize(p)), p);
        }
    }
}
