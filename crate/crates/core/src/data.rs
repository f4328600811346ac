//! Clip sampling, augmentation, the clip/manifest file formats and the
//! synthetic moving-shape corpus.
//!
//! Clip file layout (little-endian):
//!
//! ```text
//! "STNASCLIP1"  u32 L  u32 C=3  u32 H  u32 W  then L*3*H*W f32, frame-major
//! ```
//!
//! A manifest is line based: `# key value...` header lines (format tag,
//! class count, normalization constants) followed by one `<file> <label>`
//! line per clip, with file paths relative to the manifest.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor5D};

pub const CLIP_MAGIC: &[u8; 10] = b"STNASCLIP1";
pub const CHANNELS: usize = 3;

fn check_sampling(len: usize, segments: usize, per_segment: usize) -> Result<()> {
    if segments == 0 || per_segment == 0 {
        return Err(Error::Domain("segments and frames per segment must be positive".into()));
    }
    if len < segments * per_segment {
        return Err(Error::Domain(format!(
            "clip of {len} frames cannot supply {segments} x {per_segment} frames"
        )));
    }
    Ok(())
}

/// Half-open frame range of segment `i`; the remainder goes to the last one.
pub fn segment_bounds(len: usize, segments: usize, i: usize) -> (usize, usize) {
    let base = len / segments;
    let start = i * base;
    let end = if i + 1 == segments { len } else { start + base };
    (start, end)
}

/// Splits `[0, len)` into `segments` parts and draws `per_segment` distinct
/// frames uniformly from each, returned in temporal order.
pub fn segment_sample<R: Rng>(len: usize, segments: usize, per_segment: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_sampling(len, segments, per_segment)?;
    let mut out = Vec::with_capacity(segments * per_segment);
    for i in 0..segments {
        let (start, end) = segment_bounds(len, segments, i);
        let mut picks = index::sample(rng, end - start, per_segment).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|p| start + p));
    }
    Ok(out)
}

/// Deterministic counterpart of [`segment_sample`]: the middle
/// `per_segment` frames of each segment, rounding toward the start.
pub fn center_sample(len: usize, segments: usize, per_segment: usize) -> Result<Vec<usize>> {
    check_sampling(len, segments, per_segment)?;
    let mut out = Vec::with_capacity(segments * per_segment);
    for i in 0..segments {
        let (start, end) = segment_bounds(len, segments, i);
        let first = start + (end - start - per_segment) / 2;
        out.extend(first..first + per_segment);
    }
    Ok(out)
}

/// One decoded clip held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub label: usize,
    pub len: usize,
    pub height: usize,
    pub width: usize,
    /// `len * 3 * height * width` values, frame-major.
    pub frames: Vec<f32>,
}

impl Clip {
    pub fn pixel(&self, t: usize, c: usize, h: usize, w: usize) -> f32 {
        self.frames[((t * CHANNELS + c) * self.height + h) * self.width + w]
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CLIP_MAGIC)?;
        for v in [self.len, CHANNELS, self.height, self.width] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.frames.len() * 4);
        for v in &self.frames {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read<R: Read>(mut r: R, id: String, label: usize) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("clip {id}: {e}")))?;
        if bytes.len() < 26 || &bytes[..10] != CLIP_MAGIC {
            return Err(Error::Format(format!("clip {id}: missing STNASCLIP1 header")));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[10 + 4 * i..14 + 4 * i].try_into().unwrap()) as usize;
        let (len, c, height, width) = (field(0), field(1), field(2), field(3));
        if c != CHANNELS {
            return Err(Error::Format(format!("clip {id}: expected 3 channels, found {c}")));
        }
        let count = len * c * height * width;
        if bytes.len() != 26 + 4 * count {
            return Err(Error::Format(format!(
                "clip {id}: body has {} bytes, header implies {}",
                bytes.len() - 26,
                4 * count
            )));
        }
        let frames = bytes[26..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Clip {
            id,
            label,
            len,
            height,
            width,
            frames,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, label: usize) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Clip::read(std::io::BufReader::new(file), id, label)
    }
}

/// Per-channel normalization constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    /// Mean and standard deviation of every pixel of `clips`, per channel.
    pub fn from_clips<'a>(clips: impl IntoIterator<Item = &'a Clip>) -> Self {
        let mut sum = [0.0f64; CHANNELS];
        let mut sq = [0.0f64; CHANNELS];
        let mut count = 0usize;
        for clip in clips {
            let plane = clip.height * clip.width;
            for (i, chunk) in clip.frames.chunks(plane).enumerate() {
                let c = i % CHANNELS;
                for &v in chunk {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += clip.len * plane;
        }
        let mut out = Self::identity();
        if count == 0 {
            return out;
        }
        for c in 0..CHANNELS {
            let mean = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - mean * mean).max(0.0);
            out.mean[c] = mean;
            out.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        out
    }
}

/// A manifest: class count, normalization constants and labelled clips.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub classes: usize,
    pub norm: Normalization,
    /// Label of a clip after a horizontal flip, indexed by original label.
    pub flip: Vec<usize>,
    pub entries: Vec<(String, usize)>,
}

const MANIFEST_TAG: &str = "# stnas-manifest v1";

fn fmt_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_TAG}\n# classes {}\n", self.classes);
        s.push_str(&format!("# mean {}\n", fmt_floats(&self.norm.mean)));
        s.push_str(&format!("# std {}\n", fmt_floats(&self.norm.std)));
        let flip: Vec<String> = self.flip.iter().map(|l| l.to_string()).collect();
        s.push_str(&format!("# flip {}\n", flip.join(" ")));
        for (file, label) in &self.entries {
            s.push_str(&format!("{file} {label}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        let mut classes = None;
        let mut mean = None;
        let mut std = None;
        let mut flip = None;
        let mut entries = Vec::new();
        let mut tagged = false;
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line == MANIFEST_TAG {
                tagged = true;
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                let f: Vec<&str> = h.split_whitespace().collect();
                let floats = |f: &[&str]| -> Result<[f64; CHANNELS]> {
                    let v: Vec<f64> = f
                        .iter()
                        .map(|x| x.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| perr(ln, format!("bad number in {line:?}")))?;
                    v.try_into()
                        .map_err(|_| perr(ln, format!("expected {CHANNELS} values in {line:?}")))
                };
                match f.first().copied() {
                    Some("classes") if f.len() == 2 => {
                        classes = Some(f[1].parse().map_err(|_| perr(ln, "bad class count".into()))?)
                    }
                    Some("mean") => mean = Some(floats(&f[1..])?),
                    Some("std") => std = Some(floats(&f[1..])?),
                    Some("flip") => {
                        let v: Vec<usize> = f[1..]
                            .iter()
                            .map(|x| x.parse::<usize>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| perr(ln, format!("bad label in {line:?}")))?;
                        flip = Some(v);
                    }
                    _ => return Err(perr(ln, format!("unknown header {line:?}"))),
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 2 {
                return Err(perr(ln, format!("expected \"<file> <label>\", got {line:?}")));
            }
            let label = f[1].parse().map_err(|_| perr(ln, format!("bad label {:?}", f[1])))?;
            entries.push((f[0].to_string(), label));
        }
        if !tagged {
            return Err(perr(1, format!("missing \"{MANIFEST_TAG}\" header")));
        }
        let classes: usize = classes.ok_or_else(|| perr(0, "missing classes header".into()))?;
        if let Some((f, l)) = entries.iter().find(|(_, l)| *l >= classes) {
            return Err(Error::Domain(format!("{f}: label {l} outside [0, {classes})")));
        }
        let flip = flip.unwrap_or_else(|| (0..classes).collect());
        if flip.len() != classes || flip.iter().any(|&l| l >= classes) {
            return Err(Error::Domain(format!("flip map {flip:?} is not a map on {classes} labels")));
        }
        Ok(Manifest {
            classes,
            norm: Normalization {
                mean: mean.ok_or_else(|| perr(0, "missing mean header".into()))?,
                std: std.ok_or_else(|| perr(0, "missing std header".into()))?,
            },
            flip,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Clips of one split plus the constants needed to feed them to a network.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: usize,
    pub norm: Normalization,
    /// Label after a horizontal flip (identity unless the class encodes
    /// horizontal direction).
    pub flip: Vec<usize>,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let m = Manifest::load(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let clips = m
            .entries
            .iter()
            .map(|(file, label)| Clip::load(&dir.join(file), *label))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            classes: m.classes,
            norm: m.norm,
            flip: m.flip,
            clips,
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes,
            norm: self.norm,
            flip: self.flip.clone(),
            clips: idx.iter().map(|&i| self.clips[i].clone()).collect(),
        }
    }
}

/// Sampling and augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingConfig {
    pub segments: usize,
    pub per_segment: usize,
    pub crop: usize,
}

impl SamplingConfig {
    pub fn frames(&self) -> usize {
        self.segments * self.per_segment
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    Train,
    Eval,
}

/// A clip's sampled frames as (3, T, H, W) values.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Frames {
    /// Gathers frames `idx` of `clip` into channel-major layout.
    pub fn gather(clip: &Clip, idx: &[usize]) -> Self {
        let (h, w) = (clip.height, clip.width);
        let mut data = vec![0.0; CHANNELS * idx.len() * h * w];
        for c in 0..CHANNELS {
            for (ti, &t) in idx.iter().enumerate() {
                let src = &clip.frames[((t * CHANNELS + c) * h) * w..((t * CHANNELS + c) * h + h) * w];
                let dst = &mut data[((c * idx.len() + ti) * h) * w..((c * idx.len() + ti) * h + h) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s as f64;
                }
            }
        }
        Frames { t: idx.len(), h, w, data }
    }

    pub fn at(&self, c: usize, t: usize, h: usize, w: usize) -> f64 {
        self.data[((c * self.t + t) * self.h + h) * self.w + w]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.w) {
            row.reverse();
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * self.t * size * size);
        for plane in self.data.chunks(self.h * self.w) {
            for r in top..top + size {
                data.extend_from_slice(&plane[r * self.w + left..r * self.w + left + size]);
            }
        }
        Frames {
            t: self.t,
            h: size,
            w: size,
            data,
        }
    }

    pub fn normalize(&self, norm: &Normalization) -> Self {
        let mut out = self.clone();
        let per_channel = self.t * self.h * self.w;
        for (c, chunk) in out.data.chunks_mut(per_channel).enumerate() {
            for v in chunk {
                *v = (*v - norm.mean[c]) / norm.std[c];
            }
        }
        out
    }
}

/// Training: normalize, flip with probability 1/2, random square crop.
/// Evaluation: normalize and center crop only. Also reports whether the
/// frames were flipped.
pub fn augment<R: Rng>(
    frames: &Frames,
    mode: AugmentMode,
    crop: usize,
    norm: &Normalization,
    rng: &mut R,
) -> Result<(Frames, bool)> {
    if frames.h < crop || frames.w < crop {
        return Err(Error::Domain(format!(
            "frames of {}x{} are smaller than the {crop}x{crop} crop",
            frames.h, frames.w
        )));
    }
    let normed = frames.normalize(norm);
    Ok(match mode {
        AugmentMode::Train => {
            let flip = rng.gen_bool(0.5);
            let oriented = if flip { normed.flip_horizontal() } else { normed };
            let top = rng.gen_range(0..=frames.h - crop);
            let left = rng.gen_range(0..=frames.w - crop);
            (oriented.crop(top, left, crop), flip)
        }
        AugmentMode::Eval => (normed.crop((frames.h - crop) / 2, (frames.w - crop) / 2, crop), false),
    })
}

/// A batch ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    pub frames: Tensor5D,
    pub labels: Vec<usize>,
}

/// SplitMix64 finalizer used to derive independent per-clip streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e5f5);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Samples and augments `clips` into one batch. In training mode clip `i`
/// uses the stream seeded by `(stream_seed, clip position in the dataset)`,
/// so results do not depend on batching or scheduling.
pub fn make_batch(
    data: &Dataset,
    indices: &[usize],
    mode: AugmentMode,
    cfg: &SamplingConfig,
    stream_seed: u64,
) -> Result<ClipBatch> {
    if indices.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let t = cfg.frames();
    let mut values = Vec::with_capacity(indices.len() * CHANNELS * t * cfg.crop * cfg.crop);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let clip = &data.clips[i];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(stream_seed, i as u64));
        let idx = match mode {
            AugmentMode::Train => segment_sample(clip.len, cfg.segments, cfg.per_segment, &mut rng)?,
            AugmentMode::Eval => center_sample(clip.len, cfg.segments, cfg.per_segment)?,
        };
        let (frames, flipped) = augment(&Frames::gather(clip, &idx), mode, cfg.crop, &data.norm, &mut rng)?;
        values.extend_from_slice(&frames.data);
        labels.push(if flipped { data.flip[clip.label] } else { clip.label });
    }
    let frames = Tensor5D::from_vec(Shape::new(indices.len(), CHANNELS, t, cfg.crop, cfg.crop), values)?;
    Ok(ClipBatch { frames, labels })
}

/// What a synthetic class encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    /// Same shape everywhere; the class is the motion (velocity) only.
    Motion,
    /// Motionless shapes whose colour is the class; every frame shows it.
    Static,
}

/// Velocity in pixels per frame along (x, y).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Motion {
    pub dx: i32,
    pub dy: i32,
}

/// Default motion classes: left, right, static, then up, down, and faster
/// variants of those.
pub fn default_motions(classes: usize, speed: i32) -> Vec<Motion> {
    let base = [(-1, 0), (1, 0), (0, 0), (0, -1), (0, 1)];
    (0..classes)
        .map(|i| {
            let (dx, dy) = base[i % base.len()];
            let s = speed * (1 + (i / base.len()) as i32);
            Motion { dx: dx * s, dy: dy * s }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub kind: CorpusKind,
    pub classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape_size: usize,
    pub speed: i32,
    /// Per-class velocities; empty means [`default_motions`].
    pub motions: Vec<Motion>,
    /// Amplitude of uniform background noise.
    pub noise: f64,
    /// Fraction of each class held out as the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: CorpusKind::Motion,
            classes: 3,
            clips_per_class: 100,
            frames: 16,
            height: 32,
            width: 32,
            shape_size: 6,
            speed: 1,
            motions: Vec::new(),
            noise: 0.1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn motions(&self) -> Vec<Motion> {
        if self.motions.is_empty() {
            default_motions(self.classes, self.speed)
        } else {
            self.motions.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return cfg("a corpus needs at least 2 classes".into());
        }
        if self.clips_per_class == 0 || self.frames == 0 {
            return cfg("clips_per_class and frames must be positive".into());
        }
        if self.shape_size == 0 || self.shape_size > self.height.min(self.width) {
            return cfg(format!(
                "shape of {} px does not fit {}x{} frames",
                self.shape_size, self.height, self.width
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return cfg("test_fraction must be in [0, 1)".into());
        }
        if self.kind == CorpusKind::Motion {
            let motions = self.motions();
            if motions.len() != self.classes {
                return cfg(format!("{} motions for {} classes", motions.len(), self.classes));
            }
            let travel = self.frames as i64 - 1;
            for m in &motions {
                let (tx, ty) = ((m.dx as i64).abs() * travel, (m.dy as i64).abs() * travel);
                if tx > (self.width - self.shape_size) as i64 || ty > (self.height - self.shape_size) as i64 {
                    return cfg(format!(
                        "velocity ({}, {}) moves a {} px shape off a {}x{} frame within {} frames",
                        m.dx, m.dy, self.shape_size, self.height, self.width, self.frames
                    ));
                }
            }
            if motions.iter().all(|m| m.dx == 0 && m.dy == 0) {
                return cfg("at least one class must move".into());
            }
        }
        Ok(())
    }

    /// Class shown by a horizontally mirrored clip of each class.
    pub fn flip_map(&self) -> Vec<usize> {
        match self.kind {
            CorpusKind::Static => (0..self.classes).collect(),
            CorpusKind::Motion => {
                let motions = self.motions();
                motions
                    .iter()
                    .enumerate()
                    .map(|(i, m)| {
                        motions
                            .iter()
                            .position(|o| o.dx == -m.dx && o.dy == m.dy)
                            .unwrap_or(i)
                    })
                    .collect()
            }
        }
    }

    fn test_count(&self) -> usize {
        (self.clips_per_class as f64 * self.test_fraction).round() as usize
    }
}

/// Positions of a moving shape: a random start such that the whole path
/// stays inside the frame.
fn trajectory<R: Rng>(cfg: &SynthConfig, m: Motion, rng: &mut R) -> Vec<(i64, i64)> {
    let travel = cfg.frames as i64 - 1;
    let axis = |v: i32, room: usize, rng: &mut R| -> i64 {
        let span = v.unsigned_abs() as i64 * travel;
        let lo = if v < 0 { span } else { 0 };
        let hi = room as i64 - if v > 0 { span } else { 0 };
        rng.gen_range(lo..=hi)
    };
    let x0 = axis(m.dx, cfg.width - cfg.shape_size, rng);
    let y0 = axis(m.dy, cfg.height - cfg.shape_size, rng);
    (0..cfg.frames as i64)
        .map(|t| (x0 + m.dx as i64 * t, y0 + m.dy as i64 * t))
        .collect()
}

const PALETTE: [[f32; 3]; 6] = [
    [1.0, 0.1, 0.1],
    [0.1, 1.0, 0.1],
    [0.1, 0.1, 1.0],
    [1.0, 1.0, 0.1],
    [0.1, 1.0, 1.0],
    [1.0, 0.1, 1.0],
];

fn render<R: Rng>(cfg: &SynthConfig, path: &[(i64, i64)], color: [f32; 3], rng: &mut R) -> Vec<f32> {
    let (h, w, s) = (cfg.height, cfg.width, cfg.shape_size as i64);
    let mut frames = Vec::with_capacity(cfg.frames * CHANNELS * h * w);
    for &(x, y) in path {
        for col in color {
            for r in 0..h as i64 {
                for c in 0..w as i64 {
                    let inside = r >= y && r < y + s && c >= x && c < x + s;
                    let noise = rng.gen::<f64>() * cfg.noise;
                    let v = if inside { col as f64 } else { 0.0 };
                    frames.push((v + noise) as f32);
                }
            }
        }
    }
    frames
}

/// Generates one clip of class `label`.
pub fn synth_clip(cfg: &SynthConfig, label: usize, rng: &mut ChaCha8Rng, id: String) -> Clip {
    let frames = match cfg.kind {
        CorpusKind::Motion => {
            let motions = cfg.motions();
            let m = motions[label];
            let path = if m.dx == 0 && m.dy == 0 {
                // A motionless clip sits where a moving clip would be at a
                // random instant, so single frames carry no class signal.
                let moving: Vec<Motion> = motions.iter().copied().filter(|m| m.dx != 0 || m.dy != 0).collect();
                let donor = moving[rng.gen_range(0..moving.len())];
                let t = rng.gen_range(0..cfg.frames);
                vec![trajectory(cfg, donor, rng)[t]; cfg.frames]
            } else {
                trajectory(cfg, m, rng)
            };
            render(cfg, &path, [1.0; 3], rng)
        }
        CorpusKind::Static => {
            let x = rng.gen_range(0..=(cfg.width - cfg.shape_size) as i64);
            let y = rng.gen_range(0..=(cfg.height - cfg.shape_size) as i64);
            render(cfg, &vec![(x, y); cfg.frames], PALETTE[label % PALETTE.len()], rng)
        }
    };
    Clip {
        id,
        label,
        len: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        frames,
    }
}

/// Train and test splits of a generated corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Dataset,
    pub test: Dataset,
}

/// Generates the corpus in memory. Clip `j` of class `c` draws from its own
/// stream, and the last `test_fraction` of each class forms the test split.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let n_test = cfg.test_count();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in 0..cfg.classes {
        for j in 0..cfg.clips_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, (label * cfg.clips_per_class + j) as u64));
            let clip = synth_clip(cfg, label, &mut rng, format!("c{label:02}_{j:04}"));
            if j >= cfg.clips_per_class - n_test {
                test.push(clip);
            } else {
                train.push(clip);
            }
        }
    }
    let norm = Normalization::from_clips(&train);
    let flip = cfg.flip_map();
    let mk = |clips| Dataset {
        classes: cfg.classes,
        norm,
        flip: flip.clone(),
        clips,
    };
    Ok(Corpus {
        train: mk(train),
        test: mk(test),
    })
}

/// Paths written by [`write_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusFiles {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub clips: usize,
}

/// Writes every clip under `dir/clips/` plus `train.manifest` and
/// `test.manifest`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusFiles> {
    let clip_dir = dir.join("clips");
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let mut count = 0;
    let mut write_split = |data: &Dataset, name: &str| -> Result<PathBuf> {
        let mut entries = Vec::with_capacity(data.len());
        for clip in &data.clips {
            let rel = format!("clips/{}.clip", clip.id);
            clip.save(&dir.join(&rel))?;
            entries.push((rel, clip.label));
            count += 1;
        }
        let path = dir.join(name);
        Manifest {
            classes: data.classes,
            norm: data.norm,
            flip: data.flip.clone(),
            entries,
        }
        .save(&path)?;
        Ok(path)
    };
    let train_manifest = write_split(&corpus.train, "train.manifest")?;
    let test_manifest = write_split(&corpus.test, "test.manifest")?;
    Ok(CorpusFiles {
        train_manifest,
        test_manifest,
        clips: count,
    })
}
