//! Synthetic video benchmark.
//!
//! Each video is `T` single-channel frames over a smooth background, drawn
//! as runs of near-duplicate frames. One or two runs per video are
//! informative: their frames carry a bright 16×16 patch with a class
//! texture. With [`Detail::Fine`] the texture is built from 4-pixel
//! profiles that area resampling to 24, 16 and 8 pixels maps to exactly
//! zero, so only full-resolution frames reveal the class; the patch itself
//! stays visible at every level. [`Detail::Coarse`]
//! magnifies the same textures fourfold so they survive down to 8 pixels.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::ResolutionLadder;
use crate::backbones::resize_all_levels;
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RRDS";
pub const PATCH: usize = 16;
const TILE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detail {
    /// Class evidence only at the base resolution.
    Fine,
    /// Class evidence survives down to 8 pixels.
    Coarse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub frames: usize,
    pub resolution: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Inclusive range of informative events per video.
    pub events: (usize, usize),
    /// Frames per informative event: the glyph frame and its near-duplicates.
    /// Events start on a run boundary.
    pub event_span: usize,
    /// Consecutive near-duplicate frames.
    pub run_length: usize,
    pub detail: Detail,
    /// Brightness added inside the event patch.
    pub patch_offset: f64,
    /// Amplitude of the class texture.
    pub texture_amplitude: f64,
    /// Std-dev of the per-run pixel clutter.
    pub clutter: f64,
    /// Std-dev of the per-frame jitter inside a run.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            frames: 16,
            resolution: 32,
            train_per_class: 240,
            val_per_class: 8,
            test_per_class: 20,
            events: (1, 2),
            event_span: 4,
            run_length: 4,
            detail: Detail::Fine,
            patch_offset: 0.5,
            texture_amplitude: 1.0,
            clutter: 0.04,
            jitter: 0.01,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes < 2 || self.num_classes > NUM_TEXTURES {
            return bad(format!(
                "num_classes must be in 2..={NUM_TEXTURES}, got {}",
                self.num_classes
            ));
        }
        if self.resolution < PATCH || self.resolution % TILE != 0 {
            return bad(format!(
                "resolution must be a multiple of {TILE} and at least {PATCH}, got {}",
                self.resolution
            ));
        }
        if self.run_length == 0 || self.frames < 4 || self.frames % self.run_length != 0 {
            return bad(format!(
                "frames ({}) must be at least 4 and a multiple of run_length ({})",
                self.frames, self.run_length
            ));
        }
        let runs = self.frames / self.run_length;
        if self.events.0 > self.events.1 || self.events.0 == 0 || self.events.1 > runs {
            return bad(format!(
                "informative events {:?} with {runs} runs per video",
                self.events
            ));
        }
        if self.event_span == 0 || self.event_span > self.run_length {
            return bad(format!(
                "event_span must be in 1..={}, got {}",
                self.run_length, self.event_span
            ));
        }
        if [
            self.patch_offset,
            self.texture_amplitude,
            self.clutter,
            self.jitter,
        ]
        .iter()
        .any(|v| !v.is_finite() || *v < 0.0)
        {
            return bad("amplitudes must be finite and non-negative".into());
        }
        if self.train_per_class == 0 {
            return bad("need at least one training video per class".into());
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.resolution * self.resolution
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Ground truth the model never sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub id: usize,
    pub label: usize,
    pub split: Split,
    /// Frames carrying the class patch, ascending.
    pub informative: Vec<usize>,
    /// Top-left corner `(y, x)` of the patch per informative frame.
    pub patches: Vec<(usize, usize)>,
}

impl VideoMeta {
    pub fn is_informative(&self, t: usize) -> bool {
        self.informative.binary_search(&t).is_ok()
    }
}

/// `T` frames of `resolution²` values each, single channel.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub meta: VideoMeta,
    pub frames: Vec<f32>,
}

impl VideoSample {
    pub fn label(&self) -> usize {
        self.meta.label
    }

    pub fn frame(&self, t: usize, frame_len: usize) -> &[f32] {
        &self.frames[t * frame_len..(t + 1) * frame_len]
    }

    /// Resize every frame to every ladder level.
    pub fn leveled(&self, ladder: &ResolutionLadder) -> Result<LeveledVideo> {
        let b = ladder.base();
        if self.frames.len() % (b * b) != 0 {
            return Err(Error::InvalidArgument(format!(
                "frames of {} values do not tile {b}x{b}",
                self.frames.len()
            )));
        }
        let t = self.frames.len() / (b * b);
        let data: Vec<f64> = self.frames.iter().map(|&v| f64::from(v)).collect();
        Ok(LeveledVideo {
            frames: t,
            channels: 1,
            sizes: ladder.levels().to_vec(),
            levels: resize_all_levels(&data, t, ladder),
        })
    }
}

/// A video pre-resized to every ladder level.
#[derive(Clone, Debug, PartialEq)]
pub struct LeveledVideo {
    pub frames: usize,
    pub channels: usize,
    sizes: Vec<usize>,
    levels: Vec<Vec<f64>>,
}

impl LeveledVideo {
    /// Build from per-level data `[T, C, s_l, s_l]`.
    pub fn new(
        frames: usize,
        channels: usize,
        sizes: Vec<usize>,
        levels: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if sizes.len() != levels.len()
            || sizes
                .iter()
                .zip(&levels)
                .any(|(s, d)| d.len() != frames * channels * s * s)
        {
            return Err(Error::InvalidArgument(
                "level data does not match sizes".into(),
            ));
        }
        Ok(Self {
            frames,
            channels,
            sizes,
            levels,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, level: usize) -> usize {
        self.sizes[level]
    }

    pub fn frame(&self, level: usize, t: usize) -> &[f64] {
        let n = self.channels * self.sizes[level] * self.sizes[level];
        &self.levels[level][t * n..(t + 1) * n]
    }
}

/// A video's ground truth with its frames pre-resized to every level.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedVideo {
    pub meta: VideoMeta,
    pub leveled: LeveledVideo,
}

/// Resize every video once up front.
pub fn prepare<'a>(
    videos: impl IntoIterator<Item = &'a VideoSample>,
    ladder: &ResolutionLadder,
) -> Result<Vec<PreparedVideo>> {
    videos
        .into_iter()
        .map(|v| {
            Ok(PreparedVideo {
                meta: v.meta.clone(),
                leveled: v.leveled(ladder)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub videos: Vec<VideoSample>,
}

const NUM_TEXTURES: usize = 6;

/// Profile annihilated by 4→3 area resampling.
const NULL24: [f64; 4] = [-1.0 / 3.0, 1.0, -1.0, 1.0 / 3.0];
/// Profiles annihilated by 2→1 block averaging.
const NULL16_A: [f64; 4] = [1.0, -1.0, 1.0, -1.0];
const NULL16_B: [f64; 4] = [1.0, -1.0, -1.0, 1.0];

/// Class texture as a 4×4 tile, indexed `[y][x]`.
pub fn texture_tile(class: usize) -> [[f64; TILE]; TILE] {
    let outer = |a: [f64; 4], b: [f64; 4]| {
        let mut t = [[0.0; TILE]; TILE];
        for (y, row) in t.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                *v = a[y] * b[x];
            }
        }
        t
    };
    let add = |p: [[f64; 4]; 4], q: [[f64; 4]; 4]| {
        let mut t = p;
        for y in 0..TILE {
            for x in 0..TILE {
                t[y][x] = (p[y][x] + q[y][x]) * std::f64::consts::FRAC_1_SQRT_2;
            }
        }
        t
    };
    let basis = [
        outer(NULL16_A, NULL24),
        outer(NULL16_B, NULL24),
        outer(NULL24, NULL16_A),
        outer(NULL24, NULL16_B),
    ];
    match class {
        0..=3 => basis[class],
        4 => add(basis[0], basis[3]),
        5 => add(basis[1], basis[2]),
        _ => panic!("no texture for class {class}"),
    }
}

/// Texture value at patch-relative pixel `(y, x)`.
pub fn texture_at(class: usize, detail: Detail, y: usize, x: usize) -> f64 {
    let tile = texture_tile(class);
    match detail {
        Detail::Fine => tile[y % TILE][x % TILE],
        Detail::Coarse => tile[(y / TILE) % TILE][(x / TILE) % TILE],
    }
}

fn video_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64 + 1);
    rng
}

fn render_video(spec: &DatasetSpec, id: usize, label: usize, split: Split) -> VideoSample {
    let mut rng = video_rng(spec.seed, id);
    let (s, t_len, run) = (spec.resolution, spec.frames, spec.run_length);
    let n = s * s;
    let clutter = Normal::new(0.0, spec.clutter).expect("validated");
    let jitter = Normal::new(0.0, spec.jitter).expect("validated");

    // Smooth background: a few low-frequency cosines.
    let mut background = vec![0.3; n];
    for _ in 0..3 {
        let (fy, fx) = (
            rng.random_range(0..=1) as f64,
            rng.random_range(0..=2) as f64,
        );
        let amp = rng.random_range(0.0..0.08);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..s {
            for x in 0..s {
                let arg =
                    std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / s as f64 + phase;
                background[y * s + x] += amp * arg.cos();
            }
        }
    }

    let k = rng.random_range(spec.events.0..=spec.events.1);
    let mut order: Vec<usize> = (0..t_len / run).collect();
    order.shuffle(&mut rng);
    let mut starts: Vec<usize> = order[..k].iter().map(|r| r * run).collect();
    starts.sort_unstable();
    let positions = (s - PATCH) / TILE + 1;
    let mut informative = Vec::with_capacity(k * spec.event_span);
    let mut patches = Vec::with_capacity(k * spec.event_span);
    for start in starts {
        let at = (
            rng.random_range(0..positions) * TILE,
            rng.random_range(0..positions) * TILE,
        );
        for t in start..start + spec.event_span {
            informative.push(t);
            patches.push(at);
        }
    }

    let mut frames = Vec::with_capacity(t_len * n);
    let mut base = background.clone();
    for t in 0..t_len {
        if t % run == 0 {
            base = background.clone();
            base.iter_mut().for_each(|v| *v += clutter.sample(&mut rng));
        }
        let mut frame: Vec<f64> = base.iter().map(|&v| v + jitter.sample(&mut rng)).collect();
        if let Some(e) = informative.iter().position(|&i| i == t) {
            let (py, px) = patches[e];
            for y in 0..PATCH {
                for x in 0..PATCH {
                    frame[(py + y) * s + px + x] += spec.patch_offset
                        + spec.texture_amplitude * texture_at(label, spec.detail, y, x);
                }
            }
        }
        frames.extend(frame.iter().map(|&v| v as f32));
    }
    VideoSample {
        meta: VideoMeta {
            id,
            label,
            split,
            informative,
            patches,
        },
        frames,
    }
}

/// Generate the whole benchmark. Pure in `spec`; each video draws from its
/// own stream derived from `(spec.seed, id)`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut videos = Vec::new();
    let splits = [
        (Split::Train, spec.train_per_class),
        (Split::Val, spec.val_per_class),
        (Split::Test, spec.test_per_class),
    ];
    for (split, per_class) in splits {
        for _ in 0..per_class {
            for label in 0..spec.num_classes {
                let id = videos.len();
                videos.push(render_video(spec, id, label, split));
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        videos,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: DatasetSpec,
    videos: Vec<VideoMeta>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoSample> {
        self.videos.iter().filter(move |v| v.meta.split == split)
    }

    /// Binary container: magic, header length (u64 LE), JSON header with
    /// version, spec and per-video metadata, then every frame as f32 LE.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            version: DATASET_VERSION,
            spec: self.spec.clone(),
            videos: self.videos.iter().map(|v| v.meta.clone()).collect(),
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut body = Vec::with_capacity(self.videos.iter().map(|v| v.frames.len() * 4).sum());
        for v in &self.videos {
            for x in &v.frames {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&body)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dataset container".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| Error::Format("header too large".into()))?;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let v: serde_json::Value = serde_json::from_slice(&header)?;
        let found = v.get("version").and_then(serde_json::Value::as_u64);
        if found != Some(u64::from(DATASET_VERSION)) {
            return Err(Error::Version {
                expected: DATASET_VERSION.to_string(),
                found: found.map_or_else(|| "none".into(), |f| f.to_string()),
            });
        }
        let header: Header = serde_json::from_value(v)?;
        header.spec.validate()?;
        let per_video = header.spec.frames * header.spec.frame_len();
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != header.videos.len() * per_video * 4 {
            return Err(Error::Format(format!(
                "body has {} bytes, expected {}",
                body.len(),
                header.videos.len() * per_video * 4
            )));
        }
        let values: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let videos = header
            .videos
            .into_iter()
            .zip(values.chunks(per_video))
            .map(|(meta, f)| VideoSample {
                meta,
                frames: f.to_vec(),
            })
            .collect();
        Ok(Self {
            spec: header.spec,
            videos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub videos: usize,
    pub per_class: Vec<usize>,
    pub per_split: BTreeMap<String, usize>,
    /// `informative_count[k]`: videos with exactly `k` informative frames.
    pub informative_count: Vec<usize>,
    /// `informative_by_frame[t]`: videos whose frame `t` is informative.
    pub informative_by_frame: Vec<usize>,
    /// Share of all frames that are informative.
    pub informative_rate: f64,
}

/// Class, split and informative-frame summaries.
pub fn frame_stats(videos: &[VideoSample], num_classes: usize, frames: usize) -> FrameStats {
    let mut s = FrameStats {
        videos: videos.len(),
        per_class: vec![0; num_classes],
        per_split: BTreeMap::new(),
        informative_count: vec![0; frames + 1],
        informative_by_frame: vec![0; frames],
        informative_rate: 0.0,
    };
    let mut informative = 0usize;
    for v in videos {
        if let Some(c) = s.per_class.get_mut(v.meta.label) {
            *c += 1;
        }
        let key = serde_json::to_value(v.meta.split)
            .ok()
            .and_then(|j| j.as_str().map(str::to_string))
            .unwrap_or_default();
        *s.per_split.entry(key).or_default() += 1;
        let k = v.meta.informative.len().min(frames);
        s.informative_count[k] += 1;
        informative += k;
        for &t in &v.meta.informative {
            if let Some(c) = s.informative_by_frame.get_mut(t) {
                *c += 1;
            }
        }
    }
    if !videos.is_empty() && frames > 0 {
        s.informative_rate = informative as f64 / (videos.len() * frames) as f64;
    }
    s
}
