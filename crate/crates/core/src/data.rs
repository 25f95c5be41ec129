//! Order-sensitive synthetic clips, frame sampling and the TRGD dataset format.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LabelMode;
use crate::parallel;
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("grammar defines no classes")]
    NoClasses,
    #[error("grammar defines no event prototypes")]
    NoEvents,
    #[error("event name {0:?} is defined twice")]
    DuplicateEvent(String),
    #[error("class {class} is empty")]
    EmptyClass { class: usize },
    #[error("class {class} uses undefined event {event:?}")]
    UnknownEvent { class: usize, event: String },
    #[error("class {class} repeats the event string of class {other}")]
    DuplicateClass { class: usize, other: usize },
    #[error("class {class} has {events} events but only {capacity} fit in {total_frames} frames at {frames_per_event} frames per event")]
    TooLong {
        class: usize,
        events: usize,
        capacity: usize,
        total_frames: usize,
        frames_per_event: usize,
    },
    #[error("no pair of classes are permutations of each other; the task would not require temporal order")]
    NoPermutationPair,
    #[error("noise level must be finite and non-negative, got {0}")]
    Noise(f64),
    #[error("{0} must be positive")]
    Extent(&'static str),
    #[error("prototypes {a} and {b} are {distance:.3} apart, need more than 4·σ·√n = {required:.3}")]
    Indistinguishable {
        a: String,
        b: String,
        distance: f64,
        required: f64,
    },
}

/// Classes as ordered event strings over a set of named prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub events: Vec<String>,
    /// Comma-separated event names, one string per class.
    pub classes: Vec<String>,
    pub noise: f64,
    pub frames_per_event: usize,
    pub total_frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub label_mode: LabelMode,
}

impl Default for Grammar {
    fn default() -> Self {
        Self {
            events: ["A", "B", "C"].map(String::from).to_vec(),
            classes: ["A,B", "B,A", "A,C", "C,A", "B", "C"].map(String::from).to_vec(),
            noise: 0.25,
            frames_per_event: 8,
            total_frames: 16,
            channels: 3,
            height: 16,
            width: 16,
            label_mode: LabelMode::Single,
        }
    }
}

impl Grammar {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Event strings as prototype indices. Checks every invariant that does not
    /// depend on the rendered prototypes.
    pub fn parse(&self) -> Result<Vec<Vec<usize>>, GrammarError> {
        for (name, v) in [
            ("frames_per_event", self.frames_per_event),
            ("total_frames", self.total_frames),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
        ] {
            if v == 0 {
                return Err(GrammarError::Extent(name));
            }
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(GrammarError::Noise(self.noise));
        }
        if self.events.is_empty() {
            return Err(GrammarError::NoEvents);
        }
        let mut names = HashSet::new();
        for e in &self.events {
            if !names.insert(e.trim()) {
                return Err(GrammarError::DuplicateEvent(e.clone()));
            }
        }
        if self.classes.is_empty() {
            return Err(GrammarError::NoClasses);
        }
        let capacity = self.total_frames / self.frames_per_event;
        let mut parsed: Vec<Vec<usize>> = Vec::with_capacity(self.classes.len());
        for (class, s) in self.classes.iter().enumerate() {
            let seq = s
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| {
                    self.events.iter().position(|e| e.trim() == t).ok_or_else(|| GrammarError::UnknownEvent {
                        class,
                        event: t.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if seq.is_empty() {
                return Err(GrammarError::EmptyClass { class });
            }
            if seq.len() > capacity {
                return Err(GrammarError::TooLong {
                    class,
                    events: seq.len(),
                    capacity,
                    total_frames: self.total_frames,
                    frames_per_event: self.frames_per_event,
                });
            }
            if let Some(other) = parsed.iter().position(|p| *p == seq) {
                return Err(GrammarError::DuplicateClass { class, other });
            }
            parsed.push(seq);
        }
        if permutation_classes(&parsed) == 0 {
            return Err(GrammarError::NoPermutationPair);
        }
        Ok(parsed)
    }
}

/// Number of classes whose event multiset is shared with at least one other class.
pub fn permutation_classes(parsed: &[Vec<usize>]) -> usize {
    let keys: Vec<Vec<usize>> = parsed.iter().map(|s| multiset_key(s)).collect();
    keys.iter().filter(|k| keys.iter().filter(|o| o == k).count() > 1).count()
}

fn multiset_key(seq: &[usize]) -> Vec<usize> {
    let mut k = seq.to_vec();
    k.sort_unstable();
    k
}

/// Best accuracy of any order-blind classifier on noise-free, balanced data:
/// the number of distinct frame multisets over the class count.
pub fn order_blind_ceiling(parsed: &[Vec<usize>]) -> f64 {
    let distinct: HashSet<Vec<usize>> = parsed.iter().map(|s| multiset_key(s)).collect();
    distinct.len() as f64 / parsed.len() as f64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(u32),
    /// One 0/1 byte per class.
    Multi(Vec<u8>),
}

impl Label {
    /// Class indices that count as correct.
    pub fn positives(&self) -> Vec<usize> {
        match self {
            Label::Class(c) => vec![*c as usize],
            Label::Multi(v) => v.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub label: Label,
    /// `T_raw × C × H × W`, row-major.
    pub frames: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub total_frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub label_mode: LabelMode,
}

impl DatasetHeader {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.header.classes];
        for s in &self.samples {
            for c in s.label.positives() {
                counts[c] += 1;
            }
        }
        counts
    }
}

/// A validated grammar with rendered prototypes.
#[derive(Clone, Debug)]
pub struct Generator {
    pub grammar: Grammar,
    pub sequences: Vec<Vec<usize>>,
    pub prototypes: Vec<Vec<f32>>,
}

impl Generator {
    /// Renders ±1 prototype patterns from `prototype_seed` and checks they are
    /// far enough apart for the noise level.
    pub fn new(grammar: Grammar, prototype_seed: u64) -> Result<Self, GrammarError> {
        let sequences = grammar.parse()?;
        let n = grammar.frame_len();
        let prototypes: Vec<Vec<f32>> = (0..grammar.events.len())
            .map(|k| {
                let mut r = rng::stream(prototype_seed, "prototype", k as u64);
                (0..n).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect()
            })
            .collect();
        let required = 4.0 * grammar.noise * (n as f64).sqrt();
        for a in 0..prototypes.len() {
            for b in a + 1..prototypes.len() {
                let distance = l2(&prototypes[a], &prototypes[b]);
                if distance <= required {
                    return Err(GrammarError::Indistinguishable {
                        a: grammar.events[a].clone(),
                        b: grammar.events[b].clone(),
                        distance,
                        required,
                    });
                }
            }
        }
        Ok(Self {
            grammar,
            sequences,
            prototypes,
        })
    }

    pub fn header(&self) -> DatasetHeader {
        let g = &self.grammar;
        DatasetHeader {
            total_frames: g.total_frames,
            channels: g.channels,
            height: g.height,
            width: g.width,
            classes: g.classes.len(),
            label_mode: g.label_mode,
        }
    }

    /// Positives of a class under multi-label mode: every class whose event
    /// string occurs contiguously inside this one.
    pub fn multi_label(&self, class: usize) -> Vec<u8> {
        let seq = &self.sequences[class];
        self.sequences
            .iter()
            .map(|s| u8::from(seq.windows(s.len()).any(|w| w == s.as_slice())))
            .collect()
    }

    /// Noise-free clip of one class; frames past the event string are zero.
    pub fn render(&self, class: usize) -> Vec<f32> {
        let g = &self.grammar;
        let n = g.frame_len();
        let mut out = vec![0.0f32; g.total_frames * n];
        for (j, &e) in self.sequences[class].iter().enumerate() {
            for f in j * g.frames_per_event..(j + 1) * g.frames_per_event {
                out[f * n..(f + 1) * n].copy_from_slice(&self.prototypes[e]);
            }
        }
        out
    }

    /// Sample `i` gets class `i mod K` and its own seed, so the result does not
    /// depend on the worker count.
    pub fn sample(&self, seed: u64, i: usize) -> Sample {
        let k = self.sequences.len();
        let class = i % k;
        let sample_seed = rng::derive_seed(seed, "sample", i as u64);
        let mut frames = self.render(class);
        if self.grammar.noise > 0.0 {
            let mut r = Rng::seed_from_u64(sample_seed);
            let normal = Normal::new(0.0, self.grammar.noise).expect("valid sigma");
            for v in &mut frames {
                *v += normal.sample(&mut r) as f32;
            }
        }
        let label = match self.grammar.label_mode {
            LabelMode::Single => Label::Class(class as u32),
            LabelMode::Multi => Label::Multi(self.multi_label(class)),
        };
        Sample {
            seed: sample_seed,
            label,
            frames,
        }
    }

    pub fn generate(&self, count: usize, seed: u64) -> Dataset {
        Dataset {
            header: self.header(),
            samples: parallel::map_indices(count, |i| self.sample(seed, i)),
        }
    }
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Sparse,
    Dense,
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("sparse sampling of {frames} frames needs at least that many raw frames, clip has {total}")]
    Sparse { frames: usize, total: usize },
    #[error("dense sampling of {frames} frames at stride {stride} needs {} raw frames, clip has {total}", frames * stride)]
    Dense { frames: usize, stride: usize, total: usize },
    #[error("sampling needs at least one frame, a positive stride and at least one clip")]
    Empty,
}

/// How frames are drawn from a raw clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sampling {
    pub mode: SamplingMode,
    pub frames: usize,
    pub stride: usize,
}

impl Sampling {
    pub fn validate(&self, total: usize) -> Result<(), SamplingError> {
        if self.frames == 0 || self.stride == 0 {
            return Err(SamplingError::Empty);
        }
        match self.mode {
            SamplingMode::Sparse if self.frames > total => Err(SamplingError::Sparse {
                frames: self.frames,
                total,
            }),
            SamplingMode::Dense if self.frames * self.stride > total => Err(SamplingError::Dense {
                frames: self.frames,
                stride: self.stride,
                total,
            }),
            _ => Ok(()),
        }
    }

    /// Training indices: jittered within each segment (sparse) or a random window start (dense).
    pub fn train_indices(&self, total: usize, rng: &mut Rng) -> Result<Vec<usize>, SamplingError> {
        self.validate(total)?;
        let t = self.frames;
        Ok(match self.mode {
            SamplingMode::Sparse => (0..t)
                .map(|i| {
                    let lo = (i * total).div_ceil(t);
                    let hi = ((i + 1) * total).div_ceil(t);
                    rng.random_range(lo..hi)
                })
                .collect(),
            SamplingMode::Dense => {
                let start = rng.random_range(0..=total - t * self.stride);
                (0..t).map(|i| start + i * self.stride).collect()
            }
        })
    }

    /// Deterministic indices for clip `clip` of `clips`. One clip gives segment
    /// midpoints (sparse) or the centered window (dense); more clips shift the
    /// offset evenly through the segment or the start range.
    pub fn eval_indices(&self, total: usize, clip: usize, clips: usize) -> Result<Vec<usize>, SamplingError> {
        self.validate(total)?;
        if clips == 0 || clip >= clips {
            return Err(SamplingError::Empty);
        }
        let t = self.frames;
        let (num, den) = (clip + 1, clips + 1);
        Ok(match self.mode {
            SamplingMode::Sparse => (0..t).map(|i| ((i * den + num) * total) / (t * den)).collect(),
            SamplingMode::Dense => {
                let start = num * (total - t * self.stride) / den;
                (0..t).map(|i| start + i * self.stride).collect()
            }
        })
    }
}

/// Copies the selected raw frames into a `T × C × H × W` buffer.
pub fn gather(sample: &Sample, header: &DatasetHeader, indices: &[usize], out: &mut Vec<f32>) {
    let n = header.frame_len();
    for &i in indices {
        out.extend_from_slice(&sample.frames[i * n..(i + 1) * n]);
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a TRGD dataset: magic bytes {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported TRGD version {found}, expected {DATASET_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("truncated TRGD file: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("malformed TRGD file: {0}")]
    Malformed(String),
}

pub const DATASET_MAGIC: &[u8; 4] = b"TRGD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 7 + 1;

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let h = &ds.header;
    let per = sample_len(h);
    let mut out = Vec::with_capacity(HEADER_LEN + per * ds.len());
    out.extend_from_slice(DATASET_MAGIC);
    for v in [
        DATASET_VERSION,
        ds.len() as u32,
        h.total_frames as u32,
        h.channels as u32,
        h.height as u32,
        h.width as u32,
        h.classes as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(match h.label_mode {
        LabelMode::Single => 0,
        LabelMode::Multi => 1,
    });
    for s in &ds.samples {
        out.extend_from_slice(&s.seed.to_le_bytes());
        match &s.label {
            Label::Class(c) => out.extend_from_slice(&c.to_le_bytes()),
            Label::Multi(v) => out.extend_from_slice(v),
        }
        for f in &s.frames {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    out
}

fn sample_len(h: &DatasetHeader) -> usize {
    let label = match h.label_mode {
        LabelMode::Single => 4,
        LabelMode::Multi => h.classes,
    };
    8 + label + 4 * h.total_frames * h.frame_len()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes"))
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().expect("8 bytes"))
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset, DataError> {
    if buf.len() < 4 || &buf[..4] != DATASET_MAGIC {
        return Err(DataError::BadMagic {
            found: buf[..buf.len().min(4)].to_vec(),
        });
    }
    if buf.len() < 8 {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            actual: buf.len(),
        });
    }
    let mut c = Cursor { buf, pos: 4 };
    let version = c.u32();
    if version != DATASET_VERSION {
        return Err(DataError::UnsupportedVersion { found: version });
    }
    if buf.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            actual: buf.len(),
        });
    }
    let count = c.u32() as usize;
    let dims: Vec<usize> = (0..5).map(|_| c.u32() as usize).collect();
    let label_mode = match c.take(1)[0] {
        0 => LabelMode::Single,
        1 => LabelMode::Multi,
        m => return Err(DataError::Malformed(format!("label mode byte {m}"))),
    };
    let header = DatasetHeader {
        total_frames: dims[0],
        channels: dims[1],
        height: dims[2],
        width: dims[3],
        classes: dims[4],
        label_mode,
    };
    if dims.contains(&0) {
        return Err(DataError::Malformed(format!("zero extent in header {dims:?}")));
    }
    let expected = sample_len(&header)
        .checked_mul(count)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| DataError::Malformed("size overflow".into()))?;
    if buf.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: buf.len(),
        });
    }
    if buf.len() > expected {
        return Err(DataError::Malformed(format!(
            "{} trailing bytes after {count} samples",
            buf.len() - expected
        )));
    }
    let n = header.total_frames * header.frame_len();
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let seed = c.u64();
        let label = match label_mode {
            LabelMode::Single => {
                let l = c.u32();
                if l as usize >= header.classes {
                    return Err(DataError::Malformed(format!("sample {i}: class {l} out of range")));
                }
                Label::Class(l)
            }
            LabelMode::Multi => {
                let v = c.take(header.classes).to_vec();
                if v.iter().any(|&b| b > 1) {
                    return Err(DataError::Malformed(format!("sample {i}: non-binary label byte")));
                }
                Label::Multi(v)
            }
        };
        let frames: Vec<f32> = c
            .take(4 * n)
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Malformed(format!("sample {i}: non-finite frame value")));
        }
        samples.push(Sample { seed, label, frames });
    }
    Ok(Dataset { header, samples })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_dataset(ds)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let buf = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_dataset(&buf)
}
