//! Procedural multi-label video sequences with per-frame ground truth.
//!
//! Every sequence renders `num_aus` fixed-location bars on a small grayscale
//! canvas. A bar is lit while its AU is active. Each sequence also gets a
//! static "identity" (dim distractor bars plus a brightness offset), a pose
//! marker that sweeps back and forth along the bottom strip, Gaussian pixel
//! noise, and occasional glitched frames: shifted, flashed and out of sync
//! with the marker sweep.
//!
//! On-disk layout of a corpus directory:
//!
//! * `meta.json`: [`CorpusMeta`]
//! * `labels.csv`: one row per frame,
//!   `sequence,frame_index,au_0,...,au_{U-1},visible,glitch` (all integers, 0/1 flags)
//! * `seq_NNNN.f32`: little-endian `f32` pixels, `frames x H x W x C`, row-major

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{AuLabels, ClipSample, FrameRecord};
use crate::error::{Error, Result};

/// Coupled pair: whenever `source` starts an event, `target` joins it with `probability`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub source: usize,
    pub target: usize,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    pub num_aus: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Target fraction of frames on which each AU is active.
    pub activation_rate: f64,
    /// Per-AU override of `activation_rate`; empty means uniform.
    pub au_rates: Vec<f64>,
    pub co_occurrence: Vec<Coupling>,
    /// Minimum length of any interior on/off run, in frames.
    pub min_event_len: usize,
    pub mean_event_len: f64,
    pub noise_std: f64,
    pub au_amplitude: (f64, f64),
    pub distractors: usize,
    pub distractor_amplitude: f64,
    /// Pose-marker speed in pixels per frame.
    pub marker_speed: f64,
    pub marker_amplitude: f64,
    /// Probability that a frame is rendered misaligned.
    pub glitch_prob: f64,
    pub glitch_shift: usize,
    /// Brightness added to the whole of a misaligned frame (an exposure flash).
    pub glitch_flash: f64,
    /// Peak of a slow sinusoidal illumination drift, in `[0, drift_amplitude]`,
    /// added to the whole frame.
    pub drift_amplitude: f64,
    /// Drift period range in frames; each sequence draws one.
    pub drift_period: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_sequences: 40,
            frames_per_sequence: 120,
            num_aus: 5,
            image_size: 16,
            channels: 1,
            activation_rate: 0.3,
            au_rates: Vec::new(),
            co_occurrence: vec![
                Coupling { source: 0, target: 1, probability: 0.8 },
                Coupling { source: 3, target: 4, probability: 0.5 },
            ],
            min_event_len: 5,
            mean_event_len: 12.0,
            noise_std: 0.12,
            au_amplitude: (0.3, 0.7),
            distractors: 3,
            distractor_amplitude: 0.35,
            marker_speed: 0.8,
            marker_amplitude: 0.9,
            glitch_prob: 0.02,
            glitch_shift: 3,
            glitch_flash: 0.5,
            drift_amplitude: 0.3,
            drift_period: (20.0, 40.0),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 || self.frames_per_sequence == 0 {
            return Err(Error::config("corpus must contain at least one frame"));
        }
        if self.num_aus == 0 {
            return Err(Error::config("corpus needs at least one AU"));
        }
        if self.image_size < 8 || self.channels == 0 {
            return Err(Error::config("frames must be at least 8x8 with one channel"));
        }
        if self.min_event_len < 2 {
            return Err(Error::config("minimum event length must be at least 2 frames"));
        }
        if !(self.mean_event_len > 0.0) {
            return Err(Error::config("mean event length must be positive"));
        }
        if !self.au_rates.is_empty() && self.au_rates.len() != self.num_aus {
            return Err(Error::config("au_rates must have one entry per AU"));
        }
        if self.rates().iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config("activation rates must lie in [0, 1]"));
        }
        for c in &self.co_occurrence {
            if !(0.0..=1.0).contains(&c.probability) {
                return Err(Error::config(format!(
                    "coupling probability {} outside [0, 1]",
                    c.probability
                )));
            }
            if c.source >= self.num_aus || c.target >= self.num_aus || c.source == c.target {
                return Err(Error::config(format!(
                    "coupling ({}, {}) does not name two distinct AUs",
                    c.source, c.target
                )));
            }
        }
        if self.noise_std < 0.0 || !(0.0..=1.0).contains(&self.glitch_prob) {
            return Err(Error::config("noise must be non-negative and glitch_prob in [0, 1]"));
        }
        let (plo, phi) = self.drift_period;
        if self.drift_amplitude < 0.0 || !(0.0 < plo && plo <= phi) {
            return Err(Error::config("drift amplitude must be non-negative and 0 < period lo <= hi"));
        }
        let (lo, hi) = self.au_amplitude;
        if !(0.0 < lo && lo <= hi) {
            return Err(Error::config("AU amplitude range must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }

    fn rates(&self) -> Vec<f64> {
        if self.au_rates.is_empty() {
            vec![self.activation_rate; self.num_aus]
        } else {
            self.au_rates.clone()
        }
    }

    /// Rate of each AU's own event process once coupled co-activations are
    /// accounted for, so that the marginal stays at its target.
    fn independent_rates(&self) -> Result<Vec<f64>> {
        let rates = self.rates();
        let mut keep_off = vec![1.0f64; self.num_aus];
        for c in &self.co_occurrence {
            keep_off[c.target] *= 1.0 - c.probability * rates[c.source];
        }
        rates
            .iter()
            .zip(&keep_off)
            .enumerate()
            .map(|(au, (&r, &off))| {
                let independent = if off <= 0.0 { 0.0 } else { 1.0 - (1.0 - r) / off };
                if independent < -1e-12 {
                    Err(Error::Generation(format!(
                        "couplings into AU{au} demand an activation rate above its marginal {r}"
                    )))
                } else {
                    Ok(independent.max(0.0))
                }
            })
            .collect()
    }
}

/// Where trainer-visible labels are placed inside each sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// One label every `k = round(1 / ratio)` frames.
    #[default]
    Strided,
    /// A leading block of the same size.
    Contiguous,
}

impl SampleMode {
    pub fn name(self) -> &'static str {
        match self {
            SampleMode::Strided => "strided",
            SampleMode::Contiguous => "contiguous",
        }
    }
}

impl FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strided" => Ok(Self::Strided),
            "contiguous" => Ok(Self::Contiguous),
            other => Err(Error::config(format!("unknown sample mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: usize,
    /// One `H x W x C` image per frame.
    pub frames: Vec<Vec<f32>>,
    /// Full ground truth, kept for auditing and evaluation.
    pub labels: Vec<AuLabels>,
    pub visible: Vec<bool>,
    /// Frames rendered misaligned.
    pub glitch: Vec<bool>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn visible_labels(&self) -> impl Iterator<Item = &AuLabels> {
        self.labels.iter().zip(&self.visible).filter(|(_, &v)| v).map(|(l, _)| l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub format_version: u32,
    pub num_aus: usize,
    pub image_size: usize,
    pub channels: usize,
    pub label_ratio: f64,
    pub sample_mode: SampleMode,
    pub num_sequences: usize,
    pub synth: Option<SynthConfig>,
}

/// Sequences with full ground truth plus the mask of trainer-visible labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCorpus {
    pub sequences: Vec<Sequence>,
    pub num_aus: usize,
    pub image_size: usize,
    pub channels: usize,
    pub label_ratio: f64,
    pub sample_mode: SampleMode,
    pub synth: Option<SynthConfig>,
}

const FORMAT_VERSION: u32 = 1;

impl LabeledCorpus {
    pub fn frame_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn visible_labels(&self) -> impl Iterator<Item = &AuLabels> {
        self.sequences.iter().flat_map(|s| s.visible_labels())
    }

    pub fn num_visible(&self) -> usize {
        self.sequences.iter().map(|s| s.visible.iter().filter(|&&v| v).count()).sum()
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }

    fn meta(&self) -> CorpusMeta {
        CorpusMeta {
            format_version: FORMAT_VERSION,
            num_aus: self.num_aus,
            image_size: self.image_size,
            channels: self.channels,
            label_ratio: self.label_ratio,
            sample_mode: self.sample_mode,
            num_sequences: self.sequences.len(),
            synth: self.synth.clone(),
        }
    }

    /// Splits off the last `round(fraction * N)` sequences as a held-out set.
    pub fn split_validation(&self, fraction: f64) -> (LabeledCorpus, LabeledCorpus) {
        let n = self.sequences.len();
        let held = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
        let mut train = self.clone();
        let val_seqs = train.sequences.split_off(n - held);
        let val = LabeledCorpus { sequences: val_seqs, ..self.clone_empty() };
        (train, val)
    }

    fn clone_empty(&self) -> LabeledCorpus {
        LabeledCorpus {
            sequences: Vec::new(),
            num_aus: self.num_aus,
            image_size: self.image_size,
            channels: self.channels,
            label_ratio: self.label_ratio,
            sample_mode: self.sample_mode,
            synth: self.synth.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta())? + "\n")?;
        fs::write(dir.join("labels.csv"), self.labels_csv())?;
        for seq in &self.sequences {
            let file = fs::File::create(dir.join(format!("seq_{:04}.f32", seq.id)))?;
            let mut out = BufWriter::new(file);
            for frame in &seq.frames {
                for px in frame {
                    out.write_all(&px.to_le_bytes())?;
                }
            }
            out.flush()?;
        }
        Ok(())
    }

    fn labels_csv(&self) -> String {
        let mut text = String::from("sequence,frame_index");
        for au in 0..self.num_aus {
            text.push_str(&format!(",au_{au}"));
        }
        text.push_str(",visible,glitch\n");
        for seq in &self.sequences {
            for t in 0..seq.len() {
                text.push_str(&format!("{},{}", seq.id, t));
                for &v in seq.labels[t].values() {
                    text.push_str(if v { ",1" } else { ",0" });
                }
                text.push_str(if seq.visible[t] { ",1" } else { ",0" });
                text.push_str(if seq.glitch[t] { ",1\n" } else { ",0\n" });
            }
        }
        text
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "corpus format version {} is not supported",
                meta.format_version
            )));
        }
        let mut sequences: Vec<Sequence> = Vec::new();
        let mut reader = csv::Reader::from_path(dir.join("labels.csv"))?;
        for record in reader.records() {
            let record = record?;
            let fields: Vec<usize> = record
                .iter()
                .map(|f| f.parse::<usize>().map_err(|_| Error::data(format!("bad label field `{f}`"))))
                .collect::<Result<_>>()?;
            if fields.len() != meta.num_aus + 4 {
                return Err(Error::data("label row has the wrong number of columns"));
            }
            let (id, t) = (fields[0], fields[1]);
            if sequences.last().map(|s| s.id) != Some(id) {
                sequences.push(Sequence {
                    id,
                    frames: Vec::new(),
                    labels: Vec::new(),
                    visible: Vec::new(),
                    glitch: Vec::new(),
                });
            }
            let seq = sequences.last_mut().expect("pushed above");
            if t != seq.labels.len() {
                return Err(Error::data(format!("sequence {id}: frame {t} out of order")));
            }
            let bits: Vec<u8> = fields[2..2 + meta.num_aus].iter().map(|&b| b as u8).collect();
            seq.labels.push(AuLabels::from_bits(&bits)?);
            seq.visible.push(fields[2 + meta.num_aus] == 1);
            seq.glitch.push(fields[3 + meta.num_aus] == 1);
        }
        let frame_len = meta.image_size * meta.image_size * meta.channels;
        for seq in &mut sequences {
            let bytes = fs::read(dir.join(format!("seq_{:04}.f32", seq.id)))?;
            if bytes.len() != seq.labels.len() * frame_len * 4 {
                return Err(Error::data(format!(
                    "sequence {}: pixel file does not match {} frames",
                    seq.id,
                    seq.labels.len()
                )));
            }
            let pixels: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            seq.frames = pixels.chunks_exact(frame_len).map(<[f32]>::to_vec).collect();
        }
        if sequences.len() != meta.num_sequences {
            return Err(Error::data("sequence count differs from meta.json"));
        }
        Ok(LabeledCorpus {
            sequences,
            num_aus: meta.num_aus,
            image_size: meta.image_size,
            channels: meta.channels,
            label_ratio: meta.label_ratio,
            sample_mode: meta.sample_mode,
            synth: meta.synth,
        })
    }

    /// SHA-256 over the serialized corpus (metadata, labels and pixels).
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.meta()).unwrap_or_default());
        hasher.update(self.labels_csv().as_bytes());
        for seq in &self.sequences {
            for frame in &seq.frames {
                for px in frame {
                    hasher.update(px.to_le_bytes());
                }
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Generates the full corpus; every label starts visible.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<LabeledCorpus> {
    cfg.validate()?;
    let independent = cfg.independent_rates()?;
    let layout = Layout::new(cfg.image_size, cfg.num_aus);
    let sequences = (0..cfg.num_sequences)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(id as u64);
            generate_sequence(cfg, &independent, &layout, id, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledCorpus {
        sequences,
        num_aus: cfg.num_aus,
        image_size: cfg.image_size,
        channels: cfg.channels,
        label_ratio: 1.0,
        sample_mode: SampleMode::Strided,
        synth: Some(cfg.clone()),
    })
}

/// Pixel rectangles for the AU bars and the marker strip.
#[derive(Clone, Debug)]
struct Layout {
    size: usize,
    /// `(row, col, height, width)` per AU.
    bars: Vec<(usize, usize, usize, usize)>,
    face_rows: usize,
    marker_row: usize,
}

impl Layout {
    fn new(size: usize, num_aus: usize) -> Self {
        let face_rows = size - 4;
        let grid_rows = if num_aus > 2 { 2 } else { 1 };
        let grid_cols = num_aus.div_ceil(grid_rows);
        let cell_h = face_rows / grid_rows;
        let cell_w = size / grid_cols;
        let bar_h = (cell_h / 2).max(1);
        let bar_w = (cell_w / 2).max(1);
        let bars = (0..num_aus)
            .map(|au| {
                let (r, c) = (au / grid_cols, au % grid_cols);
                (r * cell_h + (cell_h - bar_h) / 2, c * cell_w + (cell_w - bar_w) / 2, bar_h, bar_w)
            })
            .collect();
        Self { size, bars, face_rows, marker_row: size - 3 }
    }
}

fn generate_sequence(
    cfg: &SynthConfig,
    independent: &[f64],
    layout: &Layout,
    id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sequence> {
    let len = cfg.frames_per_sequence;
    let mut active: Vec<Vec<bool>> = independent
        .iter()
        .map(|&rate| event_track(len, rate, cfg.mean_event_len, cfg.min_event_len, rng))
        .collect();
    for c in &cfg.co_occurrence {
        let source = active[c.source].clone();
        for (start, end, on) in runs(&source) {
            if on && rng.random::<f64>() < c.probability {
                active[c.target][start..end].fill(true);
            }
        }
    }
    for track in &mut active {
        enforce_min_runs(track, cfg.min_event_len);
    }

    // Each event keeps one amplitude for its whole duration.
    let (amp_lo, amp_hi) = cfg.au_amplitude;
    let mut amplitude = vec![vec![0.0f32; len]; cfg.num_aus];
    for (au, track) in active.iter().enumerate() {
        for (start, end, on) in runs(track) {
            if on {
                let a = rng.random_range(amp_lo..=amp_hi) as f32;
                amplitude[au][start..end].fill(a);
            }
        }
    }

    let size = layout.size;
    let mut identity = vec![rng.random_range(0.0..0.15) as f32; size * size];
    for _ in 0..cfg.distractors {
        let h = rng.random_range(1..=3usize);
        let w = rng.random_range(1..=3usize);
        let r0 = rng.random_range(0..layout.face_rows - h + 1);
        let c0 = rng.random_range(0..size - w + 1);
        let a = rng.random_range(0.0..=cfg.distractor_amplitude) as f32;
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                identity[r * size + c] += a;
            }
        }
    }

    let travel = (size - 2) as f64;
    let phase = rng.random_range(0.0..2.0 * travel);
    let speed = cfg.marker_speed * rng.random_range(0.75..1.25);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let (plo, phi) = cfg.drift_period;
    let period = if plo < phi { rng.random_range(plo..phi) } else { plo };
    let drift_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let mut frames = Vec::with_capacity(len);
    let mut labels = Vec::with_capacity(len);
    let mut glitch = Vec::with_capacity(len);
    for t in 0..len {
        let light = (cfg.drift_amplitude * 0.5 * (1.0 + (std::f64::consts::TAU * t as f64 / period + drift_phase).sin())) as f32;
        let mut canvas: Vec<f32> = identity.iter().map(|v| v + light).collect();
        for (au, &(r0, c0, h, w)) in layout.bars.iter().enumerate() {
            let a = amplitude[au][t];
            if a > 0.0 {
                for r in r0..r0 + h {
                    for c in c0..c0 + w {
                        canvas[r * size + c] += a;
                    }
                }
            }
        }
        // A misaligned frame is also out of sync with the sweep: its marker
        // lands at a random position instead of the scheduled one.
        let misaligned = cfg.glitch_prob > 0.0 && rng.random::<f64>() < cfg.glitch_prob;
        // Triangle sweep with linear interpolation between columns.
        let p = if misaligned { rng.random_range(0.0..2.0 * travel) } else { (phase + speed * t as f64) % (2.0 * travel) };
        let x = if p <= travel { p } else { 2.0 * travel - p };
        let col = (x.floor() as usize).min(size - 2);
        let frac = (x - col as f64) as f32;
        let amp = cfg.marker_amplitude as f32;
        for r in layout.marker_row..layout.marker_row + 2 {
            canvas[r * size + col] += amp * (1.0 - frac);
            canvas[r * size + col + 1] += amp * (0.5 + 0.5 * (1.0 - frac));
            if col + 2 < size {
                canvas[r * size + col + 2] += amp * 0.5 * frac;
            }
        }

        let mut noise_scale = 1.0;
        if misaligned {
            let max = cfg.glitch_shift.max(1) as i64;
            let dr = rng.random_range(1..=max) * if rng.random::<bool>() { 1 } else { -1 };
            let dc = rng.random_range(1..=max) * if rng.random::<bool>() { 1 } else { -1 };
            canvas = shift(&canvas, size, dr, dc);
            let flash = cfg.glitch_flash as f32;
            canvas.iter_mut().for_each(|v| *v += flash);
            noise_scale = 2.0;
        }
        let mut image = Vec::with_capacity(size * size * cfg.channels);
        for &v in &canvas {
            for _ in 0..cfg.channels {
                let n = if cfg.noise_std > 0.0 { noise.sample(rng) * noise_scale } else { 0.0 };
                image.push((v as f64 + n).clamp(0.0, 1.0) as f32);
            }
        }
        frames.push(image);
        labels.push(AuLabels::new(active.iter().map(|track| track[t]).collect()));
        glitch.push(misaligned);
    }
    Ok(Sequence { id, frames, visible: vec![true; len], labels, glitch })
}

fn shift(canvas: &[f32], size: usize, dr: i64, dc: i64) -> Vec<f32> {
    let mut out = vec![0.0f32; canvas.len()];
    let n = size as i64;
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = (r - dr, c - dc);
            if (0..n).contains(&sr) && (0..n).contains(&sc) {
                out[(r * n + c) as usize] = canvas[(sr * n + sc) as usize];
            }
        }
    }
    out
}

/// Alternating on/off segments; interior segments last at least `min_len`.
fn event_track(len: usize, rate: f64, mean_on: f64, min_len: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    if rate <= 0.0 {
        return vec![false; len];
    }
    if rate >= 1.0 {
        return vec![true; len];
    }
    let mean_off = mean_on * (1.0 - rate) / rate;
    let on_dist = Exp::new(1.0 / mean_on).expect("positive mean");
    let off_dist = Exp::new(1.0 / mean_off).expect("positive mean");
    let mut track = Vec::with_capacity(len);
    let mut state = rng.random::<f64>() < rate;
    // Start part-way through the first segment so sequence starts are not aligned to events.
    let mut first = true;
    while track.len() < len {
        let dist = if state { &on_dist } else { &off_dist };
        let mut d = (dist.sample(rng).round() as usize).max(min_len);
        if first {
            d = rng.random_range(1..=d);
            first = false;
        }
        let d = d.min(len - track.len());
        track.extend(std::iter::repeat_n(state, d));
        state = !state;
    }
    track
}

/// `(start, end, value)` for every maximal constant run.
fn runs(track: &[bool]) -> Vec<(usize, usize, bool)> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=track.len() {
        if t == track.len() || track[t] != track[start] {
            out.push((start, t, track[start]));
            start = t;
        }
    }
    out
}

/// Flips interior runs shorter than `min_len`, gaps first, until none remain.
fn enforce_min_runs(track: &mut [bool], min_len: usize) {
    for fill_value in [true, false] {
        loop {
            let rs = runs(track);
            let short = rs
                .iter()
                .enumerate()
                .find(|(i, &(s, e, v))| *i > 0 && *i + 1 < rs.len() && v != fill_value && e - s < min_len);
            match short {
                Some((_, &(s, e, _))) => track[s..e].fill(fill_value),
                None => break,
            }
        }
    }
    // Removing short on-runs can merge gaps into new short gaps only when the
    // gap was already short, which the first pass removed; re-check anyway.
    let rs = runs(track);
    if rs
        .iter()
        .enumerate()
        .any(|(i, &(s, e, _))| i > 0 && i + 1 < rs.len() && e - s < min_len)
    {
        enforce_min_runs(track, min_len);
    }
}

/// Stride used for a label budget.
pub fn label_stride(label_ratio: f64) -> usize {
    ((1.0 / label_ratio).round() as usize).max(1)
}

/// Re-masks the visible labels of every sequence for a label budget.
pub fn sample_sparse_labels(corpus: &LabeledCorpus, label_ratio: f64, mode: SampleMode) -> Result<LabeledCorpus> {
    if !(label_ratio > 0.0 && label_ratio <= 1.0) {
        return Err(Error::config(format!("label ratio {label_ratio} outside (0, 1]")));
    }
    let k = label_stride(label_ratio);
    let mut out = corpus.clone();
    out.label_ratio = label_ratio;
    out.sample_mode = mode;
    for seq in &mut out.sequences {
        let len = seq.len();
        let budget = len.div_ceil(k);
        seq.visible = (0..len)
            .map(|t| match mode {
                SampleMode::Strided => t % k == 0,
                SampleMode::Contiguous => t < budget,
            })
            .collect();
    }
    Ok(out)
}

/// Frame indices of the window whose position `key_pos` lands on `t`,
/// reflected at both sequence ends.
pub fn window_indices(t: usize, key_pos: usize, n: usize, len: usize) -> Result<Vec<usize>> {
    if key_pos >= n {
        return Err(Error::config(format!("key position {key_pos} outside clip of length {n}")));
    }
    if n > len {
        return Err(Error::data(format!("clip length {n} exceeds sequence length {len}")));
    }
    let last = len as i64 - 1;
    Ok((0..n)
        .map(|i| {
            let mut idx = t as i64 - key_pos as i64 + i as i64;
            if idx < 0 {
                idx = -idx;
            }
            if idx > last {
                idx = 2 * last - idx;
            }
            idx as usize
        })
        .collect())
}

/// Cuts the window around frame `t`; the label of `t` is exposed only when
/// `reveal` is set and the frame is visible.
pub fn clip_at(seq: &Sequence, t: usize, key_pos: usize, n: usize, clip_id: usize, reveal: bool) -> Result<ClipSample> {
    let idx = window_indices(t, key_pos, n, seq.len())?;
    let frames = idx
        .iter()
        .enumerate()
        .map(|(pos, &i)| FrameRecord {
            image: seq.frames[i].clone(),
            label: (pos == key_pos && reveal && seq.visible[i]).then(|| seq.labels[i].clone()),
            frame_index: i,
        })
        .collect();
    Ok(ClipSample {
        clip_id,
        sequence: seq.id,
        key_pos,
        frames,
        audit: idx.iter().map(|&i| seq.labels[i].clone()).collect(),
    })
}

/// `(sequence index, frame)` of every visible label, in corpus order.
pub fn labeled_anchors(corpus: &LabeledCorpus) -> Vec<(usize, usize)> {
    corpus
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| {
            seq.visible.iter().enumerate().filter(|(_, &v)| v).map(move |(t, _)| (s, t))
        })
        .collect()
}

/// One clip per visible label, all with the same key position.
pub fn make_clips(corpus: &LabeledCorpus, n: usize, key_pos: usize) -> Result<Vec<ClipSample>> {
    labeled_anchors(corpus)
        .into_iter()
        .enumerate()
        .map(|(id, (s, t))| clip_at(&corpus.sequences[s], t, key_pos, n, id, true))
        .collect()
}

pub fn count_unique_labels<'a, I>(labels: I) -> usize
where
    I: IntoIterator<Item = &'a AuLabels>,
{
    labels.into_iter().collect::<HashSet<_>>().len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub ratio: f64,
    pub mode: SampleMode,
    pub labeled: usize,
    pub unique_count: usize,
}

/// Distinct visible label combinations for each `(ratio, mode)` budget.
pub fn coverage_table(corpus: &LabeledCorpus, ratios: &[f64], modes: &[SampleMode]) -> Result<Vec<CoverageRow>> {
    let mut rows = Vec::with_capacity(ratios.len() * modes.len());
    for &ratio in ratios {
        for &mode in modes {
            let sampled = sample_sparse_labels(corpus, ratio, mode)?;
            rows.push(CoverageRow {
                ratio,
                mode,
                labeled: sampled.num_visible(),
                unique_count: count_unique_labels(sampled.visible_labels()),
            });
        }
    }
    Ok(rows)
}

pub fn write_coverage_csv<W: Write>(rows: &[CoverageRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["ratio", "mode", "labeled", "unique_count"])?;
    for r in rows {
        w.write_record([r.ratio.to_string(), r.mode.name().to_string(), r.labeled.to_string(), r.unique_count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
