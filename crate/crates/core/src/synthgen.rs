//! Deterministic synthetic EEG driven by a scripted mental-state timeline.
//!
//! Every sample is a pure function of `(config, timeline, sample index)`:
//! rhythm phases come from the absolute sample index and all randomness is
//! drawn from ChaCha streams addressed by position, so a stream can be
//! produced in blocks of any size and still be bit-identical.
//!
//! Each channel is the sum of
//! * band rhythms `gain(state, band) * A * sin(2π f t + φ)`,
//! * pink noise (Voss-McCartney, [`PINK_OCTAVES`] staggered octaves plus one
//!   white row, each row uniform),
//! * a line-frequency sinusoid,
//! * occasional EOG (frontal half-sine, peak = artifact amplitude) or EMG
//!   (Gaussian burst, RMS = artifact amplitude) artifacts.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sigcore::{Montage, SampleBlock, DEFAULT_FS};

/// Number of staggered pink-noise octave rows.
pub const PINK_OCTAVES: u32 = 8;
const PINK_ROWS: f64 = (PINK_OCTAVES + 1) as f64;

const STREAM_WHITE: u64 = 32;
const STREAM_PHASE: u64 = 40;
const STREAM_ARTIFACT: u64 = 41;
const STREAM_EMG: u64 = 42;
const SHARED_CHANNEL: u64 = 0xFFFF;

const EOG_DURATION_S: f64 = 0.5;
const EMG_DURATION_S: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("time must be >= 0, got {0}")]
    NegativeTime(f64),
    #[error("invalid timeline: {0}")]
    InvalidTimeline(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MentalLabel {
    Clear,
    Confused,
    Rest,
}

impl MentalLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Clear => "CLEAR",
            Self::Confused => "CONFUSED",
            Self::Rest => "REST",
        }
    }

    /// Band gains used when a timeline entry gives none.
    ///
    /// CONFUSED is the simulation's ground-truth signature: frontal theta
    /// up, alpha down.
    pub fn default_gains(&self) -> BTreeMap<String, f64> {
        let pairs: &[(&str, f64)] = match self {
            Self::Clear => &[],
            Self::Confused => &[("theta", 1.8), ("alpha", 0.6)],
            Self::Rest => &[("alpha", 1.5), ("beta", 0.8)],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

impl std::str::FromStr for MentalLabel {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CLEAR" => Ok(Self::Clear),
            "CONFUSED" => Ok(Self::Confused),
            "REST" => Ok(Self::Rest),
            other => Err(SynthError::InvalidTimeline(format!("unknown label {other:?}"))),
        }
    }
}

/// A labelled state with per-band amplitude multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentalState {
    pub label: MentalLabel,
    pub rhythm_gains: BTreeMap<String, f64>,
}

impl MentalState {
    pub fn new(label: MentalLabel) -> Self {
        Self {
            label,
            rhythm_gains: label.default_gains(),
        }
    }

    pub fn clear() -> Self {
        Self::new(MentalLabel::Clear)
    }

    pub fn confused() -> Self {
        Self::new(MentalLabel::Confused)
    }

    /// Multiplier for `band`; bands not listed keep unit gain.
    pub fn gain(&self, band: &str) -> f64 {
        self.rhythm_gains.get(band).copied().unwrap_or(1.0)
    }
}

/// One line of a timeline file: `{t_start_s, label, rhythm_gains}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRecord {
    t_start_s: f64,
    label: MentalLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rhythm_gains: Option<BTreeMap<String, f64>>,
}

/// Ordered `(t_start, state)` entries, each covering `[t_start, next)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TimelineRecord>", into = "Vec<TimelineRecord>")]
pub struct Timeline {
    entries: Vec<(f64, MentalState)>,
}

impl TryFrom<Vec<TimelineRecord>> for Timeline {
    type Error = SynthError;

    fn try_from(records: Vec<TimelineRecord>) -> Result<Self, Self::Error> {
        let entries = records
            .into_iter()
            .map(|r| {
                let rhythm_gains = r.rhythm_gains.unwrap_or_else(|| r.label.default_gains());
                (
                    r.t_start_s,
                    MentalState {
                        label: r.label,
                        rhythm_gains,
                    },
                )
            })
            .collect();
        Timeline::new(entries)
    }
}

impl From<Timeline> for Vec<TimelineRecord> {
    fn from(t: Timeline) -> Self {
        t.entries
            .into_iter()
            .map(|(t_start_s, s)| TimelineRecord {
                t_start_s,
                label: s.label,
                rhythm_gains: Some(s.rhythm_gains),
            })
            .collect()
    }
}

impl Timeline {
    pub fn new(entries: Vec<(f64, MentalState)>) -> Result<Self, SynthError> {
        let first = entries
            .first()
            .ok_or_else(|| SynthError::InvalidTimeline("timeline is empty".into()))?;
        if first.0 != 0.0 {
            return Err(SynthError::InvalidTimeline(format!(
                "first entry must start at 0, got {}",
                first.0
            )));
        }
        for w in entries.windows(2) {
            if !(w[1].0 > w[0].0) || !w[1].0.is_finite() {
                return Err(SynthError::InvalidTimeline(format!(
                    "t_start must strictly increase ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        for (t, s) in &entries {
            if let Some((band, g)) = s.rhythm_gains.iter().find(|(_, g)| !(**g >= 0.0)) {
                return Err(SynthError::InvalidTimeline(format!(
                    "negative gain {g} for {band} at t={t}"
                )));
            }
        }
        Ok(Self { entries })
    }

    /// A single state held forever.
    pub fn constant(state: MentalState) -> Self {
        Self {
            entries: vec![(0.0, state)],
        }
    }

    /// Builds a timeline from `(t_start, label)` pairs with default gains.
    pub fn from_labels(pairs: &[(f64, MentalLabel)]) -> Result<Self, SynthError> {
        Self::new(
            pairs
                .iter()
                .map(|&(t, l)| (t, MentalState::new(l)))
                .collect(),
        )
    }

    pub fn entries(&self) -> &[(f64, MentalState)] {
        &self.entries
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        serde_json::from_str(text).map_err(|e| SynthError::InvalidTimeline(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("timeline serializes")
    }

    fn index_at(&self, t: f64) -> usize {
        self.entries.partition_point(|(start, _)| *start <= t) - 1
    }

    /// Replaces everything from `t` onward with `state`.
    pub fn override_from(&mut self, t: f64, state: MentalState) {
        let t = t.max(0.0);
        self.entries.retain(|(start, _)| *start < t);
        if self.entries.is_empty() {
            self.entries.push((0.0, state));
        } else {
            self.entries.push((t, state));
        }
    }

    /// Intervals `[start, end)` labelled `label`; the last one is open-ended.
    pub fn intervals(&self, label: MentalLabel) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, (start, s)) in self.entries.iter().enumerate() {
            if s.label != label {
                continue;
            }
            let end = self.entries.get(i + 1).map_or(f64::INFINITY, |e| e.0);
            match out.last_mut() {
                Some(last) if last.1 == *start => last.1 = end,
                _ => out.push((*start, end)),
            }
        }
        out
    }
}

/// The state whose interval contains `t`.
pub fn state_at(timeline: &Timeline, t: f64) -> Result<&MentalState, SynthError> {
    if !(t >= 0.0) {
        return Err(SynthError::NegativeTime(t));
    }
    Ok(&timeline.entries[timeline.index_at(t)].1)
}

/// One sinusoidal rhythm on one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhythmSource {
    pub band: String,
    pub freq_hz: f64,
    pub amplitude_uv: f64,
}

impl RhythmSource {
    pub fn new(band: &str, freq_hz: f64, amplitude_uv: f64) -> Self {
        Self {
            band: band.to_string(),
            freq_hz,
            amplitude_uv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub fs: f64,
    pub montage: Montage,
    /// Rhythm sources, one list per channel.
    pub sources: Vec<Vec<RhythmSource>>,
    /// Standard deviation of the pink background (µV).
    pub pink_amplitude_uv: f64,
    pub line_freq_hz: f64,
    pub line_amplitude_uv: f64,
    pub artifact_rate_per_min: f64,
    pub artifact_amplitude_uv: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let montage = Montage::default_10_20();
        let sources = montage
            .channel_names
            .iter()
            .map(|name| {
                let (theta, alpha, beta) = match name.chars().next() {
                    Some('F') => (5.0, 4.0, 2.0),
                    Some('C') => (4.0, 6.0, 3.0),
                    _ => (3.0, 8.0, 2.0),
                };
                vec![
                    RhythmSource::new("theta", 6.0, theta),
                    RhythmSource::new("alpha", 10.0, alpha),
                    RhythmSource::new("beta", 20.0, beta),
                ]
            })
            .collect();
        Self {
            fs: DEFAULT_FS,
            montage,
            sources,
            pink_amplitude_uv: 6.0,
            line_freq_hz: 50.0,
            line_amplitude_uv: 4.0,
            artifact_rate_per_min: 2.0,
            artifact_amplitude_uv: 150.0,
            seed: 0x5eed,
        }
    }
}

impl GeneratorConfig {
    /// Config with every amplitude zeroed.
    pub fn silent(montage: Montage, fs: f64) -> Self {
        let sources = vec![Vec::new(); montage.n_channels()];
        Self {
            fs,
            montage,
            sources,
            pink_amplitude_uv: 0.0,
            line_freq_hz: 50.0,
            line_amplitude_uv: 0.0,
            artifact_rate_per_min: 0.0,
            artifact_amplitude_uv: 0.0,
            seed: 0,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.montage.n_channels()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return bad(format!("fs must be > 0, got {}", self.fs));
        }
        self.montage
            .validate()
            .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        if self.sources.len() != self.n_channels() {
            return bad(format!(
                "{} source lists for {} channels",
                self.sources.len(),
                self.n_channels()
            ));
        }
        let nyquist = self.fs / 2.0;
        for (c, list) in self.sources.iter().enumerate() {
            for s in list {
                if !(s.amplitude_uv >= 0.0) {
                    return bad(format!("channel {c} {} amplitude < 0", s.band));
                }
                if !(s.freq_hz > 0.0 && s.freq_hz < nyquist) {
                    return bad(format!("channel {c} {} frequency {} Hz", s.band, s.freq_hz));
                }
            }
        }
        for (name, v) in [
            ("pink_amplitude_uv", self.pink_amplitude_uv),
            ("line_amplitude_uv", self.line_amplitude_uv),
            ("artifact_rate_per_min", self.artifact_rate_per_min),
            ("artifact_amplitude_uv", self.artifact_amplitude_uv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.line_freq_hz > 0.0 && self.line_freq_hz < nyquist) {
            return bad(format!(
                "line frequency {} Hz must be inside (0, {nyquist})",
                self.line_freq_hz
            ));
        }
        Ok(())
    }

    fn rng(&self, channel: u64, kind: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(channel * 64 + kind);
        rng
    }
}

fn unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn symmetric(x: u64) -> f64 {
    2.0 * unit(x) - 1.0
}

/// Value of a positional ChaCha stream at counter `k`.
fn seek(rng: &mut ChaCha8Rng, k: u64) -> u64 {
    rng.set_word_pos(2 * k as u128);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ArtifactKind {
    Eog { sign: f64 },
    Emg,
}

#[derive(Debug, Clone, Copy)]
struct ArtifactEvent {
    start: u64,
    len: u64,
    kind: ArtifactKind,
}

fn artifact_events(cfg: &GeneratorConfig, from: u64, to: u64) -> Vec<ArtifactEvent> {
    if cfg.artifact_rate_per_min <= 0.0 || cfg.artifact_amplitude_uv <= 0.0 || to <= from {
        return Vec::new();
    }
    let slot_len = cfg.fs.round().max(1.0) as u64;
    let p = (cfg.artifact_rate_per_min / 60.0 * slot_len as f64 / cfg.fs).min(1.0);
    let eog_len = (EOG_DURATION_S * cfg.fs).round().max(1.0) as u64;
    let emg_len = (EMG_DURATION_S * cfg.fs).round().max(1.0) as u64;
    let mut rng = cfg.rng(SHARED_CHANNEL, STREAM_ARTIFACT);
    let first_slot = (from / slot_len).saturating_sub(1);
    let last_slot = (to - 1) / slot_len;
    let mut out = Vec::new();
    for slot in first_slot..=last_slot {
        rng.set_word_pos(8 * slot as u128);
        let (u_event, u_offset, u_kind, u_sign) = (
            unit(rng.next_u64()),
            unit(rng.next_u64()),
            unit(rng.next_u64()),
            unit(rng.next_u64()),
        );
        if u_event >= p {
            continue;
        }
        let start = slot * slot_len + (u_offset * slot_len as f64) as u64;
        let (kind, len) = if u_kind < 0.5 {
            let sign = if u_sign < 0.5 { -1.0 } else { 1.0 };
            (ArtifactKind::Eog { sign }, eog_len)
        } else {
            (ArtifactKind::Emg, emg_len)
        };
        if start < to && start + len > from {
            out.push(ArtifactEvent { start, len, kind });
        }
    }
    out
}

fn is_frontal(name: &str) -> bool {
    name.starts_with('F') || name.starts_with('f')
}

/// Produces `n` samples starting at absolute index `from_sample`.
pub fn generate_block(
    config: &GeneratorConfig,
    timeline: &Timeline,
    from_sample: u64,
    n: usize,
) -> Result<SampleBlock, SynthError> {
    config.validate()?;
    let fs = config.fs;
    let n_channels = config.n_channels();
    let to = from_sample + n as u64;

    // State index per sample, shared by all channels.
    let mut state_idx = Vec::with_capacity(n);
    let mut k = timeline.index_at(from_sample as f64 / fs);
    for idx in from_sample..to {
        let t = idx as f64 / fs;
        while k + 1 < timeline.entries.len() && timeline.entries[k + 1].0 <= t {
            k += 1;
        }
        state_idx.push(k);
    }

    let events = artifact_events(config, from_sample, to);
    let pink_row = config.pink_amplitude_uv * 3f64.sqrt() / PINK_ROWS.sqrt();
    let mut samples = vec![0.0; n_channels * n];

    for c in 0..n_channels {
        let out = &mut samples[c * n..(c + 1) * n];
        let mut phase_rng = config.rng(c as u64, STREAM_PHASE);
        let line_phase = 2.0 * PI * unit(seek(&mut phase_rng, 0));

        for (s, src) in config.sources[c].iter().enumerate() {
            let phase = 2.0 * PI * unit(seek(&mut phase_rng, 1 + s as u64));
            let gains: Vec<f64> = timeline
                .entries
                .iter()
                .map(|(_, st)| st.gain(&src.band) * src.amplitude_uv)
                .collect();
            for (t, v) in out.iter_mut().enumerate() {
                let time = (from_sample + t as u64) as f64 / fs;
                *v += gains[state_idx[t]] * (2.0 * PI * src.freq_hz * time + phase).sin();
            }
        }

        if config.line_amplitude_uv > 0.0 {
            for (t, v) in out.iter_mut().enumerate() {
                let time = (from_sample + t as u64) as f64 / fs;
                *v += config.line_amplitude_uv
                    * (2.0 * PI * config.line_freq_hz * time + line_phase).sin();
            }
        }

        if pink_row > 0.0 && n > 0 {
            // Row j changes at indices 2^j * (2m + 1); its counter is the
            // number of changes so far.
            let mut rows: Vec<(ChaCha8Rng, u64, f64)> = (0..PINK_OCTAVES)
                .map(|j| {
                    let mut rng = config.rng(c as u64, j as u64);
                    let counter = (from_sample + (1 << j)) >> (j + 1);
                    let value = symmetric(seek(&mut rng, counter));
                    (rng, counter, value)
                })
                .collect();
            let mut white = config.rng(c as u64, STREAM_WHITE);
            white.set_word_pos(2 * from_sample as u128);
            for (t, v) in out.iter_mut().enumerate() {
                let idx = from_sample + t as u64;
                if t > 0 && idx != 0 {
                    let j = idx.trailing_zeros();
                    if j < PINK_OCTAVES {
                        let row = &mut rows[j as usize];
                        row.1 += 1;
                        row.2 = symmetric(row.0.next_u64());
                    }
                }
                // Summed afresh so the value does not depend on block boundaries.
                let sum: f64 = rows.iter().map(|r| r.2).sum();
                *v += pink_row * (sum + symmetric(white.next_u64()));
            }
        }

        let frontal = is_frontal(&config.montage.channel_names[c]);
        for ev in &events {
            let lo = ev.start.max(from_sample);
            let hi = (ev.start + ev.len).min(to);
            match ev.kind {
                ArtifactKind::Eog { sign } if frontal => {
                    for idx in lo..hi {
                        let x = (idx - ev.start) as f64 / ev.len as f64;
                        out[(idx - from_sample) as usize] +=
                            sign * config.artifact_amplitude_uv * (PI * x).sin();
                    }
                }
                ArtifactKind::Eog { .. } => {}
                ArtifactKind::Emg => {
                    // Gaussian with RMS equal to the artifact amplitude.
                    let mut rng = config.rng(c as u64, STREAM_EMG);
                    rng.set_word_pos(4 * lo as u128);
                    for idx in lo..hi {
                        let u1 = 1.0 - unit(rng.next_u64());
                        let u2 = unit(rng.next_u64());
                        let g = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
                        out[(idx - from_sample) as usize] += config.artifact_amplitude_uv * g;
                    }
                }
            }
        }
    }

    Ok(SampleBlock::new(from_sample, n_channels, fs, samples).expect("generated samples are finite"))
}

/// Stateful wrapper producing consecutive blocks.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    timeline: Timeline,
    cursor: u64,
}

impl Generator {
    pub fn new(config: GeneratorConfig, timeline: Timeline) -> Result<Self, SynthError> {
        config.validate()?;
        Ok(Self {
            config,
            timeline,
            cursor: 0,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn timeline(&self) -> &Timeline {
        &self.timeline
    }

    /// Next sample index to be produced.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn next_block(&mut self, n: usize) -> SampleBlock {
        let block = generate_block(&self.config, &self.timeline, self.cursor, n)
            .expect("config validated at construction");
        self.cursor += n as u64;
        block
    }

    /// Forces `state` from the current cursor onward.
    pub fn inject_state(&mut self, state: MentalState) {
        let t = self.cursor as f64 / self.config.fs;
        self.timeline.override_from(t, state);
    }
}
