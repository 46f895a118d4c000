//! Signal domain types shared by every pipeline stage: sample blocks,
//! montages, frequency bands and stream-to-epoch windowing.
//!
//! Samples are stored channel-major: the value of channel `c` at offset `t`
//! lives at `samples[c * n_samples + t]`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default sampling rate in Hz.
pub const DEFAULT_FS: f64 = 250.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SigError {
    #[error("stream gap: expected sample index {expected}, got {actual}")]
    StreamGap { expected: u64, actual: u64 },
    #[error("invalid block: {0}")]
    InvalidBlock(String),
    #[error("invalid montage: {0}")]
    InvalidMontage(String),
    #[error("band {name} [{f_lo}, {f_hi}] Hz is not inside (0, {nyquist}) Hz")]
    InvalidBand {
        name: String,
        f_lo: f64,
        f_hi: f64,
        nyquist: f64,
    },
    #[error("invalid windowing: window={window}, step={step}")]
    InvalidWindowing { window: usize, step: usize },
    #[error("block shape mismatch: {0}")]
    Shape(String),
}

/// A contiguous chunk of multi-channel samples (µV).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBlock {
    pub first_sample_index: u64,
    pub n_channels: usize,
    pub n_samples: usize,
    pub fs: f64,
    samples: Vec<f64>,
}

impl SampleBlock {
    pub fn new(
        first_sample_index: u64,
        n_channels: usize,
        fs: f64,
        samples: Vec<f64>,
    ) -> Result<Self, SigError> {
        if n_channels == 0 {
            return Err(SigError::InvalidBlock("n_channels must be >= 1".into()));
        }
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(SigError::InvalidBlock(format!("fs must be > 0, got {fs}")));
        }
        if samples.len() % n_channels != 0 {
            return Err(SigError::InvalidBlock(format!(
                "{} values is not a multiple of {n_channels} channels",
                samples.len()
            )));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(SigError::InvalidBlock(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        let n_samples = samples.len() / n_channels;
        Ok(Self {
            first_sample_index,
            n_channels,
            n_samples,
            fs,
            samples,
        })
    }

    /// Builds a block from one vector per channel.
    pub fn from_channels(
        first_sample_index: u64,
        fs: f64,
        channels: &[Vec<f64>],
    ) -> Result<Self, SigError> {
        let n = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != n) {
            return Err(SigError::InvalidBlock("ragged channels".into()));
        }
        let flat = channels.iter().flatten().copied().collect();
        Self::new(first_sample_index, channels.len(), fs, flat)
    }

    pub fn zeros(first_sample_index: u64, n_channels: usize, n_samples: usize, fs: f64) -> Self {
        Self::new(
            first_sample_index,
            n_channels,
            fs,
            vec![0.0; n_channels * n_samples],
        )
        .expect("zero block is always valid")
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.samples[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn get(&self, c: usize, t: usize) -> f64 {
        self.samples[c * self.n_samples + t]
    }

    /// Index one past the last sample of this block.
    pub fn end_index(&self) -> u64 {
        self.first_sample_index + self.n_samples as u64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Concatenates consecutive blocks into one.
    pub fn concat(blocks: &[SampleBlock]) -> Result<Self, SigError> {
        let first = blocks
            .first()
            .ok_or_else(|| SigError::InvalidBlock("no blocks to concatenate".into()))?;
        let mut channels = vec![Vec::new(); first.n_channels];
        let mut expected = first.first_sample_index;
        for b in blocks {
            if b.n_channels != first.n_channels {
                return Err(SigError::Shape("channel count changed mid-stream".into()));
            }
            if b.first_sample_index != expected {
                return Err(SigError::StreamGap {
                    expected,
                    actual: b.first_sample_index,
                });
            }
            expected = b.end_index();
            for (c, ch) in channels.iter_mut().enumerate() {
                ch.extend_from_slice(b.channel(c));
            }
        }
        Self::from_channels(first.first_sample_index, first.fs, &channels)
    }
}

/// Electrode labels plus the neighbour lists and pairs used by spatial
/// filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Montage {
    pub channel_names: Vec<String>,
    pub neighbors: Vec<Vec<usize>>,
    pub bipolar_pairs: Vec<(usize, usize)>,
}

impl Montage {
    pub fn new(
        channel_names: Vec<String>,
        neighbors: Vec<Vec<usize>>,
        bipolar_pairs: Vec<(usize, usize)>,
    ) -> Result<Self, SigError> {
        let m = Self {
            channel_names,
            neighbors,
            bipolar_pairs,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), SigError> {
        let n = self.channel_names.len();
        if n == 0 {
            return Err(SigError::InvalidMontage("no channels".into()));
        }
        let unique: HashSet<&String> = self.channel_names.iter().collect();
        if unique.len() != n {
            return Err(SigError::InvalidMontage("duplicate channel names".into()));
        }
        if self.neighbors.len() != n {
            return Err(SigError::InvalidMontage(format!(
                "{} neighbour lists for {n} channels",
                self.neighbors.len()
            )));
        }
        for (c, list) in self.neighbors.iter().enumerate() {
            for &k in list {
                if k >= n {
                    return Err(SigError::InvalidMontage(format!(
                        "neighbour index {k} of channel {c} out of range"
                    )));
                }
                if k == c {
                    return Err(SigError::InvalidMontage(format!(
                        "channel {c} lists itself as a neighbour"
                    )));
                }
            }
        }
        for &(a, b) in &self.bipolar_pairs {
            if a >= n || b >= n {
                return Err(SigError::InvalidMontage(format!(
                    "bipolar pair ({a}, {b}) out of range"
                )));
            }
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    /// Eight-electrode 10-20 subset: Fp1, Fp2, C3, Cz, C4, P3, Pz, P4.
    ///
    /// Each channel gets its four nearest electrodes as Laplacian
    /// neighbours; bipolar pairs are the longitudinal chains.
    pub fn default_10_20() -> Self {
        let names = ["Fp1", "Fp2", "C3", "Cz", "C4", "P3", "Pz", "P4"];
        let neighbors = vec![
            vec![1, 2, 3, 4],
            vec![0, 4, 3, 2],
            vec![3, 5, 0, 6],
            vec![2, 4, 0, 6],
            vec![3, 7, 1, 6],
            vec![2, 6, 3, 0],
            vec![5, 7, 3, 2],
            vec![4, 6, 3, 1],
        ];
        let bipolar_pairs = vec![(0, 2), (2, 5), (1, 4), (4, 7), (3, 6)];
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            neighbors,
            bipolar_pairs,
        )
        .expect("default montage is valid")
    }
}

impl Default for Montage {
    fn default() -> Self {
        Self::default_10_20()
    }
}

/// A named frequency band, edges in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDef {
    pub name: String,
    pub f_lo: f64,
    pub f_hi: f64,
}

impl BandDef {
    pub fn new(name: impl Into<String>, f_lo: f64, f_hi: f64) -> Self {
        Self {
            name: name.into(),
            f_lo,
            f_hi,
        }
    }

    pub fn delta() -> Self {
        Self::new("delta", 1.0, 4.0)
    }
    pub fn theta() -> Self {
        Self::new("theta", 4.0, 8.0)
    }
    pub fn alpha() -> Self {
        Self::new("alpha", 8.0, 13.0)
    }
    pub fn mu() -> Self {
        Self::new("mu", 8.0, 12.0)
    }
    pub fn beta() -> Self {
        Self::new("beta", 13.0, 30.0)
    }
    pub fn gamma() -> Self {
        Self::new("gamma", 30.0, 45.0)
    }

    /// delta, theta, alpha, mu, beta, gamma.
    pub fn default_table() -> Vec<BandDef> {
        vec![
            Self::delta(),
            Self::theta(),
            Self::alpha(),
            Self::mu(),
            Self::beta(),
            Self::gamma(),
        ]
    }

    /// Looks a band up by name in the default table.
    pub fn named(name: &str) -> Option<BandDef> {
        Self::default_table().into_iter().find(|b| b.name == name)
    }

    pub fn validate(&self, fs: f64) -> Result<(), SigError> {
        let nyquist = fs / 2.0;
        if !(self.f_lo > 0.0 && self.f_lo < self.f_hi && self.f_hi < nyquist) {
            return Err(SigError::InvalidBand {
                name: self.name.clone(),
                f_lo: self.f_lo,
                f_hi: self.f_hi,
                nyquist,
            });
        }
        Ok(())
    }
}

/// A fixed-length analysis window cut from the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub start_sample_index: u64,
    pub n_channels: usize,
    pub window_len: usize,
    pub fs: f64,
    pub artifact_flag: bool,
    samples: Vec<f64>,
}

impl Epoch {
    pub fn new(
        start_sample_index: u64,
        n_channels: usize,
        fs: f64,
        samples: Vec<f64>,
    ) -> Result<Self, SigError> {
        let block = SampleBlock::new(start_sample_index, n_channels, fs, samples)?;
        if block.n_samples == 0 {
            return Err(SigError::InvalidBlock("epoch window must be > 0".into()));
        }
        Ok(Self {
            start_sample_index,
            n_channels,
            window_len: block.n_samples,
            fs,
            artifact_flag: false,
            samples: block.into_samples(),
        })
    }

    pub fn from_channels(
        start_sample_index: u64,
        fs: f64,
        channels: &[Vec<f64>],
    ) -> Result<Self, SigError> {
        let block = SampleBlock::from_channels(start_sample_index, fs, channels)?;
        Self::new(start_sample_index, block.n_channels, fs, block.into_samples())
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c * self.window_len..(c + 1) * self.window_len]
    }

    pub fn channels(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.window_len)
    }

    /// Same epoch with every sample multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Epoch {
        Epoch {
            samples: self.samples.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    /// Sample index one past the end of the window.
    pub fn end_index(&self) -> u64 {
        self.start_sample_index + self.window_len as u64
    }
}

/// Streaming windowing with an explicit carry-over buffer.
///
/// Epoch start indices lie on the grid `origin + k * step`, where `origin`
/// is the first sample index seen.
#[derive(Debug, Clone)]
pub struct Epochizer {
    window: usize,
    step: usize,
    n_channels: Option<usize>,
    fs: f64,
    /// Index of `buffer[c][0]`.
    buffer_start: u64,
    /// Next expected block index.
    expected: Option<u64>,
    next_epoch_start: u64,
    origin: u64,
    buffer: Vec<Vec<f64>>,
}

impl Epochizer {
    pub fn new(window: usize, step: usize) -> Result<Self, SigError> {
        if window == 0 || step == 0 {
            return Err(SigError::InvalidWindowing { window, step });
        }
        Ok(Self {
            window,
            step,
            n_channels: None,
            fs: 0.0,
            buffer_start: 0,
            expected: None,
            next_epoch_start: 0,
            origin: 0,
            buffer: Vec::new(),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Appends a block and returns every epoch that became complete.
    pub fn push(&mut self, block: &SampleBlock) -> Result<Vec<Epoch>, SigError> {
        match self.expected {
            None => {
                self.n_channels = Some(block.n_channels);
                self.fs = block.fs;
                self.origin = block.first_sample_index;
                self.buffer_start = block.first_sample_index;
                self.next_epoch_start = block.first_sample_index;
                self.buffer = vec![Vec::new(); block.n_channels];
            }
            Some(expected) => {
                if block.first_sample_index != expected {
                    return Err(SigError::StreamGap {
                        expected,
                        actual: block.first_sample_index,
                    });
                }
                if Some(block.n_channels) != self.n_channels {
                    return Err(SigError::Shape(format!(
                        "expected {} channels, got {}",
                        self.n_channels.unwrap_or(0),
                        block.n_channels
                    )));
                }
            }
        }
        self.expected = Some(block.end_index());
        self.append(block, 0);
        Ok(self.drain_ready())
    }

    /// Restarts after dropped data: the next epoch begins at the first grid
    /// point at or after `block.first_sample_index`.
    pub fn resync(&mut self, block: &SampleBlock) -> Result<Vec<Epoch>, SigError> {
        if self.expected.is_none() {
            return self.push(block);
        }
        if Some(block.n_channels) != self.n_channels {
            return Err(SigError::Shape("channel count changed on resync".into()));
        }
        let idx = block.first_sample_index;
        let k = (idx.saturating_sub(self.origin) + self.step as u64 - 1) / self.step as u64;
        let start = (self.origin + k * self.step as u64).max(idx);
        for ch in &mut self.buffer {
            ch.clear();
        }
        self.buffer_start = start;
        self.next_epoch_start = start;
        self.expected = Some(block.end_index());
        let skip = (start - idx) as usize;
        if skip < block.n_samples {
            self.append(block, skip);
        } else {
            self.buffer_start = block.end_index();
        }
        Ok(self.drain_ready())
    }

    fn append(&mut self, block: &SampleBlock, skip: usize) {
        for (c, ch) in self.buffer.iter_mut().enumerate() {
            ch.extend_from_slice(&block.channel(c)[skip..]);
        }
    }

    fn buffered_end(&self) -> u64 {
        self.buffer_start + self.buffer.first().map_or(0, Vec::len) as u64
    }

    fn drain_ready(&mut self) -> Vec<Epoch> {
        let n_channels = self.n_channels.unwrap_or(0);
        let mut out = Vec::new();
        while self.next_epoch_start + self.window as u64 <= self.buffered_end() {
            let off = (self.next_epoch_start - self.buffer_start) as usize;
            let mut flat = Vec::with_capacity(n_channels * self.window);
            for ch in &self.buffer {
                flat.extend_from_slice(&ch[off..off + self.window]);
            }
            out.push(
                Epoch::new(self.next_epoch_start, n_channels, self.fs, flat)
                    .expect("buffered samples are finite"),
            );
            self.next_epoch_start += self.step as u64;
        }
        // Drop samples no future epoch can reference.
        let keep_from = self.next_epoch_start.min(self.buffered_end());
        if keep_from > self.buffer_start {
            let drop = (keep_from - self.buffer_start) as usize;
            for ch in &mut self.buffer {
                ch.drain(..drop);
            }
            self.buffer_start = keep_from;
        }
        out
    }
}

/// Cuts epochs from a contiguous sequence of blocks.
pub fn epochize(blocks: &[SampleBlock], window: usize, step: usize) -> Result<Vec<Epoch>, SigError> {
    let mut ep = Epochizer::new(window, step)?;
    let mut out = Vec::new();
    for b in blocks {
        out.extend(ep.push(b)?);
    }
    Ok(out)
}
