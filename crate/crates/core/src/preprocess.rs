//! Temporal IIR filtering, spatial re-referencing and amplitude-based
//! artifact flagging.
//!
//! Filters are cascades of second-order sections evaluated in direct form
//! II transposed. Band-pass filters are Butterworth designs mapped to the
//! digital domain with a pre-warped bilinear transform.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sigcore::{Epoch, Montage, SampleBlock};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("filter design: {0}")]
    Design(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("montage: {0}")]
    Montage(String),
    #[error("artifact threshold must be > 0, got {0}")]
    Threshold(f64),
}

/// One biquad: `H(z) = (b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Largest pole magnitude.
    pub fn pole_radius(&self) -> f64 {
        let [a1, a2] = self.a;
        let disc = a1 * a1 - 4.0 * a2;
        if disc < 0.0 {
            a2.abs().sqrt()
        } else {
            let s = disc.sqrt();
            ((-a1 + s) / 2.0).abs().max(((-a1 - s) / 2.0).abs())
        }
    }

    fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterDesign {
    Bandpass { order: usize, f_lo: f64, f_hi: f64 },
    Notch { f0: f64, q: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoefficients {
    pub sections: Vec<Biquad>,
    pub designs: Vec<FilterDesign>,
    pub fs: f64,
}

impl FilterCoefficients {
    pub fn n_sections(&self) -> usize {
        self.sections.len()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(|s| s.pole_radius() < 1.0)
    }

    /// Cascade of `self` followed by `next`.
    pub fn then(mut self, next: FilterCoefficients) -> Result<Self, PreprocessError> {
        if self.fs != next.fs {
            return Err(PreprocessError::Design(format!(
                "cannot cascade filters at {} Hz and {} Hz",
                self.fs, next.fs
            )));
        }
        self.sections.extend(next.sections);
        self.designs.extend(next.designs);
        Ok(self)
    }

    /// Pass-through cascade with no sections.
    pub fn identity(fs: f64) -> Self {
        Self {
            sections: Vec::new(),
            designs: Vec::new(),
            fs,
        }
    }
}

/// Butterworth band-pass of total order `order` (`order / 2` sections).
pub fn design_bandpass(
    order: usize,
    f_lo: f64,
    f_hi: f64,
    fs: f64,
) -> Result<FilterCoefficients, PreprocessError> {
    if !matches!(order, 2 | 4 | 6 | 8) {
        return Err(PreprocessError::Design(format!(
            "order must be one of 2, 4, 6, 8; got {order}"
        )));
    }
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(PreprocessError::Design(format!("fs must be > 0, got {fs}")));
    }
    let nyquist = fs / 2.0;
    if !(f_lo > 0.0 && f_lo < nyquist) {
        return Err(PreprocessError::Design(format!(
            "f_lo = {f_lo} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    if !(f_hi > 0.0 && f_hi < nyquist) {
        return Err(PreprocessError::Design(format!(
            "f_hi = {f_hi} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    if f_lo >= f_hi {
        return Err(PreprocessError::Design(format!(
            "f_lo = {f_lo} Hz must be below f_hi = {f_hi} Hz"
        )));
    }

    let n = order / 2;
    let k = 2.0 * fs;
    let w_lo = k * (PI * f_lo / fs).tan();
    let w_hi = k * (PI * f_hi / fs).tan();
    let bw = w_hi - w_lo;
    let w0 = (w_lo * w_hi).sqrt();

    // Low-pass prototype poles on the left half of the unit circle, mapped
    // to band-pass poles, then to z via the bilinear transform.
    let mut poles = Vec::with_capacity(2 * n);
    for i in 0..n {
        let theta = PI * (2 * i + n + 1) as f64 / (2 * n) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let half = p * bw / 2.0;
        let root = (half * half - w0 * w0).sqrt();
        for s in [half + root, half - root] {
            poles.push((k + s) / (k - s));
        }
    }

    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > 1e-12).collect();
    complex.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|p| p.im.abs() <= 1e-12)
        .map(|p| p.re)
        .collect();
    real.sort_by(f64::total_cmp);

    let mut denominators: Vec<[f64; 2]> = complex
        .iter()
        .map(|p| [-2.0 * p.re, p.norm_sqr()])
        .collect();
    for pair in real.chunks(2) {
        match pair {
            [r1, r2] => denominators.push([-(r1 + r2), r1 * r2]),
            [r] => denominators.push([-r, 0.0]),
            _ => unreachable!(),
        }
    }
    if denominators.len() != n {
        return Err(PreprocessError::Design(format!(
            "pole pairing produced {} sections for order {order}",
            denominators.len()
        )));
    }

    // Each section: one zero at DC and one at Nyquist, unity gain at the
    // digital image of the analog centre frequency.
    let w_center = 2.0 * (w0 / k).atan();
    let sections = denominators
        .into_iter()
        .map(|a| {
            let raw = Biquad { b: [1.0, 0.0, -1.0], a };
            let g = raw.response(w_center).norm();
            Biquad {
                b: [1.0 / g, 0.0, -1.0 / g],
                a,
            }
        })
        .collect();

    let coeffs = FilterCoefficients {
        sections,
        designs: vec![FilterDesign::Bandpass { order, f_lo, f_hi }],
        fs,
    };
    if !coeffs.is_stable() {
        return Err(PreprocessError::Design("designed filter is unstable".into()));
    }
    Ok(coeffs)
}

/// Second-order notch centred at `f0` with quality factor `q`.
pub fn design_notch(f0: f64, q: f64, fs: f64) -> Result<FilterCoefficients, PreprocessError> {
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(PreprocessError::Design(format!("fs must be > 0, got {fs}")));
    }
    if !(f0 > 0.0 && f0 < fs / 2.0) {
        return Err(PreprocessError::Design(format!(
            "f0 = {f0} Hz must lie in (0, {}) Hz",
            fs / 2.0
        )));
    }
    if !(q > 0.0 && q.is_finite()) {
        return Err(PreprocessError::Design(format!("q must be > 0, got {q}")));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let c = -2.0 * w0.cos() / a0;
    let section = Biquad {
        b: [1.0 / a0, c, 1.0 / a0],
        a: [c, (1.0 - alpha) / a0],
    };
    Ok(FilterCoefficients {
        sections: vec![section],
        designs: vec![FilterDesign::Notch { f0, q }],
        fs,
    })
}

/// Per-channel, per-section delay memory.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    n_channels: usize,
    n_sections: usize,
    z: Vec<[f64; 2]>,
}

impl FilterState {
    pub fn new(coeffs: &FilterCoefficients, n_channels: usize) -> Self {
        Self {
            n_channels,
            n_sections: coeffs.n_sections(),
            z: vec![[0.0; 2]; n_channels * coeffs.n_sections()],
        }
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn reset(&mut self) {
        self.z.iter_mut().for_each(|z| *z = [0.0; 2]);
    }
}

/// Filters every channel of `block`, carrying delay state in `state`.
pub fn filter_block(
    coeffs: &FilterCoefficients,
    state: &mut FilterState,
    block: &SampleBlock,
) -> Result<SampleBlock, PreprocessError> {
    if state.n_sections != coeffs.n_sections() || state.n_channels != block.n_channels {
        return Err(PreprocessError::Shape(format!(
            "state is {}x{} (channels x sections), need {}x{}",
            state.n_channels,
            state.n_sections,
            block.n_channels,
            coeffs.n_sections()
        )));
    }
    let mut out = block.clone();
    let n_sections = coeffs.n_sections();
    for c in 0..block.n_channels {
        let zs = &mut state.z[c * n_sections..(c + 1) * n_sections];
        for v in out.channel_mut(c) {
            let mut x = *v;
            for (sec, z) in coeffs.sections.iter().zip(zs.iter_mut()) {
                let y = sec.b[0] * x + z[0];
                z[0] = sec.b[1] * x - sec.a[0] * y + z[1];
                z[1] = sec.b[2] * x - sec.a[1] * y;
                x = y;
            }
            *v = x;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SpatialMethod {
    Bipolar,
    Laplacian,
    Car,
}

/// Re-references `block` by `method`. Bipolar output has one channel per pair.
pub fn spatial_filter(
    block: &SampleBlock,
    montage: &Montage,
    method: SpatialMethod,
) -> Result<SampleBlock, PreprocessError> {
    if montage.n_channels() != block.n_channels {
        return Err(PreprocessError::Montage(format!(
            "montage has {} channels, block has {}",
            montage.n_channels(),
            block.n_channels
        )));
    }
    let n = block.n_samples;
    let nc = block.n_channels;
    let channels: Vec<Vec<f64>> = match method {
        SpatialMethod::Car => {
            let mut mean = vec![0.0; n];
            for c in 0..nc {
                for (m, v) in mean.iter_mut().zip(block.channel(c)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nc as f64);
            (0..nc)
                .map(|c| block.channel(c).iter().zip(&mean).map(|(v, m)| v - m).collect())
                .collect()
        }
        SpatialMethod::Laplacian => {
            if let Some(c) = montage.neighbors.iter().position(Vec::is_empty) {
                return Err(PreprocessError::Montage(format!(
                    "channel {} has no Laplacian neighbours",
                    montage.channel_names[c]
                )));
            }
            (0..nc)
                .map(|c| {
                    let nb = &montage.neighbors[c];
                    let inv = 1.0 / nb.len() as f64;
                    (0..n)
                        .map(|t| {
                            let m: f64 = nb.iter().map(|&k| block.get(k, t)).sum();
                            block.get(c, t) - m * inv
                        })
                        .collect()
                })
                .collect()
        }
        SpatialMethod::Bipolar => {
            if montage.bipolar_pairs.is_empty() {
                return Err(PreprocessError::Montage("no bipolar pairs defined".into()));
            }
            montage
                .bipolar_pairs
                .iter()
                .map(|&(a, k)| {
                    block
                        .channel(a)
                        .iter()
                        .zip(block.channel(k))
                        .map(|(x, y)| x - y)
                        .collect()
                })
                .collect()
        }
    };
    SampleBlock::from_channels(block.first_sample_index, block.fs, &channels)
        .map_err(|e| PreprocessError::Shape(e.to_string()))
}

/// Flags `epoch` when any |sample| exceeds `threshold_uv`.
pub fn artifact_mask(mut epoch: Epoch, threshold_uv: f64) -> Result<Epoch, PreprocessError> {
    if !(threshold_uv > 0.0) {
        return Err(PreprocessError::Threshold(threshold_uv));
    }
    if epoch.samples().iter().any(|v| v.abs() > threshold_uv) {
        epoch.artifact_flag = true;
    }
    Ok(epoch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotchConfig {
    pub f0: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandpassConfig {
    pub order: usize,
    pub f_lo: f64,
    pub f_hi: f64,
}

/// Filter chain: notch, then band-pass, then spatial reference, then the
/// per-epoch artifact mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub notch: Option<NotchConfig>,
    pub bandpass: Option<BandpassConfig>,
    pub spatial: Option<SpatialMethod>,
    pub artifact_threshold_uv: f64,
    pub mask_stage: MaskStage,
}

/// Which signal the amplitude mask inspects.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaskStage {
    /// The epoch as recorded, before temporal and spatial filtering.
    #[default]
    Raw,
    /// The filtered, re-referenced epoch.
    Filtered,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            notch: Some(NotchConfig { f0: 50.0, q: 30.0 }),
            bandpass: Some(BandpassConfig {
                order: 4,
                f_lo: 1.0,
                f_hi: 45.0,
            }),
            spatial: Some(SpatialMethod::Car),
            artifact_threshold_uv: 100.0,
            mask_stage: MaskStage::Raw,
        }
    }
}

impl ChainConfig {
    pub fn coefficients(&self, fs: f64) -> Result<FilterCoefficients, PreprocessError> {
        let mut coeffs = FilterCoefficients::identity(fs);
        if let Some(n) = &self.notch {
            coeffs = coeffs.then(design_notch(n.f0, n.q, fs)?)?;
        }
        if let Some(b) = &self.bandpass {
            coeffs = coeffs.then(design_bandpass(b.order, b.f_lo, b.f_hi, fs)?)?;
        }
        Ok(coeffs)
    }
}

/// Streaming block preprocessor (temporal filters then spatial filter).
#[derive(Debug, Clone)]
pub struct Preprocessor {
    coeffs: FilterCoefficients,
    state: FilterState,
    montage: Montage,
    spatial: Option<SpatialMethod>,
    threshold_uv: f64,
}

impl Preprocessor {
    pub fn new(chain: &ChainConfig, montage: Montage, fs: f64) -> Result<Self, PreprocessError> {
        if !(chain.artifact_threshold_uv > 0.0) {
            return Err(PreprocessError::Threshold(chain.artifact_threshold_uv));
        }
        if chain.spatial == Some(SpatialMethod::Laplacian) && montage.neighbors.iter().any(Vec::is_empty) {
            return Err(PreprocessError::Montage("Laplacian needs neighbours on every channel".into()));
        }
        let coeffs = chain.coefficients(fs)?;
        let state = FilterState::new(&coeffs, montage.n_channels());
        Ok(Self {
            coeffs,
            state,
            montage,
            spatial: chain.spatial,
            threshold_uv: chain.artifact_threshold_uv,
        })
    }

    pub fn process(&mut self, block: &SampleBlock) -> Result<SampleBlock, PreprocessError> {
        let filtered = filter_block(&self.coeffs, &mut self.state, block)?;
        match self.spatial {
            Some(m) => spatial_filter(&filtered, &self.montage, m),
            None => Ok(filtered),
        }
    }

    pub fn mask(&self, epoch: Epoch) -> Epoch {
        artifact_mask(epoch, self.threshold_uv).expect("threshold validated at construction")
    }

    pub fn reset(&mut self) {
        self.state.reset();
    }
}
