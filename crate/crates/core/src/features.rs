//! Per-epoch feature extraction: Welch band power, Hjorth parameters, Burg
//! autoregressive coefficients and Haar wavelet energies, assembled into a
//! feature vector with a fixed, channel-major layout.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fmt;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sigcore::{BandDef, Epoch};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate signal on channel {channel}: {reason}")]
    Degenerate { channel: usize, reason: String },
    #[error("invalid feature spec: {0}")]
    Spec(String),
    #[error("{descriptor}: {source}")]
    At {
        descriptor: String,
        #[source]
        source: Box<FeatureError>,
    },
}

impl FeatureError {
    fn at(self, descriptor: impl fmt::Display) -> Self {
        FeatureError::At {
            descriptor: descriptor.to_string(),
            source: Box::new(self),
        }
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// One-sided power spectral density (µV²/Hz) on bins `k * df`.
#[derive(Debug, Clone, PartialEq)]
pub struct Psd {
    pub df: f64,
    pub values: Vec<f64>,
}

impl Psd {
    /// Integrates the density over bins whose centre lies in `[f_lo, f_hi]`.
    pub fn integrate(&self, f_lo: f64, f_hi: f64) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(k, _)| {
                let f = *k as f64 * self.df;
                f >= f_lo && f <= f_hi
            })
            .map(|(_, p)| p * self.df)
            .sum()
    }
}

/// Welch estimate: periodic Hann segments of `segment` samples, 50% overlap,
/// mean removed per segment.
pub fn welch_psd(x: &[f64], fs: f64, segment: usize) -> Psd {
    let seg = segment.clamp(1, x.len().max(1));
    let hop = (seg / 2).max(1);
    let window: Vec<f64> = (0..seg)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / seg as f64).cos())
        .collect();
    let window = if seg == 1 { vec![1.0] } else { window };
    let win_power: f64 = window.iter().map(|w| w * w).sum();
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(seg));

    let n_bins = seg / 2 + 1;
    let mut acc = vec![0.0; n_bins];
    let mut n_segments = 0usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); seg];
    let mut start = 0;
    while start + seg <= x.len() {
        let chunk = &x[start..start + seg];
        let mean = chunk.iter().sum::<f64>() / seg as f64;
        for ((b, v), w) in buf.iter_mut().zip(chunk).zip(&window) {
            *b = Complex64::new((v - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        n_segments += 1;
        start += hop;
    }

    let scale = 1.0 / (fs * win_power * n_segments.max(1) as f64);
    let values = acc
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let one_sided = if k == 0 || (seg % 2 == 0 && k == seg / 2) { 1.0 } else { 2.0 };
            p * scale * one_sided
        })
        .collect();
    Psd {
        df: fs / seg as f64,
        values,
    }
}

fn welch_segment(epoch: &Epoch) -> usize {
    epoch.window_len.min(epoch.fs.round() as usize).max(1)
}

fn check_band(band: &BandDef, fs: f64) -> Result<(), FeatureError> {
    band.validate(fs).map_err(|e| FeatureError::Domain(e.to_string()))
}

/// Per-channel power (µV²) in `band`.
pub fn band_power(epoch: &Epoch, band: &BandDef) -> Result<Vec<f64>, FeatureError> {
    check_band(band, epoch.fs)?;
    let seg = welch_segment(epoch);
    Ok(epoch
        .channels()
        .map(|x| welch_psd(x, epoch.fs, seg).integrate(band.f_lo, band.f_hi))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hjorth {
    pub activity: f64,
    pub mobility: f64,
    pub complexity: f64,
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn derivative(x: &[f64], fs: f64) -> Vec<f64> {
    x.windows(2).map(|w| (w[1] - w[0]) * fs).collect()
}

/// Hjorth activity, mobility and complexity per channel. Derivatives are
/// first differences scaled by `fs`.
pub fn hjorth_params(epoch: &Epoch) -> Result<Vec<Hjorth>, FeatureError> {
    if epoch.window_len < 3 {
        return Err(FeatureError::Domain(format!(
            "Hjorth parameters need >= 3 samples, got {}",
            epoch.window_len
        )));
    }
    epoch
        .channels()
        .enumerate()
        .map(|(c, x)| {
            let var_x = variance(x);
            if var_x == 0.0 {
                return Err(FeatureError::Degenerate {
                    channel: c,
                    reason: "constant channel has zero activity".into(),
                });
            }
            let dx = derivative(x, epoch.fs);
            let var_dx = variance(&dx);
            let var_ddx = variance(&derivative(&dx, epoch.fs));
            if var_dx == 0.0 {
                return Err(FeatureError::Degenerate {
                    channel: c,
                    reason: "derivative has zero variance".into(),
                });
            }
            let mobility = (var_dx / var_x).sqrt();
            let complexity = (var_ddx / var_dx).sqrt() / mobility;
            Ok(Hjorth {
                activity: var_x,
                mobility,
                complexity,
            })
        })
        .collect()
}

/// Burg estimate of `x_t = Σ a_k x_{t-k} + e_t` for one series.
pub fn burg(x: &[f64], order: usize) -> Result<Vec<f64>, FeatureError> {
    let n = x.len();
    if order == 0 || 2 * order >= n {
        return Err(FeatureError::Domain(format!(
            "AR order must satisfy 1 <= order < {}/2, got {order}",
            n
        )));
    }
    if x.iter().all(|v| *v == 0.0) {
        return Err(FeatureError::Degenerate {
            channel: 0,
            reason: "zero-energy signal".into(),
        });
    }
    let mut f = x.to_vec();
    let mut b = x.to_vec();
    // Prediction-error filter 1 + Σ a_i z^-i.
    let mut a = vec![0.0; order + 1];
    a[0] = 1.0;
    for m in 0..order {
        let (mut num, mut den) = (0.0, 0.0);
        for t in m + 1..n {
            num += f[t] * b[t - 1];
            den += f[t] * f[t] + b[t - 1] * b[t - 1];
        }
        if den == 0.0 {
            return Err(FeatureError::Degenerate {
                channel: 0,
                reason: format!("prediction error vanished at stage {}", m + 1),
            });
        }
        let k = -2.0 * num / den;
        let prev = a.clone();
        for i in 1..=m + 1 {
            a[i] = prev[i] + k * prev[m + 1 - i];
        }
        for t in (m + 1..n).rev() {
            let ft = f[t];
            f[t] = ft + k * b[t - 1];
            b[t] = b[t - 1] + k * ft;
        }
    }
    Ok(a[1..].iter().map(|v| -v).collect())
}

/// Burg AR coefficients per channel.
pub fn ar_coefficients(epoch: &Epoch, order: usize) -> Result<Vec<Vec<f64>>, FeatureError> {
    epoch
        .channels()
        .enumerate()
        .map(|(c, x)| {
            burg(x, order).map_err(|e| match e {
                FeatureError::Degenerate { reason, .. } => FeatureError::Degenerate { channel: c, reason },
                other => other,
            })
        })
        .collect()
}

/// Orthonormal Haar energies for one series: `[detail_1, …, detail_levels,
/// approximation]`, over the longest power-of-two prefix.
pub fn haar_energies(x: &[f64], levels: usize) -> Result<Vec<f64>, FeatureError> {
    if levels == 0 || levels >= usize::BITS as usize || x.len() < (1usize << levels) {
        return Err(FeatureError::Domain(format!(
            "{levels} Haar levels need at least 2^{levels} samples, have {}",
            x.len()
        )));
    }
    let len = 1usize << (usize::BITS - 1 - x.len().leading_zeros());
    let mut approx = x[..len].to_vec();
    let mut energies = Vec::with_capacity(levels + 1);
    for _ in 0..levels {
        let half = approx.len() / 2;
        let mut next = Vec::with_capacity(half);
        let mut detail_energy = 0.0;
        for pair in approx.chunks_exact(2) {
            let s = (pair[0] + pair[1]) * std::f64::consts::FRAC_1_SQRT_2;
            let d = (pair[0] - pair[1]) * std::f64::consts::FRAC_1_SQRT_2;
            next.push(s);
            detail_energy += d * d;
        }
        energies.push(detail_energy);
        approx = next;
    }
    energies.push(approx.iter().map(|v| v * v).sum());
    Ok(energies)
}

/// Haar energies per channel.
pub fn wavelet_energies(epoch: &Epoch, levels: usize) -> Result<Vec<Vec<f64>>, FeatureError> {
    epoch.channels().map(|x| haar_energies(x, levels)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HjorthSelect {
    pub activity: bool,
    pub mobility: bool,
    pub complexity: bool,
}

impl HjorthSelect {
    fn any(&self) -> bool {
        self.activity || self.mobility || self.complexity
    }
}

/// Which features to compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub bands: Vec<BandDef>,
    pub hjorth: HjorthSelect,
    pub ar_order: usize,
    pub wavelet_levels: usize,
}

impl Default for FeatureSpec {
    /// Theta and alpha power plus Hjorth complexity on every channel.
    fn default() -> Self {
        Self {
            bands: vec![BandDef::theta(), BandDef::alpha()],
            hjorth: HjorthSelect {
                complexity: true,
                ..HjorthSelect::default()
            },
            ar_order: 0,
            wavelet_levels: 0,
        }
    }
}

impl FeatureSpec {
    pub fn is_empty(&self) -> bool {
        self.bands.is_empty() && !self.hjorth.any() && self.ar_order == 0 && self.wavelet_levels == 0
    }

    /// Descriptors in output order for `n_channels` channels.
    pub fn layout(&self, n_channels: usize) -> Vec<FeatureDescriptor> {
        let mut per_channel = Vec::new();
        for b in &self.bands {
            per_channel.push(FeatureKind::BandPower { band: b.name.clone() });
        }
        if self.hjorth.activity {
            per_channel.push(FeatureKind::HjorthActivity);
        }
        if self.hjorth.mobility {
            per_channel.push(FeatureKind::HjorthMobility);
        }
        if self.hjorth.complexity {
            per_channel.push(FeatureKind::HjorthComplexity);
        }
        for lag in 1..=self.ar_order {
            per_channel.push(FeatureKind::Ar { lag });
        }
        for level in 1..=self.wavelet_levels {
            per_channel.push(FeatureKind::WaveletDetail { level });
        }
        if self.wavelet_levels > 0 {
            per_channel.push(FeatureKind::WaveletApprox);
        }
        (0..n_channels)
            .flat_map(|channel| {
                per_channel.iter().map(move |kind| FeatureDescriptor {
                    channel,
                    kind: kind.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    BandPower { band: String },
    HjorthActivity,
    HjorthMobility,
    HjorthComplexity,
    Ar { lag: usize },
    WaveletDetail { level: usize },
    WaveletApprox,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub channel: usize,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl fmt::Display for FeatureDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            FeatureKind::BandPower { band } => write!(f, "ch{}/power[{band}]", self.channel),
            FeatureKind::HjorthActivity => write!(f, "ch{}/hjorth.activity", self.channel),
            FeatureKind::HjorthMobility => write!(f, "ch{}/hjorth.mobility", self.channel),
            FeatureKind::HjorthComplexity => write!(f, "ch{}/hjorth.complexity", self.channel),
            FeatureKind::Ar { lag } => write!(f, "ch{}/ar[{lag}]", self.channel),
            FeatureKind::WaveletDetail { level } => write!(f, "ch{}/haar.d{level}", self.channel),
            FeatureKind::WaveletApprox => write!(f, "ch{}/haar.a", self.channel),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: Vec<FeatureDescriptor>,
    pub epoch_start_index: u64,
    pub artifact_flag: bool,
}

/// Running per-feature mean and standard deviation (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: u64,
    min_count: u64,
}

impl Normalizer {
    pub fn new(n_features: usize, min_count: u64) -> Self {
        Self {
            mean: vec![0.0; n_features],
            m2: vec![0.0; n_features],
            count: 0,
            min_count,
        }
    }

    /// Normalizer preloaded with fixed statistics.
    pub fn from_stats(mean: Vec<f64>, std: Vec<f64>, count: u64, min_count: u64) -> Self {
        let m2 = std.iter().map(|s| s * s * count as f64).collect();
        Self {
            mean,
            m2,
            count,
            min_count,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_warm(&self) -> bool {
        self.count >= self.min_count && self.count > 0
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> Vec<f64> {
        self.m2
            .iter()
            .map(|m| if self.count > 0 { (m / self.count as f64).sqrt() } else { 0.0 })
            .collect()
    }

    pub fn update(&mut self, values: &[f64]) -> Result<(), FeatureError> {
        self.check_len(values.len())?;
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(values) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
        Ok(())
    }

    pub fn apply(&self, values: &mut [f64]) -> Result<(), FeatureError> {
        self.check_len(values.len())?;
        for ((v, m), s) in values.iter_mut().zip(&self.mean).zip(self.std()) {
            *v = if s > 0.0 { (*v - m) / s } else { *v - m };
        }
        Ok(())
    }

    fn check_len(&self, n: usize) -> Result<(), FeatureError> {
        if n != self.mean.len() {
            return Err(FeatureError::Spec(format!(
                "normalizer tracks {} features, got {n}",
                self.mean.len()
            )));
        }
        Ok(())
    }
}

/// Computes the features selected by `spec`.
///
/// With a warm normalizer, clean vectors are z-scored against the
/// statistics seen so far and then folded into them. Artifact-flagged
/// epochs are returned raw and never update the normalizer.
pub fn assemble_features(
    epoch: &Epoch,
    spec: &FeatureSpec,
    normalizer: Option<&mut Normalizer>,
) -> Result<FeatureVector, FeatureError> {
    if spec.is_empty() {
        return Err(FeatureError::Spec("no features selected".into()));
    }
    let layout = spec.layout(epoch.n_channels);

    for b in &spec.bands {
        check_band(b, epoch.fs).map_err(|e| e.at(format!("power[{}]", b.name)))?;
    }
    let powers: Vec<Vec<f64>> = if spec.bands.is_empty() {
        Vec::new()
    } else {
        let seg = welch_segment(epoch);
        epoch
            .channels()
            .map(|x| {
                let psd = welch_psd(x, epoch.fs, seg);
                spec.bands.iter().map(|b| psd.integrate(b.f_lo, b.f_hi)).collect()
            })
            .collect()
    };
    let hjorth = if spec.hjorth.any() {
        Some(hjorth_params(epoch).map_err(|e| e.at("hjorth"))?)
    } else {
        None
    };
    let ar = if spec.ar_order > 0 {
        Some(ar_coefficients(epoch, spec.ar_order).map_err(|e| e.at(format!("ar[{}]", spec.ar_order)))?)
    } else {
        None
    };
    let wavelets = if spec.wavelet_levels > 0 {
        Some(wavelet_energies(epoch, spec.wavelet_levels).map_err(|e| e.at("haar"))?)
    } else {
        None
    };

    let mut values = Vec::with_capacity(layout.len());
    for c in 0..epoch.n_channels {
        if !powers.is_empty() {
            values.extend_from_slice(&powers[c]);
        }
        if let Some(h) = &hjorth {
            if spec.hjorth.activity {
                values.push(h[c].activity);
            }
            if spec.hjorth.mobility {
                values.push(h[c].mobility);
            }
            if spec.hjorth.complexity {
                values.push(h[c].complexity);
            }
        }
        if let Some(ar) = &ar {
            values.extend_from_slice(&ar[c]);
        }
        if let Some(w) = &wavelets {
            values.extend_from_slice(&w[c]);
        }
    }
    debug_assert_eq!(values.len(), layout.len());

    if let Some(norm) = normalizer {
        if !epoch.artifact_flag {
            let raw = values.clone();
            if norm.is_warm() {
                norm.apply(&mut values)?;
            }
            norm.update(&raw)?;
        }
    }

    Ok(FeatureVector {
        values,
        layout,
        epoch_start_index: epoch.start_sample_index,
        artifact_flag: epoch.artifact_flag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_epoch(f: f64, amp: f64, n: usize, fs: f64, channels: usize) -> Epoch {
        let ch: Vec<Vec<f64>> = (0..channels)
            .map(|c| {
                (0..n)
                    .map(|t| amp * (2.0 * PI * f * t as f64 / fs + c as f64).sin())
                    .collect()
            })
            .collect();
        Epoch::from_channels(0, fs, &ch).unwrap()
    }

    #[test]
    fn band_outside_nyquist_is_domain_error() {
        let e = sine_epoch(10.0, 1.0, 250, 250.0, 1);
        assert!(matches!(
            band_power(&e, &BandDef::new("x", 100.0, 130.0)),
            Err(FeatureError::Domain(_))
        ));
    }

    #[test]
    fn constant_channel_is_degenerate_for_hjorth() {
        let e = Epoch::from_channels(0, 250.0, &[vec![3.0; 250]]).unwrap();
        assert!(matches!(hjorth_params(&e), Err(FeatureError::Degenerate { .. })));
    }

    #[test]
    fn hjorth_needs_three_samples() {
        let e = Epoch::from_channels(0, 250.0, &[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(hjorth_params(&e), Err(FeatureError::Domain(_))));
    }

    #[test]
    fn ar_order_limits() {
        let e = sine_epoch(10.0, 1.0, 20, 250.0, 1);
        assert!(ar_coefficients(&e, 20).is_err());
        assert!(ar_coefficients(&e, 10).is_err());
        assert!(ar_coefficients(&e, 0).is_err());
        assert!(ar_coefficients(&e, 9).is_ok());
        let zeros = Epoch::from_channels(0, 250.0, &[vec![0.0; 50]]).unwrap();
        assert!(matches!(ar_coefficients(&zeros, 2), Err(FeatureError::Degenerate { .. })));
    }

    #[test]
    fn haar_constant_has_no_detail() {
        let e = haar_energies(&[2.0; 16], 3).unwrap();
        assert_eq!(&e[..3], &[0.0, 0.0, 0.0]);
        assert!((e[3] - 64.0).abs() < 1e-12);
    }

    #[test]
    fn haar_alternating_is_level_one() {
        let x = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let e = haar_energies(&x, 3).unwrap();
        let total: f64 = e.iter().sum();
        assert!(e[0] / total >= 0.99);
    }

    #[test]
    fn haar_truncates_to_power_of_two() {
        let mut x = vec![1.0; 8];
        x.extend([100.0; 4]);
        let e = haar_energies(&x, 2).unwrap();
        assert!((e.iter().sum::<f64>() - 8.0).abs() < 1e-12);
        assert!(haar_energies(&x, 4).is_err());
        assert!(haar_energies(&x, 0).is_err());
    }

    #[test]
    fn layout_is_channel_major() {
        let spec = FeatureSpec {
            bands: vec![BandDef::alpha(), BandDef::theta()],
            hjorth: HjorthSelect::default(),
            ar_order: 0,
            wavelet_levels: 0,
        };
        let e = sine_epoch(10.0, 2.0, 250, 250.0, 8);
        let v = assemble_features(&e, &spec, None).unwrap();
        assert_eq!(v.values.len(), 16);
        assert_eq!(v.layout[0].channel, 0);
        assert_eq!(v.layout[1], FeatureDescriptor { channel: 0, kind: FeatureKind::BandPower { band: "theta".into() } });
        assert_eq!(v.layout[2].channel, 1);
        let alpha = band_power(&e, &BandDef::alpha()).unwrap();
        assert_eq!(v.values[2], alpha[1]);
    }

    #[test]
    fn full_layout_order() {
        let spec = FeatureSpec {
            bands: vec![BandDef::alpha()],
            hjorth: HjorthSelect { activity: true, mobility: true, complexity: true },
            ar_order: 2,
            wavelet_levels: 2,
        };
        let names: Vec<String> = spec.layout(1).iter().map(|d| d.to_string()).collect();
        assert_eq!(
            names,
            [
                "ch0/power[alpha]",
                "ch0/hjorth.activity",
                "ch0/hjorth.mobility",
                "ch0/hjorth.complexity",
                "ch0/ar[1]",
                "ch0/ar[2]",
                "ch0/haar.d1",
                "ch0/haar.d2",
                "ch0/haar.a"
            ]
        );
        let e = sine_epoch(10.0, 2.0, 250, 250.0, 1);
        assert_eq!(assemble_features(&e, &spec, None).unwrap().values.len(), 9);
    }

    #[test]
    fn empty_spec_rejected() {
        let spec = FeatureSpec { bands: vec![], ..FeatureSpec::default() };
        let spec = FeatureSpec { hjorth: HjorthSelect::default(), ..spec };
        let e = sine_epoch(10.0, 2.0, 250, 250.0, 1);
        assert!(matches!(assemble_features(&e, &spec, None), Err(FeatureError::Spec(_))));
    }

    #[test]
    fn sub_feature_error_carries_descriptor() {
        let e = Epoch::from_channels(0, 250.0, &[vec![1.0; 250]]).unwrap();
        let err = assemble_features(&e, &FeatureSpec::default(), None).unwrap_err();
        assert!(err.to_string().starts_with("hjorth"), "{err}");
    }

    #[test]
    fn normalizer_at_mean_gives_zeros() {
        let e = sine_epoch(10.0, 2.0, 250, 250.0, 2);
        let raw = assemble_features(&e, &FeatureSpec::default(), None).unwrap();
        let mut norm = Normalizer::from_stats(raw.values.clone(), vec![1.5; raw.values.len()], 50, 10);
        let z = assemble_features(&e, &FeatureSpec::default(), Some(&mut norm)).unwrap();
        assert!(z.values.iter().all(|v| *v == 0.0));
        assert_eq!(norm.count(), 51);
    }

    #[test]
    fn flagged_epoch_skips_normalizer() {
        let mut e = sine_epoch(10.0, 2.0, 250, 250.0, 2);
        e.artifact_flag = true;
        let raw = assemble_features(&e, &FeatureSpec::default(), None).unwrap();
        let mut norm = Normalizer::from_stats(vec![0.0; 6], vec![1.0; 6], 50, 10);
        let before = norm.clone();
        let v = assemble_features(&e, &FeatureSpec::default(), Some(&mut norm)).unwrap();
        assert!(v.artifact_flag);
        assert_eq!(v.values, raw.values);
        assert_eq!(norm, before);
    }

    #[test]
    fn cold_normalizer_passes_values_through() {
        let e = sine_epoch(10.0, 2.0, 250, 250.0, 1);
        let raw = assemble_features(&e, &FeatureSpec::default(), None).unwrap();
        let mut norm = Normalizer::new(3, 5);
        let v = assemble_features(&e, &FeatureSpec::default(), Some(&mut norm)).unwrap();
        assert_eq!(v.values, raw.values);
        assert_eq!(norm.count(), 1);
    }
}
