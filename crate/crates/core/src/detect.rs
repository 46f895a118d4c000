//! Classification and post-processing: ERD/ERS quantification, a
//! ridge-regularised Fisher discriminant, the logistic confusion index,
//! strict thresholding and dwell/refractory debouncing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureDescriptor, FeatureVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("pooled covariance is singular; retrain with ridge > 0")]
    Singular,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model file: {0}")]
    Model(String),
}

/// Band-power change relative to a reference interval, in percent.
/// Negative values are desynchronization (ERD), positive synchronization (ERS).
pub fn erd_percent(active_power: f64, reference_power: f64) -> Result<f64, DetectError> {
    if !(reference_power > 0.0) {
        return Err(DetectError::Domain(format!(
            "reference power must be > 0, got {reference_power}"
        )));
    }
    if !(active_power >= 0.0) {
        return Err(DetectError::Domain(format!(
            "active power must be >= 0, got {active_power}"
        )));
    }
    Ok(100.0 * (active_power - reference_power) / reference_power)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Ridge {
    /// `1e-3 * trace(Σ) / d`
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub n_class0: usize,
    pub n_class1: usize,
    pub train_accuracy: f64,
    /// Class means projected onto the discriminant (bias included).
    pub projected_means: [f64; 2],
}

/// Linear discriminant `score = w·v + bias`; positive leans to class 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub layout: Vec<FeatureDescriptor>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub class_labels: [String; 2],
    pub ridge: f64,
    pub training: TrainingMeta,
}

impl LdaModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DetectError> {
        let m: LdaModel = serde_json::from_str(text).map_err(|e| DetectError::Model(e.to_string()))?;
        if m.weights.len() != m.layout.len() {
            return Err(DetectError::Model(format!(
                "{} weights for {} layout entries",
                m.weights.len(),
                m.layout.len()
            )));
        }
        if !m.weights.iter().chain([&m.bias]).all(|v| v.is_finite()) {
            return Err(DetectError::Model("non-finite weights".into()));
        }
        Ok(m)
    }

    /// Score of raw feature values laid out as this model expects.
    pub fn score_values(&self, values: &[f64]) -> Result<f64, DetectError> {
        if values.len() != self.weights.len() {
            return Err(DetectError::Shape(format!(
                "model has {} weights, vector has {} values",
                self.weights.len(),
                values.len()
            )));
        }
        Ok(self.weights.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }
}

/// Fisher discriminant `w = (Σ_pooled + ridge·I)⁻¹ (μ₁ − μ₀)` with the
/// boundary at the midpoint of the projected class means. `labels[i]` is
/// true for class 1.
pub fn lda_train(
    vectors: &[FeatureVector],
    labels: &[bool],
    ridge: Ridge,
    class_labels: [&str; 2],
) -> Result<LdaModel, DetectError> {
    if vectors.len() != labels.len() {
        return Err(DetectError::Shape(format!(
            "{} vectors but {} labels",
            vectors.len(),
            labels.len()
        )));
    }
    let n1 = labels.iter().filter(|l| **l).count();
    let n0 = labels.len() - n1;
    if n0 < 2 || n1 < 2 {
        return Err(DetectError::InsufficientData(format!(
            "need >= 2 samples per class, have {n0} and {n1}"
        )));
    }
    let layout = vectors[0].layout.clone();
    let d = layout.len();
    if d == 0 {
        return Err(DetectError::Shape("empty feature layout".into()));
    }
    for (i, v) in vectors.iter().enumerate() {
        if v.layout != layout || v.values.len() != d {
            return Err(DetectError::Shape(format!("vector {i} has a different layout")));
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(DetectError::Domain(format!("vector {i} has non-finite values")));
        }
    }

    let mut mean = [DVector::<f64>::zeros(d), DVector::<f64>::zeros(d)];
    for (v, &l) in vectors.iter().zip(labels) {
        mean[l as usize] += DVector::from_column_slice(&v.values);
    }
    mean[0] /= n0 as f64;
    mean[1] /= n1 as f64;

    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (v, &l) in vectors.iter().zip(labels) {
        let c = DVector::from_column_slice(&v.values) - &mean[l as usize];
        cov += &c * c.transpose();
    }
    cov /= (n0 + n1 - 2) as f64;

    let ridge = match ridge {
        Ridge::Auto => 1e-3 * cov.trace() / d as f64,
        Ridge::Fixed(r) if r >= 0.0 && r.is_finite() => r,
        Ridge::Fixed(r) => {
            return Err(DetectError::Domain(format!("ridge must be >= 0, got {r}")));
        }
    };

    if ridge == 0.0 {
        let eig = cov.clone().symmetric_eigen().eigenvalues;
        let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        if max == 0.0 || min <= 1e-12 * max {
            return Err(DetectError::Singular);
        }
    }
    let mut reg = cov;
    for i in 0..d {
        reg[(i, i)] += ridge;
    }
    let diff = &mean[1] - &mean[0];
    let w = reg.cholesky().ok_or(DetectError::Singular)?.solve(&diff);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(DetectError::Singular);
    }
    let mid = (&mean[0] + &mean[1]) * 0.5;
    let bias = -w.dot(&mid);

    let mut model = LdaModel {
        layout,
        weights: w.iter().copied().collect(),
        bias,
        class_labels: [class_labels[0].to_string(), class_labels[1].to_string()],
        ridge,
        training: TrainingMeta {
            n_class0: n0,
            n_class1: n1,
            train_accuracy: 0.0,
            projected_means: [w.dot(&mean[0]) + bias, w.dot(&mean[1]) + bias],
        },
    };
    let correct = vectors
        .iter()
        .zip(labels)
        .filter(|(v, l)| (model.score_values(&v.values).unwrap() > 0.0) == **l)
        .count();
    model.training.train_accuracy = correct as f64 / vectors.len() as f64;
    Ok(model)
}

/// `w·v + bias`; the vector must carry the model's layout.
pub fn lda_score(model: &LdaModel, v: &FeatureVector) -> Result<f64, DetectError> {
    if v.layout != model.layout {
        return Err(DetectError::Shape(format!(
            "vector layout ({} features) differs from model layout ({} features)",
            v.layout.len(),
            model.layout.len()
        )));
    }
    model.score_values(&v.values)
}

/// Logistic map of a discriminant score onto `[0, 1]`.
pub fn confusion_index(score: f64) -> Result<f64, DetectError> {
    if !score.is_finite() {
        return Err(DetectError::Domain(format!("score must be finite, got {score}")));
    }
    Ok(if score >= 0.0 {
        1.0 / (1.0 + (-score).exp())
    } else {
        let e = score.exp();
        e / (1.0 + e)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DetectorLabel {
    Command,
    NonControl,
}

/// COMMAND iff `index > threshold`; ties stay NON_CONTROL.
pub fn threshold_state(index: f64, threshold: f64) -> Result<DetectorLabel, DetectError> {
    if index.is_nan() {
        return Err(DetectError::Domain("index is NaN".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(DetectError::Domain(format!(
            "threshold must lie in [0, 1], got {threshold}"
        )));
    }
    Ok(if index > threshold {
        DetectorLabel::Command
    } else {
        DetectorLabel::NonControl
    })
}

/// Dwell/refractory event debouncer over a label stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Debouncer {
    dwell: u32,
    refractory: u32,
    run: u32,
    cooldown: u32,
}

impl Debouncer {
    pub fn new(dwell: u32, refractory: u32) -> Result<Self, DetectError> {
        if dwell == 0 {
            return Err(DetectError::Domain("dwell must be >= 1".into()));
        }
        Ok(Self {
            dwell,
            refractory,
            run: 0,
            cooldown: 0,
        })
    }

    pub fn dwell(&self) -> u32 {
        self.dwell
    }

    pub fn refractory(&self) -> u32 {
        self.refractory
    }

    pub fn run_length(&self) -> u32 {
        self.run
    }

    pub fn in_cooldown(&self) -> bool {
        self.cooldown > 0
    }

    /// Feeds one label; true when an event fires at this index.
    pub fn push(&mut self, label: DetectorLabel) -> bool {
        if self.cooldown > 0 {
            self.cooldown -= 1;
            return false;
        }
        match label {
            DetectorLabel::Command => {
                self.run += 1;
                if self.run >= self.dwell {
                    self.run = 0;
                    self.cooldown = self.refractory;
                    true
                } else {
                    false
                }
            }
            DetectorLabel::NonControl => {
                self.run = 0;
                false
            }
        }
    }

    /// Clears the current run, keeping any cooldown.
    pub fn reset_run(&mut self) {
        self.run = 0;
    }
}

/// Indices at which `deb` fires over `labels`.
pub fn debounce(deb: &mut Debouncer, labels: &[DetectorLabel]) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| deb.push(*l).then_some(i))
        .collect()
}

/// Per-epoch detector output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub label: DetectorLabel,
    pub score: f64,
    pub confusion: f64,
    /// False when the epoch was flagged as an artifact.
    pub reliable: bool,
}

impl DetectorState {
    pub fn from_score(score: f64, threshold: f64, reliable: bool) -> Result<Self, DetectError> {
        let confusion = confusion_index(score)?;
        Ok(Self {
            label: threshold_state(confusion, threshold)?,
            score,
            confusion,
            reliable,
        })
    }

    /// A detector reading carrying only a confusion value, as stored in
    /// session rows.
    pub fn from_confusion(confusion: f64, threshold: f64, reliable: bool) -> Result<Self, DetectError> {
        let score = if confusion > 0.0 && confusion < 1.0 {
            (confusion / (1.0 - confusion)).ln()
        } else if confusion <= 0.0 {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        };
        Ok(Self {
            label: threshold_state(confusion, threshold)?,
            score,
            confusion,
            reliable,
        })
    }
}
