//! End-to-end wiring: preprocessing, epoching, features, detection and the
//! session state machine, plus classifier calibration and the closed-loop
//! simulator.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detect::{lda_score, lda_train, DetectorLabel, DetectorState, LdaModel, Ridge};
use crate::error::{Error, Result};
use crate::features::{assemble_features, FeatureSpec, FeatureVector};
use crate::preprocess::{ChainConfig, MaskStage, Preprocessor, SpatialMethod};
use crate::session::{
    calibrate_policy, Action, ActionKind, Calibration, Lesson, Mode, Policy, RunMode, SessionCommand,
    SessionEngine, Transition,
};
use crate::sigcore::{Epoch, Epochizer, Montage, SampleBlock};
use crate::synthgen::{generate_block, Generator, GeneratorConfig, MentalLabel, MentalState, Timeline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpochConfig {
    pub window_s: f64,
    pub step_s: f64,
}

impl Default for EpochConfig {
    fn default() -> Self {
        Self {
            window_s: 1.0,
            step_s: 0.5,
        }
    }
}

impl EpochConfig {
    /// `(window, step)` in samples.
    pub fn samples(&self, fs: f64) -> Result<(usize, usize)> {
        let window = (self.window_s * fs).round();
        let step = (self.step_s * fs).round();
        if !(window >= 1.0 && step >= 1.0 && step <= window) {
            return Err(Error::Config(format!(
                "epoch window {} s / step {} s is invalid at {fs} Hz",
                self.window_s, self.step_s
            )));
        }
        Ok((window as usize, step as usize))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Length of each alternating CLEAR/CONFUSED training block.
    pub block_s: f64,
    pub n_blocks: usize,
    /// CLEAR recording after training used for the threshold percentile.
    pub baseline_s: f64,
    /// Epochs starting less than this long after a state change are skipped.
    pub settle_s: f64,
    pub ridge: Ridge,
    /// Where the calibration recording starts on the learner's time axis,
    /// away from the samples used by lesson runs.
    pub offset_s: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            block_s: 15.0,
            n_blocks: 8,
            baseline_s: 60.0,
            settle_s: 2.0,
            ridge: Ridge::Auto,
            offset_s: 3600.0,
        }
    }
}

/// Everything needed to run the loop; this is the CLI config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EngineConfig {
    pub generator: GeneratorConfig,
    pub chain: ChainConfig,
    pub epoch: EpochConfig,
    pub features: FeatureSpec,
    pub policy: Policy,
    pub calibration: CalibrationConfig,
    pub run_mode: RunMode,
}

impl EngineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: EngineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.epoch.samples(self.generator.fs)?;
        self.policy.validate()?;
        self.run_mode.validate()?;
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.generator.seed = seed;
        cfg
    }
}

fn output_channels(chain: &ChainConfig, montage: &Montage) -> usize {
    match chain.spatial {
        Some(SpatialMethod::Bipolar) => montage.bipolar_pairs.len(),
        _ => montage.n_channels(),
    }
}

/// Features of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochFeatures {
    /// `(start - origin) / step`, stable across gaps.
    pub epoch_index: u64,
    pub start_sample: u64,
    pub end_sample: u64,
    pub features: FeatureVector,
}

/// Streaming signal chain from raw blocks to feature vectors.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pre: Preprocessor,
    epochizer: Epochizer,
    /// Cuts the unfiltered stream on the same grid when masking raw epochs.
    raw_epochizer: Option<Epochizer>,
    spec: FeatureSpec,
    fs: f64,
    n_out: usize,
    origin: Option<u64>,
}

impl Pipeline {
    pub fn new(config: &EngineConfig) -> Result<Self> {
        let fs = config.generator.fs;
        let montage = config.generator.montage.clone();
        let (window, step) = config.epoch.samples(fs)?;
        Ok(Self {
            pre: Preprocessor::new(&config.chain, montage.clone(), fs)?,
            epochizer: Epochizer::new(window, step)?,
            raw_epochizer: match config.chain.mask_stage {
                MaskStage::Raw => Some(Epochizer::new(window, step)?),
                MaskStage::Filtered => None,
            },
            spec: config.features.clone(),
            fs,
            n_out: output_channels(&config.chain, &montage),
            origin: None,
        })
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn layout(&self) -> Vec<crate::features::FeatureDescriptor> {
        self.spec.layout(self.n_out)
    }

    pub fn step_samples(&self) -> usize {
        self.epochizer.step()
    }

    pub fn window_samples(&self) -> usize {
        self.epochizer.window()
    }

    /// Processes the next contiguous block.
    pub fn push(&mut self, block: &SampleBlock) -> Result<Vec<EpochFeatures>> {
        self.origin.get_or_insert(block.first_sample_index);
        let filtered = self.pre.process(block)?;
        let epochs = self.epochizer.push(&filtered)?;
        let raw = match &mut self.raw_epochizer {
            Some(r) => Some(r.push(block)?),
            None => None,
        };
        self.finish(epochs, raw)
    }

    /// Processes a block after a gap, re-aligning to the epoch grid.
    pub fn resync(&mut self, block: &SampleBlock) -> Result<Vec<EpochFeatures>> {
        self.origin.get_or_insert(block.first_sample_index);
        let filtered = self.pre.process(block)?;
        let epochs = self.epochizer.resync(&filtered)?;
        let raw = match &mut self.raw_epochizer {
            Some(r) => Some(r.resync(block)?),
            None => None,
        };
        self.finish(epochs, raw)
    }

    fn finish(&mut self, epochs: Vec<Epoch>, raw: Option<Vec<Epoch>>) -> Result<Vec<EpochFeatures>> {
        let origin = self.origin.unwrap_or(0);
        let step = self.epochizer.step() as u64;
        let raw_flags: Option<Vec<bool>> = raw.map(|r| r.into_iter().map(|e| self.pre.mask(e).artifact_flag).collect());
        epochs
            .into_iter()
            .enumerate()
            .map(|(k, e)| {
                let epoch_index = (e.start_sample_index - origin) / step;
                let e = match &raw_flags {
                    Some(flags) => {
                        let mut e = e;
                        e.artifact_flag |= flags[k];
                        e
                    }
                    None => self.pre.mask(e),
                };
                let features = assemble_features(&e, &self.spec, None).map_err(|err| Error::from(err).at_epoch(epoch_index))?;
                Ok(EpochFeatures {
                    epoch_index,
                    start_sample: e.start_sample_index,
                    end_sample: e.end_index(),
                    features,
                })
            })
            .collect()
    }
}

/// Per-epoch output of a live session; also the persisted row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch_index: u64,
    pub t_end_s: f64,
    pub confusion: f64,
    pub score: f64,
    pub label: DetectorLabel,
    pub mode: Mode,
    pub segment: usize,
    pub artifact: bool,
    pub action: Action,
    /// Raw feature values in the model's layout order.
    #[serde(default)]
    pub features: Vec<f64>,
}

/// Signal chain, classifier and session engine for one learner.
#[derive(Debug, Clone)]
pub struct LiveSession {
    pipeline: Pipeline,
    model: LdaModel,
    engine: SessionEngine,
}

impl LiveSession {
    pub fn new(config: &EngineConfig, model: LdaModel, lesson: Lesson, policy: Policy, run_mode: RunMode) -> Result<Self> {
        let pipeline = Pipeline::new(config)?;
        if model.layout != pipeline.layout() {
            return Err(Error::Config(format!(
                "model expects {} features, pipeline produces {}",
                model.layout.len(),
                pipeline.layout().len()
            )));
        }
        let engine = SessionEngine::new(lesson, policy, run_mode, config.epoch.step_s)?;
        Ok(Self { pipeline, model, engine })
    }

    pub fn engine(&self) -> &SessionEngine {
        &self.engine
    }

    pub fn model(&self) -> &LdaModel {
        &self.model
    }

    pub fn is_completed(&self) -> bool {
        self.engine.state().mode == Mode::Completed
    }

    pub fn push_block(&mut self, block: &SampleBlock) -> Result<Vec<EpochRecord>> {
        let feats = self.pipeline.push(block)?;
        self.consume(feats)
    }

    pub fn resync(&mut self, block: &SampleBlock) -> Result<Vec<EpochRecord>> {
        let feats = self.pipeline.resync(block)?;
        self.consume(feats)
    }

    pub fn command(&mut self, cmd: &SessionCommand) -> Result<Action> {
        Ok(self.engine.command(cmd)?)
    }

    fn consume(&mut self, feats: Vec<EpochFeatures>) -> Result<Vec<EpochRecord>> {
        let mut out = Vec::with_capacity(feats.len());
        for f in feats {
            if self.is_completed() {
                break;
            }
            let i = f.epoch_index;
            let score = lda_score(&self.model, &f.features).map_err(|e| Error::from(e).at_epoch(i))?;
            let det = DetectorState::from_score(score, self.engine.policy().theta_high, !f.features.artifact_flag)
                .map_err(|e| Error::from(e).at_epoch(i))?;
            let action = self.engine.step_at(i, &det);
            let st = self.engine.state();
            out.push(EpochRecord {
                epoch_index: i,
                t_end_s: f.end_sample as f64 / self.pipeline.fs(),
                confusion: det.confusion,
                score,
                label: det.label,
                mode: st.mode,
                segment: st.segment,
                artifact: f.features.artifact_flag,
                action,
                features: f.features.values,
            });
        }
        Ok(out)
    }
}

/// Alternating CLEAR/CONFUSED training blocks followed by a CLEAR baseline,
/// starting at `offset_s`.
pub fn calibration_timeline(cal: &CalibrationConfig) -> Result<Timeline> {
    let mut entries = Vec::with_capacity(cal.n_blocks + 2);
    if cal.offset_s > 0.0 {
        entries.push((0.0, MentalState::clear()));
    }
    for b in 0..cal.n_blocks {
        let label = if b % 2 == 0 { MentalLabel::Clear } else { MentalLabel::Confused };
        entries.push((cal.offset_s + b as f64 * cal.block_s, MentalState::new(label)));
    }
    entries.push((cal.offset_s + cal.n_blocks as f64 * cal.block_s, MentalState::clear()));
    Ok(Timeline::new(entries)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub model: LdaModel,
    pub calibration: Calibration,
    pub baseline: Vec<f64>,
    pub n_training: usize,
    pub n_skipped: usize,
}

/// Trains the classifier on a synthetic training recording, then sets the
/// thresholds from the confusion distribution of the CLEAR baseline.
pub fn calibrate(config: &EngineConfig) -> Result<CalibrationOutcome> {
    config.validate()?;
    let cal = &config.calibration;
    if !(cal.block_s > 0.0 && cal.baseline_s > 0.0 && cal.settle_s >= 0.0) || cal.n_blocks < 2 {
        return Err(Error::Config("calibration needs >= 2 blocks and positive durations".into()));
    }
    let timeline = calibration_timeline(cal)?;
    let gen_cfg = config.generator.clone();
    let fs = gen_cfg.fs;
    let start = (cal.offset_s * fs).round() as u64;
    let train_end = cal.offset_s + cal.n_blocks as f64 * cal.block_s;
    let end = ((train_end + cal.baseline_s) * fs).round() as u64;

    let mut pipeline = Pipeline::new(config)?;
    let chunk = (fs / 10.0).round().max(1.0) as usize;

    let boundaries: Vec<f64> = timeline.entries().iter().map(|e| e.0).collect();
    let mut train = Vec::new();
    let mut labels = Vec::new();
    let mut baseline_feats = Vec::new();
    let mut skipped = 0;
    let mut cursor = start;
    while cursor < end {
        let n = chunk.min((end - cursor) as usize);
        let block = generate_block(&gen_cfg, &timeline, cursor, n)?;
        cursor += n as u64;
        for ef in pipeline.push(&block)? {
            let t0 = ef.start_sample as f64 / fs;
            let t1 = ef.end_sample as f64 / fs;
            // The block the epoch starts in, and whether it is settled and unmixed.
            let k = boundaries.iter().rposition(|b| *b <= t0).unwrap_or(0);
            let next = boundaries.get(k + 1).copied().unwrap_or(f64::INFINITY);
            let settled = t0 >= boundaries[k] + cal.settle_s && t0 >= cal.offset_s + cal.settle_s;
            if !settled || t1 > next || ef.features.artifact_flag {
                skipped += 1;
                continue;
            }
            if t0 >= train_end {
                baseline_feats.push(ef.features);
            } else {
                labels.push(timeline.entries()[k].1.label == MentalLabel::Confused);
                train.push(ef.features);
            }
        }
    }

    let model = lda_train(&train, &labels, cal.ridge, ["CLEAR", "CONFUSED"])?;
    let baseline = baseline_feats
        .iter()
        .map(|f| {
            let s = lda_score(&model, f)?;
            crate::detect::confusion_index(s)
        })
        .collect::<std::result::Result<Vec<f64>, _>>()?;
    let calibration = calibrate_policy(&baseline, &config.policy)?;
    Ok(CalibrationOutcome {
        model,
        calibration,
        baseline,
        n_training: train.len(),
        n_skipped: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetLatency {
    pub onset_s: f64,
    /// `None` when no trigger fired during the CONFUSED interval.
    pub latency_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub latencies: Vec<OnsetLatency>,
    pub false_pauses: usize,
    pub pauses: usize,
    pub advisories_shown: usize,
    pub switches: usize,
    pub instructor_flags: usize,
    pub segments_completed: usize,
    pub lesson_completed: bool,
    pub epochs: u64,
    pub artifact_epochs: u64,
    pub simulated_s: f64,
    pub real_time_factor: f64,
}

impl SimulationReport {
    /// Equality of every field except the wall-clock real-time factor.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.real_time_factor = other.real_time_factor;
        &a == other
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub report: SimulationReport,
    pub rows: Vec<EpochRecord>,
    pub log: Vec<Transition>,
}

/// Closed-loop run against the synthetic learner.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    pub config: &'a EngineConfig,
    pub model: &'a LdaModel,
    pub policy: &'a Policy,
    pub lesson: &'a Lesson,
    pub timeline: &'a Timeline,
    pub seed: u64,
    /// Hard stop in simulated seconds; defaults to four lesson lengths.
    pub max_duration_s: Option<f64>,
    pub block_samples: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(
        config: &'a EngineConfig,
        model: &'a LdaModel,
        policy: &'a Policy,
        lesson: &'a Lesson,
        timeline: &'a Timeline,
        seed: u64,
    ) -> Self {
        Self {
            config,
            model,
            policy,
            lesson,
            timeline,
            seed,
            max_duration_s: None,
            block_samples: 25,
        }
    }

    pub fn run(&self) -> Result<SimulationOutcome> {
        let started = Instant::now();
        let cfg = self.config.with_seed(self.seed);
        cfg.validate()?;
        let fs = cfg.generator.fs;
        let mut live = LiveSession::new(
            &cfg,
            self.model.clone(),
            self.lesson.clone(),
            self.policy.clone(),
            cfg.run_mode.clone(),
        )?;
        let mut gen = Generator::new(cfg.generator.clone(), self.timeline.clone())?;
        let max_s = self.max_duration_s.unwrap_or(4.0 * self.lesson.total_duration_s());
        let max_samples = (max_s * fs).round() as u64;
        let block = self.block_samples.max(1) as u64;

        let mut rows = Vec::new();
        while !live.is_completed() && gen.cursor() < max_samples {
            let n = block.min(max_samples - gen.cursor()) as usize;
            rows.extend(live.push_block(&gen.next_block(n))?);
        }
        let simulated_s = gen.cursor() as f64 / fs;
        let wall = started.elapsed().as_secs_f64().max(1e-9);
        let log = live.engine().log().to_vec();
        let report = self.report(&cfg, &rows, &log, simulated_s, simulated_s / wall, live.is_completed());
        Ok(SimulationOutcome { report, rows, log })
    }

    fn report(
        &self,
        cfg: &EngineConfig,
        rows: &[EpochRecord],
        log: &[Transition],
        simulated_s: f64,
        rtf: f64,
        completed: bool,
    ) -> SimulationReport {
        let fs = cfg.generator.fs;
        let step = cfg.epoch.step_s;
        let window = cfg.epoch.window_s;
        let dwell = self.policy.dwell_epochs as f64;
        let end_time = |epoch: u64| (epoch as f64 * step * fs).round() / fs + window;
        let triggers: Vec<&Transition> = log
            .iter()
            .filter(|t| {
                t.confusion.is_some()
                    && matches!(
                        t.action,
                        ActionKind::ShowAdvisory | ActionKind::SwitchPresentation | ActionKind::FlagForInstructor
                    )
            })
            .collect();
        let confused = self.timeline.intervals(MentalLabel::Confused);

        let latencies = confused
            .iter()
            .filter(|(t0, _)| *t0 < simulated_s)
            .map(|&(t0, t1)| {
                let latency_s = triggers
                    .iter()
                    .map(|t| end_time(t.epoch_index))
                    .find(|&te| te > t0 && te - window < t1)
                    .map(|te| te - t0);
                OnsetLatency { onset_s: t0, latency_s }
            })
            .collect();

        // The span of signal the dwell run looked at.
        let false_pauses = triggers
            .iter()
            .filter(|t| {
                let te = end_time(t.epoch_index);
                let ts = te - window - (dwell - 1.0) * step;
                !confused.iter().any(|&(c0, c1)| ts < c1 && te > c0)
            })
            .count();

        let count = |k: ActionKind| log.iter().filter(|t| t.action == k).count();
        SimulationReport {
            seed: self.seed,
            latencies,
            false_pauses,
            pauses: log.iter().filter(|t| t.to_mode == Mode::PausedAdvisory && t.from_mode != Mode::PausedAdvisory).count(),
            advisories_shown: count(ActionKind::ShowAdvisory),
            switches: count(ActionKind::SwitchPresentation),
            instructor_flags: count(ActionKind::FlagForInstructor),
            segments_completed: count(ActionKind::NextSegment),
            lesson_completed: completed,
            epochs: rows.len() as u64,
            artifact_epochs: rows.iter().filter(|r| r.artifact).count() as u64,
            simulated_s,
            real_time_factor: rtf,
        }
    }
}
