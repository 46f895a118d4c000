//! Lesson state machine driven by the confusion index.
//!
//! A lesson is a list of timed segments. Sustained confusion above
//! `theta_high` pauses playback, rewinds the segment and shows the next
//! advisory; once advisories run out the alternate presentation is used, and
//! after that the instructor is flagged. Sustained confusion below
//! `theta_low` resumes playback.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::detect::{Debouncer, DetectorLabel, DetectorState};
use crate::synthgen::MentalLabel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("invalid lesson manifest: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("invalid run mode: {0}")]
    RunMode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration_s: f64,
    pub content_ref: String,
    #[serde(default)]
    pub advisories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternate_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesson {
    pub id: String,
    pub segments: Vec<Segment>,
    /// Optional catalogue of known content; when present every reference
    /// must resolve into it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resources: Option<Vec<String>>,
}

impl Lesson {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lesson serializes")
    }

    pub fn total_duration_s(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }
}

/// Parses and validates a lesson manifest, reporting every offending path.
pub fn load_lesson(manifest: &str) -> Result<Lesson, SessionError> {
    let doc: Value = serde_json::from_str(manifest)
        .map_err(|e| SessionError::Validation(vec![format!("$: {e}")]))?;
    validate_manifest(&doc)
}

pub fn validate_manifest(doc: &Value) -> Result<Lesson, SessionError> {
    let mut errs = Vec::new();
    let Some(obj) = doc.as_object() else {
        return Err(SessionError::Validation(vec!["$: expected an object".into()]));
    };

    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(_) => {
            errs.push("id: expected a non-empty string".into());
            String::new()
        }
        None => {
            errs.push("id: missing".into());
            String::new()
        }
    };

    let resources = match obj.get("resources") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => {
            let mut set = Vec::new();
            for (i, r) in items.iter().enumerate() {
                match r.as_str() {
                    Some(s) if !s.is_empty() => set.push(s.to_string()),
                    _ => errs.push(format!("resources[{i}]: expected a non-empty string")),
                }
            }
            Some(set)
        }
        Some(_) => {
            errs.push("resources: expected an array".into());
            None
        }
    };
    let known: Option<BTreeSet<&str>> =
        resources.as_ref().map(|r| r.iter().map(String::as_str).collect());

    let check_ref = |path: String, v: Option<&Value>, required: bool, errs: &mut Vec<String>| {
        match v {
            None | Some(Value::Null) if !required => None,
            None => {
                errs.push(format!("{path}: missing"));
                None
            }
            Some(Value::String(s)) if s.is_empty() => {
                errs.push(format!("{path}: dangling reference (empty)"));
                None
            }
            Some(Value::String(s)) => {
                if let Some(known) = &known {
                    if !known.contains(s.as_str()) {
                        errs.push(format!("{path}: dangling reference {s:?}"));
                    }
                }
                Some(s.clone())
            }
            Some(_) => {
                errs.push(format!("{path}: expected a string"));
                None
            }
        }
    };

    let mut segments = Vec::new();
    match obj.get("segments") {
        None => errs.push("segments: missing".into()),
        Some(Value::Array(items)) if items.is_empty() => {
            errs.push("segments: must contain at least one segment".into())
        }
        Some(Value::Array(items)) => {
            for (i, seg) in items.iter().enumerate() {
                let p = format!("segments[{i}]");
                let Some(seg) = seg.as_object() else {
                    errs.push(format!("{p}: expected an object"));
                    continue;
                };
                let duration_s = match seg.get("duration_s") {
                    None => {
                        errs.push(format!("{p}.duration_s: missing"));
                        None
                    }
                    Some(v) => match v.as_f64() {
                        Some(d) if d > 0.0 && d.is_finite() => Some(d),
                        Some(d) => {
                            errs.push(format!("{p}.duration_s: must be > 0, got {d}"));
                            None
                        }
                        None => {
                            errs.push(format!("{p}.duration_s: expected a number"));
                            None
                        }
                    },
                };
                let content_ref = check_ref(format!("{p}.content_ref"), seg.get("content_ref"), true, &mut errs);
                let mut advisories = Vec::new();
                match seg.get("advisories") {
                    None | Some(Value::Null) => {}
                    Some(Value::Array(advs)) => {
                        for (j, a) in advs.iter().enumerate() {
                            if let Some(a) = check_ref(format!("{p}.advisories[{j}]"), Some(a), true, &mut errs) {
                                advisories.push(a);
                            }
                        }
                    }
                    Some(_) => errs.push(format!("{p}.advisories: expected an array")),
                }
                let alternate_ref = check_ref(format!("{p}.alternate_ref"), seg.get("alternate_ref"), false, &mut errs);
                if let (Some(duration_s), Some(content_ref)) = (duration_s, content_ref) {
                    segments.push(Segment {
                        duration_s,
                        content_ref,
                        advisories,
                        alternate_ref,
                    });
                }
            }
        }
        Some(_) => errs.push("segments: expected an array".into()),
    }

    if errs.is_empty() {
        Ok(Lesson { id, segments, resources })
    } else {
        Err(SessionError::Validation(errs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Policy {
    pub theta_high: f64,
    pub theta_low: f64,
    pub dwell_epochs: u32,
    pub refractory_epochs: u32,
    pub max_advisories_per_segment: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_ref: Option<String>,
}

impl Default for Policy {
    fn default() -> Self {
        Self {
            theta_high: 0.8,
            theta_low: 0.6,
            dwell_epochs: 4,
            refractory_epochs: 4,
            max_advisories_per_segment: 3,
            model_ref: None,
        }
    }
}

impl Policy {
    pub fn validate(&self) -> Result<(), SessionError> {
        let (lo, hi) = (self.theta_low, self.theta_high);
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(SessionError::Policy(format!(
                "need 0 <= theta_low < theta_high <= 1, got theta_low={lo}, theta_high={hi}"
            )));
        }
        if self.dwell_epochs == 0 {
            return Err(SessionError::Policy("dwell_epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn apply(&self, patch: &PolicyPatch) -> Result<Policy, SessionError> {
        let mut p = self.clone();
        if let Some(v) = patch.theta_high {
            p.theta_high = v;
        }
        if let Some(v) = patch.theta_low {
            p.theta_low = v;
        }
        if let Some(v) = patch.dwell_epochs {
            p.dwell_epochs = v;
        }
        if let Some(v) = patch.refractory_epochs {
            p.refractory_epochs = v;
        }
        if let Some(v) = patch.max_advisories_per_segment {
            p.max_advisories_per_segment = v;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_high: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell_epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refractory_epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_advisories_per_segment: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub policy: Policy,
    pub degenerate: bool,
    pub n_baseline: usize,
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value.
pub fn nearest_rank(sorted: &[f64], percent: u32) -> Option<f64> {
    if sorted.is_empty() || percent == 0 || percent > 100 {
        return None;
    }
    let n = sorted.len() as u64;
    let rank = (percent as u64 * n).div_ceil(100).max(1);
    Some(sorted[(rank - 1) as usize])
}

/// `theta_high` = nearest-rank 90th percentile of the baseline confusion,
/// `theta_low` = 0.75 · `theta_high`.
pub fn calibrate_policy(baseline: &[f64], defaults: &Policy) -> Result<Calibration, SessionError> {
    if let Some(bad) = baseline.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(SessionError::Calibration(format!(
            "baseline values must lie in [0, 1], found {bad}"
        )));
    }
    if baseline.is_empty() {
        return Ok(Calibration {
            policy: defaults.clone(),
            degenerate: true,
            n_baseline: 0,
        });
    }
    let mut sorted = baseline.to_vec();
    sorted.sort_by(f64::total_cmp);
    let degenerate = sorted[0] == sorted[sorted.len() - 1];
    let theta_high = nearest_rank(&sorted, 90).expect("non-empty");
    let mut policy = Policy {
        theta_high,
        theta_low: 0.75 * theta_high,
        ..defaults.clone()
    };
    if policy.validate().is_err() {
        // An all-zero baseline cannot form a hysteresis pair.
        policy = defaults.clone();
    }
    Ok(Calibration {
        policy,
        degenerate,
        n_baseline: baseline.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueWindow {
    pub start_epoch: u64,
    /// Exclusive.
    pub end_epoch: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunMode {
    #[default]
    SelfPaced,
    Synchronous { cues: Vec<CueWindow> },
}

impl RunMode {
    pub fn validate(&self) -> Result<(), SessionError> {
        if let RunMode::Synchronous { cues } = self {
            for (i, c) in cues.iter().enumerate() {
                if c.end_epoch <= c.start_epoch {
                    return Err(SessionError::RunMode(format!("cue window {i} is empty")));
                }
            }
        }
        Ok(())
    }

    /// Whether detector input counts at `epoch_index`.
    pub fn evaluates(&self, epoch_index: u64) -> bool {
        match self {
            RunMode::SelfPaced => true,
            RunMode::Synchronous { cues } => cues
                .iter()
                .any(|c| c.start_epoch <= epoch_index && epoch_index < c.end_epoch),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Playing,
    PausedAdvisory,
    Switched,
    Completed,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Playing => "PLAYING",
            Mode::PausedAdvisory => "PAUSED_ADVISORY",
            Mode::Switched => "SWITCHED",
            Mode::Completed => "COMPLETED",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Action {
    None,
    /// `advisory` is the 1-based position within the segment.
    ShowAdvisory { advisory: usize, content_ref: String },
    Resume,
    SwitchPresentation { content_ref: String },
    FlagForInstructor,
    /// `segment` is `None` once the lesson is complete.
    NextSegment { segment: Option<usize> },
    /// Operator-initiated pause.
    Pause,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::None => ActionKind::None,
            Action::ShowAdvisory { .. } => ActionKind::ShowAdvisory,
            Action::Resume => ActionKind::Resume,
            Action::SwitchPresentation { .. } => ActionKind::SwitchPresentation,
            Action::FlagForInstructor => ActionKind::FlagForInstructor,
            Action::NextSegment { .. } => ActionKind::NextSegment,
            Action::Pause => ActionKind::Pause,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionKind {
    None,
    ShowAdvisory,
    Resume,
    SwitchPresentation,
    FlagForInstructor,
    NextSegment,
    Pause,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub epoch_index: u64,
    pub from_mode: Mode,
    pub to_mode: Mode,
    pub action: ActionKind,
    /// Triggering confusion; `None` for operator commands.
    pub confusion: Option<f64>,
    pub segment: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advisory: Option<usize>,
}

impl Transition {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("transition serializes")
    }
}

pub fn transitions_to_jsonl(log: &[Transition]) -> String {
    log.iter().map(|t| t.to_json_line() + "\n").collect()
}

/// Operator commands accepted by a live session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum SessionCommand {
    Pause,
    Resume,
    SetPolicy(PolicyPatch),
    /// Overrides the simulated learner state; ignored by the state machine.
    InjectState { label: MentalLabel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub mode: Mode,
    pub segment: usize,
    /// Advisories shown in the current segment.
    pub advisories_used: usize,
    /// Whether the alternate presentation was used in the current segment.
    pub switched: bool,
    /// Playback epochs elapsed in the current segment since the last rewind.
    pub segment_epochs: u64,
    pub elapsed_epochs_in_mode: u64,
    /// Index of the next epoch to be processed.
    pub epoch_index: u64,
    pub step_s: f64,
    pub last_confusion: Option<f64>,
    pub log: Vec<Transition>,
    pause_deb: Debouncer,
    resume_deb: Debouncer,
}

impl SessionState {
    pub fn new(policy: &Policy, step_s: f64) -> Result<Self, SessionError> {
        policy.validate()?;
        if !(step_s > 0.0 && step_s.is_finite()) {
            return Err(SessionError::Policy(format!("epoch step must be > 0 s, got {step_s}")));
        }
        Ok(Self {
            mode: Mode::Playing,
            segment: 0,
            advisories_used: 0,
            switched: false,
            segment_epochs: 0,
            elapsed_epochs_in_mode: 0,
            epoch_index: 0,
            step_s,
            last_confusion: None,
            log: Vec::new(),
            pause_deb: debouncer(policy.dwell_epochs, policy.refractory_epochs),
            resume_deb: debouncer(policy.dwell_epochs, 0),
        })
    }

    pub fn position_s(&self) -> f64 {
        self.segment_epochs as f64 * self.step_s
    }

    fn sync_policy(&mut self, policy: &Policy) {
        if self.pause_deb.dwell() != policy.dwell_epochs
            || self.pause_deb.refractory() != policy.refractory_epochs
        {
            self.pause_deb = debouncer(policy.dwell_epochs, policy.refractory_epochs);
        }
        if self.resume_deb.dwell() != policy.dwell_epochs {
            self.resume_deb = debouncer(policy.dwell_epochs, 0);
        }
    }

    fn record(&mut self, from: Mode, action: &Action, confusion: Option<f64>) {
        let advisory = match action {
            Action::ShowAdvisory { advisory, .. } => Some(*advisory),
            _ => None,
        };
        self.log.push(Transition {
            epoch_index: self.epoch_index,
            from_mode: from,
            to_mode: self.mode,
            action: action.kind(),
            confusion,
            segment: self.segment,
            advisory,
        });
    }

    fn set_mode(&mut self, mode: Mode) {
        if mode != self.mode {
            self.mode = mode;
            self.elapsed_epochs_in_mode = 0;
        }
    }

    /// Remediation after a sustained-confusion trigger.
    fn remediate(&mut self, lesson: &Lesson, policy: &Policy) -> Action {
        let seg = &lesson.segments[self.segment];
        let k = seg.advisories.len().min(policy.max_advisories_per_segment);
        if self.advisories_used < k {
            let content_ref = seg.advisories[self.advisories_used].clone();
            self.advisories_used += 1;
            self.segment_epochs = 0;
            self.set_mode(Mode::PausedAdvisory);
            self.resume_deb.reset_run();
            return Action::ShowAdvisory {
                advisory: self.advisories_used,
                content_ref,
            };
        }
        match &seg.alternate_ref {
            Some(alt) if !self.switched => {
                self.switched = true;
                self.segment_epochs = 0;
                self.set_mode(Mode::Switched);
                Action::SwitchPresentation {
                    content_ref: alt.clone(),
                }
            }
            _ => {
                if self.mode == Mode::PausedAdvisory {
                    self.set_mode(if self.switched { Mode::Switched } else { Mode::Playing });
                }
                Action::FlagForInstructor
            }
        }
    }

    /// Advances the state machine by one epoch.
    pub fn step(
        &mut self,
        lesson: &Lesson,
        policy: &Policy,
        detector: &DetectorState,
        run_mode: &RunMode,
    ) -> Action {
        if self.mode == Mode::Completed {
            return Action::None;
        }
        self.sync_policy(policy);
        let confusion = detector.confusion;
        let label = |cond: bool| {
            if cond {
                DetectorLabel::Command
            } else {
                DetectorLabel::NonControl
            }
        };
        // Unreliable epochs neither extend nor break a run; epochs outside
        // cue windows break it.
        let (high, low) = if !detector.reliable {
            (false, false)
        } else {
            let cued = run_mode.evaluates(self.epoch_index);
            (
                self.pause_deb.push(label(cued && confusion > policy.theta_high)),
                self.resume_deb.push(label(cued && confusion < policy.theta_low)),
            )
        };

        let from = self.mode;
        let action = match self.mode {
            Mode::Playing | Mode::Switched if high => self.remediate(lesson, policy),
            Mode::Playing | Mode::Switched => {
                self.segment_epochs += 1;
                let seg = &lesson.segments[self.segment];
                if self.position_s() >= seg.duration_s - 1e-9 {
                    self.segment += 1;
                    self.advisories_used = 0;
                    self.switched = false;
                    self.segment_epochs = 0;
                    if self.segment >= lesson.segments.len() {
                        self.set_mode(Mode::Completed);
                        Action::NextSegment { segment: None }
                    } else {
                        self.set_mode(Mode::Playing);
                        Action::NextSegment {
                            segment: Some(self.segment),
                        }
                    }
                } else {
                    Action::None
                }
            }
            Mode::PausedAdvisory if high => self.remediate(lesson, policy),
            Mode::PausedAdvisory if low => {
                self.set_mode(if self.switched { Mode::Switched } else { Mode::Playing });
                self.pause_deb.reset_run();
                Action::Resume
            }
            Mode::PausedAdvisory | Mode::Completed => Action::None,
        };
        if action != Action::None {
            self.record(from, &action, Some(confusion));
        }
        if self.mode == from {
            self.elapsed_epochs_in_mode += 1;
        }
        self.last_confusion = Some(confusion);
        self.epoch_index += 1;
        action
    }

    /// Applies an operator command between epochs. Policy changes are
    /// handled by the owner of the policy.
    pub fn command(&mut self, cmd: &SessionCommand) -> Action {
        let from = self.mode;
        let action = match (cmd, self.mode) {
            (SessionCommand::Pause, Mode::Playing | Mode::Switched) => {
                self.set_mode(Mode::PausedAdvisory);
                self.resume_deb.reset_run();
                Action::Pause
            }
            (SessionCommand::Resume, Mode::PausedAdvisory) => {
                self.set_mode(if self.switched { Mode::Switched } else { Mode::Playing });
                self.pause_deb.reset_run();
                Action::Resume
            }
            _ => Action::None,
        };
        if action != Action::None {
            self.record(from, &action, None);
        }
        action
    }
}

fn debouncer(dwell: u32, refractory: u32) -> Debouncer {
    Debouncer::new(dwell.max(1), refractory).expect("dwell >= 1")
}

/// Functional form of [`SessionState::step`].
pub fn session_step(
    state: &SessionState,
    lesson: &Lesson,
    policy: &Policy,
    detector: &DetectorState,
    run_mode: &RunMode,
) -> (SessionState, Action) {
    let mut next = state.clone();
    let action = next.step(lesson, policy, detector, run_mode);
    (next, action)
}

/// A live session: lesson, policy and run mode around a [`SessionState`].
#[derive(Debug, Clone)]
pub struct SessionEngine {
    lesson: Lesson,
    policy: Policy,
    run_mode: RunMode,
    state: SessionState,
}

impl SessionEngine {
    pub fn new(lesson: Lesson, policy: Policy, run_mode: RunMode, step_s: f64) -> Result<Self, SessionError> {
        run_mode.validate()?;
        let state = SessionState::new(&policy, step_s)?;
        Ok(Self {
            lesson,
            policy,
            run_mode,
            state,
        })
    }

    pub fn lesson(&self) -> &Lesson {
        &self.lesson
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn run_mode(&self) -> &RunMode {
        &self.run_mode
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn log(&self) -> &[Transition] {
        &self.state.log
    }

    pub fn step(&mut self, detector: &DetectorState) -> Action {
        self.state.step(&self.lesson, &self.policy, detector, &self.run_mode)
    }

    /// Steps with an explicit epoch index, which may skip ahead after a gap.
    pub fn step_at(&mut self, epoch_index: u64, detector: &DetectorState) -> Action {
        self.state.epoch_index = self.state.epoch_index.max(epoch_index);
        self.step(detector)
    }

    /// Applies an operator command. `InjectState` is accepted but has no
    /// effect here; the signal source acts on it.
    pub fn command(&mut self, cmd: &SessionCommand) -> Result<Action, SessionError> {
        match cmd {
            SessionCommand::SetPolicy(patch) => {
                self.policy = self.policy.apply(patch)?;
                Ok(Action::None)
            }
            SessionCommand::InjectState { .. } => Ok(Action::None),
            other => Ok(self.state.command(other)),
        }
    }
}

/// One persisted epoch as needed for replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayInput {
    pub epoch_index: u64,
    pub confusion: f64,
    pub reliable: bool,
}

/// Re-runs the state machine over stored confusion values and operator
/// commands (`(before_epoch, command)`), returning the transition log.
pub fn replay(
    lesson: &Lesson,
    policy: &Policy,
    run_mode: &RunMode,
    step_s: f64,
    rows: &[ReplayInput],
    commands: &[(u64, SessionCommand)],
) -> Result<Vec<Transition>, SessionError> {
    let mut engine = SessionEngine::new(lesson.clone(), policy.clone(), run_mode.clone(), step_s)?;
    let mut cmds = commands.iter().peekable();
    for row in rows {
        while let Some((_, cmd)) = cmds.next_if(|(before, _)| *before <= row.epoch_index) {
            engine.command(cmd)?;
        }
        if engine.state.mode == Mode::Completed {
            break;
        }
        let det = DetectorState::from_confusion(row.confusion, engine.policy.theta_high, row.reliable)
            .map_err(|e| SessionError::Calibration(e.to_string()))?;
        engine.step_at(row.epoch_index, &det);
    }
    for (_, cmd) in cmds {
        engine.command(cmd)?;
    }
    Ok(engine.state.log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lesson(segs: &[(f64, usize, bool)]) -> Lesson {
        Lesson {
            id: "l".into(),
            resources: None,
            segments: segs
                .iter()
                .enumerate()
                .map(|(i, &(d, k, alt))| Segment {
                    duration_s: d,
                    content_ref: format!("seg{i}"),
                    advisories: (0..k).map(|j| format!("seg{i}/adv{j}")).collect(),
                    alternate_ref: alt.then(|| format!("seg{i}/alt")),
                })
                .collect(),
        }
    }

    fn det(c: f64) -> DetectorState {
        DetectorState::from_confusion(c, 0.8, true).unwrap()
    }

    fn run(engine: &mut SessionEngine, confusion: &[f64]) -> Vec<Action> {
        confusion.iter().map(|c| engine.step(&det(*c))).collect()
    }

    #[test]
    fn minimal_manifest() {
        let l = load_lesson(r#"{"id":"a","segments":[{"duration_s":10,"content_ref":"v1"}]}"#).unwrap();
        assert_eq!(l.segments.len(), 1);
        assert!(l.segments[0].advisories.is_empty());
    }

    #[test]
    fn manifest_errors_list_paths() {
        let err = load_lesson(
            r#"{"id":"a","segments":[{"duration_s":-5,"content_ref":"v"},{"content_ref":"w","advisories":[""]}]}"#,
        )
        .unwrap_err();
        let SessionError::Validation(paths) = err else { panic!() };
        assert!(paths.iter().any(|p| p.starts_with("segments[0].duration_s")));
        assert!(paths.iter().any(|p| p == "segments[1].duration_s: missing"));
        assert!(paths.iter().any(|p| p.starts_with("segments[1].advisories[0]")));
        assert!(load_lesson(r#"{"id":"a","segments":[]}"#).is_err());
    }

    #[test]
    fn dangling_reference_against_catalogue() {
        let err = load_lesson(
            r#"{"id":"a","resources":["v1"],"segments":[{"duration_s":5,"content_ref":"v1","alternate_ref":"v9"}]}"#,
        )
        .unwrap_err();
        assert_eq!(
            err,
            SessionError::Validation(vec![r#"segments[0].alternate_ref: dangling reference "v9""#.into()])
        );
    }

    #[test]
    fn advisories_preserved_in_order() {
        let l = lesson(&[(5.0, 2, false), (5.0, 0, false), (5.0, 1, true)]);
        let back = load_lesson(&l.to_json()).unwrap();
        assert_eq!(back, l);
        let counts: Vec<_> = back.segments.iter().map(|s| s.advisories.len()).collect();
        assert_eq!(counts, [2, 0, 1]);
    }

    #[test]
    fn calibration_examples() {
        let base: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let c = calibrate_policy(&base, &Policy::default()).unwrap();
        assert_eq!(c.policy.theta_high, 0.9);
        assert_eq!(c.policy.theta_low, 0.75 * 0.9);
        assert!(!c.degenerate);

        let c = calibrate_policy(&[], &Policy::default()).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.policy.theta_high, 0.8);

        let c = calibrate_policy(&[0.4; 7], &Policy::default()).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.policy.theta_high, 0.4);

        assert!(calibrate_policy(&[0.5, 1.5], &Policy::default()).is_err());
    }

    #[test]
    fn policy_validation() {
        let p = Policy {
            theta_low: 0.9,
            ..Policy::default()
        };
        assert!(p.validate().is_err());
        let patch = PolicyPatch {
            theta_high: Some(0.85),
            ..Default::default()
        };
        assert_eq!(Policy::default().apply(&patch).unwrap().theta_high, 0.85);
    }

    #[test]
    fn quiet_learner_only_advances_segments() {
        let mut e = SessionEngine::new(lesson(&[(2.0, 1, false), (2.0, 1, false)]), Policy::default(), RunMode::SelfPaced, 0.5).unwrap();
        run(&mut e, &[0.1; 10]);
        let kinds: Vec<_> = e.log().iter().map(|t| (t.action, t.to_mode)).collect();
        assert_eq!(
            kinds,
            [(ActionKind::NextSegment, Mode::Playing), (ActionKind::NextSegment, Mode::Completed)]
        );
        assert_eq!(e.log()[0].epoch_index, 3);
        assert_eq!(e.log()[1].epoch_index, 7);
    }

    #[test]
    fn sustained_confusion_pauses_after_dwell() {
        let mut e = SessionEngine::new(lesson(&[(60.0, 2, false)]), Policy::default(), RunMode::SelfPaced, 0.5).unwrap();
        let mut c = vec![0.1; 10];
        c.extend([0.95; 10]);
        run(&mut e, &c);
        let t = &e.log()[0];
        assert_eq!(t.epoch_index, 10 + 3);
        assert_eq!(t.to_mode, Mode::PausedAdvisory);
        assert_eq!(t.advisory, Some(1));
        assert_eq!(e.state().segment_epochs, 0);
    }

    #[test]
    fn exhausted_advisories_switch_then_flag() {
        let policy = Policy {
            refractory_epochs: 0,
            ..Policy::default()
        };
        let mut e = SessionEngine::new(lesson(&[(600.0, 1, true)]), policy, RunMode::SelfPaced, 0.5).unwrap();
        run(&mut e, &[0.95; 12]);
        let kinds: Vec<_> = e.log().iter().map(|t| (t.action, t.to_mode)).collect();
        assert_eq!(
            kinds,
            [
                (ActionKind::ShowAdvisory, Mode::PausedAdvisory),
                (ActionKind::SwitchPresentation, Mode::Switched),
                (ActionKind::FlagForInstructor, Mode::Switched),
            ]
        );
    }

    #[test]
    fn flag_without_alternate_continues_playing() {
        let policy = Policy {
            refractory_epochs: 0,
            ..Policy::default()
        };
        let mut e = SessionEngine::new(lesson(&[(600.0, 1, false)]), policy, RunMode::SelfPaced, 0.5).unwrap();
        run(&mut e, &[0.95; 8]);
        assert_eq!(e.log()[1].action, ActionKind::FlagForInstructor);
        assert_eq!(e.log()[1].to_mode, Mode::Playing);
    }

    #[test]
    fn resume_after_low_confusion() {
        let mut e = SessionEngine::new(lesson(&[(600.0, 2, false)]), Policy::default(), RunMode::SelfPaced, 0.5).unwrap();
        let mut c = vec![0.95; 4];
        c.extend([0.3; 4]);
        run(&mut e, &c);
        assert_eq!(e.log()[1].action, ActionKind::Resume);
        assert_eq!(e.log()[1].epoch_index, 7);
    }

    #[test]
    fn unreliable_epochs_do_not_trigger() {
        let mut e = SessionEngine::new(lesson(&[(600.0, 2, false)]), Policy::default(), RunMode::SelfPaced, 0.5).unwrap();
        for _ in 0..10 {
            e.step(&DetectorState::from_confusion(0.99, 0.8, false).unwrap());
        }
        assert!(e.log().is_empty());
    }

    #[test]
    fn synchronous_mode_ignores_input_outside_cues() {
        let rm = RunMode::Synchronous {
            cues: vec![CueWindow { start_epoch: 20, end_epoch: 30 }],
        };
        let mut e = SessionEngine::new(lesson(&[(600.0, 2, false)]), Policy::default(), rm, 0.5).unwrap();
        run(&mut e, &[0.95; 40]);
        assert!(e.log().iter().all(|t| (20..30).contains(&t.epoch_index)));
        assert_eq!(e.log()[0].epoch_index, 23);
    }

    #[test]
    fn operator_commands_are_logged() {
        let mut e = SessionEngine::new(lesson(&[(600.0, 2, false)]), Policy::default(), RunMode::SelfPaced, 0.5).unwrap();
        run(&mut e, &[0.1; 3]);
        assert_eq!(e.command(&SessionCommand::Pause).unwrap(), Action::Pause);
        assert_eq!(e.command(&SessionCommand::Pause).unwrap(), Action::None);
        assert_eq!(e.command(&SessionCommand::Resume).unwrap(), Action::Resume);
        assert_eq!(e.log().len(), 2);
        assert_eq!(e.log()[0].confusion, None);
        let bad = SessionCommand::SetPolicy(PolicyPatch {
            theta_low: Some(0.9),
            ..Default::default()
        });
        assert!(e.command(&bad).is_err());
    }

    #[test]
    fn command_json_shape() {
        let c: SessionCommand = serde_json::from_str(r#"{"command":"inject_state","label":"CONFUSED"}"#).unwrap();
        assert_eq!(c, SessionCommand::InjectState { label: MentalLabel::Confused });
        let c: SessionCommand = serde_json::from_str(r#"{"command":"set_policy","theta_high":0.85}"#).unwrap();
        assert!(matches!(c, SessionCommand::SetPolicy(p) if p.theta_high == Some(0.85)));
    }

    #[test]
    fn transition_line_format() {
        let t = Transition {
            epoch_index: 7,
            from_mode: Mode::Playing,
            to_mode: Mode::PausedAdvisory,
            action: ActionKind::ShowAdvisory,
            confusion: Some(0.93),
            segment: 0,
            advisory: Some(1),
        };
        assert_eq!(
            t.to_json_line(),
            r#"{"epoch_index":7,"from_mode":"PLAYING","to_mode":"PAUSED_ADVISORY","action":"ShowAdvisory","confusion":0.93,"segment":0,"advisory":1}"#
        );
    }
}
