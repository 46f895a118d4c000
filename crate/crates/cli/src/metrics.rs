//! Per-session summary computed from the persisted rows and event log.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use eduloop_core::session::{ActionKind, Mode};
use eduloop_net::store::{Store, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionMetrics {
    pub session: String,
    pub user: String,
    pub lesson_id: String,
    pub epochs: usize,
    pub artifact_epochs: usize,
    pub mean_confusion: Option<f64>,
    pub max_confusion: Option<f64>,
    /// Seconds spent in each mode, one step per epoch.
    pub time_in_mode_s: BTreeMap<String, f64>,
    pub pauses: usize,
    pub advisories_shown: usize,
    pub switches: usize,
    pub instructor_flags: usize,
    pub segments_completed: usize,
    pub operator_commands: usize,
    pub completed: bool,
}

pub fn summarize(store: &Store, id: &str) -> Result<SessionMetrics, StoreError> {
    let meta = store.session_meta(id)?;
    let rows = store.rows(id)?;
    let log = store.transitions(id)?;
    let commands = store.commands(id)?;

    let reliable: Vec<f64> = rows.iter().filter(|r| !r.artifact).map(|r| r.confusion).collect();
    let mean_confusion = (!reliable.is_empty()).then(|| reliable.iter().sum::<f64>() / reliable.len() as f64);
    let max_confusion = reliable.iter().copied().reduce(f64::max);
    let mut time_in_mode_s = BTreeMap::new();
    for r in &rows {
        *time_in_mode_s.entry(r.mode.to_string()).or_insert(0.0) += meta.step_s;
    }
    let count = |k: ActionKind| log.iter().filter(|t| t.action == k).count();
    Ok(SessionMetrics {
        session: meta.id,
        user: meta.user,
        lesson_id: meta.lesson_id,
        epochs: rows.len(),
        artifact_epochs: rows.iter().filter(|r| r.artifact).count(),
        mean_confusion,
        max_confusion,
        time_in_mode_s,
        pauses: log
            .iter()
            .filter(|t| t.to_mode == Mode::PausedAdvisory && t.from_mode != Mode::PausedAdvisory)
            .count(),
        advisories_shown: count(ActionKind::ShowAdvisory),
        switches: count(ActionKind::SwitchPresentation),
        instructor_flags: count(ActionKind::FlagForInstructor),
        segments_completed: count(ActionKind::NextSegment),
        operator_commands: commands.len(),
        completed: log.last().is_some_and(|t| t.to_mode == Mode::Completed),
    })
}

impl fmt::Display for SessionMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "session {} ({}, lesson {})", self.session, self.user, self.lesson_id)?;
        writeln!(f, "epochs {} ({} with artifacts)", self.epochs, self.artifact_epochs)?;
        if let (Some(mean), Some(max)) = (self.mean_confusion, self.max_confusion) {
            writeln!(f, "confusion mean {mean:.3} max {max:.3}")?;
        }
        for (mode, s) in &self.time_in_mode_s {
            writeln!(f, "  {mode:<16} {s:>8.1} s")?;
        }
        writeln!(
            f,
            "pauses {}  advisories {}  switches {}  instructor flags {}  commands {}",
            self.pauses, self.advisories_shown, self.switches, self.instructor_flags, self.operator_commands
        )?;
        writeln!(f, "segments completed {}  completed {}", self.segments_completed, self.completed)
    }
}
