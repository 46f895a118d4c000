//! Live sessions. Each one is owned by a worker thread that runs the signal
//! chain and the state machine; HTTP handlers and stream connections reach
//! it through an inbox and observe it through a broadcast of events.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{broadcast, oneshot};

use eduloop_core::detect::DetectorLabel;
use eduloop_core::features::FeatureKind;
use eduloop_core::pipeline::{calibrate, CalibrationOutcome, EngineConfig, EpochRecord, LiveSession, Pipeline};
use eduloop_core::session::{
    Action, ActionKind, Mode, Policy, PolicyPatch, RunMode, SessionCommand, SessionError, Transition,
};
use eduloop_core::sigcore::SampleBlock;
use eduloop_core::synthgen::{Generator, MentalLabel, MentalState, Timeline};

use crate::frame::FrameError;
use crate::store::{CommandRecord, SessionMeta, Store, StoreError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Engine(#[from] eduloop_core::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("session {0} is not live")]
    NotLive(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("session worker for {0} has stopped")]
    WorkerGone(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<SessionError> for NetError {
    fn from(e: SessionError) -> Self {
        NetError::Engine(e.into())
    }
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub engine: EngineConfig,
    /// SAMPLES blocks a session may have queued before the oldest are dropped.
    pub sample_buffer_frames: usize,
    /// Events a slow subscriber may lag before it sees a gap.
    pub event_buffer: usize,
    /// Block size of simulated sources.
    pub sim_block_samples: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            sample_buffer_frames: 64,
            event_buffer: 1024,
            sim_block_samples: 25,
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Where a session's EEG comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    /// The synthetic learner, paced at `speed` times real time.
    Simulated {
        #[serde(default)]
        timeline: Option<Timeline>,
        #[serde(default = "one")]
        speed: f64,
    },
    /// SAMPLES frames from a stream-plane client.
    Stream,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec::Simulated {
            timeline: None,
            speed: 1.0,
        }
    }
}

impl SourceSpec {
    fn name(&self) -> &'static str {
        match self {
            SourceSpec::Simulated { .. } => "simulated",
            SourceSpec::Stream => "stream",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSession {
    pub user: String,
    pub lesson_id: String,
    #[serde(default)]
    pub run_mode: Option<RunMode>,
    #[serde(default)]
    pub source: SourceSpec,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Applied on top of the calibrated policy.
    #[serde(default)]
    pub policy: Option<PolicyPatch>,
}

/// One epoch as pushed to subscribers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEvent {
    pub session_id: String,
    pub epoch_index: u64,
    pub t_end_s: f64,
    pub confusion: f64,
    pub score: f64,
    pub label: DetectorLabel,
    pub mode: Mode,
    pub segment: usize,
    pub artifact: bool,
    pub action: Action,
    pub theta_high: f64,
    pub theta_low: f64,
    pub dwell_epochs: u32,
    /// Band power averaged over channels.
    pub band_power: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learner_state: Option<MentalLabel>,
    #[serde(skip)]
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    State(StateEvent),
    Transition(Transition),
    Command { command: SessionCommand, action: ActionKind },
    Gap { dropped: u64 },
    Error { message: String },
    End { mode: Mode },
}

/// What `GET /sessions/{id}` returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub user: String,
    pub lesson_id: String,
    pub source: String,
    pub seed: u64,
    pub live: bool,
    pub policy: Policy,
    pub run_mode: RunMode,
    pub mode: Mode,
    pub segment: usize,
    pub advisories_used: usize,
    pub switched: bool,
    /// Next epoch to be processed.
    pub epoch_index: u64,
    pub position_s: f64,
    pub last_confusion: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learner_state: Option<MentalLabel>,
    pub transitions: usize,
    pub feature_layout: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandOutcome {
    pub action: Action,
    pub policy: Policy,
    pub mode: Mode,
}

type Reply = oneshot::Sender<Result<CommandOutcome, NetError>>;

#[derive(Default)]
struct InboxState {
    samples: VecDeque<SampleBlock>,
    /// The next queued block does not follow the last consumed one.
    resync_next: bool,
    commands: VecDeque<(SessionCommand, Reply)>,
    closed: bool,
}

struct Work {
    commands: Vec<(SessionCommand, Reply)>,
    block: Option<(SampleBlock, bool)>,
    closed: bool,
}

/// Bounded queue between producers and a session worker. SAMPLES beyond
/// the capacity push out the oldest queued block.
struct Inbox {
    state: Mutex<InboxState>,
    cv: Condvar,
    capacity: usize,
}

impl Inbox {
    fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new(InboxState::default()),
            cv: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    /// Returns how many queued blocks were dropped to make room.
    fn push_samples(&self, block: SampleBlock) -> usize {
        let mut st = self.state.lock().unwrap();
        st.samples.push_back(block);
        let mut dropped = 0;
        while st.samples.len() > self.capacity {
            st.samples.pop_front();
            st.resync_next = true;
            dropped += 1;
        }
        self.cv.notify_one();
        dropped
    }

    fn push_command(&self, cmd: SessionCommand, reply: Reply) -> bool {
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return false;
        }
        st.commands.push_back((cmd, reply));
        self.cv.notify_one();
        true
    }

    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.cv.notify_all();
    }

    /// Waits until there is something to do or `deadline` passes. With
    /// `want_samples` false, queued samples are left alone.
    fn wait(&self, deadline: Option<Instant>, want_samples: bool) -> Work {
        let mut st = self.state.lock().unwrap();
        loop {
            let ready = !st.commands.is_empty() || st.closed || (want_samples && !st.samples.is_empty());
            if ready {
                break;
            }
            match deadline {
                None => st = self.cv.wait(st).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        break;
                    }
                    st = self.cv.wait_timeout(st, d - now).unwrap().0;
                }
            }
        }
        let commands = st.commands.drain(..).collect();
        let block = if want_samples {
            st.samples.pop_front().map(|b| {
                let resync = std::mem::take(&mut st.resync_next);
                (b, resync)
            })
        } else {
            None
        };
        Work {
            commands,
            block,
            closed: st.closed,
        }
    }
}

/// A live session as seen from outside its worker.
pub struct SessionHandle {
    pub meta: SessionMeta,
    inbox: Arc<Inbox>,
    events: broadcast::Sender<StreamEvent>,
    view: Arc<RwLock<SessionView>>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl SessionHandle {
    pub fn view(&self) -> SessionView {
        self.view.read().unwrap().clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<StreamEvent> {
        self.events.subscribe()
    }

    pub fn is_stream_source(&self) -> bool {
        self.meta.source == "stream"
    }

    /// Queues a block from a stream client; returns the number of older
    /// blocks dropped for lack of room.
    pub fn push_samples(&self, block: SampleBlock) -> usize {
        let dropped = self.inbox.push_samples(block);
        if dropped > 0 {
            let _ = self.events.send(StreamEvent::Gap { dropped: dropped as u64 });
        }
        dropped
    }

    pub async fn command(&self, cmd: SessionCommand) -> Result<CommandOutcome, NetError> {
        let (tx, rx) = oneshot::channel();
        if !self.inbox.push_command(cmd, tx) {
            return Err(NetError::WorkerGone(self.meta.id.clone()));
        }
        rx.await.map_err(|_| NetError::WorkerGone(self.meta.id.clone()))?
    }

    fn stop(&self) {
        self.inbox.close();
        if let Some(t) = self.thread.lock().unwrap().take() {
            let _ = t.join();
        }
    }
}

pub struct Service {
    store: Arc<Store>,
    config: ServeConfig,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    models: Mutex<HashMap<u64, Arc<CalibrationOutcome>>>,
    counter: AtomicU64,
}

impl Service {
    pub fn new(store: Store, config: ServeConfig) -> Result<Arc<Self>, NetError> {
        config.engine.validate()?;
        let next = store
            .session_ids()?
            .iter()
            .filter_map(|id| id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()))
            .max()
            .map_or(1, |n| n + 1);
        Ok(Arc::new(Self {
            store: Arc::new(store),
            config,
            sessions: RwLock::new(HashMap::new()),
            models: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(next),
        }))
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config(&self) -> &ServeConfig {
        &self.config
    }

    /// Per-learner calibration, cached by seed. Blocking.
    pub fn calibration(&self, seed: u64) -> Result<Arc<CalibrationOutcome>, NetError> {
        if let Some(c) = self.models.lock().unwrap().get(&seed) {
            return Ok(c.clone());
        }
        let outcome = Arc::new(calibrate(&self.config.engine.with_seed(seed))?);
        self.models.lock().unwrap().insert(seed, outcome.clone());
        Ok(outcome)
    }

    /// Calibrates, persists and starts a session. Blocking.
    pub fn create_session(&self, req: CreateSession) -> Result<SessionView, NetError> {
        if req.user.trim().is_empty() {
            return Err(NetError::BadRequest("user must not be empty".into()));
        }
        if let SourceSpec::Simulated { speed, .. } = &req.source {
            if !(*speed > 0.0 && speed.is_finite()) {
                return Err(NetError::BadRequest(format!("speed must be > 0, got {speed}")));
            }
        }
        let lesson = self.store.lesson(&req.lesson_id)?;
        let seed = req.seed.unwrap_or(self.config.engine.generator.seed);
        let run_mode = req.run_mode.clone().unwrap_or_else(|| self.config.engine.run_mode.clone());
        run_mode.validate()?;
        let cal = self.calibration(seed)?;
        let mut policy = cal.calibration.policy.clone();
        if let Some(patch) = &req.policy {
            policy = policy.apply(patch)?;
        }
        let cfg = self.config.engine.with_seed(seed);
        let live = LiveSession::new(&cfg, cal.model.clone(), lesson.clone(), policy.clone(), run_mode.clone())?;

        let id = format!("s{:06}", self.counter.fetch_add(1, Ordering::SeqCst));
        let meta = SessionMeta {
            id: id.clone(),
            user: req.user.clone(),
            lesson_id: req.lesson_id.clone(),
            lesson,
            policy,
            run_mode,
            step_s: cfg.epoch.step_s,
            seed,
            source: req.source.name().to_string(),
            created_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
        };
        self.store.create_session(&meta)?;

        let layout = Pipeline::new(&cfg)?.layout();
        let mut bands: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, d) in layout.iter().enumerate() {
            if let FeatureKind::BandPower { band } = &d.kind {
                bands.entry(band.clone()).or_default().push(i);
            }
        }
        let (generator, speed, learner_state) = match &req.source {
            SourceSpec::Simulated { timeline, speed } => {
                let tl = timeline.clone().unwrap_or_else(|| Timeline::constant(MentalState::clear()));
                let first = tl.entries()[0].1.label;
                (Some(Generator::new(cfg.generator.clone(), tl).map_err(eduloop_core::Error::from)?), *speed, Some(first))
            }
            SourceSpec::Stream => (None, 1.0, None),
        };

        let view = Arc::new(RwLock::new(SessionView {
            id: id.clone(),
            user: meta.user.clone(),
            lesson_id: meta.lesson_id.clone(),
            source: meta.source.clone(),
            seed,
            live: true,
            policy: meta.policy.clone(),
            run_mode: meta.run_mode.clone(),
            mode: Mode::Playing,
            segment: 0,
            advisories_used: 0,
            switched: false,
            epoch_index: 0,
            position_s: 0.0,
            last_confusion: None,
            learner_state,
            transitions: 0,
            feature_layout: layout.iter().map(|d| d.to_string()).collect(),
        }));
        let inbox = Arc::new(Inbox::new(self.config.sample_buffer_frames));
        let (events, _) = broadcast::channel(self.config.event_buffer.max(1));
        let worker = Worker {
            id: id.clone(),
            store: self.store.clone(),
            live,
            generator,
            speed,
            block_samples: self.config.sim_block_samples.max(1),
            fs: cfg.generator.fs,
            events: events.clone(),
            view: view.clone(),
            inbox: inbox.clone(),
            bands,
            expected_next: None,
            persisted_transitions: 0,
            learner_state,
            ended: false,
        };
        let thread = std::thread::Builder::new()
            .name(format!("session-{id}"))
            .spawn(move || worker.run())?;
        let handle = Arc::new(SessionHandle {
            meta,
            inbox,
            events,
            view,
            thread: Mutex::new(Some(thread)),
        });
        let out = handle.view();
        self.sessions.write().unwrap().insert(id, handle);
        tracing::info!(session = %out.id, user = %out.user, "session started");
        Ok(out)
    }

    pub fn live(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.read().unwrap().get(id).cloned()
    }

    pub fn live_or_err(&self, id: &str) -> Result<Arc<SessionHandle>, NetError> {
        match self.live(id) {
            Some(h) => Ok(h),
            None => {
                self.store.session_meta(id)?;
                Err(NetError::NotLive(id.to_string()))
            }
        }
    }

    /// Live view, or one rebuilt from disk for sessions of earlier runs.
    pub fn view(&self, id: &str) -> Result<SessionView, NetError> {
        if let Some(h) = self.live(id) {
            return Ok(h.view());
        }
        let meta = self.store.session_meta(id)?;
        let rows = self.store.rows(id)?;
        let log = self.store.transitions(id)?;
        let mut policy = meta.policy.clone();
        for c in self.store.commands(id)? {
            if let SessionCommand::SetPolicy(p) = &c.command {
                policy = policy.apply(p)?;
            }
        }
        let last = rows.last();
        let mode = log.last().map_or(Mode::Playing, |t| t.to_mode);
        Ok(SessionView {
            id: meta.id.clone(),
            user: meta.user.clone(),
            lesson_id: meta.lesson_id.clone(),
            source: meta.source.clone(),
            seed: meta.seed,
            live: false,
            policy,
            run_mode: meta.run_mode.clone(),
            mode,
            segment: last.map_or(0, |r| r.segment),
            advisories_used: 0,
            switched: mode == Mode::Switched,
            epoch_index: last.map_or(0, |r| r.epoch_index + 1),
            position_s: 0.0,
            last_confusion: last.map(|r| r.confusion),
            learner_state: None,
            transitions: log.len(),
            feature_layout: Vec::new(),
        })
    }

    pub fn views(&self) -> Result<Vec<SessionView>, NetError> {
        self.store.session_ids()?.iter().map(|id| self.view(id)).collect()
    }

    pub async fn command(&self, id: &str, cmd: SessionCommand) -> Result<CommandOutcome, NetError> {
        self.live_or_err(id)?.command(cmd).await
    }

    /// Stops every worker; persisted data stays readable.
    pub fn shutdown(&self) {
        let handles: Vec<_> = self.sessions.write().unwrap().drain().map(|(_, h)| h).collect();
        for h in handles {
            h.stop();
        }
    }
}

struct Worker {
    id: String,
    store: Arc<Store>,
    live: LiveSession,
    generator: Option<Generator>,
    speed: f64,
    block_samples: usize,
    fs: f64,
    events: broadcast::Sender<StreamEvent>,
    view: Arc<RwLock<SessionView>>,
    inbox: Arc<Inbox>,
    bands: BTreeMap<String, Vec<usize>>,
    expected_next: Option<u64>,
    persisted_transitions: usize,
    learner_state: Option<MentalLabel>,
    ended: bool,
}

impl Worker {
    fn run(mut self) {
        let started = Instant::now();
        loop {
            let simulated = self.generator.is_some();
            let deadline = match &self.generator {
                Some(g) if !self.ended => {
                    let due = g.cursor() as f64 / self.fs / self.speed;
                    Some(started + Duration::from_secs_f64(due))
                }
                _ => None,
            };
            let work = self.inbox.wait(deadline, !simulated);
            for (cmd, reply) in work.commands {
                let _ = reply.send(self.apply_command(cmd));
            }
            if work.closed {
                break;
            }
            if self.ended {
                continue;
            }
            let next = if simulated {
                if deadline.is_some_and(|d| Instant::now() >= d) {
                    let g = self.generator.as_mut().unwrap();
                    Some((g.next_block(self.block_samples), false))
                } else {
                    None
                }
            } else {
                work.block
            };
            if let Some((block, resync)) = next {
                self.process(block, resync);
            }
        }
        self.view.write().unwrap().live = false;
        tracing::info!(session = %self.id, "session worker stopped");
    }

    fn process(&mut self, block: SampleBlock, resync: bool) {
        let gap = resync || self.expected_next.is_some_and(|e| e != block.first_sample_index);
        self.expected_next = Some(block.end_index());
        let result = if gap {
            self.live.resync(&block)
        } else {
            self.live.push_block(&block)
        };
        match result {
            Ok(records) => {
                if let Err(e) = self.store.append_rows(&self.id, &records) {
                    self.fail(format!("persisting rows: {e}"));
                    return;
                }
                for r in records {
                    let ev = self.state_event(r);
                    let _ = self.events.send(StreamEvent::State(ev));
                }
                self.flush_transitions();
                self.refresh_view();
                if self.live.is_completed() && !self.ended {
                    self.ended = true;
                    let _ = self.events.send(StreamEvent::End { mode: Mode::Completed });
                }
            }
            Err(e) => self.fail(e.to_string()),
        }
    }

    fn fail(&mut self, message: String) {
        tracing::warn!(session = %self.id, %message, "session error");
        let _ = self.events.send(StreamEvent::Error { message });
    }

    fn apply_command(&mut self, cmd: SessionCommand) -> Result<CommandOutcome, NetError> {
        let before_epoch = self.live.engine().state().epoch_index;
        let action = self.live.command(&cmd)?;
        if let SessionCommand::InjectState { label } = &cmd {
            if let Some(g) = &mut self.generator {
                g.inject_state(MentalState::new(*label));
                self.learner_state = Some(*label);
            }
        }
        self.store.append_command(
            &self.id,
            &CommandRecord {
                before_epoch,
                command: cmd.clone(),
            },
        )?;
        let _ = self.events.send(StreamEvent::Command {
            command: cmd,
            action: action.kind(),
        });
        self.flush_transitions();
        self.refresh_view();
        Ok(CommandOutcome {
            action,
            policy: self.live.engine().policy().clone(),
            mode: self.live.engine().state().mode,
        })
    }

    /// Persists and publishes transitions logged since the last call.
    fn flush_transitions(&mut self) {
        let log = self.live.engine().log();
        if log.len() <= self.persisted_transitions {
            return;
        }
        let fresh = log[self.persisted_transitions..].to_vec();
        if let Err(e) = self.store.append_transitions(&self.id, &fresh) {
            self.fail(format!("persisting transitions: {e}"));
            return;
        }
        self.persisted_transitions = log.len();
        for t in fresh {
            let _ = self.events.send(StreamEvent::Transition(t));
        }
    }

    fn state_event(&self, r: EpochRecord) -> StateEvent {
        let policy = self.live.engine().policy();
        let band_power = self
            .bands
            .iter()
            .map(|(name, idx)| {
                let mean = idx.iter().map(|i| r.features[*i]).sum::<f64>() / idx.len() as f64;
                (name.clone(), mean)
            })
            .collect();
        StateEvent {
            session_id: self.id.clone(),
            epoch_index: r.epoch_index,
            t_end_s: r.t_end_s,
            confusion: r.confusion,
            score: r.score,
            label: r.label,
            mode: r.mode,
            segment: r.segment,
            artifact: r.artifact,
            action: r.action,
            theta_high: policy.theta_high,
            theta_low: policy.theta_low,
            dwell_epochs: policy.dwell_epochs,
            band_power,
            learner_state: self.learner_state,
            features: r.features,
        }
    }

    fn refresh_view(&self) {
        let engine = self.live.engine();
        let st = engine.state();
        let mut v = self.view.write().unwrap();
        v.policy = engine.policy().clone();
        v.mode = st.mode;
        v.segment = st.segment;
        v.advisories_used = st.advisories_used;
        v.switched = st.switched;
        v.epoch_index = st.epoch_index;
        v.position_s = st.position_s();
        v.last_confusion = st.last_confusion;
        v.learner_state = self.learner_state;
        v.transitions = st.log.len();
    }
}
