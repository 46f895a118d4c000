//! Primary acceptance criteria, one PASS/FAIL line each. Runs without the
//! test harness so the lines are always printed; exits nonzero if any
//! criterion fails.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use eduloop_core::detect::{debounce, Debouncer, DetectorLabel};
use eduloop_core::features::{band_power, burg, haar_energies, hjorth_params};
use eduloop_core::pipeline::{calibrate, EngineConfig, EpochRecord, LiveSession, Simulation, SimulationOutcome};
use eduloop_core::preprocess::{design_bandpass, design_notch, filter_block, FilterCoefficients, FilterState};
use eduloop_core::session::{
    calibrate_policy, load_lesson, replay, transitions_to_jsonl, Action, Mode, Policy, ReplayInput, RunMode,
};
use eduloop_core::sigcore::{BandDef, Epoch, SampleBlock};
use eduloop_core::synthgen::{Generator, MentalLabel, MentalState, Timeline};
use eduloop_net::frame::*;
use eduloop_net::store::{SessionMeta, Store};

const FS: f64 = 250.0;
const CHILD_ENV: &str = "EDULOOP_ACCEPTANCE_WRITER_DIR";

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// DSP: gains by the sinusoid-RMS oracle.

fn rms_gain(coeffs: &FilterCoefficients, f: f64) -> f64 {
    let n = (40.0 * FS) as usize;
    let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * f * i as f64 / FS).sin()).collect();
    let input = SampleBlock::from_channels(0, FS, &[x]).unwrap();
    let mut st = FilterState::new(coeffs, 1);
    let out = filter_block(coeffs, &mut st, &input).unwrap();
    let skip = (20.0 * FS) as usize;
    let rms = |x: &[f64]| (x[skip..].iter().map(|v| v * v).sum::<f64>() / (x.len() - skip) as f64).sqrt();
    rms(out.channel(0)) / rms(input.channel(0))
}

fn dsp_oracles() -> Outcome {
    let t0 = Instant::now();
    let bp = design_bandpass(4, 8.0, 13.0, FS).map_err(|e| e.to_string())?;
    let mid = rms_gain(&bp, (8.0f64 * 13.0).sqrt());
    let lo = rms_gain(&bp, 8.0);
    let hi = rms_gain(&bp, 13.0);
    let notch = design_notch(50.0, 30.0, FS).map_err(|e| e.to_string())?;
    let stop = rms_gain(&notch, 50.0);
    let pass = rms_gain(&notch, 10.0);
    let secs = t0.elapsed().as_secs_f64();
    check(
        (0.95..=1.05).contains(&mid)
            && (lo - 0.708).abs() <= 0.05
            && (hi - 0.708).abs() <= 0.05
            && stop <= 0.01
            && pass >= 0.95
            && secs < 10.0,
        format!(
            "band-pass mid {mid:.4}, edges {lo:.4}/{hi:.4}; notch 50 Hz {stop:.5}, 10 Hz {pass:.4}; {secs:.2} s"
        ),
    )
}

// Features against analytic values.

fn analytic_features() -> Outcome {
    let amp = 2.0;
    let x: Vec<f64> = (0..250).map(|i| amp * (2.0 * PI * 10.0 * i as f64 / FS).sin()).collect();
    let e = Epoch::from_channels(0, FS, &[x]).unwrap();
    let p = band_power(&e, &BandDef::alpha()).map_err(|e| e.to_string())?[0];
    let p_ok = (p - amp * amp / 2.0).abs() <= 0.1 * amp * amp / 2.0;

    let long: Vec<f64> = (0..1000).map(|i| 3.0 * (2.0 * PI * 10.0 * i as f64 / FS).sin()).collect();
    let h = hjorth_params(&Epoch::from_channels(0, FS, &[long]).unwrap()).map_err(|e| e.to_string())?[0];
    let h_ok = (h.complexity - 1.0).abs() <= 0.05;

    let mut rng = StdRng::seed_from_u64(5);
    let mut ar = vec![0.0f64; 3000];
    for t in 1..ar.len() {
        let w: f64 = StandardNormal.sample(&mut rng);
        ar[t] = 0.9 * ar[t - 1] + w;
    }
    let a = burg(&ar, 1).map_err(|e| e.to_string())?[0];
    let yw = ar.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / ar.iter().map(|v| v * v).sum::<f64>();
    let a_ok = (a - 0.9).abs() <= 0.05 && (a - yw).abs() <= 0.05;

    let sig: Vec<f64> = (0..256).map(|_| StandardNormal.sample(&mut rng)).collect();
    let energies = haar_energies(&sig, 5).map_err(|e| e.to_string())?;
    let total: f64 = sig.iter().map(|v| v * v).sum();
    let rel = (energies.iter().sum::<f64>() - total).abs() / total;
    let haar_ok = rel <= 1e-9;

    check(
        p_ok && h_ok && a_ok && haar_ok,
        format!(
            "band power {p:.4} (A^2/2 = {}), Hjorth complexity {:.4}, Burg a1 {a:.4} vs Yule-Walker {yw:.4}, Haar rel. error {rel:.1e}",
            amp * amp / 2.0,
            h.complexity
        ),
    )
}

// Debouncer against the brute-force rule.

fn brute_force(labels: &[DetectorLabel], dwell: usize, refractory: usize) -> Vec<usize> {
    let mut events: Vec<usize> = Vec::new();
    for i in 0..labels.len() {
        let free_from = events.last().map_or(0, |&e| e + refractory + 1);
        if i + 1 >= dwell
            && i + 1 - dwell >= free_from
            && labels[i + 1 - dwell..=i].iter().all(|l| *l == DetectorLabel::Command)
        {
            events.push(i);
        }
    }
    events
}

fn debounce_equivalence() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xacce);
    let mut mismatches = 0;
    let mut events = 0;
    for _ in 0..100_000 {
        let dwell = rng.random_range(1..=10u32);
        let refractory = rng.random_range(0..=10u32);
        let p: f64 = rng.random_range(0.3..1.0);
        let len = rng.random_range(0..80);
        let labels: Vec<DetectorLabel> = (0..len)
            .map(|_| if rng.random_bool(p) { DetectorLabel::Command } else { DetectorLabel::NonControl })
            .collect();
        let got = debounce(&mut Debouncer::new(dwell, refractory).unwrap(), &labels);
        events += got.len();
        if got != brute_force(&labels, dwell as usize, refractory as usize) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("100000 streams, {events} events, {mismatches} mismatches"))
}

// Closed loop.

fn lesson_json() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("data/lesson_5min.json")).unwrap()
}

fn replayed_jsonl(out: &SimulationOutcome, lesson: &eduloop_core::session::Lesson, policy: &Policy, cfg: &EngineConfig) -> String {
    let rows: Vec<ReplayInput> = out
        .rows
        .iter()
        .map(|r| ReplayInput {
            epoch_index: r.epoch_index,
            confusion: r.confusion,
            reliable: !r.artifact,
        })
        .collect();
    transitions_to_jsonl(&replay(lesson, policy, &RunMode::SelfPaced, cfg.epoch.step_s, &rows, &[]).unwrap())
}

fn closed_loop() -> Outcome {
    let cfg = EngineConfig::default();
    let seed = cfg.generator.seed;
    let lesson = load_lesson(&lesson_json()).map_err(|e| e.to_string())?;
    let cal = calibrate(&cfg).map_err(|e| e.to_string())?;
    let policy = cal.calibration.policy.clone();

    let confused = Timeline::from_labels(&[(0.0, MentalLabel::Clear), (30.0, MentalLabel::Confused)]).unwrap();
    let a = Simulation::new(&cfg, &cal.model, &policy, &lesson, &confused, seed).run().map_err(|e| e.to_string())?;
    let latency = a.report.latencies.first().and_then(|l| l.latency_s);
    let first_trigger = a.log.iter().find(|t| t.confusion.is_some());
    let paused = first_trigger.is_some_and(|t| t.to_mode == Mode::PausedAdvisory);

    let clear = Timeline::constant(MentalState::clear());
    let b = Simulation::new(&cfg, &cal.model, &policy, &lesson, &clear, seed).run().map_err(|e| e.to_string())?;
    let again = Simulation::new(&cfg, &cal.model, &policy, &lesson, &clear, seed).run().map_err(|e| e.to_string())?;

    let replay_ok = replayed_jsonl(&a, &lesson, &policy, &cfg) == transitions_to_jsonl(&a.log)
        && replayed_jsonl(&b, &lesson, &policy, &cfg) == transitions_to_jsonl(&b.log)
        && b.report.same_outcome(&again.report)
        && transitions_to_jsonl(&b.log) == transitions_to_jsonl(&again.log);

    check(
        latency.is_some_and(|l| l <= 3.0) && paused && b.report.false_pauses == 0 && b.report.lesson_completed && replay_ok,
        format!(
            "seed {seed}: onset at 30 s detected after {} s (paused: {paused}); all-CLEAR false pauses {} over {:.0} s; replay identical: {replay_ok}",
            latency.map_or("never".to_string(), |l| format!("{l:.2}")),
            b.report.false_pauses,
            b.report.simulated_s
        ),
    )
}

// Protocol.

fn fuzz_input(rng: &mut StdRng) -> Vec<u8> {
    if rng.random_bool(0.3) {
        let n = rng.random_range(0..48);
        return (0..n).map(|_| rng.random()).collect();
    }
    let t = FrameType::ALL[rng.random_range(0..FrameType::ALL.len())];
    let n = rng.random_range(0..40);
    let payload: Vec<u8> = (0..n).map(|_| rng.random()).collect();
    let mut bytes = encode_frame(t, rng.random(), &payload).unwrap();
    for _ in 0..rng.random_range(0..3) {
        let i = rng.random_range(0..bytes.len());
        bytes[i] = rng.random();
    }
    if rng.random_bool(0.3) {
        bytes.truncate(rng.random_range(0..=bytes.len()));
    }
    bytes
}

fn round_trips(rng: &mut StdRng) -> Result<usize, String> {
    let mut n = 0;
    for t in FrameType::ALL {
        for size in [0usize, 1, 12, 8012, 65_536, MAX_PAYLOAD] {
            let payload: Vec<u8> = (0..size).map(|_| rng.random()).collect();
            let flags: u16 = rng.random();
            let bytes = encode_frame(t, flags, &payload).map_err(|e| e.to_string())?;
            let want = Frame { frame_type: t, flags, payload };
            match decode_frame(&bytes) {
                Ok(Decoded::Frame { frame, consumed }) if frame == want && consumed == bytes.len() => {}
                other => return Err(format!("{t:?} with {size} bytes decoded as {other:?}")),
            }
            for cut in [0, 1, 4, HEADER_LEN - 1, HEADER_LEN, bytes.len() - 1] {
                if cut < bytes.len() && decode_frame(&bytes[..cut]) != Ok(Decoded::NeedMoreData) {
                    return Err(format!("{t:?} prefix of {cut} bytes was not reported as partial"));
                }
            }
            n += 1;
        }
    }
    let block = SampleBlock::from_channels(
        99,
        FS,
        &(0..8).map(|c| (0..250).map(|i| (c * 1000 + i) as f32 as f64 * 0.25).collect()).collect::<Vec<_>>(),
    )
    .unwrap();
    let back = SamplesPayload::decode(&SamplesPayload::from_block(&block).unwrap().encode().unwrap())
        .and_then(|p| p.to_block(FS))
        .map_err(|e| e.to_string())?;
    if back != block {
        return Err("SAMPLES payload changed in transit".into());
    }
    Ok(n + 1)
}

fn fuzz(rng: &mut StdRng) -> Result<(), String> {
    for i in 0..1_000_000 {
        let buf = fuzz_input(rng);
        let r = std::panic::catch_unwind(|| decode_frame(&buf)).map_err(|_| format!("panic on input {i}"))?;
        let bad = match r {
            Ok(Decoded::NeedMoreData) => {
                buf.len() >= HEADER_LEN
                    && buf.len() >= HEADER_LEN + u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize
            }
            Ok(Decoded::Frame { frame, consumed }) => consumed > buf.len() || frame.encode().unwrap() != buf[..consumed],
            Err(FrameError::UnknownType { consumed, .. }) => consumed < HEADER_LEN || consumed > buf.len(),
            Err(e) => !e.is_fatal(),
        };
        if bad {
            return Err(format!("input {i} ({} bytes) mishandled", buf.len()));
        }
    }
    Ok(())
}

fn crash_row(i: u64) -> EpochRecord {
    EpochRecord {
        epoch_index: i,
        t_end_s: 1.0 + i as f64 * 0.5,
        confusion: (i % 89) as f64 / 89.0,
        score: i as f64 * 0.37 - 5.0,
        label: DetectorLabel::NonControl,
        mode: Mode::Playing,
        segment: (i / 100) as usize,
        artifact: i % 13 == 0,
        action: Action::None,
        features: (0..128).map(|k| (i * 128 + k) as f64 / 3.0).collect(),
    }
}

fn crash_child(dir: &str) -> ! {
    let store = Store::open(dir).unwrap();
    let start = match store.rows("s000001") {
        Ok(rows) => rows.last().map_or(0, |r| r.epoch_index + 1),
        Err(_) => {
            store
                .create_session(&SessionMeta {
                    id: "s000001".into(),
                    user: "writer".into(),
                    lesson_id: "l".into(),
                    lesson: load_lesson(r#"{"id":"l","segments":[{"duration_s":60,"content_ref":"v"}]}"#).unwrap(),
                    policy: Policy::default(),
                    run_mode: RunMode::SelfPaced,
                    step_s: 0.5,
                    seed: 1,
                    source: "stream".into(),
                    created_unix_ms: 0,
                })
                .unwrap();
            0
        }
    };
    let mut out = std::io::stdout().lock();
    for i in start.. {
        store.append_rows("s000001", &[crash_row(i)]).unwrap();
        writeln!(out, "ack {i}").unwrap();
        out.flush().unwrap();
    }
    unreachable!()
}

/// Kills a writer after `n` acknowledged rows; returns the last acknowledged epoch.
fn kill_writer(dir: &Path, n: usize) -> Result<u64, String> {
    let mut child = Command::new(std::env::current_exe().unwrap())
        .env(CHILD_ENV, dir)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut last = None;
    let mut seen = 0;
    for line in BufReader::new(child.stdout.take().unwrap()).lines() {
        let line = line.map_err(|e| e.to_string())?;
        if let Some(i) = line.strip_prefix("ack ") {
            last = Some(i.parse::<u64>().map_err(|e| e.to_string())?);
            seen += 1;
            if seen == n {
                break;
            }
        }
    }
    child.kill().map_err(|e| e.to_string())?;
    child.wait().map_err(|e| e.to_string())?;
    last.ok_or_else(|| "writer acknowledged nothing".to_string())
}

fn kill_and_reread() -> Result<u64, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut acked = 0;
    for n in [40, 150, 400] {
        acked = kill_writer(dir.path(), n)?;
        let rows = Store::open(dir.path()).and_then(|s| s.rows("s000001")).map_err(|e| e.to_string())?;
        if (rows.len() as u64) <= acked {
            return Err(format!("acknowledged epoch {acked} but only {} rows readable", rows.len()));
        }
        if let Some((i, _)) = rows.iter().enumerate().find(|(i, r)| **r != crash_row(*i as u64)) {
            return Err(format!("row {i} corrupted"));
        }
    }
    Ok(acked + 1)
}

fn protocol() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x55b1);
    let frames = round_trips(&mut rng)?;
    fuzz(&mut rng)?;
    let rows = kill_and_reread()?;
    Ok(format!(
        "{frames} round trips identical; 1000000 fuzzed inputs without panic or overconsumption; {rows} acknowledged rows survived 3 kills"
    ))
}

// Performance.

fn performance() -> Outcome {
    let cfg = EngineConfig::default();
    let cal = calibrate(&cfg).map_err(|e| e.to_string())?;
    let lesson = load_lesson(&lesson_json()).map_err(|e| e.to_string())?;
    let mut live = LiveSession::new(&cfg, cal.model, lesson, cal.calibration.policy, RunMode::SelfPaced)
        .map_err(|e| e.to_string())?;
    let mut gen = Generator::new(cfg.generator.clone(), Timeline::constant(MentalState::clear())).unwrap();
    let step = cfg.epoch.samples(cfg.generator.fs).unwrap().1;
    live.push_block(&gen.next_block(step)).map_err(|e| e.to_string())?;
    let mut times = Vec::new();
    while times.len() < 500 {
        let block = gen.next_block(step);
        let t0 = Instant::now();
        let recs = live.push_block(&block).map_err(|e| e.to_string())?;
        let dt = t0.elapsed().as_secs_f64();
        if recs.len() == 1 {
            times.push(dt);
        }
    }
    times.sort_by(f64::total_cmp);
    let max_ms = times.last().unwrap() * 1e3;
    let median_ms = times[times.len() / 2] * 1e3;
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let rtf = cfg.epoch.step_s / mean;
    check(
        max_ms < 50.0 && rtf > 10.0,
        format!("{} epochs of 1 s x 8 channels: median {median_ms:.2} ms, max {max_ms:.2} ms, real-time factor {rtf:.0}", times.len()),
    )
}

// Calibration percentile.

fn calibration() -> Outcome {
    let ten = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    let exact = calibrate_policy(&ten, &Policy::default()).map_err(|e| e.to_string())?.policy.theta_high;
    let mut rng = StdRng::seed_from_u64(0xca1);
    let uniform: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0)).collect();
    let approx = calibrate_policy(&uniform, &Policy::default()).map_err(|e| e.to_string())?.policy.theta_high;
    check(
        exact == 0.9 && (approx - 0.9).abs() <= 0.03,
        format!("p90 of [0.1..1.0] = {exact}; p90 of 1000 uniform = {approx:.4}"),
    )
}

fn main() {
    if let Ok(dir) = std::env::var(CHILD_ENV) {
        crash_child(&dir);
    }
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("dsp oracle suite", dsp_oracles),
        ("analytic features", analytic_features),
        ("debounce equivalence", debounce_equivalence),
        ("closed-loop simulation", closed_loop),
        ("protocol", protocol),
        ("performance", performance),
        ("calibration", calibration),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} of 7 criteria passed", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
