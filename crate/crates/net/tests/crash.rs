//! A writer killed mid-stream must leave every acknowledged row readable.

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use eduloop_core::detect::DetectorLabel;
use eduloop_core::pipeline::EpochRecord;
use eduloop_core::session::{load_lesson, Action, Mode, Policy, RunMode};
use eduloop_net::store::{SessionMeta, Store};

const CHILD_ENV: &str = "EDULOOP_CRASH_WRITER_DIR";

fn row(i: u64) -> EpochRecord {
    EpochRecord {
        epoch_index: i,
        t_end_s: 1.0 + i as f64 * 0.5,
        confusion: (i % 97) as f64 / 97.0,
        score: i as f64 * 0.01 - 3.0,
        label: if i % 3 == 0 { DetectorLabel::Command } else { DetectorLabel::NonControl },
        mode: Mode::Playing,
        segment: 0,
        artifact: i % 11 == 0,
        action: Action::None,
        features: (0..256).map(|k| (i * 256 + k) as f64 * 0.125).collect(),
    }
}

fn meta() -> SessionMeta {
    SessionMeta {
        id: "s000001".into(),
        user: "learner".into(),
        lesson_id: "l".into(),
        lesson: load_lesson(r#"{"id":"l","segments":[{"duration_s":60,"content_ref":"v"}]}"#).unwrap(),
        policy: Policy::default(),
        run_mode: RunMode::SelfPaced,
        step_s: 0.5,
        seed: 1,
        source: "stream".into(),
        created_unix_ms: 0,
    }
}

/// Child side: append rows forever, acknowledging each durable append.
#[test]
fn crash_writer_child() {
    let Ok(dir) = std::env::var(CHILD_ENV) else {
        return;
    };
    let store = Store::open(&dir).unwrap();
    let start = match store.rows("s000001") {
        Ok(rows) => rows.last().map_or(0, |r| r.epoch_index + 1),
        Err(_) => {
            store.create_session(&meta()).unwrap();
            0
        }
    };
    let mut out = std::io::stdout().lock();
    for i in start.. {
        store.append_rows("s000001", &[row(i)]).unwrap();
        writeln!(out, "ack {i}").unwrap();
        out.flush().unwrap();
    }
}

/// Runs the child until it has acknowledged `n` more rows, then kills it.
fn run_and_kill(dir: &std::path::Path, n: usize) -> u64 {
    let mut child = Command::new(std::env::current_exe().unwrap())
        .args(["crash_writer_child", "--exact", "--nocapture", "--test-threads=1"])
        .env(CHILD_ENV, dir)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let reader = BufReader::new(child.stdout.take().unwrap());
    let mut last = None;
    let mut seen = 0;
    for line in reader.lines() {
        let line = line.unwrap();
        if let Some(i) = line.strip_prefix("ack ") {
            last = Some(i.trim().parse::<u64>().unwrap());
            seen += 1;
            if seen == n {
                break;
            }
        }
    }
    child.kill().unwrap();
    child.wait().unwrap();
    last.expect("child acknowledged nothing")
}

#[test]
fn killed_writer_loses_no_acknowledged_row() {
    let dir = tempfile::tempdir().unwrap();
    for n in [50, 120, 300] {
        let acked = run_and_kill(dir.path(), n);
        let rows = Store::open(dir.path()).unwrap().rows("s000001").unwrap();
        assert!(rows.len() as u64 > acked, "acked {acked}, read {}", rows.len());
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(*r, row(i as u64));
        }
    }
}
