//! TCP stream plane speaking SSP1 frames.
//!
//! A client opens with HELLO `{"session_id": ..}` and gets ACK and CONFIG
//! back. It may then send SAMPLES and COMMAND frames; the server pushes one
//! STATE frame per event and acknowledges commands with ACK. ERROR frames
//! carry `{"code", "message"}`; code `gap` reports dropped data, after which
//! the pipeline re-synchronizes at the next epoch boundary.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::broadcast::error::RecvError;
use tokio::sync::mpsc;

use crate::frame::{decode_frame, Decoded, Frame, FrameError, FrameType, SamplesPayload};
use crate::service::{Service, SessionHandle, StreamEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub session_id: String,
    /// Also send a FEATURES frame per epoch.
    #[serde(default)]
    pub features: bool,
}

/// Sent after a successful HELLO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub session_id: String,
    pub fs: f64,
    pub n_channels: usize,
    pub window_samples: usize,
    pub step_samples: usize,
    pub buffer_frames: usize,
    pub feature_layout: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesMessage {
    pub epoch_index: u64,
    pub values: Vec<f64>,
}

pub fn error_frame(code: &str, message: impl Into<String>) -> Frame {
    Frame::json(FrameType::Error, &json!({ "code": code, "message": message.into() }))
}

pub async fn serve_stream(listener: TcpListener, service: Arc<Service>) -> std::io::Result<()> {
    loop {
        let (sock, peer) = listener.accept().await?;
        let svc = service.clone();
        tokio::spawn(async move {
            tracing::debug!(%peer, "stream client connected");
            if let Err(e) = handle_connection(sock, svc).await {
                tracing::debug!(%peer, error = %e, "stream client dropped");
            }
        });
    }
}

struct Conn {
    service: Arc<Service>,
    out: mpsc::Sender<Frame>,
    session: Option<Arc<SessionHandle>>,
    /// Task turning session events into frames for this client.
    forwarder: Option<tokio::task::JoinHandle<()>>,
    fs: f64,
}

impl Drop for Conn {
    fn drop(&mut self) {
        if let Some(f) = self.forwarder.take() {
            f.abort();
        }
    }
}

pub async fn handle_connection(sock: TcpStream, service: Arc<Service>) -> std::io::Result<()> {
    let (mut rd, mut wr) = sock.into_split();
    let (out, mut out_rx) = mpsc::channel::<Frame>(256);
    let writer = tokio::spawn(async move {
        while let Some(f) = out_rx.recv().await {
            let bytes = match f.encode() {
                Ok(b) => b,
                Err(e) => {
                    tracing::warn!(error = %e, "dropping unencodable frame");
                    continue;
                }
            };
            if wr.write_all(&bytes).await.is_err() {
                break;
            }
        }
        let _ = wr.shutdown().await;
    });

    let fs = service.config().engine.generator.fs;
    let mut conn = Conn {
        service,
        out,
        session: None,
        forwarder: None,
        fs,
    };
    let mut buf: Vec<u8> = Vec::new();
    let mut chunk = vec![0u8; 64 * 1024];
    'read: loop {
        loop {
            match decode_frame(&buf) {
                Ok(Decoded::NeedMoreData) => break,
                Ok(Decoded::Frame { frame, consumed }) => {
                    buf.drain(..consumed);
                    conn.handle(frame).await;
                }
                Err(FrameError::UnknownType { code, consumed }) => {
                    buf.drain(..consumed);
                    conn.send(error_frame("unknown_type", format!("unknown frame type 0x{code:02x}"))).await;
                }
                Err(e) => {
                    conn.send(error_frame("protocol", e.to_string())).await;
                    break 'read;
                }
            }
        }
        let n = rd.read(&mut chunk).await?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    drop(conn);
    let _ = writer.await;
    Ok(())
}

impl Conn {
    async fn send(&self, f: Frame) {
        let _ = self.out.send(f).await;
    }

    async fn handle(&mut self, frame: Frame) {
        match frame.frame_type {
            FrameType::Hello => self.hello(&frame).await,
            FrameType::Samples => self.samples(&frame).await,
            FrameType::Command => self.command(&frame).await,
            FrameType::Ack => {}
            other => {
                self.send(error_frame("unexpected", format!("{other:?} is not accepted from clients")))
                    .await
            }
        }
    }

    async fn hello(&mut self, frame: &Frame) {
        let hello: Hello = match frame.parse_json() {
            Ok(h) => h,
            Err(e) => return self.send(error_frame("bad_payload", e.to_string())).await,
        };
        let handle = match self.service.live_or_err(&hello.session_id) {
            Ok(h) => h,
            Err(e) => return self.send(error_frame("not_found", e.to_string())).await,
        };
        let cfg = &self.service.config().engine;
        let (window, step) = cfg.epoch.samples(cfg.generator.fs).unwrap_or((0, 0));
        let view = handle.view();
        self.send(Frame::json(FrameType::Ack, &json!({ "ok": true, "session_id": hello.session_id })))
            .await;
        self.send(Frame::json(
            FrameType::Config,
            &StreamConfig {
                session_id: hello.session_id.clone(),
                fs: cfg.generator.fs,
                n_channels: cfg.generator.n_channels(),
                window_samples: window,
                step_samples: step,
                buffer_frames: self.service.config().sample_buffer_frames,
                feature_layout: view.feature_layout.clone(),
            },
        ))
        .await;

        let mut rx = handle.subscribe();
        let out = self.out.clone();
        let with_features = hello.features;
        if let Some(old) = self.forwarder.take() {
            old.abort();
        }
        self.forwarder = Some(tokio::spawn(async move {
            loop {
                let ev = match rx.recv().await {
                    Ok(ev) => ev,
                    Err(RecvError::Lagged(n)) => {
                        let f = error_frame("gap", format!("{n} state events dropped"));
                        if out.send(f).await.is_err() {
                            break;
                        }
                        continue;
                    }
                    Err(RecvError::Closed) => break,
                };
                if with_features {
                    if let StreamEvent::State(s) = &ev {
                        let msg = FeaturesMessage {
                            epoch_index: s.epoch_index,
                            values: s.features.clone(),
                        };
                        if out.send(Frame::json(FrameType::Features, &msg)).await.is_err() {
                            break;
                        }
                    }
                }
                let end = matches!(ev, StreamEvent::End { .. });
                if out.send(Frame::json(FrameType::State, &ev)).await.is_err() || end {
                    break;
                }
            }
        }));
        self.session = Some(handle);
    }

    async fn samples(&mut self, frame: &Frame) {
        let Some(session) = self.session.clone() else {
            return self.send(error_frame("no_session", "send HELLO first")).await;
        };
        if !session.is_stream_source() {
            return self.send(error_frame("not_stream_session", "session generates its own signal")).await;
        }
        let block = match SamplesPayload::decode(&frame.payload).and_then(|p| p.to_block(self.fs)) {
            Ok(b) => b,
            Err(e) => return self.send(error_frame("bad_payload", e.to_string())).await,
        };
        let expected = self.service.config().engine.generator.n_channels();
        if block.n_channels != expected {
            return self
                .send(error_frame(
                    "bad_payload",
                    format!("expected {expected} channels, got {}", block.n_channels),
                ))
                .await;
        }
        let dropped = session.push_samples(block);
        if dropped > 0 {
            self.send(error_frame("gap", format!("{dropped} SAMPLES frames dropped"))).await;
        }
    }

    async fn command(&mut self, frame: &Frame) {
        let Some(session) = self.session.clone() else {
            return self.send(error_frame("no_session", "send HELLO first")).await;
        };
        let cmd = match frame.parse_json() {
            Ok(c) => c,
            Err(e) => return self.send(error_frame("bad_payload", e.to_string())).await,
        };
        match session.command(cmd).await {
            Ok(outcome) => self.send(Frame::json(FrameType::Ack, &outcome)).await,
            Err(e) => self.send(error_frame("command", e.to_string())).await,
        }
    }
}
