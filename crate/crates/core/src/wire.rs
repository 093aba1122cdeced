//! Backend wire contract.
//!
//! Tracker, segmenter and detector backends speak newline-delimited JSON:
//! one [`Request`] per line in, one [`Response`] per line out, in order.
//! Every message carries a `type` tag. A backend first answers `handshake`
//! with its [`BackendInfo`].
//!
//! [`ProcessBackend`] drives an external process over its stdin/stdout and
//! implements all three backend traits; [`serve`] is the other end, for
//! writing backends in Rust.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::DetectorBackend;
use crate::model::ImageGeometry;
use crate::propagation::TrackerBackend;
use crate::segfit::SegmenterBackend;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("backend i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("backend rejected request: {0}")]
    Rejected(String),
    #[error("backend does not support `{0}` requests")]
    Unsupported(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_chunk: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_prompts: Option<usize>,
}

impl BackendInfo {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            max_points: None,
            max_chunk: None,
            max_prompts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub index: u32,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WirePoint {
    pub track_id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedPoint {
    pub track_id: u32,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Track `points` (normalized, located in `frames[0]`) through `frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRequest {
    pub job_id: String,
    pub frames: Vec<FrameRef>,
    pub points: Vec<WirePoint>,
    pub geometry: ImageGeometry,
}

/// One entry per requested frame, the query frame included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResponse {
    pub job_id: String,
    pub frames: Vec<Vec<TrackedPoint>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptBox {
    pub track_id: u32,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub job_id: String,
    pub frame: FrameRef,
    pub geometry: ImageGeometry,
    pub boxes: Vec<PromptBox>,
}

/// Row-major run lengths alternating background/foreground, starting with
/// background; the runs sum to `rows * cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMask {
    pub track_id: u32,
    pub rle: Vec<u32>,
    pub rows: u32,
    pub cols: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub job_id: String,
    pub masks: Vec<WireMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub job_id: String,
    pub dataset: PathBuf,
    pub epochs: u32,
    pub batch: u32,
    pub image_size: u32,
    pub confidence: f64,
    pub iou_threshold: f64,
    pub class_agnostic_nms: bool,
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub job_id: String,
    pub model_token: String,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRequest {
    pub job_id: String,
    pub model_token: String,
    pub frames: Vec<FrameRef>,
    pub geometry: ImageGeometry,
}

/// A detection in pixel corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub class_id: u32,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_index: u32,
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub job_id: String,
    pub frames: Vec<FrameDetections>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Handshake,
    Track(TrackRequest),
    Segment(SegmentRequest),
    Train(TrainRequest),
    Infer(InferRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Handshake(BackendInfo),
    Track(TrackResponse),
    Segment(SegmentResponse),
    Train(TrainResponse),
    Infer(InferResponse),
    Error { message: String },
}

impl Response {
    fn kind(&self) -> &'static str {
        match self {
            Response::Handshake(_) => "handshake",
            Response::Track(_) => "track",
            Response::Segment(_) => "segment",
            Response::Train(_) => "train",
            Response::Infer(_) => "infer",
            Response::Error { .. } => "error",
        }
    }
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    broken: bool,
}

/// External backend process spoken to over stdin/stdout.
pub struct ProcessBackend {
    channel: Mutex<Channel>,
    timeout: Duration,
}

impl std::fmt::Debug for ProcessBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProcessBackend")
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

impl ProcessBackend {
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self, BackendError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| BackendError::Protocol("empty backend command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            channel: Mutex::new(Channel {
                child,
                stdin,
                lines: rx,
                broken: false,
            }),
            timeout,
        })
    }

    /// One request/response exchange. A timeout or garbled reply leaves the
    /// stream out of step, so the process is killed and later calls fail.
    pub fn call(&self, request: &Request) -> Result<Response, BackendError> {
        let mut ch = self.channel.lock().unwrap_or_else(|e| e.into_inner());
        if ch.broken {
            return Err(BackendError::Protocol("backend channel is closed".into()));
        }
        let result = Self::exchange(&mut ch, request, self.timeout);
        if result.is_err() {
            ch.broken = true;
            let _ = ch.child.kill();
        }
        match result? {
            Response::Error { message } => Err(BackendError::Rejected(message)),
            other => Ok(other),
        }
    }

    fn exchange(ch: &mut Channel, request: &Request, timeout: Duration) -> Result<Response, BackendError> {
        let mut line = serde_json::to_string(request)
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        line.push('\n');
        ch.stdin.write_all(line.as_bytes())?;
        ch.stdin.flush()?;
        let reply = match ch.lines.recv_timeout(timeout) {
            Ok(r) => r?,
            Err(RecvTimeoutError::Timeout) => return Err(BackendError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(BackendError::Protocol("backend closed its output".into()))
            }
        };
        serde_json::from_str(&reply)
            .map_err(|e| BackendError::Protocol(format!("unreadable reply `{reply}`: {e}")))
    }

    fn expect<T>(
        &self,
        request: Request,
        pick: impl FnOnce(Response) -> Result<T, Response>,
    ) -> Result<T, BackendError> {
        pick(self.call(&request)?).map_err(|other| {
            BackendError::Protocol(format!("unexpected `{}` reply", other.kind()))
        })
    }

    pub fn handshake(&self) -> Result<BackendInfo, BackendError> {
        self.expect(Request::Handshake, |r| match r {
            Response::Handshake(i) => Ok(i),
            o => Err(o),
        })
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        let ch = self.channel.get_mut().unwrap_or_else(|e| e.into_inner());
        let _ = ch.child.kill();
        let _ = ch.child.wait();
    }
}

impl TrackerBackend for ProcessBackend {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        self.handshake()
    }

    fn track(&self, req: &TrackRequest) -> Result<TrackResponse, BackendError> {
        self.expect(Request::Track(req.clone()), |r| match r {
            Response::Track(t) => Ok(t),
            o => Err(o),
        })
    }
}

impl SegmenterBackend for ProcessBackend {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        self.handshake()
    }

    fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse, BackendError> {
        self.expect(Request::Segment(req.clone()), |r| match r {
            Response::Segment(s) => Ok(s),
            o => Err(o),
        })
    }
}

impl DetectorBackend for ProcessBackend {
    fn info(&self) -> Result<BackendInfo, BackendError> {
        self.handshake()
    }

    fn train(&self, req: &TrainRequest) -> Result<TrainResponse, BackendError> {
        self.expect(Request::Train(req.clone()), |r| match r {
            Response::Train(t) => Ok(t),
            o => Err(o),
        })
    }

    fn infer(&self, req: &InferRequest) -> Result<InferResponse, BackendError> {
        self.expect(Request::Infer(req.clone()), |r| match r {
            Response::Infer(i) => Ok(i),
            o => Err(o),
        })
    }
}

/// In-process backends bundled behind one request dispatcher.
#[derive(Default)]
pub struct Dispatcher<'a> {
    pub info: Option<BackendInfo>,
    pub tracker: Option<&'a dyn TrackerBackend>,
    pub segmenter: Option<&'a dyn SegmenterBackend>,
    pub detector: Option<&'a dyn DetectorBackend>,
}

impl Dispatcher<'_> {
    pub fn handle(&self, request: Request) -> Response {
        let out = match request {
            Request::Handshake => Ok(Response::Handshake(
                self.info.clone().unwrap_or_else(|| BackendInfo::named("dispatcher")),
            )),
            Request::Track(r) => self
                .tracker
                .ok_or(BackendError::Unsupported("track"))
                .and_then(|t| t.track(&r))
                .map(Response::Track),
            Request::Segment(r) => self
                .segmenter
                .ok_or(BackendError::Unsupported("segment"))
                .and_then(|s| s.segment(&r))
                .map(Response::Segment),
            Request::Train(r) => self
                .detector
                .ok_or(BackendError::Unsupported("train"))
                .and_then(|d| d.train(&r))
                .map(Response::Train),
            Request::Infer(r) => self
                .detector
                .ok_or(BackendError::Unsupported("infer"))
                .and_then(|d| d.infer(&r))
                .map(Response::Infer),
        };
        out.unwrap_or_else(|e| Response::Error {
            message: e.to_string(),
        })
    }
}

/// Serves requests line by line until the input closes.
pub fn serve(
    input: impl BufRead,
    mut output: impl Write,
    mut handle: impl FnMut(Request) -> Response,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Ok(req) => handle(req),
            Err(e) => Response::Error {
                message: format!("unreadable request: {e}"),
            },
        };
        serde_json::to_writer(&mut output, &reply)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn messages_are_tagged() {
        let json = serde_json::to_string(&Request::Handshake).unwrap();
        assert_eq!(json, r#"{"type":"handshake"}"#);
        let r = Response::Error {
            message: "x".into(),
        };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"type":"error","message":"x"}"#);
        let info: Response = serde_json::from_str(
            r#"{"type":"handshake","name":"pips","version":"2","max_points":64,"max_chunk":8}"#,
        )
        .unwrap();
        assert!(matches!(info, Response::Handshake(BackendInfo { max_chunk: Some(8), .. })));
    }

    #[test]
    fn serve_answers_each_line() {
        let input = b"{\"type\":\"handshake\"}\n\nnot json\n{\"type\":\"track\",\"job_id\":\"j\",\"frames\":[],\"points\":[],\"geometry\":{\"width_px\":2,\"height_px\":2}}\n";
        let mut out = Vec::new();
        let d = Dispatcher::default();
        serve(&input[..], &mut out, |r| d.handle(r)).unwrap();
        let replies: Vec<Response> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(replies.len(), 3);
        assert!(matches!(replies[0], Response::Handshake(_)));
        assert!(matches!(replies[1], Response::Error { .. }));
        assert!(matches!(&replies[2], Response::Error { message } if message.contains("track")));
    }

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    #[test]
    fn process_backend_handshake() {
        let b = ProcessBackend::spawn(
            &sh(r#"read l; echo '{"type":"handshake","name":"fake","version":"0.1","max_prompts":3}'"#),
            Duration::from_secs(5),
        )
        .unwrap();
        let info = b.handshake().unwrap();
        assert_eq!(info.name, "fake");
        assert_eq!(info.max_prompts, Some(3));
        // The script exited; the channel reports it instead of hanging.
        assert!(b.handshake().is_err());
    }

    #[test]
    fn process_backend_times_out() {
        let b = ProcessBackend::spawn(&sh("read l; sleep 5"), Duration::from_millis(100)).unwrap();
        assert!(matches!(b.handshake(), Err(BackendError::Timeout(_))));
        assert!(matches!(b.handshake(), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn process_backend_relays_errors_and_garbage() {
        let b = ProcessBackend::spawn(
            &sh(r#"read l; echo '{"type":"error","message":"no gpu"}'; read l; echo garbage"#),
            Duration::from_secs(5),
        )
        .unwrap();
        assert!(matches!(b.handshake(), Err(BackendError::Rejected(m)) if m == "no gpu"));
        assert!(matches!(b.handshake(), Err(BackendError::Protocol(_))));
    }
}
