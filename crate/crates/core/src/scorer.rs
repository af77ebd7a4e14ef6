//! Line-delimited JSON protocol for out-of-process scorers.
//!
//! Requests, one per line on the child's stdin:
//!
//! ```text
//! {"op":"embed","kind":"semantic","image":"<base64 raw f32 LE>"}
//! {"op":"lpips","a":"<base64>","b":"<base64>"}
//! ```
//!
//! Responses, one per line on stdout: `{"values":[...]}` for `embed` (any
//! length ≥ 1, normalized on receipt), `{"value":0.12}` for `lpips`, or
//! `{"error":"..."}`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::encoders::{EmbedVector, EncoderKind, Scorer};
use crate::toyworld::ToyImage;
use crate::{Error, Result};

/// Environment variable holding the scorer command line.
pub const SCORER_ENV: &str = "ROLEKIT_SCORER_CMD";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Embed { kind: EncoderKind, image: String },
    Lpips { a: String, b: String },
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Response {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn encode_image_b64(image: &ToyImage) -> String {
    STANDARD.encode(image.to_le_bytes())
}

pub fn decode_image_b64(data: &str) -> Result<ToyImage> {
    let bytes = STANDARD.decode(data).map_err(|e| Error::Scorer(format!("bad base64: {e}")))?;
    ToyImage::from_le_bytes(&bytes)
}

fn handle(scorer: &dyn Scorer, line: &str) -> Response {
    let result = (|| -> Result<Response> {
        let req: Request = serde_json::from_str(line)?;
        Ok(match req {
            Request::Embed { kind, image } => {
                let e = scorer.embed(&decode_image_b64(&image)?, kind)?;
                Response { values: Some(e.values().to_vec()), ..Default::default() }
            }
            Request::Lpips { a, b } => {
                let d = scorer.perceptual_distance(&decode_image_b64(&a)?, &decode_image_b64(&b)?)?;
                Response { value: Some(d), ..Default::default() }
            }
        })
    })();
    result.unwrap_or_else(|e| Response { error: Some(e.to_string()), ..Default::default() })
}

/// Serves `scorer` over the protocol until `input` closes.
pub fn serve(scorer: &dyn Scorer, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle(scorer, &line);
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

struct Pipe {
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A child process speaking the scorer protocol. Calls are serialized.
pub struct ProcessScorer {
    child: Mutex<Child>,
    pipe: Mutex<Pipe>,
}

impl ProcessScorer {
    /// Spawns `command`, split on whitespace into program and arguments.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts.next().ok_or_else(|| Error::Scorer("empty scorer command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Scorer(format!("cannot spawn `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { child: Mutex::new(child), pipe: Mutex::new(Pipe { stdin, stdout }) })
    }

    fn call(&self, req: &Request) -> Result<Response> {
        let mut pipe = self.pipe.lock().expect("scorer pipe poisoned");
        let mut line = serde_json::to_string(req)?;
        line.push('\n');
        pipe.stdin
            .write_all(line.as_bytes())
            .and_then(|_| pipe.stdin.flush())
            .map_err(|e| Error::Scorer(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let n = pipe.stdout.read_line(&mut reply).map_err(|e| Error::Scorer(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::Scorer("scorer closed its output".into()));
        }
        let resp: Response = serde_json::from_str(&reply)?;
        if let Some(err) = resp.error {
            return Err(Error::Scorer(err));
        }
        Ok(resp)
    }
}

impl Scorer for ProcessScorer {
    fn embed(&self, image: &ToyImage, kind: EncoderKind) -> Result<EmbedVector> {
        let resp = self.call(&Request::Embed { kind, image: encode_image_b64(image) })?;
        let values = resp.values.ok_or_else(|| Error::Scorer("embed response without `values`".into()))?;
        EmbedVector::unit_or_normalized(values)
    }

    fn perceptual_distance(&self, a: &ToyImage, b: &ToyImage) -> Result<f64> {
        let resp = self.call(&Request::Lpips { a: encode_image_b64(a), b: encode_image_b64(b) })?;
        resp.value.ok_or_else(|| Error::Scorer("lpips response without `value`".into()))
    }
}

impl Drop for ProcessScorer {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::BuiltinScorer;

    #[test]
    fn serve_answers_embed_and_lpips() {
        let scorer = BuiltinScorer::default();
        let img = ToyImage::filled(0.25);
        let req = [
            serde_json::to_string(&Request::Embed { kind: EncoderKind::Structure, image: encode_image_b64(&img) })
                .unwrap(),
            serde_json::to_string(&Request::Lpips {
                a: encode_image_b64(&img),
                b: encode_image_b64(&ToyImage::zeros()),
            })
            .unwrap(),
            r#"{"op":"frobnicate"}"#.to_string(),
        ]
        .join("\n");
        let mut out = Vec::new();
        serve(&scorer, req.as_bytes(), &mut out).unwrap();
        let lines: Vec<Response> =
            String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].values.as_deref(), Some(scorer.embed(&img, EncoderKind::Structure).unwrap().values()));
        assert_eq!(lines[1].value, Some(0.25));
        assert!(lines[2].error.is_some());
    }

    #[test]
    fn image_payload_round_trips() {
        let img = ToyImage::filled(0.7);
        assert_eq!(decode_image_b64(&encode_image_b64(&img)).unwrap(), img);
        assert!(decode_image_b64("!!").is_err());
    }
}
