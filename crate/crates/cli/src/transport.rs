//! Backend clients: JSON over HTTP POST, or JSON on a subprocess's stdin and
//! stdout (one process per request).

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::Duration;

use gensynth_core::backend::{
    BackendError, DetectorBackend, DetectorRunOutput, ImageSynthesizer, OpenVocabDetector, OpenVocabRequest,
    OpenVocabResponse, SynthesisRequest, SynthesisResponse, TextBackend, TextRequest, TextResponse,
};
use gensynth_core::trainer::DetectorJobSpec;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Mock,
    Http(String),
    Command(Vec<String>),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "mock" {
            Ok(Endpoint::Mock)
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(Endpoint::Http(s.to_string()))
        } else if let Some(cmd) = s.strip_prefix("cmd:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err("`cmd:` needs a program".into());
            }
            Ok(Endpoint::Command(argv))
        } else {
            Err(format!("{s:?} is not `mock`, an http(s) url, or `cmd:<program>`"))
        }
    }
}

pub struct JsonClient {
    endpoint: Endpoint,
    agent: ureq::Agent,
}

impl JsonClient {
    pub fn new(endpoint: Endpoint, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { endpoint, agent }
    }

    pub fn call<Q: Serialize, R: DeserializeOwned>(&self, request: &Q) -> Result<R, BackendError> {
        let body = serde_json::to_vec(request).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let text = match &self.endpoint {
            Endpoint::Mock => return Err(BackendError::Transport("mock endpoint has no transport".into())),
            Endpoint::Http(url) => self.post(url, body)?,
            Endpoint::Command(argv) => run_command(argv, &body)?,
        };
        serde_json::from_str(&text).map_err(|e| BackendError::Malformed(format!("{e}: {}", truncate(&text))))
    }

    fn post(&self, url: &str, body: Vec<u8>) -> Result<String, BackendError> {
        let mut resp = self
            .agent
            .post(url)
            .header("content-type", "application/json")
            .send(&body[..])
            .map_err(|e| match e {
                ureq::Error::StatusCode(code) => BackendError::Failed(format!("{url} answered HTTP {code}")),
                other => BackendError::Transport(format!("{url}: {other}")),
            })?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(format!("{url}: {e}")))
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(200).collect()
}

fn run_command(argv: &[String], body: &[u8]) -> Result<String, BackendError> {
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| BackendError::Transport(format!("{}: {e}", argv[0])))?;
    {
        let mut stdin = child.stdin.take().expect("stdin is piped");
        stdin
            .write_all(body)
            .map_err(|e| BackendError::Transport(format!("{}: {e}", argv[0])))?;
    }
    let mut out = String::new();
    child
        .stdout
        .take()
        .expect("stdout is piped")
        .read_to_string(&mut out)
        .map_err(|e| BackendError::Transport(e.to_string()))?;
    let status = child.wait().map_err(|e| BackendError::Transport(e.to_string()))?;
    if !status.success() {
        let mut err = String::new();
        if let Some(mut s) = child.stderr.take() {
            let _ = s.read_to_string(&mut err);
        }
        return Err(BackendError::Failed(format!("{} exited with {status}: {}", argv[0], truncate(err.trim()))));
    }
    Ok(out)
}

impl TextBackend for JsonClient {
    fn complete(&self, request: &TextRequest) -> Result<TextResponse, BackendError> {
        self.call(request)
    }
}

impl ImageSynthesizer for JsonClient {
    fn synthesize(&self, request: &SynthesisRequest) -> Result<SynthesisResponse, BackendError> {
        self.call(request)
    }
}

impl OpenVocabDetector for JsonClient {
    fn detect(&self, request: &OpenVocabRequest) -> Result<OpenVocabResponse, BackendError> {
        self.call(request)
    }
}

impl DetectorBackend for JsonClient {
    fn train(&self, spec: &DetectorJobSpec) -> Result<DetectorRunOutput, BackendError> {
        self.call(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_forms() {
        assert_eq!(Endpoint::parse("mock"), Ok(Endpoint::Mock));
        assert_eq!(Endpoint::parse("https://h/x"), Ok(Endpoint::Http("https://h/x".into())));
        assert_eq!(
            Endpoint::parse("cmd:python3 caption.py --fast"),
            Ok(Endpoint::Command(vec!["python3".into(), "caption.py".into(), "--fast".into()]))
        );
        assert!(Endpoint::parse("cmd:").is_err());
        assert!(Endpoint::parse("grpc://h").is_err());
    }

    #[cfg(unix)]
    #[test]
    fn subprocess_round_trip() {
        // `cat` echoes the request, which parses as the same type.
        let client = JsonClient::new(Endpoint::Command(vec!["cat".into()]), Duration::from_secs(5));
        let req = OpenVocabRequest {
            image_uri: "a.png".into(),
            phrase: "military vehicle".into(),
        };
        let back: OpenVocabRequest = client.call(&req).unwrap();
        assert_eq!(back, req);
        let failing = JsonClient::new(Endpoint::Command(vec!["false".into()]), Duration::from_secs(5));
        assert!(matches!(failing.call::<_, OpenVocabRequest>(&req), Err(BackendError::Failed(_))));
    }
}
