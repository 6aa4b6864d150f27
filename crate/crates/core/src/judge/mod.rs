//! Judge backends: live HTTP chat completions, a deterministic simulation,
//! and a content-addressed response cache that wraps either.

mod cache;
mod http;
mod simulated;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::prompt::{parse_judgment, ParsedJudgment, Prompt};

pub use cache::{CachedJudge, ResponseCache};
pub use http::{HttpJudge, HttpJudgeConfig, RoleMapping};
pub use simulated::{PairBehavior, SimulatedJudge, SimulatedJudgeSpec};

#[cfg(test)]
pub(crate) use http::mock as http_mock;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeRequest {
    pub prompt: Prompt,
    pub decoding: Decoding,
    pub model_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Live,
    Cache,
    Simulated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeResponse {
    pub raw_text: String,
    pub parsed: ParsedJudgment,
    pub provenance: Provenance,
    pub latency: Duration,
}

/// Anything that turns a request into response text. Implementations must
/// tolerate concurrent calls.
pub trait JudgeBackend: Send + Sync {
    fn complete(&self, request: &JudgeRequest) -> Result<(String, Provenance)>;
}

impl<B: JudgeBackend + ?Sized> JudgeBackend for &B {
    fn complete(&self, request: &JudgeRequest) -> Result<(String, Provenance)> {
        (**self).complete(request)
    }
}

impl<B: JudgeBackend + ?Sized> JudgeBackend for Box<B> {
    fn complete(&self, request: &JudgeRequest) -> Result<(String, Provenance)> {
        (**self).complete(request)
    }
}

pub fn query_judge(request: &JudgeRequest, backend: &dyn JudgeBackend) -> Result<JudgeResponse> {
    let start = Instant::now();
    let (raw_text, provenance) = backend.complete(request)?;
    Ok(JudgeResponse {
        parsed: parse_judgment(&raw_text),
        raw_text,
        provenance,
        latency: start.elapsed(),
    })
}

/// SHA-256 over model name, decoding settings and the rendered prompt,
/// hex encoded.
pub fn cache_key(request: &JudgeRequest) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(b"knowtag-judge-v1");
    field(request.model_name.as_bytes());
    field(&request.decoding.temperature.to_bits().to_le_bytes());
    field(&request.decoding.max_tokens.to_le_bytes());
    field(request.prompt.render().as_bytes());
    hex::encode(h.finalize())
}

/// A model name, decoding settings and backend bundled for repeated use.
#[derive(Clone, Copy)]
pub struct JudgeSession<'a> {
    pub backend: &'a dyn JudgeBackend,
    pub model_name: &'a str,
    pub decoding: Decoding,
}

impl<'a> JudgeSession<'a> {
    pub fn new(backend: &'a dyn JudgeBackend, model_name: &'a str, decoding: Decoding) -> Self {
        JudgeSession {
            backend,
            model_name,
            decoding,
        }
    }

    pub fn ask(&self, prompt: Prompt) -> Result<JudgeResponse> {
        let request = JudgeRequest {
            prompt,
            decoding: self.decoding,
            model_name: self.model_name.to_string(),
        };
        query_judge(&request, self.backend)
    }
}

/// Counts requests passed to the wrapped backend.
pub struct CountingJudge<B> {
    inner: B,
    count: AtomicUsize,
}

impl<B> CountingJudge<B> {
    pub fn new(inner: B) -> Self {
        CountingJudge {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: JudgeBackend> JudgeBackend for CountingJudge<B> {
    fn complete(&self, request: &JudgeRequest) -> Result<(String, Provenance)> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}
