use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{JudgeBackend, JudgeRequest, Provenance};
use crate::error::{Error, Result};

/// How the prompt is split across chat roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleMapping {
    /// The whole rendered prompt as one user message.
    #[default]
    SingleUser,
    /// Instruction as the system message, the rest as the user message.
    SystemInstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpJudgeConfig {
    pub base_url: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_retries: usize,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
    pub role_mapping: RoleMapping,
}

impl Default for HttpJudgeConfig {
    fn default() -> Self {
        HttpJudgeConfig {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 3,
            initial_backoff_ms: 500,
            timeout_secs: 120,
            role_mapping: RoleMapping::SingleUser,
        }
    }
}

/// OpenAI-style `POST {base_url}/chat/completions` client.
pub struct HttpJudge {
    config: HttpJudgeConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl HttpJudge {
    pub fn new(config: HttpJudgeConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env).ok();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpJudge {
            config,
            api_key,
            client,
        })
    }

    fn messages(&self, request: &JudgeRequest) -> serde_json::Value {
        match self.config.role_mapping {
            RoleMapping::SingleUser => json!([
                {"role": "user", "content": request.prompt.render()}
            ]),
            RoleMapping::SystemInstruction => json!([
                {"role": "system", "content": request.prompt.instruction_text},
                {"role": "user", "content": request.prompt.render_body()}
            ]),
        }
    }

    fn attempt(&self, url: &str, body: &serde_json::Value) -> std::result::Result<String, Attempt> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_client_error() {
            let text = resp.text().unwrap_or_default();
            return Err(Attempt::Fatal(Error::Config(format!(
                "judge endpoint rejected the request ({status}): {text}"
            ))));
        }
        if !status.is_success() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        let value: serde_json::Value = resp
            .json()
            .map_err(|e| Attempt::Retry(format!("undecodable response: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                Attempt::Fatal(Error::Format(
                    "response has no choices[0].message.content".into(),
                ))
            })
    }
}

impl JudgeBackend for HttpJudge {
    fn complete(&self, request: &JudgeRequest) -> Result<(String, Provenance)> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": request.model_name,
            "messages": self.messages(request),
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        });
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                thread::sleep(backoff);
                backoff *= 2;
            }
            match self.attempt(&url, &body) {
                Ok(text) => return Ok((text, Provenance::Live)),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(Error::BackendUnavailable {
            attempts: self.config.max_retries + 1,
            message: last,
        })
    }
}
