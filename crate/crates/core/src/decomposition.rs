//! Part decomposition backends.
//!
//! The remote backend talks to a chat-completion compatible endpoint and
//! expects the reply content to be exactly one JSON object
//! `{"object": .., "grasp_parts": [..], "avoid_parts": [..]}`. A reply that
//! does not parse gets one repair request; a second bad reply is an error.
//! The fixture backend serves decompositions from a JSON table keyed by task.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{PartDecomposition, TaskRequest};

/// Key of the optional catch-all entry in a fixture table.
pub const FIXTURE_DEFAULT_KEY: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecompositionBackendConfig {
    Remote {
        endpoint_url: String,
        model_name: String,
        api_key_env_var: String,
        #[serde(default)]
        temperature: f64,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_timeout")]
        request_timeout: f64,
    },
    Fixture {
        /// Falls back to the scene's `decomposition.json` when absent.
        #[serde(default)]
        fixture_path: Option<PathBuf>,
    },
}

fn default_retries() -> u32 {
    1
}

fn default_timeout() -> f64 {
    60.0
}

impl Default for DecompositionBackendConfig {
    fn default() -> Self {
        DecompositionBackendConfig::Fixture { fixture_path: None }
    }
}

impl DecompositionBackendConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DecompositionBackendConfig::Remote {
                endpoint_url,
                model_name,
                api_key_env_var,
                temperature,
                ..
            } => {
                url_like(endpoint_url, "decomposition endpoint_url")?;
                if model_name.trim().is_empty() {
                    return Err(Error::invalid("decomposition config", "model_name is empty"));
                }
                if api_key_env_var.trim().is_empty() {
                    return Err(Error::invalid("decomposition config", "api_key_env_var is empty"));
                }
                if !(*temperature >= 0.0) {
                    return Err(Error::invalid("decomposition config", "temperature must be >= 0"));
                }
                Ok(())
            }
            DecompositionBackendConfig::Fixture { .. } => Ok(()),
        }
    }
}

pub(crate) fn url_like(url: &str, what: &'static str) -> Result<()> {
    if url.starts_with("http://") || url.starts_with("https://") {
        Ok(())
    } else {
        Err(Error::invalid(what, format!("{url:?} is not an http(s) URL")))
    }
}

/// System and user messages sent to the language backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

const SYSTEM_PROMPT: &str = "You plan robot grasps. Given a manipulation task, \
pick the single object the robot must pick up to carry it out and split that \
object into named parts. List the parts the gripper should hold in \
\"grasp_parts\" and the parts the gripper must keep clear of in \"avoid_parts\". \
Use short, common part names that a segmentation model can find in an image. \
Reply with one JSON object and nothing else, using exactly this schema:\n\
{\"object\": string, \"grasp_parts\": [string, ...], \"avoid_parts\": [string, ...]}\n\
\"grasp_parts\" must contain at least one entry. No part may appear in both lists.";

const REPAIR_PROMPT: &str = "That reply was not a single valid JSON object with \
keys \"object\", \"grasp_parts\" and \"avoid_parts\". Reply again with only the JSON object.";

pub fn build_prompt(task: &TaskRequest) -> Prompt {
    Prompt {
        system: SYSTEM_PROMPT.to_string(),
        user: format!("Task: {}", task.task.trim()),
    }
}

/// Wire form of a decomposition, shared by replies and fixture tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionReply {
    pub object: String,
    pub grasp_parts: Vec<String>,
    #[serde(default)]
    pub avoid_parts: Vec<String>,
}

impl DecompositionReply {
    pub fn into_decomposition(self) -> Result<PartDecomposition> {
        PartDecomposition::new(self.object, self.grasp_parts, self.avoid_parts)
    }
}

impl From<&PartDecomposition> for DecompositionReply {
    fn from(d: &PartDecomposition) -> Self {
        Self {
            object: d.object_name().to_string(),
            grasp_parts: d.desirable_parts().to_vec(),
            avoid_parts: d.undesirable_parts().to_vec(),
        }
    }
}

/// Parses reply content that must be a single JSON object.
pub fn parse_reply(content: &str) -> Result<DecompositionReply> {
    serde_json::from_str(content.trim())
        .map_err(|e| Error::MalformedDecomposition(format!("{e}: {}", truncate(content, 200))))
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

pub trait Decomposer: Send + Sync {
    fn decompose(&self, task: &TaskRequest) -> Result<PartDecomposition>;
}

/// Exact-match table from task string to decomposition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureTable(pub BTreeMap<String, DecompositionReply>);

impl FixtureTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Fixture(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Fixture(format!("{}: {e}", path.display())))
    }

    pub fn lookup(&self, task: &TaskRequest) -> Option<&DecompositionReply> {
        self.0
            .get(task.task.trim())
            .or_else(|| self.0.get(FIXTURE_DEFAULT_KEY))
    }
}

impl Decomposer for FixtureTable {
    fn decompose(&self, task: &TaskRequest) -> Result<PartDecomposition> {
        self.lookup(task)
            .cloned()
            .ok_or_else(|| {
                Error::MalformedDecomposition(format!("fixture has no entry for task {:?}", task.task))
            })?
            .into_decomposition()
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

#[derive(Serialize, Debug)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize, Debug)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize, Debug)]
struct ChatChoice {
    message: ChatMessage,
}

pub struct RemoteDecomposer {
    client: reqwest::blocking::Client,
    endpoint_url: String,
    model_name: String,
    api_key: Option<String>,
    temperature: f64,
    max_retries: u32,
}

impl RemoteDecomposer {
    /// Reads the API key from `api_key_env_var`; a missing variable sends no
    /// authorization header.
    pub fn new(
        endpoint_url: &str,
        model_name: &str,
        api_key_env_var: &str,
        temperature: f64,
        max_retries: u32,
        timeout: Duration,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            client,
            endpoint_url: endpoint_url.to_string(),
            model_name: model_name.to_string(),
            api_key: std::env::var(api_key_env_var).ok(),
            temperature,
            max_retries,
        })
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let body = ChatRequest {
            model: &self.model_name,
            messages,
            temperature: self.temperature,
        };
        let mut last_err = None;
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                log::warn!("retrying decomposition request (attempt {})", attempt + 1);
            }
            let mut req = self.client.post(&self.endpoint_url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: ChatResponse = resp.json().map_err(|e| {
                        Error::MalformedDecomposition(format!("not a chat completion: {e}"))
                    })?;
                    return parsed
                        .choices
                        .into_iter()
                        .next()
                        .map(|c| c.message.content)
                        .ok_or_else(|| Error::MalformedDecomposition("reply has no choices".into()));
                }
                Ok(resp) => last_err = Some(format!("HTTP {}", resp.status())),
                Err(e) => last_err = Some(e.to_string()),
            }
        }
        Err(Error::BackendUnavailable(format!(
            "{}: {}",
            self.endpoint_url,
            last_err.unwrap_or_default()
        )))
    }
}

impl Decomposer for RemoteDecomposer {
    fn decompose(&self, task: &TaskRequest) -> Result<PartDecomposition> {
        let prompt = build_prompt(task);
        let mut messages = vec![
            ChatMessage::new("system", prompt.system),
            ChatMessage::new("user", prompt.user),
        ];
        let first = self.complete(&messages)?;
        let reply = match parse_reply(&first) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("decomposition reply unparseable, asking for repair: {e}");
                messages.push(ChatMessage::new("assistant", first));
                messages.push(ChatMessage::new("user", REPAIR_PROMPT));
                parse_reply(&self.complete(&messages)?)?
            }
        };
        reply.into_decomposition()
    }
}

/// Builds the backend for `config`. `scene_default` is used by the fixture
/// backend when no path is configured.
pub fn backend(config: &DecompositionBackendConfig, scene_default: Option<&Path>) -> Result<Box<dyn Decomposer>> {
    config.validate()?;
    Ok(match config {
        DecompositionBackendConfig::Remote {
            endpoint_url,
            model_name,
            api_key_env_var,
            temperature,
            max_retries,
            request_timeout,
        } => Box::new(RemoteDecomposer::new(
            endpoint_url,
            model_name,
            api_key_env_var,
            *temperature,
            *max_retries,
            Duration::from_secs_f64(*request_timeout),
        )?),
        DecompositionBackendConfig::Fixture { fixture_path } => {
            let path = fixture_path
                .as_deref()
                .or(scene_default)
                .ok_or_else(|| Error::Usage("fixture decomposition backend needs a fixture_path".into()))?;
            Box::new(FixtureTable::load(path)?)
        }
    })
}

pub fn decompose(task: &TaskRequest, config: &DecompositionBackendConfig) -> Result<PartDecomposition> {
    backend(config, None)?.decompose(task)
}

/// Chat-completion envelope carrying `content`, as an endpoint would return.
pub fn chat_completion_body(content: &str) -> serde_json::Value {
    json!({
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
    })
}
