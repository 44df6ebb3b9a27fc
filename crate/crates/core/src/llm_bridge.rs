//! Language/vision model backends over a generic completion endpoint.
//!
//! Requests are `POST {"prompt": ..., "image": ...}` answered by
//! `{"text": ...}`. A replay backend serves canned answers keyed by the
//! SHA-256 of the request and never touches the network.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::execution::{Comparator, ExecutionError, Winner};
use crate::knowledge::{render_experience, retrieve, KnowledgeBase, PrecedenceRule};
use crate::model::{Degradation, DegradationProfile, Plan, Severity, TaskKind};
use crate::perception::{Evaluator, PerceptionError};
use crate::rng::Substream;
use crate::scheduling::{ScheduleError, Schedule, Scheduler};

pub const ENDPOINT_ENV: &str = "AGENT_BRIDGE_URL";

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid order: {0}")]
    InvalidPermutation(String),
    #[error("no replay entry for key {key} (prompt starts {prefix:?})")]
    ReplayMiss { key: String, prefix: String },
    #[error("bridge config: {0}")]
    Config(String),
}

fn default_timeout() -> f64 {
    30.0
}

fn default_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub replay_file: Option<PathBuf>,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            endpoint: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            replay_file: None,
        }
    }
}

impl BridgeConfig {
    /// Fills a missing endpoint from `AGENT_BRIDGE_URL`.
    pub fn with_env_endpoint(mut self) -> Self {
        if self.endpoint.is_none() {
            self.endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty());
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

impl CompletionRequest {
    pub fn text(prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            image: None,
        }
    }

    /// Hex SHA-256 of the prompt, with the image reference appended after a
    /// NUL byte when present.
    pub fn replay_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.prompt.as_bytes());
        if let Some(img) = &self.image {
            h.update([0u8]);
            h.update(img.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub trait Completion: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BridgeError>;
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    timeout: Duration,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpBackend {
            agent,
            endpoint: endpoint.into(),
            timeout,
        }
    }
}

impl Completion for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BridgeError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(req)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => BridgeError::Timeout(self.timeout),
                other => BridgeError::Transport(other.to_string()),
            })?;
        let body: CompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BridgeError::MalformedResponse(format!("expected {{\"text\": ...}}: {e}")))?;
        Ok(body.text)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum ReplayEntry {
    One(String),
    Sequence(Vec<String>),
}

/// Canned answers. A sequence entry serves its items in turn and then
/// repeats the last one.
pub struct ReplayBackend {
    entries: BTreeMap<String, ReplayEntry>,
    cursor: Mutex<BTreeMap<String, usize>>,
}

impl ReplayBackend {
    pub fn from_json(text: &str) -> Result<Self, BridgeError> {
        let entries = serde_json::from_str(text)
            .map_err(|e| BridgeError::Config(format!("replay file: {e}")))?;
        Ok(ReplayBackend {
            entries,
            cursor: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn load(path: &Path) -> Result<Self, BridgeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BridgeError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl Completion for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BridgeError> {
        let key = req.replay_key();
        match self.entries.get(&key) {
            Some(ReplayEntry::One(t)) => Ok(t.clone()),
            Some(ReplayEntry::Sequence(items)) if !items.is_empty() => {
                let mut cursor = self.cursor.lock().expect("replay cursor");
                let i = cursor.entry(key).or_insert(0);
                let t = items[(*i).min(items.len() - 1)].clone();
                *i += 1;
                Ok(t)
            }
            _ => Err(BridgeError::ReplayMiss {
                key,
                prefix: req.prompt.chars().take(60).collect(),
            }),
        }
    }
}

pub struct Bridge {
    pub backend: Box<dyn Completion>,
    pub max_retries: u32,
}

impl Bridge {
    /// Replay when `replay_file` is set, HTTP otherwise.
    pub fn from_config(cfg: &BridgeConfig) -> Result<Bridge, BridgeError> {
        let backend: Box<dyn Completion> = match (&cfg.replay_file, &cfg.endpoint) {
            (Some(path), _) => Box::new(ReplayBackend::load(path)?),
            (None, Some(url)) => {
                if cfg.timeout_secs.is_nan() || cfg.timeout_secs <= 0.0 {
                    return Err(BridgeError::Config("timeout_secs must be positive".into()));
                }
                Box::new(HttpBackend::new(url.clone(), Duration::from_secs_f64(cfg.timeout_secs)))
            }
            (None, None) => {
                return Err(BridgeError::Config(format!(
                    "no endpoint or replay_file (set {ENDPOINT_ENV})"
                )))
            }
        };
        Ok(Bridge {
            backend,
            max_retries: cfg.max_retries,
        })
    }
}

/// Python-style list literal: `['a', 'b']`.
pub fn py_list<S: AsRef<str>>(items: &[S]) -> String {
    let quoted: Vec<String> = items.iter().map(|s| format!("'{}'", s.as_ref())).collect();
    format!("[{}]", quoted.join(", "))
}

pub fn severity_prompt(degradation: &str) -> String {
    format!(
        "What's the severity of {degradation} in this image? Answer the question using a single word or phrase in the followings: very low, low, medium, high, very high."
    )
}

pub const COMPARE_PROMPT: &str = "Which of the two images, Image A or Image B, do you consider to be of better quality? Answer the question using a single word or phrase.";

pub fn schedule_prompt(
    degradations: &[Degradation],
    agenda: &[TaskKind],
    experience: &str,
    failed_tries: &[TaskKind],
) -> String {
    let degs: Vec<&str> = degradations.iter().map(|d| d.name()).collect();
    let tasks: Vec<&str> = agenda.iter().map(|t| t.name()).collect();
    let (degs, tasks) = (py_list(&degs), py_list(&tasks));
    let mut p = format!(
        "There's an image suffering from degradations {degs}. We will invoke dedicated tools to address these degradations, i.e., we will conduct these tasks: {tasks}. Now we need to determine the order of these unordered tasks. For your information, based on past trials, we have the following experience:\n{experience}\nBased on this experience, please give the correct order of the tasks. Your output must be a JSON object with two fields: \"thought\" and \"order\", where \"order\" must be a permutation of {tasks} in the order you determine."
    );
    if !failed_tries.is_empty() {
        let failed: Vec<&str> = failed_tries.iter().map(|t| t.name()).collect();
        let failed = py_list(&failed);
        p.push_str(&format!(
            "\nBesides, in attempts just now, we found the result is unsatisfactory if {failed} is conducted first. Remember not to arrange {failed} in the first place."
        ));
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteSchedule {
    pub plan: Plan,
    pub thought: String,
    pub attempts: u32,
}

#[derive(Deserialize)]
struct OrderReply {
    #[serde(default)]
    thought: String,
    order: Vec<String>,
}

/// The outermost `{...}` of `text`, tolerating code fences and chatter.
fn json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

fn parse_order(text: &str, agenda: &[TaskKind], failed: &[TaskKind]) -> Result<(Plan, String), BridgeError> {
    let obj = json_object(text).ok_or_else(|| BridgeError::MalformedResponse("no JSON object in reply".into()))?;
    let reply: OrderReply =
        serde_json::from_str(obj).map_err(|e| BridgeError::MalformedResponse(e.to_string()))?;
    let mut order = Vec::with_capacity(reply.order.len());
    for name in &reply.order {
        let t: TaskKind = name
            .parse()
            .map_err(|_| BridgeError::InvalidPermutation(format!("unknown task `{name}`")))?;
        order.push(t);
    }
    let plan = Plan::new(order).map_err(|e| BridgeError::InvalidPermutation(e.to_string()))?;
    if !plan.is_permutation_of(agenda) {
        return Err(BridgeError::InvalidPermutation(format!("{plan} is not a permutation of the agenda")));
    }
    if let Some(first) = plan.first() {
        if failed.contains(&first) {
            return Err(BridgeError::InvalidPermutation(format!("{plan} starts with failed task {first}")));
        }
    }
    Ok((plan, reply.thought))
}

/// Asks the backend for an order, re-asking on invalid replies up to
/// `max_retries` times.
pub fn remote_schedule(
    bridge: &Bridge,
    degradations: &[Degradation],
    agenda: &[TaskKind],
    experience: &str,
    failed_tries: &[TaskKind],
) -> Result<RemoteSchedule, BridgeError> {
    if agenda.is_empty() {
        return Err(BridgeError::InvalidPermutation("empty agenda".into()));
    }
    let req = CompletionRequest::text(schedule_prompt(degradations, agenda, experience, failed_tries));
    let mut last = None;
    for attempt in 0..=bridge.max_retries {
        let text = bridge.backend.complete(&req)?;
        match parse_order(&text, agenda, failed_tries) {
            Ok((plan, thought)) => {
                return Ok(RemoteSchedule {
                    plan,
                    thought,
                    attempts: attempt + 1,
                })
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

pub fn parse_severity(text: &str) -> Result<Severity, BridgeError> {
    let norm = text.trim().trim_end_matches('.').trim().to_lowercase();
    Severity::ALL
        .into_iter()
        .find(|s| s.name() == norm)
        .ok_or_else(|| BridgeError::MalformedResponse(format!("`{}` is not a severity", text.trim())))
}

pub fn remote_assess(bridge: &Bridge, image_ref: &str, degradation: Degradation) -> Result<Severity, BridgeError> {
    let req = CompletionRequest {
        prompt: severity_prompt(degradation.name()),
        image: Some(image_ref.to_string()),
    };
    parse_severity(&bridge.backend.complete(&req)?)
}

/// Image handle for a simulated profile: the origin plus the tool chain.
pub fn image_ref(profile: &DegradationProfile) -> String {
    let mut s = profile.origin.clone();
    for step in &profile.history {
        s.push('>');
        s.push_str(&step.tool);
    }
    s
}

fn rule_sentence(r: &PrecedenceRule) -> String {
    if r.indifferent {
        format!("The order of {} and {} makes little difference.", r.before, r.after)
    } else {
        format!("{} should be performed before {}.", r.before, r.after)
    }
}

/// Experience text for an agenda: exact-match records in prose, else the
/// applicable precedence rules.
pub fn experience_text(kb: &KnowledgeBase, agenda: &BTreeSet<TaskKind>) -> String {
    let found = retrieve(kb, agenda);
    if !found.records.is_empty() {
        return render_experience(&found.records);
    }
    if found.rules.is_empty() {
        return "No relevant experience.".into();
    }
    found.rules.iter().map(rule_sentence).collect::<Vec<_>>().join(" ")
}

pub struct LlmScheduler {
    pub bridge: Arc<Bridge>,
}

impl Scheduler for LlmScheduler {
    fn name(&self) -> &str {
        "llm"
    }

    fn schedule(
        &self,
        agenda: &[TaskKind],
        kb: &KnowledgeBase,
        banned_first: &BTreeSet<TaskKind>,
        _stream: Substream,
    ) -> Result<Schedule, ScheduleError> {
        if agenda.is_empty() {
            return Err(ScheduleError::EmptyAgenda);
        }
        let set: BTreeSet<TaskKind> = agenda.iter().copied().collect();
        let degradations: Vec<Degradation> = agenda.iter().map(|t| t.degradation()).collect();
        let failed: Vec<TaskKind> = banned_first.iter().copied().collect();
        let out = remote_schedule(&self.bridge, &degradations, agenda, &experience_text(kb, &set), &failed)
            .map_err(|e| ScheduleError::Backend(e.to_string()))?;
        Ok(Schedule {
            plan: out.plan,
            notes: vec![format!("thought: {}", out.thought)],
        })
    }
}

pub struct RemoteEvaluator {
    pub bridge: Arc<Bridge>,
}

impl Evaluator for RemoteEvaluator {
    fn assess(
        &self,
        profile: &DegradationProfile,
        degradation: Degradation,
        _stream: Substream,
    ) -> Result<Severity, PerceptionError> {
        remote_assess(&self.bridge, &image_ref(profile), degradation)
            .map_err(|e| PerceptionError::Backend(e.to_string()))
    }
}

/// Asks the backend which of two images looks better; the reply must name
/// Image A or Image B.
pub struct RemoteComparator {
    pub bridge: Arc<Bridge>,
}

pub fn parse_winner(text: &str) -> Result<Winner, BridgeError> {
    let norm = text.trim().trim_end_matches('.').trim().to_lowercase();
    match norm.as_str() {
        "image a" | "a" => Ok(Winner::First),
        "image b" | "b" => Ok(Winner::Second),
        _ => Err(BridgeError::MalformedResponse(format!("`{}` names neither image", text.trim()))),
    }
}

impl Comparator for RemoteComparator {
    fn compare(&mut self, a: &DegradationProfile, b: &DegradationProfile, _call: u64) -> Result<Winner, ExecutionError> {
        let req = CompletionRequest {
            prompt: COMPARE_PROMPT.to_string(),
            image: Some(format!("{}|{}", image_ref(a), image_ref(b))),
        };
        let backend_err = |e: BridgeError| ExecutionError::Perception(PerceptionError::Backend(e.to_string()));
        parse_winner(&self.bridge.backend.complete(&req).map_err(backend_err)?).map_err(backend_err)
    }
}

/// Replay fixture entries that make the bridge answer like a perfect
/// evaluator on the given profiles.
pub fn oracle_replay_entries(profiles: &[DegradationProfile]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for p in profiles {
        for d in Degradation::ALL {
            let req = CompletionRequest {
                prompt: severity_prompt(d.name()),
                image: Some(image_ref(p)),
            };
            out.insert(req.replay_key(), p.severity(d).name().to_string());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execution::assessed_multiset;
    use crate::knowledge::reported_knowledge_base;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use TaskKind::*;

    fn replay(map: &[(String, serde_json::Value)], retries: u32) -> Bridge {
        let obj: serde_json::Map<String, serde_json::Value> = map.iter().cloned().collect();
        Bridge {
            backend: Box::new(ReplayBackend::from_json(&serde_json::Value::Object(obj).to_string()).unwrap()),
            max_retries: retries,
        }
    }

    const RAIN_HAZE_GOLDEN: &str = "There's an image suffering from degradations ['rain', 'haze']. We will invoke dedicated tools to address these degradations, i.e., we will conduct these tasks: ['deraining', 'dehazing']. Now we need to determine the order of these unordered tasks. For your information, based on past trials, we have the following experience:\nEXP\nBased on this experience, please give the correct order of the tasks. Your output must be a JSON object with two fields: \"thought\" and \"order\", where \"order\" must be a permutation of ['deraining', 'dehazing'] in the order you determine.";

    #[test]
    fn prompt_golden() {
        let p = schedule_prompt(&[Degradation::Rain, Degradation::Haze], &[Deraining, Dehazing], "EXP", &[]);
        assert_eq!(p, RAIN_HAZE_GOLDEN);
        let q = schedule_prompt(&[Degradation::Rain, Degradation::Haze], &[Deraining, Dehazing], "EXP", &[Deraining]);
        assert_eq!(
            q,
            format!("{RAIN_HAZE_GOLDEN}\nBesides, in attempts just now, we found the result is unsatisfactory if ['deraining'] is conducted first. Remember not to arrange ['deraining'] in the first place.")
        );
        assert_eq!(
            severity_prompt("noise"),
            "What's the severity of noise in this image? Answer the question using a single word or phrase in the followings: very low, low, medium, high, very high."
        );
    }

    #[test]
    fn schedule_from_replay() {
        let prompt = schedule_prompt(&[Degradation::Rain, Degradation::Haze], &[Deraining, Dehazing], "EXP", &[]);
        let key = CompletionRequest::text(prompt).replay_key();
        let b = replay(&[(key, serde_json::json!("{\"thought\":\"rain first\",\"order\":[\"deraining\",\"dehazing\"]}"))], 2);
        let out = remote_schedule(&b, &[Degradation::Rain, Degradation::Haze], &[Deraining, Dehazing], "EXP", &[]).unwrap();
        assert_eq!(out.plan.tasks(), &[Deraining, Dehazing]);
        assert_eq!(out.thought, "rain first");
        assert_eq!(out.attempts, 1);
    }

    #[test]
    fn invalid_permutation_after_retries() {
        let prompt = schedule_prompt(&[Degradation::Rain, Degradation::Haze], &[Deraining, Dehazing], "EXP", &[]);
        let key = CompletionRequest::text(prompt).replay_key();
        let b = replay(&[(key, serde_json::json!("{\"thought\":\"\",\"order\":[\"dehazing\"]}"))], 2);
        let err = remote_schedule(&b, &[Degradation::Rain, Degradation::Haze], &[Deraining, Dehazing], "EXP", &[]).unwrap_err();
        assert!(matches!(err, BridgeError::InvalidPermutation(_)), "{err}");
    }

    #[test]
    fn banned_first_is_retried() {
        let prompt = schedule_prompt(&[Degradation::Rain, Degradation::Haze], &[Deraining, Dehazing], "EXP", &[Deraining]);
        let key = CompletionRequest::text(prompt).replay_key();
        let b = replay(
            &[(key, serde_json::json!([
                "{\"thought\":\"a\",\"order\":[\"deraining\",\"dehazing\"]}",
                "```json\n{\"thought\":\"b\",\"order\":[\"dehazing\",\"deraining\"]}\n```"
            ]))],
            2,
        );
        let out = remote_schedule(&b, &[Degradation::Rain, Degradation::Haze], &[Deraining, Dehazing], "EXP", &[Deraining]).unwrap();
        assert_eq!(out.plan.tasks(), &[Dehazing, Deraining]);
        assert_eq!(out.attempts, 2);
    }

    #[test]
    fn malformed_reply() {
        let prompt = schedule_prompt(&[Degradation::Rain], &[Deraining], "EXP", &[]);
        let key = CompletionRequest::text(prompt).replay_key();
        let b = replay(&[(key, serde_json::json!("deraining please"))], 1);
        let err = remote_schedule(&b, &[Degradation::Rain], &[Deraining], "EXP", &[]).unwrap_err();
        assert!(matches!(err, BridgeError::MalformedResponse(_)));
    }

    #[test]
    fn severity_parsing() {
        assert_eq!(parse_severity("very low").unwrap(), Severity::VeryLow);
        assert_eq!(parse_severity(" Medium.\n").unwrap(), Severity::Medium);
        assert!(matches!(parse_severity("fairly bad"), Err(BridgeError::MalformedResponse(_))));
        assert_eq!(parse_winner("Image B").unwrap(), Winner::Second);
        assert!(parse_winner("both").is_err());
    }

    #[test]
    fn replay_evaluator_matches_oracle() {
        let p = DegradationProfile::new("img-7").with(Degradation::Noise, Severity::High);
        let entries = oracle_replay_entries(std::slice::from_ref(&p));
        let b = Arc::new(Bridge {
            backend: Box::new(ReplayBackend::from_json(&serde_json::to_string(&entries).unwrap()).unwrap()),
            max_retries: 0,
        });
        let ev = RemoteEvaluator { bridge: b };
        assert_eq!(assessed_multiset(&ev, &p, Substream::root(0)).unwrap(), vec![Severity::High]);
        let other = DegradationProfile::new("img-8");
        assert!(ev.assess(&other, Degradation::Noise, Substream::root(0)).is_err());
    }

    #[test]
    fn llm_scheduler_uses_experience() {
        let kb = reported_knowledge_base();
        let set: BTreeSet<TaskKind> = [Deraining, Dehazing].into();
        let exp = experience_text(&kb, &set);
        assert!(exp.starts_with("To address rain+haze in the image"), "{exp}");
        let prompt = schedule_prompt(&[Degradation::Rain, Degradation::Haze], &[Deraining, Dehazing], &exp, &[]);
        let key = CompletionRequest::text(prompt).replay_key();
        let b = Arc::new(replay(&[(key, serde_json::json!("{\"thought\":\"t\",\"order\":[\"deraining\",\"dehazing\"]}"))], 0));
        let s = LlmScheduler { bridge: b }
            .schedule(&[Deraining, Dehazing], &kb, &BTreeSet::new(), Substream::root(0))
            .unwrap();
        assert_eq!(s.plan.tasks(), &[Deraining, Dehazing]);
        assert_eq!(s.notes, vec!["thought: t".to_string()]);
    }

    #[test]
    fn replay_never_connects() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.json");
        let req = CompletionRequest::text("hello");
        std::fs::write(&path, format!("{{\"{}\": \"world\"}}", req.replay_key())).unwrap();
        let cfg = BridgeConfig {
            endpoint: Some(format!("http://{}/", listener.local_addr().unwrap())),
            replay_file: Some(path),
            ..Default::default()
        };
        let b = Bridge::from_config(&cfg).unwrap();
        assert_eq!(b.backend.complete(&req).unwrap(), "world");
        assert!(matches!(b.backend.complete(&CompletionRequest::text("other")), Err(BridgeError::ReplayMiss { .. })));
        assert_eq!(listener.accept().unwrap_err().kind(), std::io::ErrorKind::WouldBlock);
    }

    fn serve_once(reply: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/complete", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (mut sock, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = sock.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf).to_string();
                if let Some(split) = text.find("\r\n\r\n") {
                    let len = text[..split]
                        .lines()
                        .find_map(|l| l.to_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if buf.len() >= split + 4 + len {
                        let body = text[split + 4..].to_string();
                        write!(sock, "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}", reply.len(), reply).unwrap();
                        return body;
                    }
                }
                if n == 0 {
                    return String::new();
                }
            }
        });
        (url, handle)
    }

    #[test]
    fn http_round_trip() {
        let (url, handle) = serve_once("{\"text\": \"Low\"}");
        let b = Bridge::from_config(&BridgeConfig {
            endpoint: Some(url),
            timeout_secs: 5.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(remote_assess(&b, "img", Degradation::Haze).unwrap(), Severity::Low);
        let sent: CompletionRequest = serde_json::from_str(&handle.join().unwrap()).unwrap();
        assert_eq!(sent.prompt, severity_prompt("haze"));
        assert_eq!(sent.image.as_deref(), Some("img"));
    }

    #[test]
    fn http_bad_body_and_refused() {
        let (url, handle) = serve_once("{\"answer\": 1}");
        let b = Bridge::from_config(&BridgeConfig {
            endpoint: Some(url),
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(b.backend.complete(&CompletionRequest::text("x")), Err(BridgeError::MalformedResponse(_))));
        handle.join().unwrap();

        let closed = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", closed.local_addr().unwrap());
        drop(closed);
        let b = Bridge::from_config(&BridgeConfig {
            endpoint: Some(url),
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(b.backend.complete(&CompletionRequest::text("x")), Err(BridgeError::Transport(_))));
        assert!(Bridge::from_config(&BridgeConfig::default()).is_err());
    }
}
