//! Budgeted, cached access to LLM backends.
//!
//! Templates render deterministically from slot maps; responses are
//! validated against the template's expected-output schema with one
//! repair retry. The response cache is keyed by (backend id, rendered
//! prompt hash), so identical prompts never consume budget twice, and
//! budgets are hard stops checked before any backend invocation.
//!
//! All tests run against [`MockBackend`], whose responses are a pure
//! function of (rendered prompt, seed, rule table). A real HTTP backend
//! is an optional adapter: implement [`Backend`] and hand it to
//! [`Gateway::new`]; the `gateway.backend = "http"` config key reports it
//! unavailable in this build rather than failing silently.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::util::{fnv1a64, sha256_hex};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("slot `{0}` is not bound")]
    MissingSlot(String),
    #[error("duplicate slot `{0}` in template")]
    DuplicateSlot(String),
    #[error("gateway budget exhausted: {0}")]
    BudgetExhausted(String),
    #[error("response failed schema validation after retry: {0}")]
    SchemaInvalid(String),
    #[error("backend `{0}` is not available: {1}")]
    BackendUnavailable(String, String),
}

/// Character-count / 4 token estimate. Real backends may supply exact
/// counts; batching needs a backend-independent figure.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64 + 3) / 4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum PromptSegment {
    Literal(String),
    Slot(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JsonKind {
    String,
    Number,
    Bool,
    Array,
    Object,
}

impl JsonKind {
    fn matches(&self, value: &Value) -> bool {
        match self {
            JsonKind::String => value.is_string(),
            JsonKind::Number => value.is_number(),
            JsonKind::Bool => value.is_boolean(),
            JsonKind::Array => value.is_array(),
            JsonKind::Object => value.is_object(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: JsonKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub segments: Vec<PromptSegment>,
    /// Expected-output schema the response must satisfy.
    pub schema: Vec<FieldSpec>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_retries() -> u32 {
    1
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, segments: Vec<PromptSegment>, schema: Vec<FieldSpec>) -> Result<Self, GatewayError> {
        let template = PromptTemplate {
            id: id.into(),
            segments,
            schema,
            max_retries: default_retries(),
        };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.segments {
            if let PromptSegment::Slot(name) = s {
                if !seen.insert(name.clone()) {
                    return Err(GatewayError::DuplicateSlot(name.clone()));
                }
            }
        }
        Ok(())
    }

    /// Deterministic rendering; every slot must be bound.
    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String, GatewayError> {
        let mut out = String::new();
        for s in &self.segments {
            match s {
                PromptSegment::Literal(text) => out.push_str(text),
                PromptSegment::Slot(name) => out.push_str(
                    slots
                        .get(name)
                        .ok_or_else(|| GatewayError::MissingSlot(name.clone()))?,
                ),
            }
        }
        Ok(out)
    }

    fn validate_response(&self, raw: &str) -> Result<Value, String> {
        let value: Value =
            serde_json::from_str(raw).map_err(|e| format!("not valid JSON: {e}"))?;
        let Some(obj) = value.as_object() else {
            return Err("response is not a JSON object".into());
        };
        for field in &self.schema {
            match obj.get(&field.name) {
                None => return Err(format!("missing field `{}`", field.name)),
                Some(v) if !field.kind.matches(v) => {
                    return Err(format!("field `{}` has the wrong kind", field.name))
                }
                _ => {}
            }
        }
        Ok(value)
    }

    fn repair_instruction(&self) -> String {
        let fields: Vec<String> = self
            .schema
            .iter()
            .map(|f| format!("{} ({:?})", f.name, f.kind))
            .collect();
        format!(
            "\nREPAIR: respond with exactly one JSON object carrying the fields: {}",
            fields.join(", ")
        )
    }
}

/// Hard call/token budget with consumed counters.
#[derive(Debug)]
pub struct GatewayBudget {
    pub max_calls: u64,
    pub max_tokens: u64,
}

impl GatewayBudget {
    pub fn unlimited() -> Self {
        GatewayBudget {
            max_calls: u64::MAX,
            max_tokens: u64::MAX,
        }
    }

    pub fn new(max_calls: u64, max_tokens: u64) -> Self {
        GatewayBudget {
            max_calls,
            max_tokens,
        }
    }
}

/// A completion backend. Batched completion defaults to per-member
/// completion, which keeps batched outputs bit-identical to unbatched
/// ones for any pure backend.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &str) -> String;
    fn complete_group(&self, prompts: &[String]) -> Vec<String> {
        prompts.iter().map(|p| self.complete(p)).collect()
    }
}

#[derive(Clone, Debug)]
pub enum MockResponse {
    Fixed(String),
    /// `{"answer": "echo:<hash>"}`, a pure function of (prompt, seed).
    EchoAnswer,
}

#[derive(Clone, Debug)]
pub struct MockRule {
    pub prefix: String,
    pub response: MockResponse,
    /// Return malformed output for this many first invocations (fault
    /// injection for repair-path tests).
    pub malformed_first: u32,
}

/// Deterministic mock backend: responses are a pure function of the
/// rendered prompt, the seed and the rule table (fault counters aside).
pub struct MockBackend {
    seed: u64,
    rules: Vec<MockRule>,
    fault_counts: Mutex<HashMap<usize, u32>>,
}

impl MockBackend {
    pub fn new(seed: u64, rules: Vec<MockRule>) -> Self {
        MockBackend {
            seed,
            rules,
            fault_counts: Mutex::new(HashMap::new()),
        }
    }

    /// Rules used by the task engine: task decomposition and structured
    /// verification shapes, plus the canonical echo default.
    pub fn with_standard_rules(seed: u64) -> Self {
        MockBackend::new(
            seed,
            vec![
                MockRule {
                    prefix: "DECOMPOSE:".into(),
                    response: MockResponse::Fixed(
                        r#"{"objective":"answer","target":"","filters":[]}"#.into(),
                    ),
                    malformed_first: 0,
                },
                MockRule {
                    prefix: "VERIFY:".into(),
                    response: MockResponse::Fixed(r#"{"valid":true,"notes":"ok"}"#.into()),
                    malformed_first: 0,
                },
            ],
        )
    }

    fn echo(&self, prompt: &str) -> String {
        let h = fnv1a64(prompt.as_bytes()) ^ self.seed;
        format!("{{\"answer\":\"echo:{h:016x}\"}}")
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, prompt: &str) -> String {
        for (i, rule) in self.rules.iter().enumerate() {
            if prompt.starts_with(&rule.prefix) {
                if rule.malformed_first > 0 {
                    let mut counts = self.fault_counts.lock().unwrap();
                    let used = counts.entry(i).or_insert(0);
                    if *used < rule.malformed_first {
                        *used += 1;
                        return "this is not json {".to_string();
                    }
                }
                return match &rule.response {
                    MockResponse::Fixed(text) => text.clone(),
                    MockResponse::EchoAnswer => self.echo(prompt),
                };
            }
        }
        self.echo(prompt)
    }
}

/// Resolves the configured backend name. Only `mock` ships in this build;
/// `http` is an optional adapter point behind the same trait.
pub fn backend_from_config(name: &str, seed: u64) -> Result<Arc<dyn Backend>, GatewayError> {
    match name {
        "mock" => Ok(Arc::new(MockBackend::with_standard_rules(seed))),
        "http" => Err(GatewayError::BackendUnavailable(
            "http".into(),
            "no HTTP adapter is bundled; implement Backend and pass it to Gateway::new".into(),
        )),
        other => Err(GatewayError::BackendUnavailable(
            other.into(),
            "unknown backend".into(),
        )),
    }
}

#[derive(Debug, Default)]
pub struct GatewayTelemetry {
    pub backend_calls: AtomicU64,
    pub cache_hits: AtomicU64,
    pub repairs: AtomicU64,
}

/// Thread-safe completion front end with budget, cache and validation.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    budget: GatewayBudget,
    used_calls: AtomicU64,
    used_tokens: AtomicU64,
    cache: Mutex<HashMap<String, Value>>,
    pub telemetry: GatewayTelemetry,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, budget: GatewayBudget) -> Self {
        Gateway {
            backend,
            budget,
            used_calls: AtomicU64::new(0),
            used_tokens: AtomicU64::new(0),
            cache: Mutex::new(HashMap::new()),
            telemetry: GatewayTelemetry::default(),
        }
    }

    pub fn used_calls(&self) -> u64 {
        self.used_calls.load(Ordering::SeqCst)
    }

    pub fn used_tokens(&self) -> u64 {
        self.used_tokens.load(Ordering::SeqCst)
    }

    pub fn backend_calls(&self) -> u64 {
        self.telemetry.backend_calls.load(Ordering::SeqCst)
    }

    fn cache_key(&self, rendered: &str) -> String {
        sha256_hex(format!("{}\u{0}{rendered}", self.backend.id()).as_bytes())
    }

    fn charge(&self, tokens: u64) -> Result<(), GatewayError> {
        // Counters only move when both checks pass, so consumption can
        // never exceed the budget.
        let calls = self.used_calls.load(Ordering::SeqCst);
        if calls + 1 > self.budget.max_calls {
            return Err(GatewayError::BudgetExhausted(format!(
                "max calls {} reached",
                self.budget.max_calls
            )));
        }
        let used = self.used_tokens.load(Ordering::SeqCst);
        if used + tokens > self.budget.max_tokens {
            return Err(GatewayError::BudgetExhausted(format!(
                "token budget {} would be exceeded",
                self.budget.max_tokens
            )));
        }
        self.used_calls.fetch_add(1, Ordering::SeqCst);
        self.used_tokens.fetch_add(tokens, Ordering::SeqCst);
        Ok(())
    }

    /// Renders, completes and validates. Identical prompts are served from
    /// the cache without consuming budget.
    pub fn complete(
        &self,
        template: &PromptTemplate,
        slots: &BTreeMap<String, String>,
    ) -> Result<Value, GatewayError> {
        let rendered = template.render(slots)?;
        let key = self.cache_key(&rendered);
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            self.telemetry.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit.clone());
        }
        let value = self.invoke_validated(template, &rendered)?;
        self.cache.lock().unwrap().insert(key, value.clone());
        Ok(value)
    }

    fn invoke_validated(
        &self,
        template: &PromptTemplate,
        rendered: &str,
    ) -> Result<Value, GatewayError> {
        self.charge(estimate_tokens(rendered))?;
        self.telemetry.backend_calls.fetch_add(1, Ordering::SeqCst);
        let raw = self.backend.complete(rendered);
        self.used_tokens
            .fetch_add(estimate_tokens(&raw), Ordering::SeqCst);
        match template.validate_response(&raw) {
            Ok(value) => Ok(value),
            Err(first_error) => {
                let mut last_error = first_error;
                for _ in 0..template.max_retries {
                    let repair = format!("{rendered}{}", template.repair_instruction());
                    self.charge(estimate_tokens(&repair))?;
                    self.telemetry.backend_calls.fetch_add(1, Ordering::SeqCst);
                    self.telemetry.repairs.fetch_add(1, Ordering::SeqCst);
                    let raw = self.backend.complete(&repair);
                    self.used_tokens
                        .fetch_add(estimate_tokens(&raw), Ordering::SeqCst);
                    match template.validate_response(&raw) {
                        Ok(value) => return Ok(value),
                        Err(e) => last_error = e,
                    }
                }
                Err(GatewayError::SchemaInvalid(last_error))
            }
        }
    }

    /// Completes a group of slot maps with one backend invocation for the
    /// uncached members. Per-member outputs are identical to unbatched
    /// completion; the saving is in call count.
    pub fn complete_batch(
        &self,
        template: &PromptTemplate,
        slot_maps: &[BTreeMap<String, String>],
    ) -> Result<Vec<Value>, GatewayError> {
        let mut rendered = Vec::with_capacity(slot_maps.len());
        for slots in slot_maps {
            rendered.push(template.render(slots)?);
        }
        let mut results: Vec<Option<Value>> = vec![None; slot_maps.len()];
        let mut missing: Vec<usize> = Vec::new();
        {
            let cache = self.cache.lock().unwrap();
            for (i, prompt) in rendered.iter().enumerate() {
                match cache.get(&self.cache_key(prompt)) {
                    Some(hit) => {
                        self.telemetry.cache_hits.fetch_add(1, Ordering::SeqCst);
                        results[i] = Some(hit.clone());
                    }
                    None => missing.push(i),
                }
            }
        }
        if !missing.is_empty() {
            let prompts: Vec<String> = missing.iter().map(|&i| rendered[i].clone()).collect();
            let total_tokens: u64 = prompts.iter().map(|p| estimate_tokens(p)).sum();
            self.charge(total_tokens)?;
            self.telemetry.backend_calls.fetch_add(1, Ordering::SeqCst);
            let raws = self.backend.complete_group(&prompts);
            for (slot, raw) in missing.iter().zip(raws) {
                self.used_tokens
                    .fetch_add(estimate_tokens(&raw), Ordering::SeqCst);
                let value = template
                    .validate_response(&raw)
                    .map_err(GatewayError::SchemaInvalid)?;
                self.cache
                    .lock()
                    .unwrap()
                    .insert(self.cache_key(&rendered[*slot]), value.clone());
                results[*slot] = Some(value);
            }
        }
        Ok(results.into_iter().map(|v| v.unwrap()).collect())
    }
}
