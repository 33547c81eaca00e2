//! Provider-neutral structured generation.
//!
//! Callers render a [`PromptTemplate`] with named bindings; the gateway asks
//! the provider for a JSON object, validates it against the template's
//! output schema and re-prompts with a repair note when validation fails.
//! At most three attempts are made per call. Downstream code only ever
//! sees validated [`FieldValue`]s.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const MAX_ATTEMPTS: u32 = 3;
pub const DEFAULT_CONCURRENCY: usize = 8;

pub type Bindings = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider timed out")]
    Timeout,
    #[error("no stub output registered for template `{0}`")]
    NoFixture(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("template `{template_id}` has no binding for placeholder `{placeholder}`")]
    MissingBinding { template_id: String, placeholder: String },
    #[error("output for `{template_id}` violated its schema after {attempts} attempts: {reason}")]
    SchemaViolation {
        template_id: String,
        attempts: u32,
        reason: String,
    },
    #[error("generation provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("generation provider timed out")]
    ProviderTimeout,
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
}

impl From<ProviderError> for GatewayError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::Timeout => GatewayError::ProviderTimeout,
            other => GatewayError::ProviderUnavailable(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    String,
    StringList,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSpec {
    pub name: &'static str,
    pub kind: ColumnKind,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldKind {
    String,
    StringList { min_items: usize },
    Table(Vec<ColumnSpec>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: &'static str,
    pub kind: FieldKind,
    pub required: bool,
}

impl FieldSpec {
    pub fn string(name: &'static str) -> Self {
        Self {
            name,
            kind: FieldKind::String,
            required: true,
        }
    }

    pub fn list(name: &'static str, min_items: usize) -> Self {
        Self {
            name,
            kind: FieldKind::StringList { min_items },
            required: true,
        }
    }

    pub fn table(name: &'static str, columns: Vec<ColumnSpec>) -> Self {
        Self {
            name,
            kind: FieldKind::Table(columns),
            required: true,
        }
    }

    pub fn optional(mut self) -> Self {
        self.required = false;
        self
    }

    fn describe(&self) -> String {
        let shape = match &self.kind {
            FieldKind::String => "string".to_string(),
            FieldKind::StringList { min_items } if *min_items > 0 => {
                format!("array of at least {min_items} strings")
            }
            FieldKind::StringList { .. } => "array of strings".to_string(),
            FieldKind::Table(cols) => {
                let cols: Vec<String> = cols
                    .iter()
                    .map(|c| {
                        let t = match c.kind {
                            ColumnKind::String => "string",
                            ColumnKind::StringList => "array of strings",
                        };
                        format!("\"{}\": {t}", c.name)
                    })
                    .collect();
                format!("array of objects {{{}}}", cols.join(", "))
            }
        };
        let req = if self.required { "required" } else { "optional" };
        format!("- \"{}\" ({req}): {shape}", self.name)
    }
}

impl ColumnSpec {
    pub const fn text(name: &'static str) -> Self {
        Self {
            name,
            kind: ColumnKind::String,
            required: true,
        }
    }

    pub const fn list(name: &'static str) -> Self {
        Self {
            name,
            kind: ColumnKind::StringList,
            required: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    template_id: String,
    system_text: String,
    user_text: String,
    schema: Vec<FieldSpec>,
    placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn new(
        template_id: impl Into<String>,
        system_text: impl Into<String>,
        user_text: impl Into<String>,
        schema: Vec<FieldSpec>,
    ) -> Result<Self, GatewayError> {
        let template_id = template_id.into();
        let system_text = system_text.into();
        let user_text = user_text.into();
        let mut names = BTreeSet::new();
        for f in &schema {
            if !names.insert(f.name) {
                return Err(GatewayError::InvalidTemplate(format!(
                    "{template_id}: duplicate schema field `{}`",
                    f.name
                )));
            }
        }
        let mut placeholders = placeholders_in(&system_text)?;
        placeholders.extend(placeholders_in(&user_text)?);
        Ok(Self {
            template_id,
            system_text,
            user_text,
            schema,
            placeholders,
        })
    }

    pub fn id(&self) -> &str {
        &self.template_id
    }

    pub fn schema(&self) -> &[FieldSpec] {
        &self.schema
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.placeholders.iter().map(String::as_str)
    }

    /// Renders system and user text; every placeholder must be bound.
    pub fn render(&self, bindings: &Bindings) -> Result<(String, String), GatewayError> {
        for p in &self.placeholders {
            if !bindings.contains_key(p) {
                return Err(GatewayError::MissingBinding {
                    template_id: self.template_id.clone(),
                    placeholder: p.clone(),
                });
            }
        }
        let mut system = substitute(&self.system_text, bindings);
        system.push_str("\n\nRespond with a single JSON object and nothing else. Fields:\n");
        for f in &self.schema {
            system.push_str(&f.describe());
            system.push('\n');
        }
        Ok((system, substitute(&self.user_text, bindings)))
    }
}

fn placeholders_in(text: &str) -> Result<BTreeSet<String>, GatewayError> {
    let mut out = BTreeSet::new();
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        let close = after
            .find("}}")
            .ok_or_else(|| GatewayError::InvalidTemplate("unterminated placeholder".into()))?;
        let name = after[..close].trim();
        if name.is_empty() {
            return Err(GatewayError::InvalidTemplate("empty placeholder".into()));
        }
        out.insert(name.to_owned());
        rest = &after[close + 2..];
    }
    Ok(out)
}

fn substitute(text: &str, bindings: &Bindings) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after.find("}}").expect("validated at construction");
        let name = after[..close].trim();
        out.push_str(bindings.get(name).map(String::as_str).unwrap_or_default());
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    out
}

/// What a provider receives for one attempt.
#[derive(Debug, Clone)]
pub struct CompletionRequest<'a> {
    pub template_id: &'a str,
    /// 1-based attempt number within one `generate_structured` call.
    pub attempt: u32,
    pub system: String,
    pub user: String,
    pub bindings: &'a Bindings,
}

pub trait TextProvider: Send + Sync {
    fn provider_tag(&self) -> String;
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellValue {
    Text(String),
    List(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Row(pub BTreeMap<String, CellValue>);

impl Row {
    pub fn text(&self, column: &str) -> Option<&str> {
        match self.0.get(column) {
            Some(CellValue::Text(s)) => Some(s),
            _ => None,
        }
    }

    pub fn list(&self, column: &str) -> &[String] {
        match self.0.get(column) {
            Some(CellValue::List(v)) => v,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Text(String),
    List(Vec<String>),
    Table(Vec<Row>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub fields: BTreeMap<String, FieldValue>,
    pub raw_text: String,
    pub provider_tag: String,
    pub attempt_count: u32,
}

impl GenerationResult {
    pub fn text(&self, name: &str) -> Option<&str> {
        match self.fields.get(name) {
            Some(FieldValue::Text(s)) => Some(s),
            _ => None,
        }
    }

    pub fn list(&self, name: &str) -> &[String] {
        match self.fields.get(name) {
            Some(FieldValue::List(v)) => v,
            _ => &[],
        }
    }

    pub fn table(&self, name: &str) -> &[Row] {
        match self.fields.get(name) {
            Some(FieldValue::Table(v)) => v,
            _ => &[],
        }
    }
}

/// Finds the JSON object in a provider reply, tolerating code fences and
/// surrounding prose.
fn extract_json_object(raw: &str) -> Result<serde_json::Map<String, Value>, String> {
    let trimmed = raw.trim();
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(trimmed) {
        return Ok(map);
    }
    let (Some(start), Some(end)) = (trimmed.find('{'), trimmed.rfind('}')) else {
        return Err("reply contains no JSON object".into());
    };
    if end < start {
        return Err("reply contains no JSON object".into());
    }
    match serde_json::from_str::<Value>(&trimmed[start..=end]) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err("reply is not a JSON object".into()),
        Err(e) => Err(format!("reply is not valid JSON: {e}")),
    }
}

fn string_list(value: &Value, what: &str) -> Result<Vec<String>, String> {
    let items = value
        .as_array()
        .ok_or_else(|| format!("{what} must be an array of strings"))?;
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let s = item
            .as_str()
            .ok_or_else(|| format!("{what} must contain only strings"))?;
        let s = s.trim();
        if !s.is_empty() {
            out.push(s.to_owned());
        }
    }
    Ok(out)
}

/// Validates `raw` against `schema`.
pub fn parse_structured(raw: &str, schema: &[FieldSpec]) -> Result<BTreeMap<String, FieldValue>, String> {
    let object = extract_json_object(raw)?;
    let mut fields = BTreeMap::new();
    for spec in schema {
        let value = match object.get(spec.name) {
            None | Some(Value::Null) => {
                if spec.required {
                    return Err(format!("missing required field `{}`", spec.name));
                }
                continue;
            }
            Some(v) => v,
        };
        let parsed = match &spec.kind {
            FieldKind::String => {
                let s = value
                    .as_str()
                    .ok_or_else(|| format!("`{}` must be a string", spec.name))?
                    .trim();
                if s.is_empty() && spec.required {
                    return Err(format!("`{}` must not be empty", spec.name));
                }
                FieldValue::Text(s.to_owned())
            }
            FieldKind::StringList { min_items } => {
                let items = string_list(value, &format!("`{}`", spec.name))?;
                if items.len() < *min_items {
                    return Err(format!(
                        "`{}` needs at least {min_items} items, got {}",
                        spec.name,
                        items.len()
                    ));
                }
                FieldValue::List(items)
            }
            FieldKind::Table(columns) => {
                let rows = value
                    .as_array()
                    .ok_or_else(|| format!("`{}` must be an array of objects", spec.name))?;
                let mut parsed_rows = Vec::with_capacity(rows.len());
                for (i, row) in rows.iter().enumerate() {
                    let obj = row
                        .as_object()
                        .ok_or_else(|| format!("`{}[{i}]` must be an object", spec.name))?;
                    let mut cells = BTreeMap::new();
                    for col in columns {
                        let what = format!("`{}[{i}].{}`", spec.name, col.name);
                        match obj.get(col.name) {
                            None | Some(Value::Null) => {
                                if col.required {
                                    return Err(format!("missing {what}"));
                                }
                            }
                            Some(v) => {
                                let cell = match col.kind {
                                    ColumnKind::String => CellValue::Text(
                                        v.as_str()
                                            .ok_or_else(|| format!("{what} must be a string"))?
                                            .trim()
                                            .to_owned(),
                                    ),
                                    ColumnKind::StringList => CellValue::List(string_list(v, &what)?),
                                };
                                cells.insert(col.name.to_owned(), cell);
                            }
                        }
                    }
                    parsed_rows.push(Row(cells));
                }
                FieldValue::Table(parsed_rows)
            }
        };
        fields.insert(spec.name.to_owned(), parsed);
    }
    Ok(fields)
}

/// Counting semaphore bounding in-flight provider calls.
#[derive(Debug)]
struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter poisoned") += 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    provider: Arc<dyn TextProvider>,
    limiter: Limiter,
    backoff: Duration,
}

impl Gateway {
    pub fn new(provider: Arc<dyn TextProvider>) -> Self {
        Self::with_limits(provider, DEFAULT_CONCURRENCY, Duration::from_millis(250))
    }

    pub fn with_limits(provider: Arc<dyn TextProvider>, max_concurrent: usize, backoff: Duration) -> Self {
        Self {
            provider,
            limiter: Limiter::new(max_concurrent),
            backoff,
        }
    }

    pub fn provider_tag(&self) -> String {
        self.provider.provider_tag()
    }

    pub fn generate_structured(
        &self,
        template: &PromptTemplate,
        bindings: &Bindings,
    ) -> Result<GenerationResult, GatewayError> {
        let (system, user) = template.render(bindings)?;
        let mut repair_note: Option<String> = None;
        let mut last_violation = String::new();

        for attempt in 1..=MAX_ATTEMPTS {
            let mut user_text = user.clone();
            if let Some(note) = &repair_note {
                user_text.push_str(&format!(
                    "\n\nYour previous reply could not be used ({note}). \
                     Reply again with only the JSON object described in the instructions."
                ));
            }
            let request = CompletionRequest {
                template_id: template.id(),
                attempt,
                system: system.clone(),
                user: user_text,
                bindings,
            };
            let reply = {
                let _permit = self.limiter.acquire();
                self.provider.complete(&request)
            };
            match reply {
                Ok(raw) => match parse_structured(&raw, template.schema()) {
                    Ok(fields) => {
                        return Ok(GenerationResult {
                            fields,
                            raw_text: raw,
                            provider_tag: self.provider.provider_tag(),
                            attempt_count: attempt,
                        })
                    }
                    Err(reason) => {
                        tracing::debug!(template = template.id(), attempt, %reason, "schema violation");
                        last_violation = reason.clone();
                        repair_note = Some(reason);
                    }
                },
                Err(e @ (ProviderError::Unavailable(_) | ProviderError::Timeout)) => {
                    if attempt == MAX_ATTEMPTS {
                        return Err(e.into());
                    }
                    tracing::warn!(template = template.id(), attempt, error = %e, "provider failure, backing off");
                    std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(GatewayError::SchemaViolation {
            template_id: template.id().to_owned(),
            attempts: MAX_ATTEMPTS,
            reason: last_violation,
        })
    }
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    model: String,
}

impl HttpProvider {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        model: impl Into<String>,
        timeout: Duration,
    ) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Unavailable(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: endpoint.into().trim_end_matches('/').to_owned(),
            api_key,
            model: model.into(),
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl TextProvider for HttpProvider {
    fn provider_tag(&self) -> String {
        format!("http:{}", self.model)
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [
                { "role": "system", "content": request.system },
                { "role": "user", "content": request.user },
            ],
            "response_format": { "type": "json_object" },
        });
        let mut http = self
            .client
            .post(format!("{}/chat/completions", self.endpoint))
            .json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let response = http.send().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Unavailable(e.to_string())
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err(ProviderError::Unavailable(format!("status {status}")));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| ProviderError::Unavailable(format!("malformed response: {e}")))?;
        // an empty reply is handed to schema validation, which triggers a repair
        Ok(parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default())
    }
}
