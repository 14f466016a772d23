//! Demonstration annotation: a deterministic oracle teacher and an HTTP
//! chat-completion client for external teachers.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{lexicon, write_jsonl, Choice, DemoSkeleton, Demonstration};
use crate::error::{Error, Result};

/// Anything that answers a rendered demonstration prompt.
pub trait Teacher: Sync {
    /// Answers `skeleton` with the standard prompt (`cot = false`) or the
    /// step-by-step prompt (`cot = true`).
    fn annotate(&self, skeleton: &DemoSkeleton, cot: bool) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    #[default]
    Oracle,
    External,
}

impl std::str::FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(TeacherKind::Oracle),
            "external" => Ok(TeacherKind::External),
            other => Err(Error::Config(format!("unknown teacher `{other}` (expected oracle or external)"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Oracle

/// Writes rationales from the generator's own ground truth.
///
/// Multiple choice: one line per option saying what it is and whether it
/// fits the question, then `So the answer is B) pear.`. Numeric: one line per arithmetic step, then
/// `The answer is 11.`. Standard prompts get the bare target.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleTeacher;

impl Teacher for OracleTeacher {
    fn annotate(&self, skeleton: &DemoSkeleton, cot: bool) -> Result<String> {
        let target = skeleton.target.as_deref().ok_or_else(|| {
            Error::Precondition(format!("oracle teacher needs a target for `{}`", skeleton.id))
        })?;
        if !cot {
            return Ok(target.to_string());
        }
        match &skeleton.choices {
            Some(choices) => Ok(choice_rationale(choices, target)),
            None => numeric_rationale(skeleton.expression.as_deref(), target),
        }
    }
}

fn choice_rationale(choices: &[Choice], target: &str) -> String {
    let mut lines: Vec<String> = choices
        .iter()
        .map(|c| {
            let verdict = if c.label == target { "yes" } else { "no" };
            match lexicon::describe(&c.text) {
                Some(d) => format!("{}) {}: {d}, {verdict}", c.label, c.text),
                None => format!("{}) {}, {verdict}", c.label, c.text),
            }
        })
        .collect();
    let conclusion = match choices.iter().find(|c| c.label == target) {
        Some(c) => format!("So the answer is {}) {}.", c.label, c.text),
        None => format!("So the answer is {target})."),
    };
    lines.push(conclusion);
    lines.join("\n")
}

fn numeric_rationale(expression: Option<&str>, target: &str) -> Result<String> {
    let mut lines = Vec::new();
    if let Some(src) = expression {
        let expr = Expr::parse(src)?;
        let value = expr.steps(&mut lines);
        if value.to_string() != target {
            return Err(Error::Precondition(format!(
                "expression `{src}` evaluates to {value}, target is {target}"
            )));
        }
    }
    lines.push(format!("The answer is {target}."));
    Ok(lines.join("\n"))
}

/// Integer arithmetic over `+ - *` and parentheses.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(i64),
    Bin(Box<Expr>, char, Box<Expr>),
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let chars: Vec<char> = src.chars().filter(|c| !c.is_whitespace()).collect();
        let mut pos = 0;
        let e = parse_sum(&chars, &mut pos)?;
        if pos != chars.len() {
            return Err(Error::parse(format!("expression `{src}`"), format!("unexpected input at {pos}")));
        }
        Ok(e)
    }

    /// Evaluates bottom-up, recording `lhs op rhs=value` for every operator.
    pub fn steps(&self, out: &mut Vec<String>) -> i64 {
        match self {
            Expr::Num(n) => *n,
            Expr::Bin(l, op, r) => {
                let a = l.steps(out);
                let b = r.steps(out);
                let v = apply(a, *op, b);
                out.push(format!("{a}{op}{b}={v}"));
                v
            }
        }
    }

    pub fn eval(&self) -> i64 {
        self.steps(&mut Vec::new())
    }
}

fn apply(a: i64, op: char, b: i64) -> i64 {
    match op {
        '+' => a.saturating_add(b),
        '-' => a.saturating_sub(b),
        _ => a.saturating_mul(b),
    }
}

fn parse_sum(c: &[char], pos: &mut usize) -> Result<Expr> {
    let mut lhs = parse_product(c, pos)?;
    while let Some(&op @ ('+' | '-')) = c.get(*pos) {
        *pos += 1;
        let rhs = parse_product(c, pos)?;
        lhs = Expr::Bin(Box::new(lhs), op, Box::new(rhs));
    }
    Ok(lhs)
}

fn parse_product(c: &[char], pos: &mut usize) -> Result<Expr> {
    let mut lhs = parse_atom(c, pos)?;
    while let Some('*') = c.get(*pos) {
        *pos += 1;
        let rhs = parse_atom(c, pos)?;
        lhs = Expr::Bin(Box::new(lhs), '*', Box::new(rhs));
    }
    Ok(lhs)
}

fn parse_atom(c: &[char], pos: &mut usize) -> Result<Expr> {
    let err = |m: &str, p: usize| Error::parse("expression", format!("{m} at {p}"));
    match c.get(*pos) {
        Some('(') => {
            *pos += 1;
            let e = parse_sum(c, pos)?;
            if c.get(*pos) != Some(&')') {
                return Err(err("missing `)`", *pos));
            }
            *pos += 1;
            Ok(e)
        }
        Some(d) if d.is_ascii_digit() => {
            let start = *pos;
            while c.get(*pos).is_some_and(|d| d.is_ascii_digit()) {
                *pos += 1;
            }
            let s: String = c[start..*pos].iter().collect();
            s.parse().map(Expr::Num).map_err(|_| err("number out of range", start))
        }
        _ => Err(err("expected a number or `(`", *pos)),
    }
}

// ---------------------------------------------------------------------------
// External chat client

/// A single-turn text completion backend.
pub trait Completion: Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Settings for an OpenAI-style chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    /// Upper bound on in-flight requests.
    pub concurrency: usize,
    /// JSONL file receiving every request and response body.
    pub audit_log: Option<PathBuf>,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        ExternalConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "SELFREFINE_API_KEY".into(),
            temperature: 0.7,
            max_attempts: 3,
            backoff_ms: 500,
            timeout_secs: 120,
            concurrency: 4,
            audit_log: None,
        }
    }
}

/// A blocking chat-completion client with retries and an optional audit log.
pub struct ChatClient {
    config: ExternalConfig,
    http: reqwest::blocking::Client,
    api_key: Option<String>,
    audit: Option<Mutex<File>>,
}

impl ChatClient {
    pub fn new(config: ExternalConfig) -> Result<Self> {
        if config.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let audit = match &config.audit_log {
            Some(path) => Some(Mutex::new(open_append(path)?)),
            None => None,
        };
        Ok(ChatClient {
            config,
            http,
            api_key,
            audit,
        })
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }

    /// Sends `prompt` as the single user message and returns the first
    /// assistant message. Transport failures, 429 and 5xx are retried with
    /// exponential backoff.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        });
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            if attempt > 1 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 2).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            let mut req = self.http.post(&self.config.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let (retry, message) = match req.send() {
                Err(e) => (true, format!("transport: {e}")),
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    self.audit(&body, status.as_u16(), &text, attempt);
                    if status.is_success() {
                        match parse_chat_reply(&text) {
                            Ok(reply) => return Ok(reply),
                            Err(e) => (false, e.to_string()),
                        }
                    } else {
                        let retry = status.as_u16() == 429 || status.is_server_error();
                        (retry, format!("HTTP {status}: {}", truncate(&text, 200)))
                    }
                }
            };
            log::warn!("chat request attempt {attempt} failed: {message}");
            last = message;
            if !retry {
                return Err(Error::Annotation {
                    attempts: attempt,
                    message: last,
                });
            }
        }
        Err(Error::Annotation {
            attempts: self.config.max_attempts,
            message: last,
        })
    }

    fn audit(&self, request: &serde_json::Value, status: u16, response: &str, attempt: u32) {
        let Some(file) = &self.audit else { return };
        let line = json!({
            "attempt": attempt,
            "status": status,
            "request": request,
            "response": response,
        });
        let mut f = file.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = writeln!(f, "{line}") {
            log::warn!("audit log write failed: {e}");
        }
    }
}

impl Completion for ChatClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        ChatClient::complete(self, prompt)
    }
}

fn open_append(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Extracts the first assistant message from a chat-completion response.
pub fn parse_chat_reply(body: &str) -> Result<String> {
    #[derive(Deserialize)]
    struct Reply {
        choices: Vec<ReplyChoice>,
    }
    #[derive(Deserialize)]
    struct ReplyChoice {
        message: Message,
    }
    #[derive(Deserialize)]
    struct Message {
        #[serde(default)]
        role: Option<String>,
        #[serde(default)]
        content: Option<String>,
    }
    let reply: Reply =
        serde_json::from_str(body).map_err(|e| Error::parse("chat reply", e.to_string()))?;
    reply
        .choices
        .into_iter()
        .map(|c| c.message)
        .find(|m| m.role.as_deref().unwrap_or("assistant") == "assistant")
        .and_then(|m| m.content)
        .filter(|c| !c.trim().is_empty())
        .ok_or_else(|| Error::parse("chat reply", "no non-empty assistant message"))
}

/// Forwards rendered prompts to a [`ChatClient`].
pub struct ExternalTeacher {
    client: ChatClient,
}

impl ExternalTeacher {
    pub fn new(client: ChatClient) -> Self {
        ExternalTeacher { client }
    }

    pub fn client(&self) -> &ChatClient {
        &self.client
    }
}

impl Teacher for ExternalTeacher {
    fn annotate(&self, skeleton: &DemoSkeleton, cot: bool) -> Result<String> {
        self.client.complete(&skeleton.prompt(cot))
    }
}

// ---------------------------------------------------------------------------
// Demonstration builder

/// An annotated example that failed validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quarantined {
    pub id: String,
    pub reason: String,
    pub teacher_answer: Option<String>,
    pub teacher_cot_answer: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct BuildOutcome {
    pub demonstrations: Vec<Demonstration>,
    pub quarantined: Vec<Quarantined>,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub concurrency: usize,
    /// Quarantined records are written here (JSONL) when set.
    pub reject_path: Option<PathBuf>,
    /// Largest tolerated quarantine fraction.
    pub max_reject_rate: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            concurrency: 1,
            reject_path: None,
            max_reject_rate: 0.2,
        }
    }
}

/// Annotates every skeleton twice (standard and step-by-step prompts) and
/// validates the result. Invalid records are quarantined, not dropped;
/// output order follows the input order.
pub fn build_demonstrations(
    skeletons: &[DemoSkeleton],
    teacher: &dyn Teacher,
    options: &BuildOptions,
) -> Result<BuildOutcome> {
    if skeletons.is_empty() {
        return Err(Error::Precondition("no tasks to annotate".into()));
    }
    let results = parallel_map(skeletons, options.concurrency.max(1), |s| annotate_one(s, teacher));
    let mut outcome = BuildOutcome::default();
    for (skeleton, result) in skeletons.iter().zip(results) {
        match result {
            Ok(demo) => outcome.demonstrations.push(demo),
            Err(q) => {
                log::warn!("quarantined `{}`: {}", skeleton.id, q.reason);
                outcome.quarantined.push(q);
            }
        }
    }
    if let Some(path) = &options.reject_path {
        write_jsonl(&outcome.quarantined, path)?;
    }
    let rejected = outcome.quarantined.len();
    if rejected as f64 > options.max_reject_rate * skeletons.len() as f64 {
        let summary = outcome
            .quarantined
            .iter()
            .take(5)
            .map(|q| format!("{}: {}", q.id, q.reason))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::QuarantineLimit {
            rejected,
            total: skeletons.len(),
            summary,
        });
    }
    Ok(outcome)
}

fn annotate_one(s: &DemoSkeleton, teacher: &dyn Teacher) -> std::result::Result<Demonstration, Quarantined> {
    let quarantine = |reason: String, plain: Option<String>, cot: Option<String>| Quarantined {
        id: s.id.clone(),
        reason,
        teacher_answer: plain,
        teacher_cot_answer: cot,
    };
    let plain = teacher
        .annotate(s, false)
        .map_err(|e| quarantine(e.to_string(), None, None))?;
    let cot = teacher
        .annotate(s, true)
        .map_err(|e| quarantine(e.to_string(), Some(plain.clone()), None))?;
    let Some(target) = s.target.clone() else {
        return Err(quarantine("no target".into(), Some(plain), Some(cot)));
    };
    let demo = Demonstration {
        id: s.id.clone(),
        task_id: s.task_id.clone(),
        instruction: s.instruction.clone(),
        question: s.question.clone(),
        choices: s.choices.clone(),
        target,
        teacher_answer: plain,
        teacher_cot_answer: cot,
    };
    match demo.validate() {
        Ok(()) => Ok(demo),
        Err(v) => {
            let reason = v.iter().map(|v| v.reason.clone()).collect::<Vec<_>>().join("; ");
            Err(quarantine(reason, Some(demo.teacher_answer), Some(demo.teacher_cot_answer)))
        }
    }
}

/// Maps `f` over `items` with at most `workers` threads, preserving order.
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every slot filled"))
        .collect()
}
