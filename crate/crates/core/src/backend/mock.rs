use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{BackendError, ChatRequest, ChatResponse, TokenUsage, Transport};

type FailPredicate = Box<dyn Fn(&ChatRequest) -> bool + Send + Sync>;

const ADJECTIVES: &[&str] = &[
    "several", "new", "small", "large", "dense", "scattered", "long", "narrow",
];
const NOUNS: &[&str] = &[
    "house", "road", "tree", "building", "villa", "street", "field", "parking lot",
    "pool", "garage", "lawn", "bridge", "river", "warehouse", "path", "playground",
];

/// Offline transport whose reply is a pure function of the request digest:
/// a registered fixture when one exists, otherwise a short sentence
/// assembled from the digest bytes. Counts calls and keeps every request it
/// saw so tests can inspect attachments.
#[derive(Default)]
pub struct MockTransport {
    fixtures: HashMap<String, String>,
    fail_when: Option<FailPredicate>,
    calls: AtomicUsize,
    seen: Mutex<Vec<ChatRequest>>,
}

impl std::fmt::Debug for MockTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockTransport")
            .field("fixtures", &self.fixtures.len())
            .field("calls", &self.calls())
            .finish_non_exhaustive()
    }
}

impl MockTransport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replies with `text` to requests whose cache key is `digest`.
    pub fn with_fixture(mut self, digest: impl Into<String>, text: impl Into<String>) -> Self {
        self.fixtures.insert(digest.into(), text.into());
        self
    }

    /// Fails every request matching `pred` with a transport error.
    pub fn failing_when(
        mut self,
        pred: impl Fn(&ChatRequest) -> bool + Send + Sync + 'static,
    ) -> Self {
        self.fail_when = Some(Box::new(pred));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("mock log poisoned").clone()
    }

    pub fn reply_for_digest(&self, digest: &str) -> String {
        if let Some(text) = self.fixtures.get(digest) {
            return text.clone();
        }
        let bytes = hex::decode(digest).unwrap_or_else(|_| digest.as_bytes().to_vec());
        let pick = |i: usize, list: &[&'static str]| list[bytes[i % bytes.len()] as usize % list.len()];
        format!(
            "{} {}s appear next to the {} and a {} runs past the {}.",
            capitalize(pick(0, ADJECTIVES)),
            pick(1, NOUNS),
            pick(2, NOUNS),
            pick(3, NOUNS),
            pick(4, NOUNS),
        )
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl Transport for MockTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.seen
            .lock()
            .expect("mock log poisoned")
            .push(request.clone());
        if self.fail_when.as_ref().is_some_and(|f| f(request)) {
            return Err(BackendError::Transport("injected failure".into()));
        }
        let text = self.reply_for_digest(&request.cache_key());
        let input = request
            .messages
            .iter()
            .map(|m| m.text.split_whitespace().count() as u64)
            .sum();
        Ok(ChatResponse {
            token_usage: TokenUsage {
                input,
                output: text.split_whitespace().count() as u64,
            },
            text,
            latency_ms: 0,
            raw_status: 200,
        })
    }
}
