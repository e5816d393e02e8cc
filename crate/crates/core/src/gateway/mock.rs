//! Deterministic offline providers.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{
    approx_tokens, ChatBackend, ChatRequest, Completion, Embedder, GatewayError, Result, Usage,
};
use crate::text::{fnv1a, tokens};
use crate::vector_store::EmbeddingVector;

pub const DEFAULT_MOCK_DIM: usize = 256;

/// Hashed token-count embedder: each token increments one of `dim` buckets,
/// then the vector is L2-normalized. Identical texts give identical vectors
/// and texts sharing tokens have higher cosine than disjoint ones.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_MOCK_DIM,
        }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut values = vec![0.0f64; self.dim];
        for token in tokens(text) {
            let bucket = (fnv1a(token.as_bytes()) % self.dim as u64) as usize;
            values[bucket] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(values).expect("hash embedding is finite")
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }
}

/// Predicate over a chat request. Empty fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestMatcher {
    pub model: Option<String>,
    /// Every string must occur in some message.
    pub contains: Vec<String>,
    /// No string may occur in any message.
    pub not_contains: Vec<String>,
    /// Substring of the last user message.
    pub last_user_contains: Option<String>,
}

impl RequestMatcher {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn last_user(fragment: impl Into<String>) -> Self {
        Self {
            last_user_contains: Some(fragment.into()),
            ..Self::default()
        }
    }

    pub fn containing(fragment: impl Into<String>) -> Self {
        Self {
            contains: vec![fragment.into()],
            ..Self::default()
        }
    }

    pub fn model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    pub fn and_not(mut self, fragment: impl Into<String>) -> Self {
        self.not_contains.push(fragment.into());
        self
    }

    pub fn matches(&self, request: &ChatRequest) -> bool {
        if let Some(model) = &self.model {
            if &request.model != model {
                return false;
            }
        }
        let in_any = |needle: &str| request.messages.iter().any(|m| m.content.contains(needle));
        if !self.contains.iter().all(|c| in_any(c)) {
            return false;
        }
        if self.not_contains.iter().any(|c| in_any(c)) {
            return false;
        }
        if let Some(fragment) = &self.last_user_contains {
            if !request.last_user().is_some_and(|u| u.contains(fragment.as_str())) {
                return false;
            }
        }
        true
    }

    pub fn describe(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default)]
    pub matcher: RequestMatcher,
    pub reply: String,
}

/// Ordered canned replies. Loadable from JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTranscript {
    pub entries: Vec<ScriptEntry>,
    /// Strict: each request must match the next unconsumed entry, in order.
    #[serde(default)]
    pub strict: bool,
    /// Non-strict only: reply used once no entry matches.
    #[serde(default)]
    pub fallback: Option<String>,
}

impl ScriptedTranscript {
    pub fn new(strict: bool) -> Self {
        Self {
            strict,
            ..Self::default()
        }
    }

    pub fn reply(mut self, matcher: RequestMatcher, reply: impl Into<String>) -> Self {
        self.entries.push(ScriptEntry {
            matcher,
            reply: reply.into(),
        });
        self
    }

    pub fn with_fallback(mut self, reply: impl Into<String>) -> Self {
        self.fallback = Some(reply.into());
        self
    }
}

/// Backend that plays a [`ScriptedTranscript`] and records every request.
#[derive(Debug)]
pub struct ScriptedBackend {
    script: ScriptedTranscript,
    consumed: Mutex<Vec<bool>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(script: ScriptedTranscript) -> Self {
        let n = script.entries.len();
        Self {
            script,
            consumed: Mutex::new(vec![false; n]),
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Non-strict backend with no entries that answers everything with `reply`.
    pub fn replying_always(reply: impl Into<String>) -> Self {
        Self::new(ScriptedTranscript::new(false).with_fallback(reply))
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("poisoned").clone()
    }

    pub fn remaining(&self) -> usize {
        self.consumed
            .lock()
            .expect("poisoned")
            .iter()
            .filter(|c| !**c)
            .count()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion> {
        self.seen.lock().expect("poisoned").push(request.clone());
        let mut consumed = self.consumed.lock().expect("poisoned");
        let entries = &self.script.entries;
        let chosen = if self.script.strict {
            let next = consumed.iter().position(|c| !*c);
            match next {
                Some(i) if entries[i].matcher.matches(request) => Some(i),
                Some(i) => {
                    return Err(GatewayError::ScriptedMismatch {
                        index: i,
                        expected: entries[i].matcher.describe(),
                        actual: request.summary(),
                    })
                }
                None => {
                    return Err(GatewayError::ScriptExhausted {
                        actual: request.summary(),
                    })
                }
            }
        } else {
            (0..entries.len()).find(|&i| !consumed[i] && entries[i].matcher.matches(request))
        };
        let text = match chosen {
            Some(i) => {
                consumed[i] = true;
                entries[i].reply.clone()
            }
            None => match &self.script.fallback {
                Some(reply) => reply.clone(),
                None => {
                    return Err(GatewayError::ScriptExhausted {
                        actual: request.summary(),
                    })
                }
            },
        };
        Ok(completion(request, text))
    }
}

pub(crate) fn completion(request: &ChatRequest, text: String) -> Completion {
    let prompt_tokens = request
        .messages
        .iter()
        .map(|m| approx_tokens(&m.content))
        .sum();
    Completion {
        usage: Usage {
            prompt_tokens,
            completion_tokens: approx_tokens(&text),
        },
        text,
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> Result<String> + Send + Sync;

/// Backend driven by a closure; handy for one-off test doubles.
pub struct FnBackend {
    reply: Box<ReplyFn>,
}

impl FnBackend {
    pub fn new(reply: impl Fn(&ChatRequest) -> Result<String> + Send + Sync + 'static) -> Self {
        Self {
            reply: Box::new(reply),
        }
    }
}

impl ChatBackend for FnBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion> {
        let text = (self.reply)(request)?;
        Ok(completion(request, text))
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<Completion> {
        (**self).complete(request)
    }
}

/// Marker line the paraphraser looks for in the last user message.
pub const PARAPHRASE_MARKER: &str = "Query:";

/// Deterministic query rewriter standing in for an augmentation model.
///
/// Takes the text after the last `Query:` marker, swaps known phrases for a
/// synonym and wraps the result in one of a few neutral frames picked by hash.
#[derive(Debug, Clone)]
pub struct ParaphraseBackend {
    synonyms: Vec<(String, String)>,
    frames: Vec<String>,
}

impl Default for ParaphraseBackend {
    fn default() -> Self {
        let synonyms = [
            ("heart rate", "pulse"),
            ("pulse", "heart rate"),
            ("oxygen saturation", "blood oxygen level"),
            ("blood oxygen", "oxygen saturation"),
            ("spo2", "oxygen saturation"),
            ("sleep score", "sleep quality"),
            ("sleep quality", "sleep score"),
            ("step count", "daily steps"),
            ("steps", "step count"),
            ("stress score", "stress level"),
            ("stress level", "stress score"),
            ("respiratory rate", "breathing rate"),
            ("breathing rate", "respiratory rate"),
            ("smartwatch", "wearable"),
            ("wearable", "fitness tracker"),
            ("fitness tracker", "smartwatch"),
            ("watch", "wearable device"),
            ("cough", "coughing"),
            ("pain", "discomfort"),
            ("discomfort", "pain"),
            ("how long", "since when"),
            ("nausea", "feeling sick"),
            ("vomit", "throw up"),
            ("fever", "high temperature"),
            ("rash", "skin irritation"),
            ("headache", "head pain"),
        ];
        Self {
            synonyms: synonyms
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            frames: vec![
                "{q}".into(),
                "Just to clarify, {q}".into(),
                "Quick question, {q}".into(),
                "Also, {q}".into(),
            ],
        }
    }
}

impl ParaphraseBackend {
    pub fn rewrite(&self, query: &str) -> String {
        let lower = query.to_lowercase();
        let mut rewritten = query.trim().to_string();
        // first phrase hit wins, so rewrites are single substitutions
        for (from, to) in &self.synonyms {
            if let Some(pos) = find_word(&lower, from) {
                let mut s = String::with_capacity(query.len() + to.len());
                s.push_str(&query[..pos]);
                s.push_str(to);
                s.push_str(&query[pos + from.len()..]);
                rewritten = s.trim().to_string();
                break;
            }
        }
        let frame = &self.frames[(fnv1a(query.as_bytes()) % self.frames.len() as u64) as usize];
        frame.replace("{q}", &rewritten)
    }
}

fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(rel) = haystack[from..].find(needle) {
        let pos = from + rel;
        let before_ok = haystack[..pos]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = haystack[pos + needle.len()..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return Some(pos);
        }
        from = pos + needle.len();
    }
    None
}

impl ChatBackend for ParaphraseBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion> {
        let last = request
            .last_user()
            .ok_or_else(|| GatewayError::InvalidRequest("paraphrase needs a user message".into()))?;
        let query = last
            .rfind(PARAPHRASE_MARKER)
            .map(|i| last[i + PARAPHRASE_MARKER.len()..].trim())
            .unwrap_or(last.trim());
        Ok(completion(request, self.rewrite(query)))
    }
}

/// Backend that always fails; used to exercise error paths.
#[derive(Debug, Default)]
pub struct FailingBackend;

impl ChatBackend for FailingBackend {
    fn complete(&self, _request: &ChatRequest) -> Result<Completion> {
        Err(GatewayError::Transport {
            attempts: 1,
            message: "provider unavailable".into(),
        })
    }
}

#[derive(Debug, Default)]
pub struct FailingEmbedder;

impl Embedder for FailingEmbedder {
    fn embed(&self, _texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Err(GatewayError::Transport {
            attempts: 1,
            message: "embedding provider unavailable".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatMessage;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("gpt-4", vec![ChatMessage::user(text)]).unwrap()
    }

    #[test]
    fn same_text_same_vector() {
        let e = HashEmbedder::default();
        assert_eq!(e.embed_one("heart rate"), e.embed_one("heart rate"));
    }

    #[test]
    fn overlap_beats_disjoint() {
        // "heart rate sleep" shares two of three tokens with "heart rate"
        // (cos = 2/sqrt(3)/sqrt(2) = 0.816 absent collisions) and none with
        // "weather tomorrow".
        let e = HashEmbedder::default();
        let a = e.embed_one("heart rate sleep");
        let b = e.embed_one("heart rate");
        let c = e.embed_one("weather tomorrow");
        let ab = a.cosine(&b);
        let ac = a.cosine(&c);
        assert!(ab > ac, "{ab} vs {ac}");
        assert!((ab - 2.0 / 6f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let v = HashEmbedder::default().embed_one("  ,, ");
        assert!(v.values().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn one_canned_reply_byte_for_byte() {
        let reply = "Hello.\nACTION: ASK(\"duration?\")  ";
        let b = ScriptedBackend::new(ScriptedTranscript::new(true).reply(RequestMatcher::any(), reply));
        assert_eq!(b.complete(&req("x")).unwrap().text, reply);
    }

    #[test]
    fn strict_mismatch_reports_diff() {
        let b = ScriptedBackend::new(
            ScriptedTranscript::new(true).reply(RequestMatcher::last_user("cough"), "r"),
        );
        match b.complete(&req("fever")) {
            Err(GatewayError::ScriptedMismatch { index, expected, actual }) => {
                assert_eq!(index, 0);
                assert!(expected.contains("cough"));
                assert!(actual.contains("fever"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn strict_exhausted() {
        let b = ScriptedBackend::new(ScriptedTranscript::new(true).reply(RequestMatcher::any(), "r"));
        b.complete(&req("a")).unwrap();
        assert!(matches!(
            b.complete(&req("b")),
            Err(GatewayError::ScriptExhausted { .. })
        ));
    }

    #[test]
    fn lenient_picks_first_matching_unconsumed() {
        let b = ScriptedBackend::new(
            ScriptedTranscript::new(false)
                .reply(RequestMatcher::last_user("lab"), "lab reply")
                .reply(RequestMatcher::any(), "generic")
                .with_fallback("fallback"),
        );
        assert_eq!(b.complete(&req("hello")).unwrap().text, "generic");
        assert_eq!(b.complete(&req("lab result")).unwrap().text, "lab reply");
        assert_eq!(b.complete(&req("again")).unwrap().text, "fallback");
    }

    #[test]
    fn not_contains_excludes() {
        let m = RequestMatcher::any().and_not("UNRELIABLE");
        assert!(m.matches(&req("fine")));
        assert!(!m.matches(&req("[UNRELIABLE]")));
    }

    #[test]
    fn paraphrase_is_deterministic_and_substitutes() {
        let p = ParaphraseBackend::default();
        let a = p.rewrite("What is your heart rate today?");
        assert_eq!(a, p.rewrite("What is your heart rate today?"));
        assert!(a.contains("pulse"), "{a}");
    }

    #[test]
    fn paraphrase_reads_marker() {
        let p = ParaphraseBackend::default();
        let r = p
            .complete(&req("Rewrite this.\nQuery: How long have you had this cough?"))
            .unwrap();
        assert!(r.text.contains("coughing"), "{}", r.text);
        assert!(!r.text.contains("Rewrite"));
    }

    #[test]
    fn word_boundaries_respected() {
        assert_eq!(find_word("stopwatch", "watch"), None);
        assert_eq!(find_word("my watch", "watch"), Some(3));
    }
}
