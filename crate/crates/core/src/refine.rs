//! Iterative prompt refinement over pluggable oracles.
//!
//! A [`CandidateGenerator`] proposes emotion words with rewritten prompts and a
//! [`TextEmbedder`] scores them against the target guidance vector. The loop
//! is a keep-best hill climb: a rewrite is accepted only if it strictly
//! improves similarity.
//!
//! [`LexiconStub`] implements both oracles offline from a bundled 32-word
//! emotion lexicon (eight basic emotions at three intensities plus eight
//! composites), so refinement is fully hermetic in tests.

use std::collections::BTreeMap;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{EmoError, Result};
use crate::linalg::{cosine_sim, normalize};

/// Environment variable holding the bearer token for the live adapter.
pub const ORACLE_TOKEN_ENV: &str = "EMOSPACE_ORACLE_TOKEN";
pub const DEFAULT_EPS_CONV: f64 = 1e-3;
pub const DEFAULT_MAX_ITERS: usize = 5;
pub const LEXICON_VERSION: u32 = 1;
const LEXICON_V1: &str = include_str!("../data/lexicon_v1.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub emotion: String,
    pub refined_prompt: String,
}

pub trait CandidateGenerator {
    fn propose(&self, prompt: &str, context: &str) -> Result<Vec<Candidate>>;
}

pub trait TextEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub category: String,
    pub gradation: String,
    #[serde(with = "f32_base64")]
    pub embedding: Vec<f64>,
}

/// Embeddings travel as base64 of little-endian `f32` bytes.
mod f32_base64 {
    use base64::Engine as _;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(text)
            .map_err(D::Error::custom)?;
        if bytes.len() % 4 != 0 {
            return Err(D::Error::custom("embedding byte length not a multiple of 4"));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

/// Offline lexicon oracle: embeds text by the lexicon words it mentions and
/// proposes intensity variants within the mentioned emotion family.
#[derive(Debug, Clone)]
pub struct LexiconStub {
    entries: BTreeMap<String, LexiconEntry>,
    synonyms: BTreeMap<&'static str, &'static str>,
    dim: usize,
}

const SYNONYMS: &[(&str, &str)] = &[
    ("admiring", "admiration"),
    ("afraid", "fear"),
    ("aggressive", "aggressiveness"),
    ("amazed", "amazement"),
    ("angry", "anger"),
    ("annoyed", "annoyance"),
    ("anxious", "apprehension"),
    ("awed", "awe"),
    ("bored", "boredom"),
    ("calm", "serenity"),
    ("contemptuous", "contempt"),
    ("curious", "interest"),
    ("disgusted", "disgust"),
    ("distracted", "distraction"),
    ("ecstatic", "ecstasy"),
    ("expectant", "anticipation"),
    ("fearful", "fear"),
    ("furious", "rage"),
    ("gloomy", "pensiveness"),
    ("grieving", "grief"),
    ("happy", "joy"),
    ("hopeful", "optimism"),
    ("irritated", "annoyance"),
    ("joyful", "joy"),
    ("loving", "love"),
    ("mad", "anger"),
    ("peaceful", "serenity"),
    ("remorseful", "remorse"),
    ("sad", "sadness"),
    ("scared", "fear"),
    ("surprised", "surprise"),
    ("terrified", "terror"),
    ("trusting", "trust"),
    ("vigilant", "vigilance"),
];

impl LexiconStub {
    /// The bundled version-1 lexicon.
    pub fn builtin() -> Result<Self> {
        Self::from_json(LEXICON_V1)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, LexiconEntry> = serde_json::from_str(text).map_err(|e| {
            EmoError::FormatError {
                offset: 0,
                message: format!("lexicon: {e}"),
            }
        })?;
        let mut entries = BTreeMap::new();
        let mut dim = None;
        for (word, mut entry) in raw {
            if *dim.get_or_insert(entry.embedding.len()) != entry.embedding.len() {
                return Err(EmoError::InvariantViolation(format!(
                    "lexicon word {word:?} has inconsistent dimension"
                )));
            }
            entry.embedding = normalize(&entry.embedding).map_err(|_| {
                EmoError::InvariantViolation(format!("lexicon word {word:?} has a zero embedding"))
            })?;
            entries.insert(word, entry);
        }
        let dim = dim.ok_or(EmoError::EmptyInput)?;
        Ok(Self {
            entries,
            synonyms: SYNONYMS.iter().copied().collect(),
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entry(&self, word: &str) -> Option<&LexiconEntry> {
        self.entries.get(word)
    }

    /// Stored embedding of `word`.
    pub fn embedding(&self, word: &str) -> Result<&[f64]> {
        self.entries
            .get(word)
            .map(|e| e.embedding.as_slice())
            .ok_or_else(|| EmoError::OracleError {
                context: word.to_string(),
                message: "not in lexicon".into(),
            })
    }

    /// Lexicon word a token refers to, directly or through a synonym.
    fn resolve(&self, token: &str) -> Option<&str> {
        let lower = token.to_lowercase();
        if let Some((k, _)) = self.entries.get_key_value(lower.as_str()) {
            return Some(k.as_str());
        }
        self.synonyms.get(lower.as_str()).copied()
    }

    fn family(&self, word: &str) -> Vec<&str> {
        let Some(entry) = self.entries.get(word) else {
            return Vec::new();
        };
        let basic = if entry.gradation == "composite" {
            None
        } else {
            Some(entry.category.as_str())
        };
        self.entries
            .iter()
            .filter(|(_, e)| match basic {
                Some(cat) => e.category == cat || e.category.split('+').any(|c| c == cat),
                None => e.category == entry.category,
            })
            .map(|(w, _)| w.as_str())
            .collect()
    }
}

/// Split `word` into leading punctuation, alphabetic core and trailing punctuation.
fn split_token(token: &str) -> (&str, &str, &str) {
    let start = token.find(|c: char| c.is_alphanumeric()).unwrap_or(token.len());
    let end = token
        .rfind(|c: char| c.is_alphanumeric())
        .map_or(start, |i| i + token[i..].chars().next().map_or(1, char::len_utf8));
    (&token[..start], &token[start..end], &token[end..])
}

impl TextEmbedder for LexiconStub {
    /// Normalized sum of the embeddings of every lexicon word mentioned; text
    /// mentioning none maps to a fixed neutral direction.
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut hits = 0;
        for token in text.split_whitespace() {
            let (_, core, _) = split_token(token);
            if let Some(word) = self.resolve(core) {
                for (a, x) in acc.iter_mut().zip(&self.entries[word].embedding) {
                    *a += x;
                }
                hits += 1;
            }
        }
        if hits == 0 {
            acc[self.dim - 1] = 1.0;
        }
        normalize(&acc).map_err(|_| EmoError::OracleError {
            context: text.to_string(),
            message: "mentioned emotions cancel out".into(),
        })
    }
}

impl CandidateGenerator for LexiconStub {
    /// Swap the first emotion term in `prompt` for each member of its family;
    /// prompts without one get the eight basic emotions appended.
    fn propose(&self, prompt: &str, _context: &str) -> Result<Vec<Candidate>> {
        let tokens: Vec<&str> = prompt.split_whitespace().collect();
        for (pos, token) in tokens.iter().enumerate() {
            let (pre, core, post) = split_token(token);
            let Some(word) = self.resolve(core) else {
                continue;
            };
            return Ok(self
                .family(word)
                .into_iter()
                .map(|cand| {
                    let mut rewritten: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
                    rewritten[pos] = format!("{pre}{cand}{post}");
                    Candidate {
                        emotion: cand.to_string(),
                        refined_prompt: rewritten.join(" "),
                    }
                })
                .collect());
        }
        Ok(self
            .entries
            .iter()
            .filter(|(_, e)| e.gradation == "mid")
            .map(|(w, _)| Candidate {
                emotion: w.clone(),
                refined_prompt: format!("{prompt}, evoking {w}"),
            })
            .collect())
    }
}

/// Candidate whose embedding is most similar to `p_emo`; ties go to the
/// lexicographically smallest text.
pub fn select_dominant(
    candidates: &[String],
    p_emo: &[f64],
    embedder: &dyn TextEmbedder,
) -> Result<(String, f64)> {
    let scored = candidates
        .iter()
        .map(|c| similarity(c, p_emo, embedder).map(|s| (c.as_str(), s)))
        .collect::<Result<Vec<_>>>()?;
    best_of(scored)
        .map(|(c, s)| (c.to_string(), s))
        .ok_or(EmoError::EmptyInput)
}

fn best_of<'a>(scored: Vec<(&'a str, f64)>) -> Option<(&'a str, f64)> {
    scored.into_iter().fold(None, |best, (c, s)| match best {
        Some((bc, bs)) if s < bs || (s == bs && c >= bc) => Some((bc, bs)),
        _ => Some((c, s)),
    })
}

fn similarity(text: &str, p_emo: &[f64], embedder: &dyn TextEmbedder) -> Result<f64> {
    let oracle = |message: String| EmoError::OracleError {
        context: text.to_string(),
        message,
    };
    let v = embedder.embed(text).map_err(|e| match e {
        EmoError::OracleError { .. } => e,
        other => oracle(other.to_string()),
    })?;
    cosine_sim(&v, p_emo).map_err(|e| oracle(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    NoImprovement,
    NoCandidates,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStep {
    pub iteration: usize,
    pub prompt: String,
    pub dominant: String,
    pub dominant_similarity: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub initial_prompt: String,
    pub initial_similarity: f64,
    pub iterations: Vec<RefinementStep>,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Oracle rounds used, including a final non-improving one.
    pub rounds: usize,
}

impl RefinementTrace {
    pub fn final_prompt(&self) -> &str {
        self.iterations
            .last()
            .map_or(self.initial_prompt.as_str(), |s| s.prompt.as_str())
    }

    pub fn final_emotion(&self) -> Option<&str> {
        self.iterations.last().map(|s| s.dominant.as_str())
    }
}

/// Keep-best refinement of `p0` towards `p_emo`.
pub fn refine(
    p0: &str,
    p_emo: &[f64],
    generator: &dyn CandidateGenerator,
    embedder: &dyn TextEmbedder,
    max_iters: usize,
    eps_conv: f64,
) -> Result<RefinementTrace> {
    if max_iters == 0 {
        return Err(EmoError::InvalidConfig("max_iters must be at least 1".into()));
    }
    if !(eps_conv > 0.0) {
        return Err(EmoError::InvalidConfig("eps_conv must be positive".into()));
    }
    let initial_similarity = similarity(p0, p_emo, embedder)?;
    let mut current = p0.to_string();
    let mut current_sim = initial_similarity;
    let mut iterations = Vec::new();
    let mut stop_reason = StopReason::MaxIters;
    let mut rounds = 0;

    for iteration in 1..=max_iters {
        rounds = iteration;
        let with_iteration = |e: EmoError| match e {
            EmoError::OracleError { context, message } => EmoError::OracleError {
                context: format!("iteration {iteration}, {context}"),
                message,
            },
            other => EmoError::OracleError {
                context: format!("iteration {iteration}"),
                message: other.to_string(),
            },
        };
        let proposals = generator.propose(&current, "").map_err(with_iteration)?;
        if proposals.is_empty() {
            stop_reason = StopReason::NoCandidates;
            break;
        }
        let words: Vec<String> = proposals.iter().map(|c| c.emotion.clone()).collect();
        let (dominant, dominant_similarity) =
            select_dominant(&words, p_emo, embedder).map_err(with_iteration)?;
        let scored = proposals
            .iter()
            .map(|c| {
                similarity(&c.refined_prompt, p_emo, embedder).map(|s| (c.refined_prompt.as_str(), s))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(with_iteration)?;
        let (best_prompt, best_sim) = best_of(scored).expect("nonempty proposals");
        if best_sim <= current_sim {
            stop_reason = StopReason::NoImprovement;
            break;
        }
        let gain = best_sim - current_sim;
        current = best_prompt.to_string();
        current_sim = best_sim;
        iterations.push(RefinementStep {
            iteration,
            prompt: current.clone(),
            dominant,
            dominant_similarity,
            similarity: best_sim,
        });
        if gain < eps_conv {
            stop_reason = StopReason::Converged;
            break;
        }
    }

    Ok(RefinementTrace {
        initial_prompt: p0.to_string(),
        initial_similarity,
        iterations,
        converged: matches!(stop_reason, StopReason::Converged | StopReason::NoImprovement),
        stop_reason,
        rounds,
    })
}

/// Candidate generator backed by an HTTP completion endpoint.
///
/// Request body: `{"prompt": ..., "context": ...}`; response body: a JSON
/// array of `{"emotion": ..., "refined_prompt": ...}`. The bearer token is
/// read from [`ORACLE_TOKEN_ENV`].
#[cfg(feature = "live-oracle")]
pub struct HttpCandidateGenerator {
    endpoint: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

#[cfg(feature = "live-oracle")]
impl HttpCandidateGenerator {
    pub fn new(endpoint: impl Into<String>, timeout: std::time::Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmoError::OracleError {
                context: "http client".into(),
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            token: std::env::var(ORACLE_TOKEN_ENV).ok(),
            client,
        })
    }
}

#[cfg(feature = "live-oracle")]
impl CandidateGenerator for HttpCandidateGenerator {
    fn propose(&self, prompt: &str, context: &str) -> Result<Vec<Candidate>> {
        let err = |message: String| EmoError::OracleError {
            context: self.endpoint.clone(),
            message,
        };
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "prompt": prompt, "context": context }));
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| err(e.to_string()))?;
        let resp = resp.error_for_status().map_err(|e| err(e.to_string()))?;
        resp.json::<Vec<Candidate>>().map_err(|e| err(e.to_string()))
    }
}

/// Encode an embedding the way the lexicon file stores it.
pub fn encode_embedding(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}
