//! The pluggable policy: given rendered views, a request and retrieved
//! skills, produce raw structured-output text.
//!
//! Two implementations share the [`Policy`] trait: a deterministic scripted
//! simulator whose seeded ambiguity model makes the loop's causal claims
//! testable, and a remote chat-completion client for real model endpoints.

use crate::bank::{SkillArtifact, SkillSummarizer};
use crate::episode::Episode;
use crate::hashing::{derive_seed_labeled, sha256_hex};
use crate::perturb::{discriminative_synonyms, RequestRewriter, VariantCategory};
use crate::trace::{
    serialize_structured_output, CanonicalAnswer, EvidenceItem, RationaleStep, Request,
    RequestStyle, StructuredOutput,
};
use crate::volume::{Laterality, SceneCase, TargetSpec, View};
use base64::Engine as _;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};
use thiserror::Error;

pub const API_TOKEN_ENV: &str = "SEER_API_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: usize,
    /// GRPO group size n; 1 disables group sampling.
    pub samples_per_input: usize,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 512,
            samples_per_input: 1,
        }
    }
}

/// Conditioning tuple handed to the policy: views, request, skills in
/// retrieval order, decoding parameters.
#[derive(Debug, Clone)]
pub struct PolicyInput {
    pub views: Vec<View>,
    pub request_text: String,
    pub skills: Vec<SkillArtifact>,
    pub decoding: DecodingParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub raw_texts: Vec<String>,
    pub latency_ms: u64,
    pub provider: String,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("transport failure after {attempts} attempts: {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("policy endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    BadResponse(String),
    #[error("scripted policy parameter {name} = {value} outside [0, 1]")]
    BadParameter { name: &'static str, value: f64 },
}

pub trait Policy: Send + Sync {
    fn generate(&self, input: &PolicyInput) -> Result<PolicyOutput, PolicyError>;
    fn provider_name(&self) -> &str;
}

// ---------------------------------------------------------------------------
// Prompt assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

impl ChatMessage {
    pub fn text(role: &str, text: String) -> Self {
        Self {
            role: role.into(),
            content: vec![ContentPart::Text { text }],
        }
    }
}

const FORMAT_INSTRUCTIONS: &str = "\
You resolve free-text segmentation requests against rendered views of a 3D \
volume and answer with a canonical executable target specification.
Respond with exactly three sections in this order:
<evidence>
[view: <view caption>] <observation grounded in that view>
</evidence>
<rationale>
[skill:<skill-tag>] <one reasoning step>
</rationale>
<answer>
schema: 1
target: <canonical target id>
laterality: <left|right|bilateral>
subregion: <subregion id>
</answer>
The laterality and subregion lines are optional. Valid skill tags: \
anatomical-localization, spatial-relation, synonym-normalization, \
modality-cue, negation-handling, subregion-resolution.";

/// Deterministic message assembly: a system message carrying the output
/// format and the retrieved skills in rank order, then one user message
/// with view captions (plus images when enabled) and the request.
pub fn build_prompt(input: &PolicyInput, include_images: bool) -> Vec<ChatMessage> {
    let mut system = FORMAT_INSTRUCTIONS.to_string();
    if !input.skills.is_empty() {
        system.push_str("\n\nReusable skills:\n");
        for (i, skill) in input.skills.iter().enumerate() {
            system.push_str(&format!("{}. [{}] {}\n", i + 1, skill.tag, skill.content));
        }
    }
    let mut user_parts: Vec<ContentPart> = Vec::new();
    let mut view_lines = String::from("Rendered views:\n");
    for view in &input.views {
        view_lines.push_str(&format!("- {}\n", view.caption));
    }
    view_lines.push_str(&format!("\nRequest: {}", input.request_text));
    user_parts.push(ContentPart::Text { text: view_lines });
    if include_images {
        for view in &input.views {
            user_parts.push(ContentPart::ImageUrl {
                image_url: ImageUrl {
                    url: view_to_data_url(view),
                },
            });
        }
    }
    vec![
        ChatMessage::text("system", system),
        ChatMessage {
            role: "user".into(),
            content: user_parts,
        },
    ]
}

/// SHA-256 digest of the serialized message sequence.
pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    sha256_hex(
        serde_json::to_string(messages)
            .expect("messages serialize")
            .as_bytes(),
    )
}

fn view_to_data_url(view: &View) -> String {
    let pixels: Vec<u8> = view
        .pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(view.cols as u32, view.rows as u32, pixels)
        .expect("pixel buffer matches view shape");
    let mut png = std::io::Cursor::new(Vec::new());
    img.write_to(&mut png, image::ImageFormat::Png)
        .expect("png encodes in memory");
    let encoded = base64::engine::general_purpose::STANDARD.encode(png.into_inner());
    format!("data:image/png;base64,{encoded}")
}

// ---------------------------------------------------------------------------
// Scripted policy
// ---------------------------------------------------------------------------

/// Per-request ground truth for the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEntry {
    pub correct: CanonicalAnswer,
    pub wrong: CanonicalAnswer,
    /// Skill tag naming the kind of ambiguity this request carries; None
    /// means the request is unambiguous and never fails.
    pub ambiguity_class: Option<String>,
    /// Human-readable noun used in evidence/rationale text.
    pub target_noun: String,
    /// Laterality word used in observation text.
    pub side_word: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScriptedParams {
    /// Base probability of emitting a wrong answer on an ambiguous request.
    pub p_err: f64,
    /// Multiplicative error reduction per in-context skill whose tag
    /// matches the request's ambiguity class.
    pub f_skill: f64,
    /// Probability of emitting a format defect (dropped evidence section).
    pub p_fmt: f64,
}

impl Default for ScriptedParams {
    fn default() -> Self {
        Self {
            p_err: 0.4,
            f_skill: 0.3,
            p_fmt: 0.0,
        }
    }
}

/// A deterministic simulator: resolves requests against an answer table
/// with a seeded ambiguity model. Each in-context skill with a matching tag
/// multiplies the error rate by `f_skill`, so the simulator encodes the
/// causal claim the loop is tested against.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    table: BTreeMap<String, ScriptedEntry>,
    params: ScriptedParams,
    seed: u64,
}

fn check_unit(name: &'static str, value: f64) -> Result<(), PolicyError> {
    if !(0.0..=1.0).contains(&value) || !value.is_finite() {
        return Err(PolicyError::BadParameter { name, value });
    }
    Ok(())
}

impl ScriptedPolicy {
    pub fn new(
        table: BTreeMap<String, ScriptedEntry>,
        params: ScriptedParams,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        check_unit("p_err", params.p_err)?;
        check_unit("f_skill", params.f_skill)?;
        check_unit("p_fmt", params.p_fmt)?;
        Ok(Self {
            table,
            params,
            seed,
        })
    }

    pub fn table(&self) -> &BTreeMap<String, ScriptedEntry> {
        &self.table
    }

    fn render_sample(&self, input: &PolicyInput, sample: usize) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_labeled(
            self.seed,
            &["scripted", &input.request_text, &sample.to_string()],
        ));
        let Some(entry) = self.table.get(&input.request_text) else {
            // Off-table requests answer with an unresolvable target; the
            // executor then produces the degenerate empty mask.
            let fallback = StructuredOutput {
                evidence: vec![EvidenceItem {
                    view_caption: input
                        .views
                        .first()
                        .map(|v| v.caption.clone())
                        .unwrap_or_default(),
                    observation: "no matching structure identified".into(),
                }],
                rationale: vec![RationaleStep {
                    skill_tag: "anatomical-localization".into(),
                    text: "request does not match any known target".into(),
                }],
                answer: CanonicalAnswer {
                    target_id: "unresolvable_structure".into(),
                    laterality: None,
                    subregion: None,
                },
            };
            return serialize_structured_output(&fallback);
        };

        let effective_err = match &entry.ambiguity_class {
            Some(class) => {
                let matches = input.skills.iter().filter(|s| &s.tag == class).count() as i32;
                self.params.p_err * self.params.f_skill.powi(matches)
            }
            None => 0.0,
        };
        let wrong = effective_err > 0.0 && rng.random_bool(effective_err);
        let answer = if wrong {
            entry.wrong.clone()
        } else {
            entry.correct.clone()
        };

        let tag = entry
            .ambiguity_class
            .clone()
            .unwrap_or_else(|| "anatomical-localization".to_string());
        let mut evidence: Vec<EvidenceItem> = input
            .views
            .iter()
            .take(2)
            .map(|view| EvidenceItem {
                view_caption: view.caption.clone(),
                observation: format!(
                    "focal signal consistent with the {} on the {} side",
                    entry.target_noun, entry.side_word
                ),
            })
            .collect();
        let rationale = vec![RationaleStep {
            skill_tag: tag,
            text: format!(
                "the request phrase resolves to canonical target {} ({})",
                answer.target_id, entry.side_word
            ),
        }];
        let degraded = self.params.p_fmt > 0.0 && rng.random_bool(self.params.p_fmt);
        if degraded {
            evidence.clear();
        }
        let output = StructuredOutput {
            evidence,
            rationale,
            answer,
        };
        let text = serialize_structured_output(&output);
        if degraded {
            // Drop the evidence section entirely: a structural defect the
            // compliance rubric prices at two quarters.
            let start = text.find("<evidence>").unwrap_or(0);
            let end = text
                .find("</evidence>")
                .map(|i| i + "</evidence>\n".len())
                .unwrap_or(0);
            format!("{}{}", &text[..start], &text[end.min(text.len())..])
        } else {
            text
        }
    }
}

impl Policy for ScriptedPolicy {
    /// Pure function of (input, seed): per-sample RNG streams are derived
    /// from the request text and sample index, so outputs are identical
    /// across processes and thread schedules.
    fn generate(&self, input: &PolicyInput) -> Result<PolicyOutput, PolicyError> {
        let n = input.decoding.samples_per_input.max(1);
        let raw_texts = (0..n).map(|s| self.render_sample(input, s)).collect();
        Ok(PolicyOutput {
            raw_texts,
            latency_ms: 0,
            provider: "scripted".into(),
        })
    }

    fn provider_name(&self) -> &str {
        "scripted"
    }
}

// ---------------------------------------------------------------------------
// Scripted answer-table construction
// ---------------------------------------------------------------------------

/// Maps a request's provenance to the skill tag naming its ambiguity:
/// the variant category for rephrasings, the base style otherwise. The
/// classes mirror the phrasing families the corresponding skills resolve.
pub fn ambiguity_class_for(
    _case: &SceneCase,
    target: &TargetSpec,
    style: RequestStyle,
    category: Option<VariantCategory>,
    text: &str,
) -> Option<String> {
    use crate::volume::normalize_term;
    // The literal canonical name is unambiguous no matter how it arose.
    if normalize_term(text) == normalize_term(&target.target_id) {
        return None;
    }
    let class = match category {
        Some(VariantCategory::TypoNoise) => "synonym-normalization",
        Some(VariantCategory::SpatialSpecifier) => "spatial-relation",
        Some(VariantCategory::ClinicalParaphrase) => "anatomical-localization",
        None => match style {
            RequestStyle::RadiologyNote => "modality-cue",
            RequestStyle::Referral => "anatomical-localization",
            RequestStyle::ConsultQuestion => "synonym-normalization",
            RequestStyle::LabelLike => return None,
        },
    };
    Some(class.into())
}

/// Left/right counterpart of a lateralized target id, when it exists.
pub fn sibling_target_id(case: &SceneCase, target_id: &str) -> Option<String> {
    let flipped = if target_id.contains("left") {
        target_id.replace("left", "right")
    } else if target_id.contains("right") {
        target_id.replace("right", "left")
    } else {
        return None;
    };
    case.targets.contains_key(&flipped).then_some(flipped)
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("request {request_id} references target {target} missing from case {case_id}")]
    UnknownIntent {
        request_id: String,
        target: String,
        case_id: String,
    },
    #[error("request text {text:?} maps to conflicting answers; request texts must identify their intent")]
    ConflictingText { text: String },
}

/// Builds the simulator's answer table from requests and their cases.
/// The same text may appear for many cases as long as the implied entry is
/// identical; conflicting intents for one text are a construction error.
pub fn build_scripted_table(
    corpus: &[SceneCase],
    requests: &[(Request, Option<VariantCategory>)],
    seed: u64,
) -> Result<BTreeMap<String, ScriptedEntry>, TableError> {
    use crate::volume::normalize_term;
    let by_id: BTreeMap<&str, &SceneCase> =
        corpus.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let mut table: BTreeMap<String, ScriptedEntry> = BTreeMap::new();
    for (request, category) in requests {
        let case =
            by_id
                .get(request.case_id.as_str())
                .ok_or_else(|| TableError::UnknownIntent {
                    request_id: request.request_id.clone(),
                    target: request.intent_target.clone(),
                    case_id: request.case_id.clone(),
                })?;
        let target =
            case.targets
                .get(&request.intent_target)
                .ok_or_else(|| TableError::UnknownIntent {
                    request_id: request.request_id.clone(),
                    target: request.intent_target.clone(),
                    case_id: request.case_id.clone(),
                })?;

        // Correct answer: usually the exact id; sometimes a shared noun
        // plus laterality, to keep the executor's filter path exercised.
        // Seeded by the table key (the text) so one text always implies
        // one entry, whichever case it came from.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_labeled(
            seed,
            &["table", &request.text, &request.intent_target],
        ));
        let shared_noun = target.synonyms.iter().find(|synonym| {
            let key = normalize_term(synonym);
            case.targets.values().any(|other| {
                other.target_id != target.target_id
                    && other.synonyms.iter().any(|s| normalize_term(s) == key)
            })
        });
        let correct = match (shared_noun, target.laterality) {
            (Some(noun), Some(side)) if rng.random_bool(0.3) => CanonicalAnswer {
                target_id: noun.clone(),
                laterality: Some(side),
                subregion: None,
            },
            _ => CanonicalAnswer {
                target_id: target.target_id.clone(),
                laterality: None,
                subregion: None,
            },
        };
        let wrong = match sibling_target_id(case, &target.target_id) {
            Some(sibling) => CanonicalAnswer {
                target_id: sibling,
                laterality: None,
                subregion: None,
            },
            None => CanonicalAnswer {
                target_id: "unresolvable_structure".into(),
                laterality: None,
                subregion: None,
            },
        };
        let noun = discriminative_synonyms(case, target)
            .first()
            .cloned()
            .unwrap_or_else(|| target.target_id.clone());
        let side_word = match target.laterality {
            Some(Laterality::Left) => "left",
            Some(Laterality::Right) => "right",
            Some(Laterality::Bilateral) => "bilateral",
            None => "midline",
        };
        let entry = ScriptedEntry {
            correct,
            wrong,
            ambiguity_class: ambiguity_class_for(
                case,
                target,
                request.style,
                *category,
                &request.text,
            ),
            target_noun: noun,
            side_word: side_word.into(),
        };
        if let Some(existing) = table.get(&request.text) {
            // One text can reach the table twice (a typo pass may leave a
            // base unchanged); that is fine as long as the implied answers
            // agree. The first classification of the text stands: the
            // ambiguity class describes the text, not its provenance.
            let modulo_class = ScriptedEntry {
                ambiguity_class: existing.ambiguity_class.clone(),
                ..entry
            };
            if existing != &modulo_class {
                return Err(TableError::ConflictingText {
                    text: request.text.clone(),
                });
            }
        } else {
            table.insert(request.text.clone(), entry);
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Remote policy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    /// Full chat-completions URL, e.g. `http://host:8000/v1/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub timeout_s: u64,
    /// Additional attempts after the first failure.
    pub retries: u32,
    pub include_images: bool,
    /// Upper bound on concurrent in-flight requests when the loop fans out.
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            timeout_s: 30,
            retries: 2,
            include_images: false,
            max_in_flight: 4,
        }
    }
}

/// Counting gate bounding concurrent in-flight requests.
struct InFlightGate {
    active: std::sync::Mutex<usize>,
    freed: std::sync::Condvar,
    limit: usize,
}

impl InFlightGate {
    fn new(limit: usize) -> Self {
        Self {
            active: std::sync::Mutex::new(0),
            freed: std::sync::Condvar::new(),
            limit: limit.max(1),
        }
    }

    fn enter(&self) -> InFlightSlot<'_> {
        let mut active = self.active.lock().expect("gate lock");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("gate lock");
        }
        *active += 1;
        InFlightSlot { gate: self }
    }
}

struct InFlightSlot<'a> {
    gate: &'a InFlightGate,
}

impl Drop for InFlightSlot<'_> {
    fn drop(&mut self) {
        *self.gate.active.lock().expect("gate lock") -= 1;
        self.gate.freed.notify_one();
    }
}

pub struct RemotePolicy {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
    gate: InFlightGate,
}

#[derive(Serialize)]
struct ChatRequestBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    n: usize,
    temperature: f64,
    max_tokens: usize,
}

impl RemotePolicy {
    pub fn new(config: RemoteConfig) -> Result<Self, PolicyError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| PolicyError::Transport {
                attempts: 0,
                reason: e.to_string(),
            })?;
        let token = std::env::var(API_TOKEN_ENV).ok().filter(|t| !t.is_empty());
        let gate = InFlightGate::new(config.max_in_flight);
        Ok(Self {
            config,
            client,
            token,
            gate,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn post_once(&self, body: &ChatRequestBody<'_>) -> Result<Vec<String>, PolicyError> {
        let _slot = self.gate.enter();
        let mut request = self.client.post(&self.config.base_url).json(body);
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| PolicyError::Transport {
            attempts: 1,
            reason: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let text = response
            .text()
            .map_err(|e| PolicyError::BadResponse(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(PolicyError::Status {
                status,
                body: text.chars().take(400).collect(),
            });
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| PolicyError::BadResponse(e.to_string()))?;
        let choices = value
            .get("choices")
            .and_then(|c| c.as_array())
            .ok_or_else(|| PolicyError::BadResponse("missing choices array".into()))?;
        let mut texts = Vec::with_capacity(choices.len());
        for choice in choices {
            let content = choice
                .get("message")
                .and_then(|m| m.get("content"))
                .ok_or_else(|| PolicyError::BadResponse("choice without message.content".into()))?;
            let text = match content {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(parts) => parts
                    .iter()
                    .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
                    .collect::<Vec<_>>()
                    .join(""),
                other => other.to_string(),
            };
            texts.push(text);
        }
        Ok(texts)
    }

    fn post_with_retries(&self, body: &ChatRequestBody<'_>) -> Result<Vec<String>, PolicyError> {
        let attempts = self.config.retries + 1;
        let mut last: Option<PolicyError> = None;
        for attempt in 0..attempts {
            match self.post_once(body) {
                Ok(texts) => return Ok(texts),
                Err(err @ PolicyError::Status { status, .. }) if status < 500 => {
                    // Client errors are not retryable.
                    return Err(err);
                }
                Err(err) => {
                    last = Some(err);
                    if attempt + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(50 << attempt));
                    }
                }
            }
        }
        match last {
            Some(PolicyError::Transport { reason, .. }) => {
                Err(PolicyError::Transport { attempts, reason })
            }
            Some(other) => Err(other),
            None => Err(PolicyError::Transport {
                attempts,
                reason: "no attempt made".into(),
            }),
        }
    }
}

impl Policy for RemotePolicy {
    fn generate(&self, input: &PolicyInput) -> Result<PolicyOutput, PolicyError> {
        let started = Instant::now();
        let messages = build_prompt(input, self.config.include_images);
        let n = input.decoding.samples_per_input.max(1);
        let body = ChatRequestBody {
            model: &self.config.model,
            messages: &messages,
            n,
            temperature: input.decoding.temperature,
            max_tokens: input.decoding.max_tokens,
        };
        let mut raw_texts = self.post_with_retries(&body)?;
        // Endpoints that ignore `n` get topped up with single-sample calls.
        while raw_texts.len() < n {
            let single = ChatRequestBody { n: 1, ..body };
            let mut extra = self.post_with_retries(&single)?;
            if extra.is_empty() {
                return Err(PolicyError::BadResponse(
                    "endpoint returned no choices".into(),
                ));
            }
            raw_texts.append(&mut extra);
        }
        raw_texts.truncate(n);
        Ok(PolicyOutput {
            raw_texts,
            latency_ms: started.elapsed().as_millis() as u64,
            provider: self.config.model.clone(),
        })
    }

    fn provider_name(&self) -> &str {
        &self.config.model
    }
}

impl RemotePolicy {
    fn complete_instruction(&self, instruction: String) -> Result<String, PolicyError> {
        let input = PolicyInput {
            views: vec![],
            request_text: instruction,
            skills: vec![],
            decoding: DecodingParams {
                samples_per_input: 1,
                ..Default::default()
            },
        };
        let output = self.generate(&input)?;
        output
            .raw_texts
            .into_iter()
            .next()
            .ok_or_else(|| PolicyError::BadResponse("empty completion".into()))
    }
}

impl RequestRewriter for RemotePolicy {
    fn rewrite(
        &self,
        style: RequestStyle,
        _case: &SceneCase,
        target: &TargetSpec,
        draft: &str,
    ) -> Result<String, String> {
        let instruction = format!(
            "Rewrite the following clinical request in the style of a {style}, keeping the \
             clinical intent (the {} target) unchanged. Reply with the rewritten request only.\n\n{draft}",
            target.target_id
        );
        self.complete_instruction(instruction)
            .map_err(|e| e.to_string())
    }
}

impl SkillSummarizer for RemotePolicy {
    fn summarize(
        &self,
        request_text: &str,
        tag: &str,
        step_text: &str,
        answer: &CanonicalAnswer,
    ) -> Result<String, String> {
        let instruction = format!(
            "Summarize the following successful reasoning step as one reusable strategy of \
             kind {tag}. State the trigger pattern and the recommended resolution in one line.\n\
             Request: {request_text}\nStep: {step_text}\nAnswer target: {}",
            answer.target_id
        );
        self.complete_instruction(instruction)
            .map_err(|e| e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Training-data exports
// ---------------------------------------------------------------------------

/// Rebuilds the prompt messages an episode was generated from.
pub trait PromptSource {
    fn prompt_for(&self, episode: &Episode) -> Result<Vec<ChatMessage>, String>;
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot rebuild prompt for episode {episode_id}: {reason}")]
    Prompt { episode_id: String, reason: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Serialize)]
struct SftRecord<'a> {
    episode_id: &'a str,
    messages: Vec<ChatMessage>,
    completion: String,
}

/// Writes one JSONL record per episode with composite reward at or above
/// `threshold` and a complete parse; the completion is the serialized
/// normal form of the parsed output. Completions that would not re-parse
/// at full structural compliance (degraded outputs that happened to score
/// above the threshold) are skipped: they are not alignment targets.
/// Returns the record count.
pub fn export_sft<W: Write>(
    episodes: &[Episode],
    prompts: &dyn PromptSource,
    threshold: f64,
    writer: &mut W,
) -> Result<usize, ExportError> {
    let mut written = 0usize;
    for episode in episodes {
        if episode.reward.composite < threshold {
            continue;
        }
        let Some(complete) = episode.parsed.clone().into_complete() else {
            continue;
        };
        let completion = serialize_structured_output(&complete);
        let (_, report) = crate::trace::parse_structured_output(&completion);
        if report.compliance < 1.0 {
            continue;
        }
        let messages = prompts
            .prompt_for(episode)
            .map_err(|reason| ExportError::Prompt {
                episode_id: episode.episode_id.clone(),
                reason,
            })?;
        let record = SftRecord {
            episode_id: &episode.episode_id,
            messages,
            completion,
        };
        serde_json::to_writer(&mut *writer, &record)?;
        writer.write_all(b"\n")?;
        written += 1;
    }
    Ok(written)
}

/// One multi-sample generation group as persisted by the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoGroup {
    pub episode_id: String,
    pub prompt_digest: String,
    pub candidates: Vec<String>,
    pub rewards: Vec<f64>,
}

/// A group ready for export: prompt rebuilt, advantages computed.
#[derive(Debug, Clone, Serialize)]
pub struct GrpoExportGroup {
    pub episode_id: String,
    pub messages: Vec<ChatMessage>,
    pub candidates: Vec<String>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct GrpoWarning<'a> {
    warning: &'static str,
    episode_id: &'a str,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct GrpoExportStats {
    pub written: usize,
    pub skipped: usize,
}

/// Writes one record per group; groups with fewer than two candidates are
/// skipped with a warning record instead.
pub fn export_grpo_groups<W: Write>(
    groups: &[GrpoExportGroup],
    writer: &mut W,
) -> Result<GrpoExportStats, ExportError> {
    let mut stats = GrpoExportStats::default();
    for group in groups {
        if group.candidates.len() < 2 {
            let warning = GrpoWarning {
                warning: "group has fewer than 2 candidates",
                episode_id: &group.episode_id,
            };
            serde_json::to_writer(&mut *writer, &warning)?;
            writer.write_all(b"\n")?;
            stats.skipped += 1;
            continue;
        }
        serde_json::to_writer(&mut *writer, group)?;
        writer.write_all(b"\n")?;
        stats.written += 1;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::synth_requests;
    use crate::trace::parse_structured_output;
    use crate::volume::{render_views, synth_corpus, CorpusConfig, ViewConfig};

    fn corpus() -> Vec<SceneCase> {
        synth_corpus(
            &CorpusConfig {
                cases: 2,
                ..Default::default()
            },
            31,
        )
        .unwrap()
    }

    fn scripted_for(corpus: &[SceneCase], params: ScriptedParams, seed: u64) -> ScriptedPolicy {
        let mut requests = Vec::new();
        for case in corpus {
            for request in synth_requests(case, &RequestStyle::ALL, 7).unwrap() {
                requests.push((request, None));
            }
        }
        let table = build_scripted_table(corpus, &requests, seed).unwrap();
        ScriptedPolicy::new(table, params, seed).unwrap()
    }

    fn input_for(
        corpus: &[SceneCase],
        text: &str,
        skills: Vec<SkillArtifact>,
        n: usize,
    ) -> PolicyInput {
        PolicyInput {
            views: render_views(&corpus[0].volume, &ViewConfig::default()),
            request_text: text.into(),
            skills,
            decoding: DecodingParams {
                samples_per_input: n,
                ..Default::default()
            },
        }
    }

    #[test]
    fn noiseless_simulator_answers_correctly_with_full_compliance() {
        let corpus = corpus();
        let policy = scripted_for(
            &corpus,
            ScriptedParams {
                p_err: 0.0,
                f_skill: 0.3,
                p_fmt: 0.0,
            },
            5,
        );
        let requests = synth_requests(&corpus[0], &RequestStyle::ALL, 7).unwrap();
        for request in &requests {
            let input = input_for(&corpus, &request.text, vec![], 1);
            let output = policy.generate(&input).unwrap();
            let (parsed, report) = parse_structured_output(&output.raw_texts[0]);
            assert_eq!(report.compliance, 1.0, "{}", request.text);
            let answer = parsed.answer.unwrap();
            let resolved = crate::volume::resolve_target(&corpus[0], &answer).expect("resolvable");
            assert_eq!(resolved.target_id, request.intent_target);
        }
    }

    #[test]
    fn scripted_output_is_deterministic_and_sized() {
        let corpus = corpus();
        let policy = scripted_for(&corpus, ScriptedParams::default(), 5);
        let text =
            &synth_requests(&corpus[0], &[RequestStyle::ConsultQuestion], 7).unwrap()[0].text;
        let input = input_for(&corpus, text, vec![], 3);
        let a = policy.generate(&input).unwrap();
        let b = policy.generate(&input).unwrap();
        assert_eq!(a.raw_texts, b.raw_texts);
        assert_eq!(a.raw_texts.len(), 3);
    }

    #[test]
    fn matching_skill_halves_error_rate_monte_carlo() {
        // p_err = 0.5 with one matching skill at f_skill = 0.5 must give an
        // empirical wrong-answer rate near 0.25 over 10k seeded samples.
        let corpus = corpus();
        let policy = scripted_for(
            &corpus,
            ScriptedParams {
                p_err: 0.5,
                f_skill: 0.5,
                p_fmt: 0.0,
            },
            11,
        );
        let request = synth_requests(&corpus[0], &[RequestStyle::ConsultQuestion], 7)
            .unwrap()
            .into_iter()
            .find(|r| r.intent_target == "left_lesion")
            .unwrap();
        let entry = policy.table().get(&request.text).unwrap().clone();
        let class = entry.ambiguity_class.clone().unwrap();
        let skill = crate::bank::make_artifact(&class, "matching strategy", 0, vec![], 256);
        let input = input_for(&corpus, &request.text, vec![skill], 10_000);
        let output = policy.generate(&input).unwrap();
        let wrong = output
            .raw_texts
            .iter()
            .filter(|raw| {
                let (parsed, _) = parse_structured_output(raw);
                parsed.answer.unwrap().target_id != entry.correct.target_id
            })
            .count();
        let rate = wrong as f64 / 10_000.0;
        assert!((rate - 0.25).abs() <= 0.02, "empirical rate {rate}");
    }

    #[test]
    fn two_matching_skills_quarter_the_error_rate() {
        let corpus = corpus();
        let policy = scripted_for(
            &corpus,
            ScriptedParams {
                p_err: 0.4,
                f_skill: 0.5,
                p_fmt: 0.0,
            },
            13,
        );
        let request = synth_requests(&corpus[0], &[RequestStyle::ConsultQuestion], 7)
            .unwrap()
            .into_iter()
            .find(|r| r.intent_target == "left_lesion")
            .unwrap();
        let entry = policy.table().get(&request.text).unwrap().clone();
        let class = entry.ambiguity_class.clone().unwrap();
        let skills = vec![
            crate::bank::make_artifact(&class, "strategy one", 0, vec![], 256),
            crate::bank::make_artifact(&class, "strategy two", 0, vec![], 256),
            crate::bank::make_artifact("negation-handling", "unrelated", 0, vec![], 256),
        ];
        let input = input_for(&corpus, &request.text, skills, 10_000);
        let output = policy.generate(&input).unwrap();
        let wrong = output
            .raw_texts
            .iter()
            .filter(|raw| {
                let (parsed, _) = parse_structured_output(raw);
                parsed.answer.unwrap().target_id != entry.correct.target_id
            })
            .count();
        let rate = wrong as f64 / 10_000.0;
        assert!((rate - 0.1).abs() <= 0.02, "empirical rate {rate}");
    }

    #[test]
    fn format_defect_probability_degrades_compliance() {
        let corpus = corpus();
        let policy = scripted_for(
            &corpus,
            ScriptedParams {
                p_err: 0.0,
                f_skill: 1.0,
                p_fmt: 1.0,
            },
            3,
        );
        let text = &synth_requests(&corpus[0], &[RequestStyle::Referral], 7).unwrap()[0].text;
        let input = input_for(&corpus, text, vec![], 1);
        let output = policy.generate(&input).unwrap();
        let (_, report) = parse_structured_output(&output.raw_texts[0]);
        assert!(report.compliance < 1.0);
    }

    #[test]
    fn build_prompt_is_deterministic_and_skill_order_sensitive() {
        let corpus = corpus();
        let a = crate::bank::make_artifact("spatial-relation", "alpha", 0, vec![], 64);
        let b = crate::bank::make_artifact("modality-cue", "beta", 0, vec![], 64);
        let input1 = input_for(
            &corpus,
            "outline the left lesion",
            vec![a.clone(), b.clone()],
            1,
        );
        let input2 = input_for(&corpus, "outline the left lesion", vec![b, a], 1);
        let m1 = build_prompt(&input1, false);
        let m1_again = build_prompt(&input1, false);
        let m2 = build_prompt(&input2, false);
        assert_eq!(m1, m1_again);
        assert_ne!(prompt_digest(&m1), prompt_digest(&m2));
    }

    #[test]
    fn build_prompt_without_skills_omits_the_heading() {
        let corpus = corpus();
        let input = input_for(&corpus, "outline the left lesion", vec![], 1);
        let messages = build_prompt(&input, false);
        assert_eq!(messages.len(), 2);
        let ContentPart::Text { text } = &messages[0].content[0] else {
            panic!("system text")
        };
        assert!(!text.contains("Reusable skills"));
    }

    #[test]
    fn build_prompt_enumerates_skills_in_rank_order() {
        let corpus = corpus();
        let skills: Vec<SkillArtifact> = (0..4)
            .map(|i| {
                crate::bank::make_artifact(
                    "spatial-relation",
                    &format!("strategy {i}"),
                    0,
                    vec![],
                    64,
                )
            })
            .collect();
        let input = input_for(&corpus, "outline the left lesion", skills, 1);
        let messages = build_prompt(&input, false);
        let ContentPart::Text { text } = &messages[0].content[0] else {
            panic!("system text")
        };
        for i in 0..4 {
            assert!(text.contains(&format!("{}. [spatial-relation] strategy {}", i + 1, i)));
        }
    }

    #[test]
    fn prompt_with_images_carries_png_data_urls() {
        let corpus = corpus();
        let input = input_for(&corpus, "outline the left lesion", vec![], 1);
        let messages = build_prompt(&input, true);
        let parts = &messages[1].content;
        assert_eq!(parts.len(), 1 + input.views.len());
        let ContentPart::ImageUrl { image_url } = &parts[1] else {
            panic!("image part")
        };
        assert!(image_url.url.starts_with("data:image/png;base64,"));
    }

    #[test]
    fn conflicting_request_texts_are_rejected() {
        let corpus = corpus();
        let case = &corpus[0];
        let make = |intent: &str| Request {
            request_id: format!("q-{intent}"),
            case_id: case.case_id.clone(),
            text: "identical text".into(),
            style: RequestStyle::ConsultQuestion,
            intent_target: intent.into(),
        };
        let requests = vec![(make("left_lesion"), None), (make("right_lesion"), None)];
        assert!(matches!(
            build_scripted_table(&corpus, &requests, 1),
            Err(TableError::ConflictingText { .. })
        ));
    }

    struct StaticPrompts;

    impl PromptSource for StaticPrompts {
        fn prompt_for(&self, _episode: &Episode) -> Result<Vec<ChatMessage>, String> {
            Ok(vec![ChatMessage::text("user", "prompt".into())])
        }
    }

    fn episode_with_reward(id: &str, composite: f64, complete: bool) -> Episode {
        use crate::episode::EpisodeFlags;
        use crate::reward::RewardBreakdown;
        use crate::trace::{PartialOutput, StructuredOutput};
        let parsed = if complete {
            let output = StructuredOutput {
                evidence: vec![EvidenceItem {
                    view_caption: "axial mid-slice".into(),
                    observation: "focus".into(),
                }],
                rationale: vec![RationaleStep {
                    skill_tag: "spatial-relation".into(),
                    text: "keep left".into(),
                }],
                answer: CanonicalAnswer {
                    target_id: "left_lesion".into(),
                    laterality: None,
                    subregion: None,
                },
            };
            PartialOutput {
                evidence: output.evidence.clone(),
                rationale: output.rationale.clone(),
                answer: Some(output.answer),
            }
        } else {
            PartialOutput::default()
        };
        Episode {
            episode_id: id.into(),
            case_id: "case_0000".into(),
            request: Request {
                request_id: "q".into(),
                case_id: "case_0000".into(),
                text: "t".into(),
                style: RequestStyle::ConsultQuestion,
                intent_target: "left_lesion".into(),
            },
            retrieved_skill_ids: vec![],
            prompt_digest: String::new(),
            raw_output: String::new(),
            parsed,
            predicted_mask_digest: String::new(),
            reward: RewardBreakdown {
                dice_term: composite,
                stability_term: composite,
                format_term: composite,
                composite,
            },
            flags: EpisodeFlags::default(),
        }
    }

    #[test]
    fn sft_export_filters_by_threshold_and_parseability() {
        let episodes = vec![
            episode_with_reward("e1", 0.9, true),
            episode_with_reward("e2", 0.4, true),
            episode_with_reward("e3", 0.95, false),
        ];
        let mut buf = Vec::new();
        let n = export_sft(&episodes, &StaticPrompts, 0.5, &mut buf).unwrap();
        assert_eq!(n, 1);
        let line = String::from_utf8(buf).unwrap();
        assert!(line.contains("\"episode_id\":\"e1\""));
        // The exported completion must re-parse at full structural compliance.
        let value: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        let completion = value["completion"].as_str().unwrap();
        let (_, report) = parse_structured_output(completion);
        assert_eq!(report.compliance, 1.0);

        let mut buf = Vec::new();
        let n = export_sft(&episodes, &StaticPrompts, 1.0, &mut buf).unwrap();
        assert_eq!(n, 0);
        assert!(buf.is_empty());
    }

    #[test]
    fn sft_export_skips_structurally_degraded_completions() {
        // Complete parse, high reward, but the evidence section is empty,
        // so the serialized completion would re-parse below 1.0.
        let mut degraded = episode_with_reward("e-degraded", 0.95, true);
        degraded.parsed.evidence.clear();
        let healthy = episode_with_reward("e-healthy", 0.95, true);
        let mut buf = Vec::new();
        let n = export_sft(&[degraded, healthy], &StaticPrompts, 0.5, &mut buf).unwrap();
        assert_eq!(n, 1);
        assert!(String::from_utf8(buf).unwrap().contains("e-healthy"));
    }

    #[test]
    fn grpo_export_skips_small_groups_with_warning() {
        let groups = vec![
            GrpoExportGroup {
                episode_id: "e1".into(),
                messages: vec![ChatMessage::text("user", "p".into())],
                candidates: vec!["a".into(), "b".into(), "c".into()],
                rewards: vec![1.0, 2.0, 3.0],
                advantages: crate::reward::grpo_advantages(&[1.0, 2.0, 3.0]),
            },
            GrpoExportGroup {
                episode_id: "e2".into(),
                messages: vec![],
                candidates: vec!["only".into()],
                rewards: vec![0.5],
                advantages: vec![0.0],
            },
        ];
        let mut buf = Vec::new();
        let stats = export_grpo_groups(&groups, &mut buf).unwrap();
        assert_eq!(
            stats,
            GrpoExportStats {
                written: 1,
                skipped: 1
            }
        );
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("-1.224744871391589"));
        assert!(lines[1].contains("warning"));
    }

    #[test]
    fn empty_group_list_exports_nothing() {
        let mut buf = Vec::new();
        let stats = export_grpo_groups(&[], &mut buf).unwrap();
        assert_eq!(stats, GrpoExportStats::default());
        assert!(buf.is_empty());
    }

    #[test]
    fn remote_policy_happy_path_against_local_server() {
        use std::io::{BufRead, BufReader, Read, Write};
        use std::net::TcpListener;
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(rest) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = rest.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; content_length];
            reader.read_exact(&mut body).unwrap();
            let payload: serde_json::Value = serde_json::from_slice(&body).unwrap();
            assert_eq!(payload["model"], "test-model");
            assert_eq!(payload["n"], 2);
            let response_body = serde_json::json!({
                "choices": [
                    {"message": {"content": "first"}},
                    {"message": {"content": "second"}}
                ]
            })
            .to_string();
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                response_body.len(),
                response_body
            );
            stream.write_all(response.as_bytes()).unwrap();
        });

        let config = RemoteConfig {
            base_url: format!("http://{addr}/v1/chat/completions"),
            model: "test-model".into(),
            timeout_s: 5,
            retries: 0,
            include_images: false,
            max_in_flight: 1,
        };
        let policy = RemotePolicy::new(config).unwrap();
        let input = PolicyInput {
            views: vec![],
            request_text: "outline the left lesion".into(),
            skills: vec![],
            decoding: DecodingParams {
                samples_per_input: 2,
                ..Default::default()
            },
        };
        let output = policy.generate(&input).unwrap();
        assert_eq!(
            output.raw_texts,
            vec!["first".to_string(), "second".to_string()]
        );
        handle.join().unwrap();
    }

    #[test]
    fn remote_policy_maps_failures_to_typed_errors() {
        // Connection refused: nothing listens on the reserved port.
        let config = RemoteConfig {
            base_url: "http://127.0.0.1:1/v1/chat/completions".into(),
            timeout_s: 2,
            retries: 1,
            ..Default::default()
        };
        let policy = RemotePolicy::new(config).unwrap();
        let input = PolicyInput {
            views: vec![],
            request_text: "x".into(),
            skills: vec![],
            decoding: DecodingParams::default(),
        };
        match policy.generate(&input) {
            Err(PolicyError::Transport { attempts: 2, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }

        // Non-2xx status. The server drains the request before responding
        // so the client never sees a write-side reset.
        use std::io::{BufRead, BufReader, Read, Write};
        use std::net::TcpListener;
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(rest) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = rest.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; content_length];
            reader.read_exact(&mut body).unwrap();
            let body = "{\"error\": \"no such model\"}";
            let response = format!(
                "HTTP/1.1 404 Not Found\r\ncontent-length: {}\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(response.as_bytes()).unwrap();
        });
        let config = RemoteConfig {
            base_url: format!("http://{addr}/v1/chat/completions"),
            timeout_s: 2,
            retries: 3,
            ..Default::default()
        };
        let policy = RemotePolicy::new(config).unwrap();
        match policy.generate(&input) {
            Err(PolicyError::Status { status: 404, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
        handle.join().unwrap();
    }
}
