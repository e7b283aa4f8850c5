//! Clinically equivalent rephrasings and heterogeneous synthetic requests.
//!
//! Generation is template-driven and fully deterministic per seed; a
//! model-backed rewriter can be plugged in through [`RequestRewriter`] but is
//! never used on the reproducible paths. Template tables ship as the JSON
//! resource `resources/templates.json`, compiled into the crate.

use crate::hashing::derive_seed_labeled;
use crate::trace::{Request, RequestStyle};
use crate::volume::{Laterality, SceneCase, TargetSpec};
use rand::seq::IndexedRandom as _;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;
use thiserror::Error;

pub const DEFAULT_TYPO_BUDGET: usize = 3;

/// The three rephrasing categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantCategory {
    TypoNoise,
    SpatialSpecifier,
    ClinicalParaphrase,
}

impl VariantCategory {
    pub const ALL: [VariantCategory; 3] = [
        VariantCategory::TypoNoise,
        VariantCategory::SpatialSpecifier,
        VariantCategory::ClinicalParaphrase,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantCategory::TypoNoise => "typo-noise",
            VariantCategory::SpatialSpecifier => "spatial-specifier",
            VariantCategory::ClinicalParaphrase => "clinical-paraphrase",
        }
    }
}

impl fmt::Display for VariantCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A base request plus clinically equivalent variants, category-aligned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RephrasingGroup {
    pub base: Request,
    pub variants: Vec<Request>,
    /// Category of each variant, same length and order as `variants`.
    pub categories: Vec<VariantCategory>,
}

impl RephrasingGroup {
    /// Base first, then variants in order.
    pub fn all_requests(&self) -> Vec<&Request> {
        std::iter::once(&self.base)
            .chain(self.variants.iter())
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("variant generation needs at least one category")]
    NoCategories,
    #[error("n_per_category must be >= 1")]
    ZeroPerCategory,
    #[error("request references target {target} missing from case {case_id}")]
    UnknownIntent { case_id: String, target: String },
    #[error("template table is missing entries for {0}")]
    MissingTemplates(String),
    #[error("bad template json: {0}")]
    BadTemplateJson(#[from] serde_json::Error),
    #[error("model-backed rewrite failed: {0}")]
    Rewrite(String),
}

/// Style and category template patterns with {TARGET}, {LATERALITY} and
/// {BASE} placeholders.
#[derive(Debug, Clone, Deserialize)]
pub struct TemplateTable {
    styles: BTreeMap<String, Vec<String>>,
    paraphrase: BTreeMap<String, Vec<String>>,
    spatial: Vec<String>,
}

impl TemplateTable {
    pub fn from_json(json: &str) -> Result<Self, PerturbError> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn builtin() -> &'static TemplateTable {
        static TABLE: OnceLock<TemplateTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            TemplateTable::from_json(include_str!("../resources/templates.json"))
                .expect("builtin template table parses")
        })
    }

    fn style_patterns(&self, style: RequestStyle) -> Result<&[String], PerturbError> {
        self.styles
            .get(style.as_str())
            .map(|v| v.as_slice())
            .filter(|v| !v.is_empty())
            .ok_or_else(|| PerturbError::MissingTemplates(format!("style {style}")))
    }

    fn paraphrase_patterns(&self, class: &str) -> Result<&[String], PerturbError> {
        self.paraphrase
            .get(class)
            .or_else(|| self.paraphrase.get("generic"))
            .map(|v| v.as_slice())
            .filter(|v| !v.is_empty())
            .ok_or_else(|| PerturbError::MissingTemplates(format!("paraphrase class {class}")))
    }
}

/// Coarse synonym class of a target, used to key paraphrase templates.
pub fn synonym_class(target_id: &str) -> &'static str {
    if target_id.ends_with("_core") {
        "core"
    } else if target_id.contains("fragment") {
        "fragment"
    } else if target_id.contains("lesion") {
        "lesion"
    } else {
        "generic"
    }
}

fn laterality_word(target: &TargetSpec) -> &'static str {
    match target.laterality {
        Some(Laterality::Left) => "left",
        Some(Laterality::Right) => "right",
        Some(Laterality::Bilateral) => "bilateral",
        None => "midline",
    }
}

fn alnum_token(token: &str) -> String {
    token
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase()
}

/// Tokens that typo noise must never touch: every word of every target id
/// and synonym, plus the laterality words themselves.
pub fn protected_tokens(case: &SceneCase) -> BTreeSet<String> {
    let mut protected: BTreeSet<String> = ["left", "right", "bilateral", "midline"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for target in case.targets.values() {
        for term in std::iter::once(&target.target_id).chain(target.synonyms.iter()) {
            for token in term.replace('_', " ").split_whitespace() {
                protected.insert(alnum_token(token));
            }
        }
    }
    protected
}

fn intent_target<'a>(
    case: &'a SceneCase,
    request: &Request,
) -> Result<&'a TargetSpec, PerturbError> {
    case.targets
        .get(&request.intent_target)
        .ok_or_else(|| PerturbError::UnknownIntent {
            case_id: case.case_id.clone(),
            target: request.intent_target.clone(),
        })
}

/// Synonyms that identify the target uniquely within its case. Generated
/// request texts only ever name targets through these, so a text always
/// pins down one intent.
pub fn discriminative_synonyms(case: &SceneCase, target: &TargetSpec) -> Vec<String> {
    use crate::volume::normalize_term;
    let mut unique = Vec::new();
    for synonym in &target.synonyms {
        let key = normalize_term(synonym);
        let shared = case.targets.values().any(|other| {
            other.target_id != target.target_id
                && (normalize_term(&other.target_id) == key
                    || other.synonyms.iter().any(|s| normalize_term(s) == key))
        });
        if !shared {
            unique.push(synonym.clone());
        }
    }
    if unique.is_empty() {
        unique.push(target.target_id.replace('_', " "));
    }
    unique
}

/// Applies up to `budget` single-character edits (drops or substitutions) to
/// tokens that are not protected. Levenshtein distance from the input is at
/// most the number of edits applied.
fn typo_text(
    text: &str,
    protected: &BTreeSet<String>,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> String {
    let mut tokens: Vec<String> = text.split_whitespace().map(|t| t.to_string()).collect();
    let editable: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let key = alnum_token(t);
            key.chars().count() >= 4 && !protected.contains(&key)
        })
        .map(|(i, _)| i)
        .collect();
    if editable.is_empty() || budget == 0 {
        return tokens.join(" ");
    }
    let edits = rng.random_range(1..=budget);
    for _ in 0..edits {
        let idx = *editable.choose(rng).expect("editable is non-empty");
        let chars: Vec<char> = tokens[idx].chars().collect();
        if chars.len() < 2 {
            continue;
        }
        let pos = rng.random_range(0..chars.len());
        let mut out: Vec<char> = chars.clone();
        if rng.random_bool(0.5) {
            out.remove(pos);
        } else {
            let replacement = (b'a' + rng.random_range(0..26u8)) as char;
            out[pos] = replacement;
        }
        tokens[idx] = out.into_iter().collect();
    }
    tokens.join(" ")
}

fn paraphrase_text(
    table: &TemplateTable,
    case: &SceneCase,
    target: &TargetSpec,
    rng: &mut ChaCha8Rng,
) -> Result<String, PerturbError> {
    let patterns = table.paraphrase_patterns(synonym_class(&target.target_id))?;
    let pattern = patterns.choose(rng).expect("non-empty patterns");
    let synonyms = discriminative_synonyms(case, target);
    let synonym = synonyms.choose(rng).expect("at least the spaced id");
    Ok(pattern
        .replace("{TARGET}", &format!("\"{synonym}\""))
        .replace("{LATERALITY}", laterality_word(target)))
}

fn spatial_text(
    table: &TemplateTable,
    base_text: &str,
    target: &TargetSpec,
    rng: &mut ChaCha8Rng,
) -> Result<String, PerturbError> {
    if table.spatial.is_empty() {
        return Err(PerturbError::MissingTemplates("spatial".into()));
    }
    let pattern = table.spatial.choose(rng).expect("non-empty patterns");
    Ok(pattern
        .replace("{BASE}", base_text)
        .replace("{LATERALITY}", laterality_word(target)))
}

/// Generates `n_per_category` variants per listed category (duplicates in
/// `categories` are honored), all preserving the base request's case and
/// intent. Deterministic per seed.
pub fn generate_variants(
    case: &SceneCase,
    base: &Request,
    categories: &[VariantCategory],
    n_per_category: usize,
    typo_budget: usize,
    seed: u64,
) -> Result<RephrasingGroup, PerturbError> {
    if categories.is_empty() {
        return Err(PerturbError::NoCategories);
    }
    if n_per_category == 0 {
        return Err(PerturbError::ZeroPerCategory);
    }
    let target = intent_target(case, base)?;
    let table = TemplateTable::builtin();
    let protected = protected_tokens(case);
    let mut variants = Vec::new();
    let mut variant_categories = Vec::new();
    let mut index = 0usize;
    for (slot, &category) in categories.iter().enumerate() {
        for rep in 0..n_per_category {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_labeled(
                seed,
                &[
                    "variant",
                    &base.request_id,
                    category.as_str(),
                    &slot.to_string(),
                    &rep.to_string(),
                ],
            ));
            let text = match category {
                VariantCategory::TypoNoise => {
                    typo_text(&base.text, &protected, typo_budget, &mut rng)
                }
                VariantCategory::SpatialSpecifier => {
                    spatial_text(table, &base.text, target, &mut rng)?
                }
                VariantCategory::ClinicalParaphrase => {
                    paraphrase_text(table, case, target, &mut rng)?
                }
            };
            variants.push(Request {
                request_id: format!("{}-v{}-{}", base.request_id, index, category),
                case_id: base.case_id.clone(),
                text,
                style: base.style,
                intent_target: base.intent_target.clone(),
            });
            variant_categories.push(category);
            index += 1;
        }
    }
    Ok(RephrasingGroup {
        base: base.clone(),
        variants,
        categories: variant_categories,
    })
}

/// Optional model-backed rewriting hook used instead of templates when
/// present; the deterministic template text is offered as a draft.
pub trait RequestRewriter {
    fn rewrite(
        &self,
        style: RequestStyle,
        case: &SceneCase,
        target: &TargetSpec,
        draft: &str,
    ) -> Result<String, String>;
}

fn styled_text(
    table: &TemplateTable,
    case: &SceneCase,
    target: &TargetSpec,
    style: RequestStyle,
    rng: &mut ChaCha8Rng,
) -> Result<String, PerturbError> {
    if style == RequestStyle::LabelLike {
        // Label prompting uses the canonical name verbatim.
        return Ok(target.target_id.clone());
    }
    let pattern = table.style_patterns(style)?.choose(rng).expect("non-empty");
    let synonyms = discriminative_synonyms(case, target);
    let synonym = synonyms.choose(rng).expect("at least the spaced id");
    Ok(pattern
        .replace("{TARGET}", synonym)
        .replace("{LATERALITY}", laterality_word(target)))
}

/// Synthesizes one request for a specific (target, style) with an explicit
/// request_id. Deterministic per seed.
pub fn synth_request(
    case: &SceneCase,
    target_id: &str,
    style: RequestStyle,
    request_id: String,
    seed: u64,
) -> Result<Request, PerturbError> {
    let target = case
        .targets
        .get(target_id)
        .ok_or_else(|| PerturbError::UnknownIntent {
            case_id: case.case_id.clone(),
            target: target_id.to_string(),
        })?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_labeled(
        seed,
        &["request", &case.case_id, target_id, style.as_str()],
    ));
    let text = styled_text(TemplateTable::builtin(), case, target, style, &mut rng)?;
    Ok(Request {
        request_id,
        case_id: case.case_id.clone(),
        text,
        style,
        intent_target: target_id.to_string(),
    })
}

/// Template-driven request synthesis: one request per (target, style),
/// deterministic per seed.
pub fn synth_requests(
    case: &SceneCase,
    styles: &[RequestStyle],
    seed: u64,
) -> Result<Vec<Request>, PerturbError> {
    synth_requests_with(case, styles, seed, None)
}

/// [`synth_requests`] with an optional model-backed rewriter.
pub fn synth_requests_with(
    case: &SceneCase,
    styles: &[RequestStyle],
    seed: u64,
    rewriter: Option<&dyn RequestRewriter>,
) -> Result<Vec<Request>, PerturbError> {
    let table = TemplateTable::builtin();
    let mut requests = Vec::new();
    for target in case.targets.values() {
        for &style in styles {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_labeled(
                seed,
                &["request", &case.case_id, &target.target_id, style.as_str()],
            ));
            let draft = styled_text(table, case, target, style, &mut rng)?;
            let text = match rewriter {
                Some(r) => r
                    .rewrite(style, case, target, &draft)
                    .map_err(PerturbError::Rewrite)?,
                None => draft,
            };
            requests.push(Request {
                request_id: format!("{}-{}-{}", case.case_id, target.target_id, style),
                case_id: case.case_id.clone(),
                text,
                style,
                intent_target: target.target_id.clone(),
            });
        }
    }
    Ok(requests)
}
