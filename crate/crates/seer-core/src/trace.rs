//! The structured output model: tagged-section serialization, a
//! never-failing parser, the format-compliance rubric and answer validation.
//!
//! The wire format is three sections in order, each tag on its own line:
//!
//! ```text
//! <evidence>
//! [view: axial mid-slice] bright focus left of midline
//! </evidence>
//! <rationale>
//! [skill:synonym-normalization] "left met" names the left_lesion target
//! </rationale>
//! <answer>
//! schema: 1
//! target: left_lesion
//! laterality: left
//! </answer>
//! ```
//!
//! Section tags match case-insensitively; duplicated or nested sections take
//! the first occurrence and cost compliance. The full grammar is documented
//! in `docs/trace-format.abnf`.

use crate::volume::{resolve_target, ResolveError};
use crate::volume::{Laterality, Plane, SceneCase, ViewKind};
use serde::{Deserialize, Serialize};
use std::fmt;

pub const ANSWER_SCHEMA_VERSION: u32 = 1;

/// A free-text request against one case. `intent_target` is evaluation-only
/// ground truth and is never shown to the policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: String,
    pub case_id: String,
    pub text: String,
    pub style: RequestStyle,
    pub intent_target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestStyle {
    RadiologyNote,
    Referral,
    ConsultQuestion,
    LabelLike,
}

impl RequestStyle {
    pub const ALL: [RequestStyle; 4] = [
        RequestStyle::RadiologyNote,
        RequestStyle::Referral,
        RequestStyle::ConsultQuestion,
        RequestStyle::LabelLike,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RequestStyle::RadiologyNote => "radiology-note",
            RequestStyle::Referral => "referral",
            RequestStyle::ConsultQuestion => "consult-question",
            RequestStyle::LabelLike => "label-like",
        }
    }

    pub fn parse(text: &str) -> Option<RequestStyle> {
        RequestStyle::ALL
            .iter()
            .copied()
            .find(|s| s.as_str() == text.trim())
    }
}

impl fmt::Display for RequestStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The executable part of a structured output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalAnswer {
    pub target_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laterality: Option<Laterality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subregion: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub view_caption: String,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleStep {
    pub skill_tag: String,
    pub text: String,
}

/// A complete (evidence, rationale, answer) triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub evidence: Vec<EvidenceItem>,
    pub rationale: Vec<RationaleStep>,
    pub answer: CanonicalAnswer,
}

/// What the parser recovered; the answer may be missing on degraded input.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialOutput {
    pub evidence: Vec<EvidenceItem>,
    pub rationale: Vec<RationaleStep>,
    pub answer: Option<CanonicalAnswer>,
}

impl PartialOutput {
    pub fn into_complete(self) -> Option<StructuredOutput> {
        let answer = self.answer?;
        Some(StructuredOutput {
            evidence: self.evidence,
            rationale: self.rationale,
            answer,
        })
    }
}

/// Machine-readable format defects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FormatIssue {
    MissingSection,
    OutOfOrder,
    UnparseableAnswer,
    UnknownSkillTag,
    EmptyEvidence,
    UnknownViewCaption,
    UnknownTarget,
}

/// Compliance score plus its defect list; 1.0 exactly when issues is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatReport {
    pub compliance: f64,
    pub issues: Vec<FormatIssue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Evidence,
    Rationale,
    Answer,
}

const SECTIONS: [Section; 3] = [Section::Evidence, Section::Rationale, Section::Answer];

impl Section {
    fn name(&self) -> &'static str {
        match self {
            Section::Evidence => "evidence",
            Section::Rationale => "rationale",
            Section::Answer => "answer",
        }
    }

    fn index(&self) -> usize {
        match self {
            Section::Evidence => 0,
            Section::Rationale => 1,
            Section::Answer => 2,
        }
    }
}

fn tag_of(line: &str) -> Option<(Section, bool)> {
    let trimmed = line.trim().to_ascii_lowercase();
    for section in SECTIONS {
        if trimmed == format!("<{}>", section.name()) {
            return Some((section, true));
        }
        if trimmed == format!("</{}>", section.name()) {
            return Some((section, false));
        }
    }
    None
}

struct RawSections {
    /// Content lines of the first occurrence of each section.
    content: [Option<Vec<String>>; 3],
    /// Line index of the first open tag of each section.
    first_open: [Option<usize>; 3],
    duplicated: bool,
}

fn split_sections(raw: &str) -> RawSections {
    let mut content: [Option<Vec<String>>; 3] = [None, None, None];
    let mut first_open: [Option<usize>; 3] = [None, None, None];
    let mut duplicated = false;
    // current = Some((section, keep)); keep is false inside a duplicate.
    let mut current: Option<(Section, bool)> = None;
    for (line_no, line) in raw.lines().enumerate() {
        match tag_of(line) {
            Some((section, true)) => {
                let idx = section.index();
                if first_open[idx].is_none() {
                    first_open[idx] = Some(line_no);
                    content[idx] = Some(Vec::new());
                    current = Some((section, true));
                } else {
                    duplicated = true;
                    current = Some((section, false));
                }
            }
            Some((section, false)) => {
                if let Some((open, _)) = current {
                    if open == section {
                        current = None;
                    }
                    // A close tag for a different section is structural
                    // garbage; skip it without leaving the current section.
                }
            }
            None => {
                if let Some((section, true)) = current {
                    if let Some(lines) = content[section.index()].as_mut() {
                        lines.push(line.to_string());
                    }
                }
            }
        }
    }
    RawSections {
        content,
        first_open,
        duplicated,
    }
}

fn parse_evidence_line(line: &str) -> Option<EvidenceItem> {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return None;
    }
    let lower = trimmed.to_ascii_lowercase();
    if lower.starts_with("[view:") {
        let inner = &trimmed["[view:".len()..];
        if let Some((caption, rest)) = inner.split_once(']') {
            let observation = rest.strip_prefix(' ').unwrap_or(rest);
            return Some(EvidenceItem {
                view_caption: caption.trim().to_string(),
                observation: observation.to_string(),
            });
        }
    }
    Some(EvidenceItem {
        view_caption: String::new(),
        observation: trimmed.to_string(),
    })
}

fn parse_rationale_line(line: &str) -> Option<RationaleStep> {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return None;
    }
    let lower = trimmed.to_ascii_lowercase();
    if lower.starts_with("[skill:") {
        let inner = &trimmed["[skill:".len()..];
        if let Some((tag, rest)) = inner.split_once(']') {
            let text = rest.strip_prefix(' ').unwrap_or(rest);
            return Some(RationaleStep {
                skill_tag: tag.trim().to_string(),
                text: text.to_string(),
            });
        }
    }
    Some(RationaleStep {
        skill_tag: String::new(),
        text: trimmed.to_string(),
    })
}

fn parse_answer_block(lines: &[String]) -> Option<CanonicalAnswer> {
    let mut target: Option<String> = None;
    let mut laterality: Option<Laterality> = None;
    let mut subregion: Option<String> = None;
    for line in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let Some((key, value)) = trimmed.split_once(':') else {
            continue;
        };
        let value = value.trim();
        match key.trim().to_ascii_lowercase().as_str() {
            "schema" => {
                if value != ANSWER_SCHEMA_VERSION.to_string() {
                    return None;
                }
            }
            "target" if target.is_none() && !value.is_empty() => {
                target = Some(value.to_string());
            }
            "laterality" if laterality.is_none() => {
                laterality = Some(Laterality::parse(value)?);
            }
            "subregion" if subregion.is_none() && !value.is_empty() => {
                subregion = Some(value.to_string());
            }
            _ => {}
        }
    }
    target.map(|target_id| CanonicalAnswer {
        target_id,
        laterality,
        subregion,
    })
}

/// The closed universe of canonical view captions ("{plane} {kind}").
pub fn canonical_view_captions() -> Vec<String> {
    let mut captions = Vec::with_capacity(6);
    for plane in Plane::ALL {
        for kind in ViewKind::ALL {
            captions.push(format!("{plane} {kind}"));
        }
    }
    captions
}

/// Flattened target vocabulary of a case: every target_id and synonym.
pub fn case_vocabulary(case: &SceneCase) -> Vec<String> {
    let mut vocab = Vec::new();
    for target in case.targets.values() {
        vocab.push(target.target_id.clone());
        vocab.extend(target.synonyms.iter().cloned());
    }
    vocab
}

struct Rubric<'a> {
    skill_tags: Option<&'a [String]>,
    target_vocabulary: Option<&'a [String]>,
    check_captions: bool,
}

fn assess(raw: &str, rubric: &Rubric<'_>) -> (PartialOutput, FormatReport) {
    let sections = split_sections(raw);
    let mut issues = Vec::new();

    // Quarter 1: all three sections present, in order, without duplicates.
    let mut q1 = true;
    for section in SECTIONS {
        if sections.first_open[section.index()].is_none() {
            issues.push(FormatIssue::MissingSection);
            q1 = false;
        }
    }
    let opens: Vec<usize> = sections.first_open.iter().flatten().copied().collect();
    let ordered = opens.windows(2).all(|w| w[0] < w[1]);
    if sections.duplicated || !ordered {
        issues.push(FormatIssue::OutOfOrder);
        q1 = false;
    }

    let evidence: Vec<EvidenceItem> = sections.content[Section::Evidence.index()]
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .filter_map(|l| parse_evidence_line(l))
        .collect();
    let rationale: Vec<RationaleStep> = sections.content[Section::Rationale.index()]
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .filter_map(|l| parse_rationale_line(l))
        .collect();
    let answer_lines = sections.content[Section::Answer.index()].as_deref();
    let answer = answer_lines.and_then(parse_answer_block);

    // Quarter 2: evidence present, non-empty, every item citing a caption
    // (and a known one, when caption checking is on).
    let captions = canonical_view_captions();
    let mut q2 = sections.first_open[Section::Evidence.index()].is_some();
    if q2 && evidence.is_empty() {
        issues.push(FormatIssue::EmptyEvidence);
        q2 = false;
    }
    if q2 {
        for item in &evidence {
            let cited = if rubric.check_captions {
                captions.iter().any(|c| c == &item.view_caption)
            } else {
                !item.view_caption.is_empty()
            };
            if !cited {
                issues.push(FormatIssue::UnknownViewCaption);
                q2 = false;
            }
        }
    }

    // Quarter 3: rationale present and every step carrying a valid tag.
    let mut q3 = sections.first_open[Section::Rationale.index()].is_some();
    if q3 {
        for step in &rationale {
            let known = match rubric.skill_tags {
                Some(tags) => tags.iter().any(|t| t == &step.skill_tag),
                None => !step.skill_tag.is_empty(),
            };
            if !known {
                issues.push(FormatIssue::UnknownSkillTag);
                q3 = false;
            }
        }
    }

    // Quarter 4: answer parses (and its target is in vocabulary, when given).
    let mut q4 = sections.first_open[Section::Answer.index()].is_some();
    if q4 && answer.is_none() {
        issues.push(FormatIssue::UnparseableAnswer);
        q4 = false;
    }
    if q4 {
        if let (Some(vocab), Some(ans)) = (rubric.target_vocabulary, &answer) {
            let key = crate::volume::normalize_term(&ans.target_id);
            if !vocab
                .iter()
                .any(|v| crate::volume::normalize_term(v) == key)
            {
                issues.push(FormatIssue::UnknownTarget);
                q4 = false;
            }
        }
    }

    let compliance = 0.25 * (q1 as u8 + q2 as u8 + q3 as u8 + q4 as u8) as f64;
    (
        PartialOutput {
            evidence,
            rationale,
            answer,
        },
        FormatReport { compliance, issues },
    )
}

/// Parses arbitrary text into whatever structure it contains, never failing.
/// The attached report scores structure only; registry- and
/// vocabulary-aware scoring is [`score_format`].
pub fn parse_structured_output(raw: &str) -> (PartialOutput, FormatReport) {
    assess(
        raw,
        &Rubric {
            skill_tags: None,
            target_vocabulary: None,
            check_captions: false,
        },
    )
}

/// Scores `raw` against the full compliance rubric: 0.25 per quarter for
/// section structure, cited evidence, registered skill tags and an
/// executable in-vocabulary answer.
pub fn score_format(
    raw: &str,
    known_skill_tags: &[String],
    target_vocabulary: &[String],
) -> FormatReport {
    let (_, report) = assess(
        raw,
        &Rubric {
            skill_tags: Some(known_skill_tags),
            target_vocabulary: Some(target_vocabulary),
            check_captions: true,
        },
    );
    report
}

/// Emits the canonical tagged-section text. Preconditions (checked by the
/// caller, not here): captions and tags contain no `]` or newlines, free
/// text is single-line without leading/trailing whitespace.
pub fn serialize_structured_output(output: &StructuredOutput) -> String {
    let mut text = String::new();
    text.push_str("<evidence>\n");
    for item in &output.evidence {
        text.push_str(&format!(
            "[view: {}] {}\n",
            item.view_caption, item.observation
        ));
    }
    text.push_str("</evidence>\n<rationale>\n");
    for step in &output.rationale {
        text.push_str(&format!("[skill:{}] {}\n", step.skill_tag, step.text));
    }
    text.push_str("</rationale>\n<answer>\n");
    text.push_str(&format!("schema: {ANSWER_SCHEMA_VERSION}\n"));
    text.push_str(&format!("target: {}\n", output.answer.target_id));
    if let Some(lat) = output.answer.laterality {
        text.push_str(&format!("laterality: {lat}\n"));
    }
    if let Some(sub) = &output.answer.subregion {
        text.push_str(&format!("subregion: {sub}\n"));
    }
    text.push_str("</answer>\n");
    text
}

/// Issue codes from checking an answer against a case's target table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnswerIssue {
    UnknownTarget,
    LateralityUnsupported,
    UnknownSubregion,
}

/// Schema gate before execution: empty iff the answer resolves.
pub fn validate_answer(answer: &CanonicalAnswer, case: &SceneCase) -> Vec<AnswerIssue> {
    match resolve_target(case, answer) {
        Ok(_) => vec![],
        Err(ResolveError::UnknownTarget) => vec![AnswerIssue::UnknownTarget],
        Err(ResolveError::LateralityMismatch) => vec![AnswerIssue::LateralityUnsupported],
        Err(ResolveError::UnknownSubregion) => vec![AnswerIssue::UnknownSubregion],
    }
}
