//! Stage 2: re-embed atomic QA pairs into their full-document context.
//!
//! The claim provenance that served as a generation blueprint now acts as a
//! ground-truth evidence map: it fills a fixed localization template that is
//! prepended to the reasoning chain, and it pins the evidence while the rest
//! of the document is packed under image/token budgets. The same machinery
//! builds the three noise-controlled evaluation contexts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ParsedPaper;
use crate::qa::{QaItem, QaKind, ReasoningChain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentifierKind {
    Section,
    Figure,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationIdentifier {
    pub kind: IdentifierKind,
    pub label: String,
}

/// The templated evidence-localization sentence that opens every training
/// target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationStep {
    pub text: String,
    pub identifiers: Vec<LocalizationIdentifier>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PackingBudget {
    pub max_images: usize,
    pub max_tokens: usize,
    pub chars_per_token: usize,
    pub image_token_cost: usize,
}

impl Default for PackingBudget {
    fn default() -> Self {
        Self {
            max_images: 8,
            max_tokens: 16_384,
            chars_per_token: 4,
            image_token_cost: 1_024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedImage {
    pub visual_id: String,
    pub image_ref: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedContext {
    /// `(paragraph_id, text)` in document order.
    pub paragraphs: Vec<(String, String)>,
    pub images: Vec<PackedImage>,
    /// Ids (paragraph and visual) that are ground-truth evidence.
    pub evidence_mask: BTreeSet<String>,
}

impl PackedContext {
    pub fn packed_ids(&self) -> BTreeSet<String> {
        self.paragraphs
            .iter()
            .map(|(id, _)| id.clone())
            .chain(self.images.iter().map(|i| i.visual_id.clone()))
            .collect()
    }

    pub fn distractor_count(&self) -> usize {
        self.packed_ids().difference(&self.evidence_mask).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTarget {
    pub localization: LocalizationStep,
    pub reasoning: ReasoningChain,
    pub final_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub paper_id: String,
    pub qa_id: String,
    pub question_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub instance_id: String,
    pub question: String,
    pub context: PackedContext,
    pub target: TrainingTarget,
    pub kind: QaKind,
    pub meta: InstanceMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NoiseSetting {
    Oracle,
    Standard,
    FullPaper,
}

impl NoiseSetting {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseSetting::Oracle => "Oracle",
            NoiseSetting::Standard => "Standard",
            NoiseSetting::FullPaper => "FullPaper",
        }
    }
}

impl std::str::FromStr for NoiseSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().replace(['-', '_'], "").as_str() {
            "oracle" => Ok(NoiseSetting::Oracle),
            "standard" => Ok(NoiseSetting::Standard),
            "fullpaper" | "full" => Ok(NoiseSetting::FullPaper),
            other => Err(format!("unknown setting '{other}'")),
        }
    }
}

/// Standard-setting caps: limited retrieval-like noise.
pub const STANDARD_MAX_IMAGES: usize = 8;
pub const STANDARD_MAX_PARAGRAPHS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalContext {
    pub setting: NoiseSetting,
    pub packed: PackedContext,
    pub seed: u64,
}

/// Evidence pointers of an evaluation item, resolved against its paper.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRef {
    #[serde(default)]
    pub visual_ids: Vec<String>,
    #[serde(default)]
    pub paragraph_ids: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum RegroundError {
    #[error("no identifiers available for localization")]
    NoIdentifiers,
    #[error("missing provenance: {0}")]
    MissingProvenance(String),
    #[error("evidence alone exceeds the packing budget: {0}")]
    EvidenceExceedsBudget(String),
    #[error("evidence ids not found in paper: {0:?}")]
    UnresolvableEvidence(Vec<String>),
}

// --- localization -------------------------------------------------------------

fn visual_identifier(label: &str) -> LocalizationIdentifier {
    let kind = if label.trim().to_lowercase().starts_with("tab") {
        IdentifierKind::Table
    } else {
        IdentifierKind::Figure
    };
    LocalizationIdentifier {
        kind,
        label: label.trim().to_string(),
    }
}

/// Fill the localization template from the identifiers stored in claim
/// provenance. With both a section and a visual:
/// "To answer this question, I need to first consult Section {S}, and then
/// cross-reference the results in {V}." Section-only and visual-only variants
/// drop the missing half.
pub fn build_localization(
    section_label: Option<&str>,
    visual_label: Option<&str>,
) -> Result<LocalizationStep, RegroundError> {
    let section = section_label.map(str::trim).filter(|s| !s.is_empty());
    let visual = visual_label.map(str::trim).filter(|s| !s.is_empty());
    match (section, visual) {
        (Some(s), Some(v)) => Ok(LocalizationStep {
            text: format!(
                "To answer this question, I need to first consult Section {s}, and then cross-reference the results in {v}."
            ),
            identifiers: vec![
                LocalizationIdentifier {
                    kind: IdentifierKind::Section,
                    label: s.to_string(),
                },
                visual_identifier(v),
            ],
        }),
        (Some(s), None) => Ok(LocalizationStep {
            text: format!("To answer this question, I need to first consult Section {s}."),
            identifiers: vec![LocalizationIdentifier {
                kind: IdentifierKind::Section,
                label: s.to_string(),
            }],
        }),
        (None, Some(v)) => Ok(LocalizationStep {
            text: format!("To answer this question, I need to first examine {v}."),
            identifiers: vec![visual_identifier(v)],
        }),
        (None, None) => Err(RegroundError::NoIdentifiers),
    }
}

// --- packing -------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Element {
    id: String,
    position: f64,
    is_image: bool,
    token_cost: usize,
    is_evidence: bool,
}

fn char_count(s: &str) -> usize {
    s.chars().count()
}

fn text_tokens(text: &str, budget: &PackingBudget) -> usize {
    char_count(text).div_ceil(budget.chars_per_token.max(1))
}

fn image_tokens(caption: &str, budget: &PackingBudget) -> usize {
    budget.image_token_cost + text_tokens(caption, budget)
}

/// Estimated token footprint of a packed context: `ceil(chars/4)` per text,
/// plus a fixed per-image allowance and the caption text per image.
pub fn estimate_context_tokens(context: &PackedContext, budget: &PackingBudget) -> usize {
    context
        .paragraphs
        .iter()
        .map(|(_, text)| text_tokens(text, budget))
        .sum::<usize>()
        + context
            .images
            .iter()
            .map(|i| image_tokens(&i.caption, budget))
            .sum::<usize>()
}

fn document_elements(paper: &ParsedPaper, evidence: &BTreeSet<String>) -> Vec<Element> {
    let mut elements = Vec::new();
    for (i, p) in paper.paragraphs().enumerate() {
        elements.push(Element {
            id: p.paragraph_id.clone(),
            position: i as f64,
            is_image: false,
            token_cost: 0, // filled by caller with the active budget
            is_evidence: evidence.contains(&p.paragraph_id),
        });
    }
    let positions = paper.visual_positions();
    for (i, v) in paper.visuals.iter().enumerate() {
        elements.push(Element {
            id: v.visual_id.clone(),
            position: positions[i],
            is_image: true,
            token_cost: 0,
            is_evidence: evidence.contains(&v.visual_id),
        });
    }
    elements.sort_by(|a, b| a.position.total_cmp(&b.position));
    elements
}

fn materialize(paper: &ParsedPaper, kept: &[Element], evidence: &BTreeSet<String>) -> PackedContext {
    let mut paragraphs = Vec::new();
    let mut images = Vec::new();
    for element in kept {
        if element.is_image {
            let v = paper.visual(&element.id).expect("visual exists");
            images.push(PackedImage {
                visual_id: v.visual_id.clone(),
                image_ref: v.image_ref.clone(),
                caption: v.caption.clone(),
            });
        } else {
            let p = paper.paragraph(&element.id).expect("paragraph exists");
            paragraphs.push((p.paragraph_id.clone(), p.text.clone()));
        }
    }
    PackedContext {
        paragraphs,
        images,
        evidence_mask: evidence.clone(),
    }
}

/// Pack the full document under the budget, never dropping evidence.
/// Non-evidence elements fall away in decreasing document distance from the
/// nearest evidence element, later positions first on ties.
fn pack_document(
    paper: &ParsedPaper,
    evidence: &BTreeSet<String>,
    budget: &PackingBudget,
) -> Result<PackedContext, RegroundError> {
    let mut elements = document_elements(paper, evidence);
    for element in &mut elements {
        element.token_cost = if element.is_image {
            let caption = &paper.visual(&element.id).expect("visual exists").caption;
            image_tokens(caption, budget)
        } else {
            let text = &paper.paragraph(&element.id).expect("paragraph exists").text;
            text_tokens(text, budget)
        };
    }

    let evidence_positions: Vec<f64> = elements
        .iter()
        .filter(|e| e.is_evidence)
        .map(|e| e.position)
        .collect();
    let distance = |e: &Element| -> f64 {
        evidence_positions
            .iter()
            .map(|p| (e.position - p).abs())
            .fold(f64::INFINITY, f64::min)
    };

    // Evidence must fit on its own, or the item is unpackable.
    let evidence_images = elements.iter().filter(|e| e.is_evidence && e.is_image).count();
    if evidence_images > budget.max_images {
        return Err(RegroundError::EvidenceExceedsBudget(format!(
            "{evidence_images} evidence images exceed the {}-image budget",
            budget.max_images
        )));
    }
    let evidence_tokens: usize = elements
        .iter()
        .filter(|e| e.is_evidence)
        .map(|e| e.token_cost)
        .sum();
    if evidence_tokens > budget.max_tokens {
        return Err(RegroundError::EvidenceExceedsBudget(format!(
            "evidence needs ~{evidence_tokens} tokens, budget is {}",
            budget.max_tokens
        )));
    }

    let mut kept = elements;
    // Image budget first.
    while kept.iter().filter(|e| e.is_image).count() > budget.max_images {
        let victim = kept
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_image && !e.is_evidence)
            .max_by(|(_, a), (_, b)| {
                distance(a)
                    .total_cmp(&distance(b))
                    .then(a.position.total_cmp(&b.position))
            })
            .map(|(i, _)| i)
            .expect("evidence fits, so a non-evidence image exists");
        kept.remove(victim);
    }
    // Token budget next, over paragraphs and images alike.
    while kept.iter().map(|e| e.token_cost).sum::<usize>() > budget.max_tokens {
        let victim = kept
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.is_evidence)
            .max_by(|(_, a), (_, b)| {
                distance(a)
                    .total_cmp(&distance(b))
                    .then(a.position.total_cmp(&b.position))
            })
            .map(|(i, _)| i)
            .expect("evidence fits, so a non-evidence element exists");
        kept.remove(victim);
    }

    Ok(materialize(paper, &kept, evidence))
}

fn resolve_evidence(
    paper: &ParsedPaper,
    evidence: &EvidenceRef,
) -> Result<BTreeSet<String>, RegroundError> {
    let mut missing = Vec::new();
    let mut set = BTreeSet::new();
    for id in &evidence.paragraph_ids {
        if paper.paragraph(id).is_some() {
            set.insert(id.clone());
        } else {
            missing.push(id.clone());
        }
    }
    for id in &evidence.visual_ids {
        if paper.visual(id).is_some() {
            set.insert(id.clone());
        } else {
            missing.push(id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(RegroundError::UnresolvableEvidence(missing));
    }
    Ok(set)
}

// --- training instances ---------------------------------------------------------

fn localization_for_item(
    item: &QaItem,
    paper: &ParsedPaper,
) -> Result<LocalizationStep, RegroundError> {
    let section_label = item
        .evidence
        .paragraph_ids
        .first()
        .and_then(|pid| paper.section_label_for(pid));
    let visual_label = match item.kind {
        // Text-only items cite their section; the visual played no part.
        QaKind::Tqa => None,
        QaKind::Vqa | QaKind::Mqa => item
            .evidence
            .visual_id
            .as_deref()
            .and_then(|vid| paper.visual(vid))
            .map(|v| v.label.clone()),
    };
    match item.kind {
        QaKind::Tqa if section_label.is_none() => Err(RegroundError::MissingProvenance(
            format!("{}: no section identifier", item.qa_id),
        )),
        QaKind::Vqa if visual_label.is_none() => Err(RegroundError::MissingProvenance(
            format!("{}: no visual identifier", item.qa_id),
        )),
        QaKind::Mqa if section_label.is_none() && visual_label.is_none() => Err(
            RegroundError::MissingProvenance(format!("{}: no identifiers at all", item.qa_id)),
        ),
        _ => {
            let visual_only_for_vqa = match item.kind {
                QaKind::Vqa => None,
                _ => section_label.as_deref(),
            };
            build_localization(visual_only_for_vqa, visual_label.as_deref())
        }
    }
}

/// Re-embed one retained QA item into its full document: context packed
/// under budget with evidence pinned, target prefixed with the localization
/// step built from the item's provenance (visual-only for VQA).
pub fn assemble_training_instance(
    item: &QaItem,
    paper: &ParsedPaper,
    budget: &PackingBudget,
) -> Result<TrainingInstance, RegroundError> {
    let evidence_ref = EvidenceRef {
        visual_ids: item.evidence.visual_id.iter().cloned().collect(),
        paragraph_ids: item.evidence.paragraph_ids.clone(),
    };
    let evidence = resolve_evidence(paper, &evidence_ref)?;
    if evidence.is_empty() {
        return Err(RegroundError::MissingProvenance(format!(
            "{}: item carries no evidence ids",
            item.qa_id
        )));
    }
    let localization = localization_for_item(item, paper)?;
    let context = pack_document(paper, &evidence, budget)?;
    Ok(TrainingInstance {
        instance_id: item.qa_id.clone(),
        question: item.question.clone(),
        context,
        target: TrainingTarget {
            localization,
            reasoning: item.reasoning.clone(),
            final_answer: item.answer.clone(),
        },
        kind: item.kind,
        meta: InstanceMeta {
            paper_id: paper.paper_id.clone(),
            qa_id: item.qa_id.clone(),
            question_type: item.question_type.clone(),
        },
    })
}

/// Serialize a training target in its fixed order: localization, then the
/// reasoning chain (steps 1..n, or the visual walkthrough for VQA), then the
/// final answer.
pub fn render_target(target: &TrainingTarget) -> String {
    let mut out = String::new();
    out.push_str(&target.localization.text);
    out.push('\n');
    if let Some(understand) = &target.reasoning.understand_question {
        if !understand.trim().is_empty() {
            out.push_str(understand);
            out.push('\n');
        }
    }
    if let Some(vqa) = &target.reasoning.vqa_fields {
        out.push_str(&format!("Image description: {}\n", vqa.global_image_description));
        out.push_str(&format!("Relevant parts: {}\n", vqa.relevant_parts_of_image));
        out.push_str(&format!("Reasoning: {}\n", vqa.step_by_step_reasoning));
    } else {
        for step in &target.reasoning.steps {
            out.push_str(&format!("Step {}: {}\n", step.step, step.reasoning));
        }
    }
    out.push_str(&format!("Final answer: {}", target.final_answer));
    out
}

// --- evaluation contexts ---------------------------------------------------------

fn selection_rank(item_id: &str, seed: u64, candidate_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(item_id.as_bytes());
    h.update([0x1f]);
    h.update(seed.to_le_bytes());
    h.update([0x1f]);
    h.update(candidate_id.as_bytes());
    h.finalize().into()
}

/// Build the evaluation context for one benchmark item under a noise setting.
///
/// Oracle: exactly the evidence visuals and referencing paragraphs, zero
/// distractors. Standard: evidence plus seeded distractor fill up to 8 images
/// and 6 paragraphs. FullPaper: every paragraph and every visual. Selection is
/// deterministic given `(item_id, seed)`: non-evidence candidates are ranked
/// by a keyed hash and the smallest fill the remaining slots.
pub fn build_eval_context(
    item_id: &str,
    evidence: &EvidenceRef,
    paper: &ParsedPaper,
    setting: NoiseSetting,
    seed: u64,
) -> Result<EvalContext, RegroundError> {
    let evidence_set = resolve_evidence(paper, evidence)?;
    let elements = document_elements(paper, &evidence_set);

    let kept: Vec<Element> = match setting {
        NoiseSetting::Oracle => elements.into_iter().filter(|e| e.is_evidence).collect(),
        NoiseSetting::FullPaper => elements,
        NoiseSetting::Standard => {
            let evidence_images = elements.iter().filter(|e| e.is_evidence && e.is_image).count();
            let evidence_paragraphs = elements
                .iter()
                .filter(|e| e.is_evidence && !e.is_image)
                .count();
            let image_slots = STANDARD_MAX_IMAGES.saturating_sub(evidence_images);
            let paragraph_slots = STANDARD_MAX_PARAGRAPHS.saturating_sub(evidence_paragraphs);

            let mut chosen: BTreeSet<String> =
                elements.iter().filter(|e| e.is_evidence).map(|e| e.id.clone()).collect();
            for (is_image, slots) in [(true, image_slots), (false, paragraph_slots)] {
                let mut candidates: Vec<&Element> = elements
                    .iter()
                    .filter(|e| e.is_image == is_image && !e.is_evidence)
                    .collect();
                candidates.sort_by_key(|e| selection_rank(item_id, seed, &e.id));
                for c in candidates.into_iter().take(slots) {
                    chosen.insert(c.id.clone());
                }
            }
            elements
                .into_iter()
                .filter(|e| chosen.contains(&e.id))
                .collect()
        }
    };

    Ok(EvalContext {
        setting,
        packed: materialize(paper, &kept, &evidence_set),
        seed,
    })
}
