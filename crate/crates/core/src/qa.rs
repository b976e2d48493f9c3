//! Stage-1b of synthesis: generate text-only, vision-only, and multimodal QA
//! items with backward-constructed reasoning chains, validate output schemas,
//! and lint questions against the phrasing rules.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::claims::{GroundedClaim, RelationshipType};
use crate::corpus::{ContextUnit, ParsedPaper, Visual};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Message};
use crate::prompts::PromptLibrary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QaKind {
    #[serde(rename = "TQA")]
    Tqa,
    #[serde(rename = "VQA")]
    Vqa,
    #[serde(rename = "MQA")]
    Mqa,
}

impl QaKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            QaKind::Tqa => "TQA",
            QaKind::Vqa => "VQA",
            QaKind::Mqa => "MQA",
        }
    }
}

/// TQA strategies, as canonical codes.
pub const TQA_TYPES: &[&str] = &[
    "ConceptualUnderstanding",
    "MethodologicalAnalysis",
    "CriticalEvaluation",
    "ComparativeAnalysis",
    "CausalReasoning",
];

pub const VQA_TYPES: &[&str] = &["DR", "EI", "CO", "CT", "CR", "TP", "IP", "MS"];

pub const MQA_TYPES: &[&str] = &["EEQ", "CIM", "HVI", "CAC", "ARS"];

/// Canonicalize a generator-emitted type string for the given kind:
/// display forms like "Conceptual Understanding" collapse to their code.
pub fn canonical_question_type(kind: QaKind, raw: &str) -> Option<&'static str> {
    let squashed: String = raw.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
    let set = match kind {
        QaKind::Tqa => TQA_TYPES,
        QaKind::Vqa => VQA_TYPES,
        QaKind::Mqa => MQA_TYPES,
    };
    set.iter()
        .find(|t| t.eq_ignore_ascii_case(&squashed))
        .copied()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub step: u32,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaFields {
    pub global_image_description: String,
    pub relevant_parts_of_image: String,
    pub step_by_step_reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub understand_question: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<ReasoningStep>,
    pub conclusion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vqa_fields: Option<VqaFields>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_citations: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub claim_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paragraph_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub qa_id: String,
    pub kind: QaKind,
    pub question_type: String,
    pub question: String,
    pub reasoning: ReasoningChain,
    /// Full-sentence answer.
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_form_answer: Option<String>,
    pub evidence: Evidence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relationship_type: Option<RelationshipType>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LintRule {
    MultiQuestion,
    ModalityLeak,
    EmptyAnswer,
    TaxonomyMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LintViolation {
    pub rule: LintRule,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LintReport {
    pub qa_id: String,
    pub violations: Vec<LintViolation>,
}

impl LintReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty()
    }
}

/// An item the generator produced but validation refused, kept for the
/// quarantine file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectedItem {
    pub qa_id: String,
    pub reasons: Vec<String>,
    pub raw_output: Value,
}

/// Retained items plus everything dropped on the way, so rejection rates are
/// reportable.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub items: Vec<QaItem>,
    pub rejected: Vec<RejectedItem>,
}

#[derive(Debug, thiserror::Error)]
pub enum QaError {
    #[error("no claims supplied")]
    EmptyClaims,
    #[error("routing contract violated: {0}")]
    RoutingContract(String),
    #[error("'{code}' is not a valid {kind} question type")]
    TaxonomyMismatch { kind: &'static str, code: String },
    #[error("all {total} generated items were rejected")]
    AllItemsRejected { total: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone)]
pub struct GenOptions {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Items generated per claim; sampling rounds beyond the first carry a
    /// round marker in the prompt so they do not collapse in the cache.
    pub samples_per_claim: u32,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            model_id: "generator".to_string(),
            temperature: 0.7,
            max_output_tokens: 4096,
            samples_per_claim: 1,
        }
    }
}

fn normalize_for_match(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Backward-construction fidelity: the generated conclusion must contain
/// every key entity of its source claim.
fn missing_entities(conclusion: &str, entities: &[String]) -> Vec<String> {
    let haystack = normalize_for_match(conclusion);
    entities
        .iter()
        .filter(|e| !haystack.contains(&normalize_for_match(e)))
        .cloned()
        .collect()
}

fn parse_chain(answer: &Value) -> Option<ReasoningChain> {
    let steps: Vec<ReasoningStep> = answer["chain_of_thought_answer"]
        .as_array()?
        .iter()
        .map(|s| {
            Some(ReasoningStep {
                step: s["step"].as_u64()? as u32,
                reasoning: s["reasoning"].as_str()?.to_string(),
            })
        })
        .collect::<Option<_>>()?;
    Some(ReasoningChain {
        understand_question: answer["understand_question"].as_str().map(str::to_string),
        steps,
        conclusion: answer["conclusion"].as_str()?.to_string(),
        vqa_fields: None,
        evidence_citations: None,
    })
}

fn validate_chain_shape(chain: &ReasoningChain) -> Result<(), String> {
    if chain.steps.len() < 3 {
        return Err(format!("expected at least 3 reasoning steps, got {}", chain.steps.len()));
    }
    for (i, step) in chain.steps.iter().enumerate() {
        if step.step as usize != i + 1 {
            return Err(format!(
                "steps must be numbered 1..n contiguously; step {} at position {}",
                step.step,
                i + 1
            ));
        }
    }
    if chain.conclusion.trim().is_empty() {
        return Err("empty conclusion".to_string());
    }
    Ok(())
}

fn claim_backed_items(
    kind: QaKind,
    claims: &[GroundedClaim],
    returned: &[Value],
    sample: u32,
    visual_id: Option<&str>,
) -> GenerationOutcome {
    let mut outcome = GenerationOutcome::default();
    let kind_name = kind.as_str();
    for (i, claim) in claims.iter().enumerate() {
        let qa_id = if sample == 0 {
            format!("{}/{}_{:02}", claim.claim.provenance.unit_id, kind_name, i + 1)
        } else {
            format!(
                "{}/{}_{:02}_s{}",
                claim.claim.provenance.unit_id,
                kind_name,
                i + 1,
                sample
            )
        };
        let Some(item) = returned.get(i) else {
            outcome.rejected.push(RejectedItem {
                qa_id,
                reasons: vec!["generator returned no item for this claim".into()],
                raw_output: Value::Null,
            });
            continue;
        };
        let mut reasons = Vec::new();
        let question_type = item["question_type"].as_str().unwrap_or_default();
        let canonical = canonical_question_type(kind, question_type);
        if canonical.is_none() {
            reasons.push(format!("'{question_type}' is not a valid {kind_name} type"));
        }
        let question = item["question"].as_str().unwrap_or_default().to_string();
        let mut chain = match parse_chain(&item["answer"]) {
            Some(chain) => chain,
            None => {
                outcome.rejected.push(RejectedItem {
                    qa_id,
                    reasons: vec!["malformed answer object".into()],
                    raw_output: item.clone(),
                });
                continue;
            }
        };
        if let Err(reason) = validate_chain_shape(&chain) {
            reasons.push(reason);
        }
        let missing = missing_entities(&chain.conclusion, &claim.claim.key_entities);
        if !missing.is_empty() {
            reasons.push(format!(
                "conclusion does not mention key entities {missing:?}"
            ));
        }
        if kind == QaKind::Mqa {
            chain.evidence_citations = item["evidence_citations"].as_array().map(|a| {
                a.iter()
                    .filter_map(|c| c.as_str().map(str::to_string))
                    .collect()
            });
        }
        if !reasons.is_empty() {
            outcome.rejected.push(RejectedItem {
                qa_id,
                reasons,
                raw_output: item.clone(),
            });
            continue;
        }
        let answer = chain.conclusion.clone();
        outcome.items.push(QaItem {
            qa_id,
            kind,
            question_type: canonical.expect("validated above").to_string(),
            question,
            reasoning: chain,
            answer,
            short_form_answer: None,
            evidence: Evidence {
                claim_ids: vec![claim.claim.claim_id.clone()],
                visual_id: visual_id.map(str::to_string),
                paragraph_ids: claim.claim.provenance.paragraph_ids.clone(),
            },
            relationship_type: claim.grounding.relationship_type,
        });
    }
    // Items beyond the claim count have no blueprint; drop them.
    for extra in returned.iter().skip(claims.len()) {
        outcome.rejected.push(RejectedItem {
            qa_id: format!("{}_extra", kind_name.to_lowercase()),
            reasons: vec!["generator returned more items than claims".into()],
            raw_output: extra.clone(),
        });
    }
    outcome
}

fn sample_suffix(sample: u32) -> String {
    if sample == 0 {
        String::new()
    } else {
        format!("\n\nSampling round {} — vary framing from earlier rounds.", sample + 1)
    }
}

/// Generate one text-only QA item per claim. The claims travel in the prompt
/// as the answer blueprint; reasoning is articulated backward from them.
pub fn generate_tqa(
    tqa_claims: &[GroundedClaim],
    unit: &ContextUnit,
    paper: &ParsedPaper,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    options: &GenOptions,
) -> Result<GenerationOutcome, QaError> {
    if tqa_claims.is_empty() {
        return Err(QaError::EmptyClaims);
    }
    let claims: Vec<crate::claims::Claim> =
        tqa_claims.iter().map(|g| g.claim.clone()).collect();
    let claims_json = crate::claims::claims_prompt_json(&claims);
    let context = crate::corpus::unit_text(paper, unit);
    let mut outcome = GenerationOutcome::default();
    for sample in 0..options.samples_per_claim.max(1) {
        let prompt = prompts.render(
            "tqa_generation",
            &[
                ("claims_json", claims_json.as_str()),
                ("context", context.as_str()),
            ],
        ) + &sample_suffix(sample);
        let request = ChatRequest {
            model_id: options.model_id.clone(),
            messages: vec![Message::user(prompt)],
            temperature: options.temperature,
            max_output_tokens: options.max_output_tokens,
            schema_tag: "tqa_items.v1".to_string(),
        };
        let value = gateway.complete_structured(&request)?;
        let returned = value.as_array().cloned().unwrap_or_default();
        let round = claim_backed_items(QaKind::Tqa, tqa_claims, &returned, sample, None);
        outcome.items.extend(round.items);
        outcome.rejected.extend(round.rejected);
    }
    if outcome.items.is_empty() {
        return Err(QaError::AllItemsRejected {
            total: outcome.rejected.len(),
        });
    }
    Ok(outcome)
}

/// Generate one multimodal QA item per visually grounded claim. The prompt
/// carries the grounded claims, context text, caption, and the image itself.
pub fn generate_mqa(
    mqa_claims: &[GroundedClaim],
    unit: &ContextUnit,
    paper: &ParsedPaper,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    options: &GenOptions,
) -> Result<GenerationOutcome, QaError> {
    if mqa_claims.is_empty() {
        return Err(QaError::EmptyClaims);
    }
    if let Some(bad) = mqa_claims.iter().find(|c| !c.grounding.exists_in_visual) {
        return Err(QaError::RoutingContract(format!(
            "claim '{}' has no visual grounding",
            bad.claim.claim_id
        )));
    }
    let visual = paper.visual(&unit.visual_id);
    let image_refs: Vec<String> = visual.map(|v| vec![v.image_ref.clone()]).unwrap_or_default();
    let claims_json = crate::claims::grounded_prompt_json(mqa_claims);
    let context = crate::corpus::unit_text(paper, unit);
    let mut outcome = GenerationOutcome::default();
    for sample in 0..options.samples_per_claim.max(1) {
        let prompt = prompts.render(
            "mqa_generation",
            &[
                ("claims_json", claims_json.as_str()),
                ("context", context.as_str()),
                ("caption", unit.caption.as_str()),
            ],
        ) + &sample_suffix(sample);
        let request = ChatRequest {
            model_id: options.model_id.clone(),
            messages: vec![Message::user_with_images(prompt, image_refs.clone())],
            temperature: options.temperature,
            max_output_tokens: options.max_output_tokens,
            schema_tag: "mqa_items.v1".to_string(),
        };
        let value = gateway.complete_structured(&request)?;
        let returned = value.as_array().cloned().unwrap_or_default();
        let round = claim_backed_items(
            QaKind::Mqa,
            mqa_claims,
            &returned,
            sample,
            Some(unit.visual_id.as_str()),
        );
        outcome.items.extend(round.items);
        outcome.rejected.extend(round.rejected);
    }
    if outcome.items.is_empty() {
        return Err(QaError::AllItemsRejected {
            total: outcome.rejected.len(),
        });
    }
    Ok(outcome)
}

/// Generate one vision-only QA item from the visual and caption alone; no
/// body text travels with the request. The requested category may be vetoed
/// by the generator as long as the substitute is a valid code.
pub fn generate_vqa(
    visual: &Visual,
    caption: &str,
    category: &str,
    paper_id: &str,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    options: &GenOptions,
) -> Result<QaItem, QaError> {
    if canonical_question_type(QaKind::Vqa, category).is_none() {
        return Err(QaError::TaxonomyMismatch {
            kind: "VQA",
            code: category.to_string(),
        });
    }
    let prompt = prompts.render(
        "vqa_generation",
        &[("category", category), ("caption", caption)],
    );
    let request = ChatRequest {
        model_id: options.model_id.clone(),
        messages: vec![Message::user_with_images(
            prompt,
            vec![visual.image_ref.clone()],
        )],
        temperature: options.temperature,
        max_output_tokens: options.max_output_tokens,
        schema_tag: "vqa_item.v1".to_string(),
    };
    let value = gateway.complete_structured(&request)?;
    let item = match &value {
        Value::Array(items) => items[0].clone(),
        other => other.clone(),
    };
    let code = canonical_question_type(QaKind::Vqa, item["question_type"].as_str().unwrap_or(""))
        .expect("schema-validated VQA code");
    let answer = item["answer"].as_str().unwrap_or_default().to_string();
    Ok(QaItem {
        qa_id: format!("{}/{}/VQA_{}", paper_id, visual.visual_id, code),
        kind: QaKind::Vqa,
        question_type: code.to_string(),
        question: item["question"].as_str().unwrap_or_default().to_string(),
        reasoning: ReasoningChain {
            understand_question: None,
            steps: vec![],
            conclusion: answer.clone(),
            vqa_fields: Some(VqaFields {
                global_image_description: item["global_image_description"]
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
                relevant_parts_of_image: item["relevant_parts_of_image"]
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
                step_by_step_reasoning: item["step_by_step_reasoning"]
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
            }),
            evidence_citations: None,
        },
        answer,
        short_form_answer: item["short_form_answer"].as_str().map(str::to_string),
        evidence: Evidence {
            claim_ids: vec![],
            visual_id: Some(visual.visual_id.clone()),
            paragraph_ids: vec![],
        },
        relationship_type: None,
    })
}

/// Round-robin VQA category for a visual: the paper's rank in the run plus
/// the visual's index cycles through all 8 codes, so the assignment is stable
/// under resume and parallelism.
pub fn vqa_category_for(paper_rank: usize, visual_index: usize) -> &'static str {
    VQA_TYPES[(paper_rank + visual_index) % VQA_TYPES.len()]
}

// --- lint --------------------------------------------------------------------

static MULTI_QUESTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i),\s*(?:and|or)\s+(?:what|how|why|when|where|which|who|whom|whose|can|could|do|does|did|is|are|was|were|will|would|should|must|under)\b",
    )
    .expect("static regex")
});

static MODALITY_WORDS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:figure|table|diagram|graph|chart)\b").expect("static regex")
});

/// Deterministic phrasing lint. MultiQuestion: two question marks, or two
/// interrogative clauses joined by ", and"/", or". ModalityLeak (MQA only):
/// any of figure/table/diagram/graph/chart as whole words, or the phrase
/// "according to the text". EmptyAnswer: blank answer or conclusion.
/// TaxonomyMismatch: question_type outside the kind's code set.
pub fn lint_question(item: &QaItem) -> LintReport {
    let mut violations = Vec::new();

    let question_marks = item.question.matches('?').count();
    if question_marks >= 2 {
        violations.push(LintViolation {
            rule: LintRule::MultiQuestion,
            detail: format!("{question_marks} question marks in one question"),
        });
    } else if let Some(m) = MULTI_QUESTION.find(&item.question) {
        violations.push(LintViolation {
            rule: LintRule::MultiQuestion,
            detail: format!("sub-questions joined at {:?}", m.as_str()),
        });
    }

    if item.kind == QaKind::Mqa {
        if let Some(m) = MODALITY_WORDS.find(&item.question) {
            violations.push(LintViolation {
                rule: LintRule::ModalityLeak,
                detail: format!("question names the modality: {:?}", m.as_str()),
            });
        } else if item.question.to_lowercase().contains("according to the text") {
            violations.push(LintViolation {
                rule: LintRule::ModalityLeak,
                detail: "question says 'according to the text'".to_string(),
            });
        }
    }

    if item.answer.trim().is_empty() || item.reasoning.conclusion.trim().is_empty() {
        violations.push(LintViolation {
            rule: LintRule::EmptyAnswer,
            detail: "answer or conclusion is blank".to_string(),
        });
    }

    if canonical_question_type(item.kind, &item.question_type) != Some(item.question_type.as_str())
    {
        violations.push(LintViolation {
            rule: LintRule::TaxonomyMismatch,
            detail: format!(
                "'{}' is not a canonical {} type",
                item.question_type,
                item.kind.as_str()
            ),
        });
    }

    LintReport {
        qa_id: item.qa_id.clone(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{Claim, ClaimType, Provenance, VisualGrounding};
    use crate::corpus::{PaperSource, Paragraph, Section, VisualKind};
    use crate::gateway::{GatewayConfig, MockBackend, MockMatcher, MockReply};
    use std::sync::Arc;

    fn fixture_paper() -> ParsedPaper {
        ParsedPaper {
            paper_id: "p1".into(),
            title: "A study".into(),
            source: PaperSource::Arxiv,
            year: 2024,
            sections: vec![Section {
                section_id: "s1".into(),
                label: Some("4".into()),
                heading: "Results".into(),
                paragraphs: vec![Paragraph {
                    paragraph_id: "p1".into(),
                    text: "As shown in Figure 1, caching halves latency.".into(),
                    char_span: (0, 10),
                }],
            }],
            visuals: vec![Visual {
                visual_id: "f1".into(),
                kind: VisualKind::Figure,
                label: "Figure 1".into(),
                caption: "Latency under caching.".into(),
                image_ref: "images/f1.png".into(),
            }],
        }
    }

    fn fixture_unit(paper: &ParsedPaper) -> ContextUnit {
        crate::corpus::build_context_units(paper).remove(0)
    }

    fn grounded_claim(unit: &ContextUnit, exists: bool, entities: &[&str]) -> GroundedClaim {
        GroundedClaim {
            claim: Claim {
                claim_id: format!("{}/T_claim_01", unit.unit_id),
                claim_type: ClaimType::ConclusionFinding,
                content: "Caching halves latency.".into(),
                key_entities: entities.iter().map(|s| s.to_string()).collect(),
                source_sentences: vec!["As shown in Figure 1, caching halves latency.".into()],
                potential_question_focus: String::new(),
                provenance: Provenance::from_unit(unit),
            },
            grounding: if exists {
                VisualGrounding {
                    exists_in_visual: true,
                    relationship_type: Some(RelationshipType::Quantifies),
                    visual_element_description: Some("latency curve".into()),
                    justification: Some("curve halves".into()),
                }
            } else {
                VisualGrounding {
                    exists_in_visual: false,
                    relationship_type: None,
                    visual_element_description: None,
                    justification: None,
                }
            },
        }
    }

    fn gw(mock: Arc<MockBackend>) -> Gateway {
        Gateway::new(
            mock,
            GatewayConfig {
                backoff_base_ms: 0,
                ..GatewayConfig::default()
            },
        )
    }

    #[test]
    fn tqa_generates_one_item_per_claim() {
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        let claims = vec![
            grounded_claim(&unit, false, &["caching"]),
            grounded_claim(&unit, false, &["latency"]),
        ];
        let gateway = gw(Arc::new(MockBackend::deterministic()));
        let outcome = generate_tqa(
            &claims,
            &unit,
            &paper,
            &gateway,
            &PromptLibrary::builtin(),
            &GenOptions::default(),
        )
        .unwrap();
        assert_eq!(outcome.items.len(), 2);
        for item in &outcome.items {
            assert_eq!(item.kind, QaKind::Tqa);
            assert!(TQA_TYPES.contains(&item.question_type.as_str()));
            assert!(item.reasoning.steps.len() >= 3);
            assert_eq!(item.evidence.claim_ids.len(), 1);
        }
        assert_eq!(outcome.items[0].qa_id, "p1/f1/TQA_01");
    }

    #[test]
    fn tqa_empty_claims_is_precondition_error() {
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        let gateway = gw(Arc::new(MockBackend::deterministic()));
        assert!(matches!(
            generate_tqa(
                &[],
                &unit,
                &paper,
                &gateway,
                &PromptLibrary::builtin(),
                &GenOptions::default()
            ),
            Err(QaError::EmptyClaims)
        ));
    }

    #[test]
    fn fidelity_gate_rejects_conclusions_missing_entities() {
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        let claims = vec![grounded_claim(&unit, false, &["thermodynamics"])];
        let mock = Arc::new(MockBackend::deterministic());
        mock.push_rule(
            MockMatcher::SchemaTag("tqa_items.v1".into()),
            vec![MockReply::Text(
                serde_json::json!([{
                    "question_type": "Causal Reasoning",
                    "question": "Why does caching help?",
                    "answer": {
                        "understand_question": "plan",
                        "chain_of_thought_answer": [
                            {"step": 1, "reasoning": "a"},
                            {"step": 2, "reasoning": "b"},
                            {"step": 3, "reasoning": "c"}
                        ],
                        "conclusion": "Because caching avoids recomputation."
                    }
                }])
                .to_string(),
            )],
        );
        let gateway = gw(mock);
        let err = generate_tqa(
            &claims,
            &unit,
            &paper,
            &gateway,
            &PromptLibrary::builtin(),
            &GenOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, QaError::AllItemsRejected { total: 1 }));
    }

    #[test]
    fn mqa_requires_grounded_claims() {
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        let claims = vec![grounded_claim(&unit, false, &["caching"])];
        let gateway = gw(Arc::new(MockBackend::deterministic()));
        assert!(matches!(
            generate_mqa(
                &claims,
                &unit,
                &paper,
                &gateway,
                &PromptLibrary::builtin(),
                &GenOptions::default()
            ),
            Err(QaError::RoutingContract(_))
        ));
    }

    #[test]
    fn mqa_inherits_relationship_type() {
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        let claims = vec![grounded_claim(&unit, true, &["caching"])];
        let gateway = gw(Arc::new(MockBackend::deterministic()));
        let outcome = generate_mqa(
            &claims,
            &unit,
            &paper,
            &gateway,
            &PromptLibrary::builtin(),
            &GenOptions::default(),
        )
        .unwrap();
        assert_eq!(outcome.items.len(), 1);
        let item = &outcome.items[0];
        assert_eq!(item.relationship_type, Some(RelationshipType::Quantifies));
        assert!(MQA_TYPES.contains(&item.question_type.as_str()));
        assert_eq!(item.evidence.visual_id.as_deref(), Some("f1"));
        assert!(item.reasoning.evidence_citations.is_some());
    }

    #[test]
    fn vqa_bad_category_fails_before_any_call() {
        let paper = fixture_paper();
        let mock = Arc::new(MockBackend::deterministic());
        let gateway = gw(mock.clone());
        let err = generate_vqa(
            &paper.visuals[0],
            "cap",
            "ZZ",
            "p1",
            &gateway,
            &PromptLibrary::builtin(),
            &GenOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, QaError::TaxonomyMismatch { .. }));
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn vqa_happy_path_carries_short_form_and_no_body_text() {
        let paper = fixture_paper();
        let mock = Arc::new(MockBackend::deterministic());
        let gateway = gw(mock.clone());
        let item = generate_vqa(
            &paper.visuals[0],
            &paper.visuals[0].caption,
            "EI",
            "p1",
            &gateway,
            &PromptLibrary::builtin(),
            &GenOptions::default(),
        )
        .unwrap();
        assert_eq!(item.question_type, "EI");
        assert!(item.short_form_answer.is_some());
        assert!(item.reasoning.vqa_fields.is_some());
        assert!(item.reasoning.steps.is_empty());
        assert_eq!(item.qa_id, "p1/f1/VQA_EI");
        // Request carries the image but none of the paper's body text.
        let captured = mock.captured();
        assert_eq!(captured.len(), 1);
        assert_eq!(captured[0].messages[0].image_refs, vec!["images/f1.png"]);
        assert!(!captured[0].messages[0].text.contains("caching halves"));
    }

    #[test]
    fn vqa_missing_short_form_repaired_then_fails() {
        let paper = fixture_paper();
        let mock = Arc::new(MockBackend::deterministic());
        let incomplete = serde_json::json!([{
            "question_type": "EI",
            "question": "Which is largest?",
            "global_image_description": "chart",
            "relevant_parts_of_image": "bars",
            "step_by_step_reasoning": "compare",
            "answer": "The last bar."
        }])
        .to_string();
        mock.push_rule(
            MockMatcher::SchemaTag("vqa_item.v1".into()),
            vec![
                MockReply::Text(incomplete.clone()),
                MockReply::Text(incomplete.clone()),
                MockReply::Text(incomplete),
            ],
        );
        let gateway = gw(mock.clone());
        let err = generate_vqa(
            &paper.visuals[0],
            "cap",
            "EI",
            "p1",
            &gateway,
            &PromptLibrary::builtin(),
            &GenOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            QaError::Gateway(GatewayError::UnparsableOutput { attempts: 3, .. })
        ));
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn vqa_round_robin_cycles_all_codes() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..8 {
            seen.insert(vqa_category_for(0, i));
        }
        assert_eq!(seen.len(), 8);
    }

    fn lint_fixture(kind: QaKind, question_type: &str, question: &str) -> QaItem {
        QaItem {
            qa_id: "q1".into(),
            kind,
            question_type: question_type.into(),
            question: question.into(),
            reasoning: ReasoningChain {
                understand_question: None,
                steps: vec![],
                conclusion: "A conclusion.".into(),
                vqa_fields: None,
                evidence_citations: None,
            },
            answer: "An answer.".into(),
            short_form_answer: None,
            evidence: Evidence::default(),
            relationship_type: None,
        }
    }

    #[test]
    fn lint_passes_clean_mqa_question() {
        let item = lint_fixture(
            QaKind::Mqa,
            "EEQ",
            "Why must all potential target regions be searched before the target's precise location can be confirmed?",
        );
        assert!(lint_question(&item).passes());
    }

    #[test]
    fn lint_flags_modality_leak() {
        let item = lint_fixture(
            QaKind::Mqa,
            "EEQ",
            "How does the diagram illustrate that you must visit all target regions?",
        );
        let report = lint_question(&item);
        assert!(report
            .violations
            .iter()
            .any(|v| v.rule == LintRule::ModalityLeak));
    }

    #[test]
    fn lint_modality_words_do_not_apply_to_tqa() {
        let item = lint_fixture(
            QaKind::Tqa,
            "ConceptualUnderstanding",
            "Why does the table of contents matter for navigation?",
        );
        assert!(lint_question(&item).passes());
    }

    #[test]
    fn lint_flags_multi_question_comma_join() {
        let item = lint_fixture(
            QaKind::Tqa,
            "CausalReasoning",
            "What causes X, and how does Y help?",
        );
        let report = lint_question(&item);
        assert!(report
            .violations
            .iter()
            .any(|v| v.rule == LintRule::MultiQuestion));
    }

    #[test]
    fn lint_flags_two_question_marks() {
        let item = lint_fixture(QaKind::Tqa, "CausalReasoning", "Why X? And why Y?");
        let report = lint_question(&item);
        assert!(report
            .violations
            .iter()
            .any(|v| v.rule == LintRule::MultiQuestion));
    }

    #[test]
    fn lint_flags_empty_answer_and_taxonomy() {
        let mut item = lint_fixture(QaKind::Mqa, "EEQ", "Why does this hold?");
        item.answer = "  ".into();
        item.question_type = "DR".into();
        let report = lint_question(&item);
        let rules: Vec<LintRule> = report.violations.iter().map(|v| v.rule).collect();
        assert!(rules.contains(&LintRule::EmptyAnswer));
        assert!(rules.contains(&LintRule::TaxonomyMismatch));
    }

    #[test]
    fn lint_is_deterministic() {
        let item = lint_fixture(QaKind::Mqa, "CAC", "Is the claimed gain consistent with what is shown?");
        assert_eq!(lint_question(&item), lint_question(&item));
    }
}
