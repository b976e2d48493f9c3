//! Stage-1a of synthesis: extract typed declarative claims from a context
//! unit's text (visual withheld), ground each claim against the unit's
//! visual, and route claims to multimodal or text-only QA generation.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{ContextUnit, ParsedPaper, Visual};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Message};
use crate::prompts::PromptLibrary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClaimType {
    #[serde(rename = "Conclusion/Finding")]
    ConclusionFinding,
    #[serde(rename = "Comparative")]
    Comparative,
    #[serde(rename = "Causal/Explanatory")]
    CausalExplanatory,
    #[serde(rename = "Methodological")]
    Methodological,
    #[serde(rename = "Descriptive/Quantitative")]
    DescriptiveQuantitative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationshipType {
    Supports,
    Quantifies,
    Illustrates,
    Elaborates,
    Contradicts,
}

/// Where a claim came from; carried through QA items into regrounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub paper_id: String,
    pub unit_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section_label: Option<String>,
    pub paragraph_ids: Vec<String>,
    pub visual_id: String,
}

impl Provenance {
    pub fn from_unit(unit: &ContextUnit) -> Self {
        Self {
            paper_id: unit.paper_id.clone(),
            unit_id: unit.unit_id.clone(),
            section_label: unit.section_label.clone(),
            paragraph_ids: unit.paragraph_ids.clone(),
            visual_id: unit.visual_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    /// Namespaced as `{unit_id}/T_claim_NN`; the suffix is the generator's
    /// per-call local id.
    pub claim_id: String,
    pub claim_type: ClaimType,
    pub content: String,
    pub key_entities: Vec<String>,
    pub source_sentences: Vec<String>,
    pub potential_question_focus: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualGrounding {
    pub exists_in_visual: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relationship_type: Option<RelationshipType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_element_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justification: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedClaim {
    pub claim: Claim,
    pub grounding: VisualGrounding,
}

impl GroundedClaim {
    /// Contradicts-grounded claims are kept and flagged; they make prime
    /// critical-consistency material downstream.
    pub fn contradicts(&self) -> bool {
        self.grounding.relationship_type == Some(RelationshipType::Contradicts)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingPlan {
    pub mqa_claims: Vec<GroundedClaim>,
    pub tqa_claims: Vec<GroundedClaim>,
}

#[derive(Debug, thiserror::Error)]
pub enum ClaimError {
    #[error("all {total} extracted claims were rejected: {reasons:?}")]
    AllClaimsRejected { total: usize, reasons: Vec<String> },
    #[error("grounding response drifted from input: {0}")]
    StructureMismatch(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Cap on claims kept per unit; excess is truncated in generator order.
pub const MAX_CLAIMS_PER_UNIT: usize = 8;

/// Accepted edit distance between a quoted source sentence and the unit text
/// when no exact (whitespace-normalized) substring match exists.
const NEAR_MISS_DISTANCE: usize = 2;

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Minimal edit distance between `pattern` and any substring of `text`
/// (semi-global alignment: deletions from `text` at both ends are free).
fn min_substring_edit_distance(pattern: &str, text: &str) -> usize {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    if p.is_empty() {
        return 0;
    }
    let mut prev: Vec<usize> = vec![0; t.len() + 1];
    let mut cur: Vec<usize> = vec![0; t.len() + 1];
    for (i, pc) in p.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tc) in t.iter().enumerate() {
            let cost = usize::from(pc != tc);
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev.into_iter().min().unwrap_or(p.len())
}

/// How a quoted source sentence relates to the unit text.
#[derive(Debug, PartialEq, Eq)]
enum SentenceMatch {
    Exact,
    NearMiss(usize),
    Absent,
}

fn match_sentence(sentence: &str, unit_text_normalized: &str) -> SentenceMatch {
    let needle = normalize_ws(sentence);
    if needle.is_empty() {
        return SentenceMatch::Absent;
    }
    if unit_text_normalized.contains(&needle) {
        return SentenceMatch::Exact;
    }
    let d = min_substring_edit_distance(&needle, unit_text_normalized);
    if d <= NEAR_MISS_DISTANCE {
        SentenceMatch::NearMiss(d)
    } else {
        SentenceMatch::Absent
    }
}

fn wire_claims_json(claims: &[Claim]) -> String {
    let values: Vec<Value> = claims
        .iter()
        .map(|c| {
            serde_json::json!({
                "id": c.claim_id,
                "claim_type": c.claim_type,
                "content": c.content,
                "key_entities": c.key_entities,
                "source_sentences": c.source_sentences,
                "potential_question_focus": c.potential_question_focus,
            })
        })
        .collect();
    serde_json::to_string_pretty(&Value::Array(values)).expect("claims serialize")
}

fn wire_grounded_json(grounded: &[GroundedClaim]) -> String {
    let values: Vec<Value> = grounded
        .iter()
        .map(|g| {
            serde_json::json!({
                "id": g.claim.claim_id,
                "claim_type": g.claim.claim_type,
                "content": g.claim.content,
                "key_entities": g.claim.key_entities,
                "source_sentences": g.claim.source_sentences,
                "potential_question_focus": g.claim.potential_question_focus,
                "visual_grounding": g.grounding,
            })
        })
        .collect();
    serde_json::to_string_pretty(&Value::Array(values)).expect("claims serialize")
}

pub struct ExtractOptions {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub max_claims: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            model_id: "generator".to_string(),
            temperature: 0.7,
            max_output_tokens: 2048,
            max_claims: MAX_CLAIMS_PER_UNIT,
        }
    }
}

/// Extract declarative claims from the unit's text. The visual is withheld:
/// the request carries no image parts, only the marked text, so the analysis
/// is purely textual. Claims violating their invariants are dropped with a
/// logged reason.
pub fn extract_claims(
    unit: &ContextUnit,
    paper: &ParsedPaper,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    options: &ExtractOptions,
) -> Result<Vec<Claim>, ClaimError> {
    let marked = crate::corpus::unit_text_marked(paper, unit);
    let plain_normalized = normalize_ws(&crate::corpus::unit_text(paper, unit));
    let prompt = prompts.render("claim_extraction", &[("context", marked.as_str())]);
    let request = ChatRequest {
        model_id: options.model_id.clone(),
        messages: vec![Message::user(prompt)],
        temperature: options.temperature,
        max_output_tokens: options.max_output_tokens,
        schema_tag: "claims.v1".to_string(),
    };
    let value = gateway.complete_structured(&request)?;
    let raw = value.as_array().cloned().unwrap_or_default();

    let provenance = Provenance::from_unit(unit);
    let total = raw.len();
    let mut claims = Vec::new();
    let mut reasons = Vec::new();
    for item in raw {
        match validate_claim(&item, &plain_normalized, &provenance) {
            Ok(claim) => claims.push(claim),
            Err(reason) => {
                log::info!("dropping claim from {}: {reason}", unit.unit_id);
                reasons.push(reason);
            }
        }
    }
    if total > 0 && claims.is_empty() {
        return Err(ClaimError::AllClaimsRejected { total, reasons });
    }
    if claims.len() > options.max_claims {
        claims.truncate(options.max_claims);
    }
    Ok(claims)
}

fn validate_claim(
    item: &Value,
    unit_text_normalized: &str,
    provenance: &Provenance,
) -> Result<Claim, String> {
    let local_id = item["id"].as_str().unwrap_or_default();
    let claim_type: ClaimType = serde_json::from_value(item["claim_type"].clone())
        .map_err(|_| format!("{local_id}: unknown claim_type"))?;
    let content = normalize_ws(item["content"].as_str().unwrap_or_default());
    if content.is_empty() {
        return Err(format!("{local_id}: empty content"));
    }
    let key_entities: Vec<String> = item["key_entities"]
        .as_array()
        .map(|a| {
            a.iter()
                .filter_map(|e| e.as_str())
                .map(normalize_ws)
                .filter(|e| !e.is_empty())
                .collect()
        })
        .unwrap_or_default();
    if key_entities.is_empty() || key_entities.len() > 3 {
        return Err(format!(
            "{local_id}: expected 1-3 key entities, got {}",
            key_entities.len()
        ));
    }
    let source_sentences: Vec<String> = item["source_sentences"]
        .as_array()
        .map(|a| {
            a.iter()
                .filter_map(|e| e.as_str())
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();
    if source_sentences.is_empty() {
        return Err(format!("{local_id}: no source sentences"));
    }
    for sentence in &source_sentences {
        match match_sentence(sentence, unit_text_normalized) {
            SentenceMatch::Exact => {}
            SentenceMatch::NearMiss(d) => {
                log::warn!("{local_id}: source sentence accepted at edit distance {d}");
            }
            SentenceMatch::Absent => {
                return Err(format!(
                    "{local_id}: source sentence not found in unit text: {sentence:?}"
                ));
            }
        }
    }
    Ok(Claim {
        claim_id: format!("{}/{}", provenance.unit_id, local_id),
        claim_type,
        content,
        key_entities,
        source_sentences,
        potential_question_focus: item["potential_question_focus"]
            .as_str()
            .unwrap_or_default()
            .to_string(),
        provenance: provenance.clone(),
    })
}

pub struct GroundOptions {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for GroundOptions {
    fn default() -> Self {
        Self {
            model_id: "generator".to_string(),
            temperature: 0.7,
            max_output_tokens: 4096,
        }
    }
}

/// Check each claim against the previously withheld visual. The request
/// carries the image and caption; the response must preserve claim count and
/// ids exactly, and only gains a grounding verdict per claim.
pub fn ground_claims(
    claims: &[Claim],
    visual: &Visual,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    options: &GroundOptions,
) -> Result<Vec<GroundedClaim>, ClaimError> {
    if claims.is_empty() {
        return Ok(Vec::new());
    }
    let text_json = wire_claims_json(claims);
    let prompt = prompts.render(
        "visual_grounding",
        &[
            ("caption", visual.caption.as_str()),
            ("text_json", text_json.as_str()),
        ],
    );
    let request = ChatRequest {
        model_id: options.model_id.clone(),
        messages: vec![Message::user_with_images(
            prompt,
            vec![visual.image_ref.clone()],
        )],
        temperature: options.temperature,
        max_output_tokens: options.max_output_tokens,
        schema_tag: "grounded_claims.v1".to_string(),
    };
    let value = gateway.complete_structured(&request)?;
    let returned = value.as_array().cloned().unwrap_or_default();
    if returned.len() != claims.len() {
        return Err(ClaimError::StructureMismatch(format!(
            "expected {} claims, got {}",
            claims.len(),
            returned.len()
        )));
    }
    let mut grounded = Vec::with_capacity(claims.len());
    for (claim, item) in claims.iter().zip(returned) {
        let id = item["id"].as_str().unwrap_or_default();
        if id != claim.claim_id {
            return Err(ClaimError::StructureMismatch(format!(
                "id drift: expected '{}', got '{id}'",
                claim.claim_id
            )));
        }
        let grounding: VisualGrounding = serde_json::from_value(item["visual_grounding"].clone())
            .map_err(|e| ClaimError::StructureMismatch(format!("bad grounding object: {e}")))?;
        grounded.push(GroundedClaim {
            claim: claim.clone(),
            grounding,
        });
    }
    Ok(grounded)
}

/// Pure partition by grounding verdict: visually grounded claims go to MQA,
/// text-only claims to TQA. Relationship type never affects routing.
pub fn route_claims(grounded: Vec<GroundedClaim>) -> RoutingPlan {
    let mut plan = RoutingPlan::default();
    for claim in grounded {
        if claim.grounding.exists_in_visual {
            plan.mqa_claims.push(claim);
        } else {
            plan.tqa_claims.push(claim);
        }
    }
    plan
}

/// Serialized claims payload for downstream prompt templates.
pub fn claims_prompt_json(claims: &[Claim]) -> String {
    wire_claims_json(claims)
}

/// Serialized grounded-claims payload (includes grounding verdicts).
pub fn grounded_prompt_json(grounded: &[GroundedClaim]) -> String {
    wire_grounded_json(grounded)
}

#[cfg(test)]
mod tests {
    use super::*;
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
                label: Some("3.2".into()),
                heading: "Results".into(),
                paragraphs: vec![
                    Paragraph {
                        paragraph_id: "p1".into(),
                        text: "Throughput doubles under caching. As shown in Figure 1, latency drops sharply.".into(),
                        char_span: (0, 10),
                    },
                ],
            }],
            visuals: vec![Visual {
                visual_id: "f1".into(),
                kind: VisualKind::Figure,
                label: "Figure 1".into(),
                caption: "Latency versus load.".into(),
                image_ref: "images/f1.png".into(),
            }],
        }
    }

    fn fixture_unit(paper: &ParsedPaper) -> ContextUnit {
        crate::corpus::build_context_units(paper).remove(0)
    }

    fn mock_gateway(mock: Arc<MockBackend>) -> Gateway {
        Gateway::new(
            mock,
            GatewayConfig {
                backoff_base_ms: 0,
                ..GatewayConfig::default()
            },
        )
    }

    fn claims_reply(items: serde_json::Value) -> MockReply {
        MockReply::Text(items.to_string())
    }

    #[test]
    fn extraction_fills_provenance_and_namespaces_ids() {
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        let mock = Arc::new(MockBackend::deterministic());
        mock.push_rule(
            MockMatcher::SchemaTag("claims.v1".into()),
            vec![claims_reply(serde_json::json!([
                {
                    "id": "T_claim_01",
                    "claim_type": "Descriptive/Quantitative",
                    "content": "Latency drops sharply under load.",
                    "key_entities": ["latency"],
                    "source_sentences": ["As shown in Figure 1, latency drops sharply."],
                    "potential_question_focus": "What happens to latency?"
                },
                {
                    "id": "T_claim_02",
                    "claim_type": "Conclusion/Finding",
                    "content": "Caching doubles throughput.",
                    "key_entities": ["caching", "throughput"],
                    "source_sentences": ["Throughput doubles under caching."],
                    "potential_question_focus": "What does caching change?"
                }
            ]))],
        );
        let gw = mock_gateway(mock.clone());
        let claims = extract_claims(
            &unit,
            &paper,
            &gw,
            &PromptLibrary::builtin(),
            &ExtractOptions::default(),
        )
        .unwrap();
        assert_eq!(claims.len(), 2);
        assert_eq!(claims[0].claim_id, "p1/f1/T_claim_01");
        assert_eq!(claims[0].provenance.paper_id, "p1");
        assert_eq!(claims[0].provenance.visual_id, "f1");
        assert_eq!(claims[0].provenance.section_label.as_deref(), Some("3.2"));

        // Text-only extraction: the request must carry no image parts.
        for request in mock.captured() {
            assert!(request.messages.iter().all(|m| m.image_refs.is_empty()));
        }
    }

    #[test]
    fn claim_with_four_entities_dropped_others_kept() {
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        let mock = Arc::new(MockBackend::deterministic());
        mock.push_rule(
            MockMatcher::SchemaTag("claims.v1".into()),
            vec![claims_reply(serde_json::json!([
                {
                    "id": "T_claim_01",
                    "claim_type": "Comparative",
                    "content": "Too many entities.",
                    "key_entities": ["a", "b", "c", "d"],
                    "source_sentences": ["Throughput doubles under caching."],
                    "potential_question_focus": ""
                },
                {
                    "id": "T_claim_02",
                    "claim_type": "Conclusion/Finding",
                    "content": "Caching doubles throughput.",
                    "key_entities": ["caching"],
                    "source_sentences": ["Throughput doubles under caching."],
                    "potential_question_focus": ""
                }
            ]))],
        );
        let gw = mock_gateway(mock);
        let claims = extract_claims(
            &unit,
            &paper,
            &gw,
            &PromptLibrary::builtin(),
            &ExtractOptions::default(),
        )
        .unwrap();
        assert_eq!(claims.len(), 1);
        assert_eq!(claims[0].claim_id, "p1/f1/T_claim_02");
    }

    #[test]
    fn fabricated_source_sentence_rejected() {
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        let mock = Arc::new(MockBackend::deterministic());
        mock.push_rule(
            MockMatcher::SchemaTag("claims.v1".into()),
            vec![claims_reply(serde_json::json!([{
                "id": "T_claim_01",
                "claim_type": "Conclusion/Finding",
                "content": "Something else entirely.",
                "key_entities": ["something"],
                "source_sentences": ["This sentence never appears in the unit."],
                "potential_question_focus": ""
            }]))],
        );
        let gw = mock_gateway(mock);
        let err = extract_claims(
            &unit,
            &paper,
            &gw,
            &PromptLibrary::builtin(),
            &ExtractOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ClaimError::AllClaimsRejected { total: 1, .. }));
    }

    #[test]
    fn near_miss_source_sentence_accepted() {
        // One substitution away from the original ("doubles" -> "double").
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        let mock = Arc::new(MockBackend::deterministic());
        mock.push_rule(
            MockMatcher::SchemaTag("claims.v1".into()),
            vec![claims_reply(serde_json::json!([{
                "id": "T_claim_01",
                "claim_type": "Conclusion/Finding",
                "content": "Caching helps.",
                "key_entities": ["caching"],
                "source_sentences": ["Throughput double under caching."],
                "potential_question_focus": ""
            }]))],
        );
        let gw = mock_gateway(mock);
        let claims = extract_claims(
            &unit,
            &paper,
            &gw,
            &PromptLibrary::builtin(),
            &ExtractOptions::default(),
        )
        .unwrap();
        assert_eq!(claims.len(), 1);
    }

    #[test]
    fn edit_distance_semi_global() {
        assert_eq!(min_substring_edit_distance("abc", "xxabcxx"), 0);
        assert_eq!(min_substring_edit_distance("abd", "xxabcxx"), 1);
        assert_eq!(min_substring_edit_distance("abc", ""), 3);
        assert_eq!(min_substring_edit_distance("", "anything"), 0);
    }

    fn grounded(exists: bool) -> GroundedClaim {
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        GroundedClaim {
            claim: Claim {
                claim_id: format!("{}/T_claim_01", unit.unit_id),
                claim_type: ClaimType::ConclusionFinding,
                content: "c".into(),
                key_entities: vec!["e".into()],
                source_sentences: vec!["s".into()],
                potential_question_focus: String::new(),
                provenance: Provenance::from_unit(&unit),
            },
            grounding: if exists {
                VisualGrounding {
                    exists_in_visual: true,
                    relationship_type: Some(RelationshipType::Supports),
                    visual_element_description: Some("desc".into()),
                    justification: Some("just".into()),
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

    #[test]
    fn grounding_preserves_count_and_merges() {
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        let claims: Vec<Claim> = (1..=3)
            .map(|i| Claim {
                claim_id: format!("{}/T_claim_{:02}", unit.unit_id, i),
                claim_type: ClaimType::Comparative,
                content: format!("content {i}"),
                key_entities: vec!["e".into()],
                source_sentences: vec!["s".into()],
                potential_question_focus: String::new(),
                provenance: Provenance::from_unit(&unit),
            })
            .collect();
        let gw = mock_gateway(Arc::new(MockBackend::deterministic()));
        let out = ground_claims(
            &claims,
            &paper.visuals[0],
            &gw,
            &PromptLibrary::builtin(),
            &GroundOptions::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 3);
        for (g, c) in out.iter().zip(&claims) {
            assert_eq!(g.claim.claim_id, c.claim_id);
        }
    }

    #[test]
    fn grounding_count_drift_is_structure_mismatch() {
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        let claims: Vec<Claim> = (1..=3)
            .map(|i| Claim {
                claim_id: format!("{}/T_claim_{:02}", unit.unit_id, i),
                claim_type: ClaimType::Comparative,
                content: format!("content {i}"),
                key_entities: vec!["e".into()],
                source_sentences: vec!["s".into()],
                potential_question_focus: String::new(),
                provenance: Provenance::from_unit(&unit),
            })
            .collect();
        let mock = Arc::new(MockBackend::deterministic());
        mock.push_rule(
            MockMatcher::SchemaTag("grounded_claims.v1".into()),
            vec![MockReply::Text(
                serde_json::json!([
                    {"id": format!("{}/T_claim_01", unit.unit_id),
                     "visual_grounding": {"exists_in_visual": false}},
                    {"id": format!("{}/T_claim_02", unit.unit_id),
                     "visual_grounding": {"exists_in_visual": false}}
                ])
                .to_string(),
            )],
        );
        let gw = mock_gateway(mock);
        let err = ground_claims(
            &claims,
            &paper.visuals[0],
            &gw,
            &PromptLibrary::builtin(),
            &GroundOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ClaimError::StructureMismatch(_)));
    }

    #[test]
    fn invalid_grounding_object_repaired_then_accepted() {
        let paper = fixture_paper();
        let unit = fixture_unit(&paper);
        let claims = vec![Claim {
            claim_id: format!("{}/T_claim_01", unit.unit_id),
            claim_type: ClaimType::Comparative,
            content: "content".into(),
            key_entities: vec!["e".into()],
            source_sentences: vec!["s".into()],
            potential_question_focus: String::new(),
            provenance: Provenance::from_unit(&unit),
        }];
        let id = claims[0].claim_id.clone();
        let mock = Arc::new(MockBackend::deterministic());
        mock.push_rule(
            MockMatcher::SchemaTag("grounded_claims.v1".into()),
            vec![
                // exists_in_visual=true but justification omitted: schema
                // violation, retried through the repair loop.
                MockReply::Text(
                    serde_json::json!([{ "id": id, "visual_grounding": {
                        "exists_in_visual": true,
                        "relationship_type": "Supports",
                        "visual_element_description": "desc"
                    }}])
                    .to_string(),
                ),
                MockReply::Text(
                    serde_json::json!([{ "id": id, "visual_grounding": {
                        "exists_in_visual": true,
                        "relationship_type": "Supports",
                        "visual_element_description": "desc",
                        "justification": "now complete"
                    }}])
                    .to_string(),
                ),
            ],
        );
        let gw = mock_gateway(mock.clone());
        let out = ground_claims(
            &claims,
            &paper.visuals[0],
            &gw,
            &PromptLibrary::builtin(),
            &GroundOptions::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].grounding.justification.as_deref(), Some("now complete"));
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn routing_is_a_partition() {
        let input = vec![grounded(true), grounded(false), grounded(true)];
        let plan = route_claims(input.clone());
        assert_eq!(plan.mqa_claims.len(), 2);
        assert_eq!(plan.tqa_claims.len(), 1);
        assert_eq!(plan.mqa_claims.len() + plan.tqa_claims.len(), input.len());
        assert!(plan.mqa_claims.iter().all(|c| c.grounding.exists_in_visual));
        assert!(plan.tqa_claims.iter().all(|c| !c.grounding.exists_in_visual));

        let all_false = route_claims(vec![grounded(false), grounded(false)]);
        assert!(all_false.mqa_claims.is_empty());

        let empty = route_claims(vec![]);
        assert!(empty.mqa_claims.is_empty() && empty.tqa_claims.is_empty());
    }
}
