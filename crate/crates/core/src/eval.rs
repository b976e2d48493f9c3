//! Benchmark harness: run a model over evaluation items under a noise
//! setting, score responses with the LLM judge's three-component rubric plus
//! a strict binary verdict, aggregate per question type, and optionally tag
//! failures with an automated error taxonomy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::ParsedPaper;
use crate::gateway::{ChatRequest, Gateway, GatewayError, Message};
use crate::prompts::PromptLibrary;
use crate::reground::{build_eval_context, EvidenceRef, NoiseSetting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalQuestionType {
    EEQ,
    CIM,
    HVI,
    CAC,
    ARS,
}

impl EvalQuestionType {
    pub const ALL: [EvalQuestionType; 5] = [
        EvalQuestionType::EEQ,
        EvalQuestionType::CIM,
        EvalQuestionType::HVI,
        EvalQuestionType::CAC,
        EvalQuestionType::ARS,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalQuestionType::EEQ => "EEQ",
            EvalQuestionType::CIM => "CIM",
            EvalQuestionType::HVI => "HVI",
            EvalQuestionType::CAC => "CAC",
            EvalQuestionType::ARS => "ARS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub paper_id: String,
    pub question: String,
    pub question_type: EvalQuestionType,
    pub gold_answer: String,
    pub key_points: Vec<String>,
    pub evidence: EvidenceRef,
}

impl EvalItem {
    pub fn validate(&self) -> Result<(), String> {
        if self.key_points.is_empty() {
            return Err(format!("{}: key_points must be non-empty", self.item_id));
        }
        Ok(())
    }
}

/// Legal rubric values per component.
pub const CITATION_VALUES: [f64; 4] = [0.0, 0.10, 0.20, 0.30];
pub const ACCURACY_VALUES: [f64; 3] = [0.0, 0.20, 0.40];
const SNAP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub text_citation: f64,
    pub image_citation: f64,
    pub answer_accuracy: f64,
    pub total: f64,
    pub binary_correct: bool,
    pub raw_judgment: String,
}

impl JudgeScore {
    /// Build from raw component values, snapping each to the nearest legal
    /// discrete value when within 1e-6 and rejecting anything further off.
    pub fn from_components(
        text_citation: f64,
        image_citation: f64,
        answer_accuracy: f64,
        binary_correct: bool,
        raw_judgment: String,
    ) -> Result<Self, EvalError> {
        let text_citation = snap(text_citation, &CITATION_VALUES, "text_citation")?;
        let image_citation = snap(image_citation, &CITATION_VALUES, "image_citation")?;
        let answer_accuracy = snap(answer_accuracy, &ACCURACY_VALUES, "answer_accuracy")?;
        Ok(Self {
            text_citation,
            image_citation,
            answer_accuracy,
            total: text_citation + image_citation + answer_accuracy,
            binary_correct,
            raw_judgment,
        })
    }

    /// Component scores in integer hundredths; exact arithmetic for
    /// aggregation.
    pub fn centi(&self) -> (u32, u32, u32) {
        (
            (self.text_citation * 100.0).round() as u32,
            (self.image_citation * 100.0).round() as u32,
            (self.answer_accuracy * 100.0).round() as u32,
        )
    }
}

fn snap(value: f64, legal: &[f64], component: &'static str) -> Result<f64, EvalError> {
    legal
        .iter()
        .copied()
        .find(|l| (value - l).abs() <= SNAP_TOLERANCE)
        .ok_or(EvalError::IllegalScoreValue { component, value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeBreakdown {
    pub n: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineGrained {
    /// Share of responses with a full 0.30 text-citation score.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_correct_rate: Option<f64>,
    /// Share of responses with a full 0.30 image-citation score.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub visual_correct_rate: Option<f64>,
    /// Mean rubric total.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partial_credit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setting: Option<NoiseSetting>,
    pub n: u64,
    /// Binary accuracy as a percentage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_total: Option<f64>,
    pub per_type: BTreeMap<String, TypeBreakdown>,
    pub fine_grained: FineGrained,
}

/// Automated failure taxonomy over judged-incorrect responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureCategory {
    IncorrectEvidenceLocalization,
    ReasoningLogicError,
    HallucinationOfContext,
    IncompleteSynthesis,
}

impl FailureCategory {
    pub fn from_display(s: &str) -> Option<Self> {
        match s {
            "Incorrect Evidence Localization" => Some(Self::IncorrectEvidenceLocalization),
            "Reasoning / Logic Error" => Some(Self::ReasoningLogicError),
            "Hallucination of Context" => Some(Self::HallucinationOfContext),
            "Incomplete Synthesis" => Some(Self::IncompleteSynthesis),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureTag {
    pub item_id: String,
    pub category: FailureCategory,
    pub rationale: String,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("illegal {component} value {value}: not a legal rubric score")]
    IllegalScoreValue { component: &'static str, value: f64 },
    #[error("run aborted: {0}")]
    RunAborted(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One model response captured during a benchmark run. Failures never abort
/// a run; they surface as an empty response with an error note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub item_id: String,
    pub setting: NoiseSetting,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct RunOptions {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            model_id: "model-under-test".to_string(),
            temperature: 0.0,
            max_output_tokens: 2048,
        }
    }
}

fn render_context_message(
    packed: &crate::reground::PackedContext,
    question: &str,
) -> (String, Vec<String>) {
    let mut text = String::from(
        "Answer the question using the scientific document content below. \
         Cite the text passages and visuals your answer relies on.\n\n",
    );
    for (_, paragraph) in &packed.paragraphs {
        text.push_str(paragraph);
        text.push_str("\n\n");
    }
    let mut image_refs = Vec::new();
    for image in &packed.images {
        if image.caption.trim().is_empty() {
            text.push_str("[visual]\n\n");
        } else {
            text.push_str(&format!("[visual] {}\n\n", image.caption));
        }
        image_refs.push(image.image_ref.clone());
    }
    text.push_str(&format!("Question: {question}"));
    (text, image_refs)
}

/// Run the model under test over the items in a noise setting. Contexts are
/// built deterministically from `(item_id, seed)`; per-item failures are
/// recorded, not fatal.
pub fn run_benchmark(
    items: &[EvalItem],
    papers: &BTreeMap<String, ParsedPaper>,
    gateway: &Gateway,
    options: &RunOptions,
    setting: NoiseSetting,
    seed: u64,
) -> Vec<ModelResponse> {
    items
        .iter()
        .map(|item| {
            let outcome = (|| -> Result<String, String> {
                let paper = papers
                    .get(&item.paper_id)
                    .ok_or_else(|| format!("paper '{}' not loaded", item.paper_id))?;
                let context =
                    build_eval_context(&item.item_id, &item.evidence, paper, setting, seed)
                        .map_err(|e| e.to_string())?;
                let (text, image_refs) = render_context_message(&context.packed, &item.question);
                let request = ChatRequest {
                    model_id: options.model_id.clone(),
                    messages: vec![Message::user_with_images(text, image_refs)],
                    temperature: options.temperature,
                    max_output_tokens: options.max_output_tokens,
                    schema_tag: String::new(),
                };
                gateway
                    .complete(&request)
                    .map(|r| r.text)
                    .map_err(|e| e.to_string())
            })();
            match outcome {
                Ok(response) => ModelResponse {
                    item_id: item.item_id.clone(),
                    setting,
                    response,
                    error: None,
                },
                Err(error) => ModelResponse {
                    item_id: item.item_id.clone(),
                    setting,
                    response: String::new(),
                    error: Some(error),
                },
            }
        })
        .collect()
}

pub struct JudgeOptions {
    pub model_id: String,
    pub max_output_tokens: u32,
}

impl Default for JudgeOptions {
    fn default() -> Self {
        Self {
            model_id: "judge".to_string(),
            max_output_tokens: 1024,
        }
    }
}

fn render_ground_truth(item: &EvalItem) -> String {
    let mut out = item.gold_answer.clone();
    out.push_str("\n\nKey points:\n");
    for point in &item.key_points {
        out.push_str(&format!("- {point}\n"));
    }
    out
}

/// Score one response against the rubric. Judge calls run at temperature 0
/// so scored runs replay from cache byte-for-byte.
pub fn judge_response(
    item: &EvalItem,
    response: &str,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    options: &JudgeOptions,
) -> Result<JudgeScore, EvalError> {
    let ground_truth = render_ground_truth(item);
    let prompt = prompts.render(
        "judge",
        &[
            ("question", item.question.as_str()),
            ("ground_truth_answer", ground_truth.as_str()),
            ("prediction", response),
        ],
    );
    let request = ChatRequest {
        model_id: options.model_id.clone(),
        messages: vec![Message::user(prompt)],
        temperature: 0.0,
        max_output_tokens: options.max_output_tokens,
        schema_tag: "judge_score.v1".to_string(),
    };
    let value = gateway.complete_structured(&request)?;
    JudgeScore::from_components(
        value["text_citation"].as_f64().unwrap_or(f64::NAN),
        value["image_citation"].as_f64().unwrap_or(f64::NAN),
        value["answer_accuracy"].as_f64().unwrap_or(f64::NAN),
        value["binary_correct"].as_bool().unwrap_or(false),
        value.to_string(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: String,
    pub question_type: EvalQuestionType,
    pub setting: NoiseSetting,
    pub score: JudgeScore,
}

/// Aggregate judged scores. Accuracy is the binary mean as a percentage;
/// partial credit is the mean rubric total; fine-grained rates count full
/// component scores. Sums run over integer hundredths, so the result is
/// independent of score order.
pub fn aggregate(scored: &[ScoredItem], setting: Option<NoiseSetting>) -> EvalReport {
    let n = scored.len() as u64;
    let mut per_type: BTreeMap<String, TypeBreakdown> = EvalQuestionType::ALL
        .iter()
        .map(|t| {
            (
                t.as_str().to_string(),
                TypeBreakdown {
                    n: 0,
                    accuracy: None,
                },
            )
        })
        .collect();
    if n == 0 {
        return EvalReport {
            setting,
            n: 0,
            accuracy: None,
            mean_total: None,
            per_type,
            fine_grained: FineGrained {
                text_correct_rate: None,
                visual_correct_rate: None,
                partial_credit: None,
            },
        };
    }

    let mut correct = 0u64;
    let mut total_centi = 0u64;
    let mut text_full = 0u64;
    let mut image_full = 0u64;
    let mut per_type_counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for entry in scored {
        let (t, i, a) = entry.score.centi();
        total_centi += (t + i + a) as u64;
        if entry.score.binary_correct {
            correct += 1;
        }
        if t == 30 {
            text_full += 1;
        }
        if i == 30 {
            image_full += 1;
        }
        let slot = per_type_counts
            .entry(entry.question_type.as_str())
            .or_insert((0, 0));
        slot.0 += 1;
        if entry.score.binary_correct {
            slot.1 += 1;
        }
    }
    for (code, (count, hits)) in per_type_counts {
        per_type.insert(
            code.to_string(),
            TypeBreakdown {
                n: count,
                accuracy: Some(100.0 * hits as f64 / count as f64),
            },
        );
    }
    EvalReport {
        setting,
        n,
        accuracy: Some(100.0 * correct as f64 / n as f64),
        mean_total: Some(total_centi as f64 / (100.0 * n as f64)),
        per_type,
        fine_grained: FineGrained {
            text_correct_rate: Some(text_full as f64 / n as f64),
            visual_correct_rate: Some(image_full as f64 / n as f64),
            partial_credit: Some(total_centi as f64 / (100.0 * n as f64)),
        },
    }
}

/// Plain-text report table: one row per setting, overall then per-type
/// accuracy columns.
pub fn render_report_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12}{:>6}{:>10}{:>9}{:>8}{:>8}{:>8}{:>8}{:>8}\n",
        "Setting", "n", "Accuracy", "Partial", "EEQ", "CIM", "HVI", "CAC", "ARS"
    ));
    out.push_str(&"-".repeat(77));
    out.push('\n');
    let fmt_opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.1}"),
        None => "-".to_string(),
    };
    for report in reports {
        let setting = report
            .setting
            .map(|s| s.as_str().to_string())
            .unwrap_or_else(|| "overall".to_string());
        let mut row = format!(
            "{:<12}{:>6}{:>10}{:>9}",
            setting,
            report.n,
            fmt_opt(report.accuracy),
            match report.fine_grained.partial_credit {
                Some(x) => format!("{x:.3}"),
                None => "-".to_string(),
            },
        );
        for code in ["EEQ", "CIM", "HVI", "CAC", "ARS"] {
            let cell = report
                .per_type
                .get(code)
                .and_then(|b| b.accuracy)
                .map(|a| format!("{a:.1}"))
                .unwrap_or_else(|| "-".to_string());
            row.push_str(&format!("{cell:>8}"));
        }
        out.push_str(&row);
        out.push('\n');
    }
    out
}

/// Tag judged-incorrect responses with one of the four failure categories via
/// a structured judge call. Unresolvable outputs record a null tag.
pub fn tag_failures(
    wrong: &[(EvalItem, String)],
    gateway: &Gateway,
    prompts: &PromptLibrary,
    options: &JudgeOptions,
) -> Vec<Option<FailureTag>> {
    wrong
        .iter()
        .map(|(item, response)| {
            let prompt = prompts.render(
                "failure_tag",
                &[
                    ("question", item.question.as_str()),
                    ("gold_answer", item.gold_answer.as_str()),
                    ("response", response.as_str()),
                ],
            );
            let request = ChatRequest {
                model_id: options.model_id.clone(),
                messages: vec![Message::user(prompt)],
                temperature: 0.0,
                max_output_tokens: options.max_output_tokens,
                schema_tag: "failure_tag.v1".to_string(),
            };
            match gateway.complete_structured(&request) {
                Ok(value) => {
                    let category = value["category"]
                        .as_str()
                        .and_then(FailureCategory::from_display);
                    category.map(|category| FailureTag {
                        item_id: item.item_id.clone(),
                        category,
                        rationale: value["rationale"].as_str().unwrap_or_default().to_string(),
                    })
                }
                Err(e) => {
                    log::warn!("failure tagging for {} failed: {e}", item.item_id);
                    None
                }
            }
        })
        .collect()
}

/// Parse evaluation items from JSON-lines.
pub fn load_eval_items(text: &str) -> Result<Vec<EvalItem>, String> {
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem = serde_json::from_str(line)
            .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}

/// Exhaustive rubric lattice: every legal component combination.
pub fn rubric_lattice() -> Vec<JudgeScore> {
    let mut out = Vec::with_capacity(48);
    for &t in &CITATION_VALUES {
        for &i in &CITATION_VALUES {
            for &a in &ACCURACY_VALUES {
                out.push(
                    JudgeScore::from_components(t, i, a, false, String::new())
                        .expect("lattice values are legal"),
                );
            }
        }
    }
    out
}
