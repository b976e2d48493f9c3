//! Closed-world validators for structured model outputs, keyed by schema tag.
//!
//! Validators report the failing field path so the repair loop can feed a
//! precise error back to the model. Tags are versioned; bumping a tag is the
//! signal that downstream parsers changed.

use serde_json::Value;

pub const CLAIM_TYPES: &[&str] = &[
    "Conclusion/Finding",
    "Comparative",
    "Causal/Explanatory",
    "Methodological",
    "Descriptive/Quantitative",
];

pub const RELATIONSHIP_TYPES: &[&str] = &[
    "Supports",
    "Quantifies",
    "Illustrates",
    "Elaborates",
    "Contradicts",
];

pub const VQA_CODES: &[&str] = &["DR", "EI", "CO", "CT", "CR", "TP", "IP", "MS"];

pub const MQA_CODES: &[&str] = &["EEQ", "CIM", "HVI", "CAC", "ARS"];

pub const FAILURE_CATEGORIES: &[&str] = &[
    "Incorrect Evidence Localization",
    "Reasoning / Logic Error",
    "Hallucination of Context",
    "Incomplete Synthesis",
];

const TAGS: &[&str] = &[
    "study_gate.v1",
    "claims.v1",
    "grounded_claims.v1",
    "tqa_items.v1",
    "mqa_items.v1",
    "vqa_item.v1",
    "judge_score.v1",
    "failure_tag.v1",
];

pub fn is_registered(tag: &str) -> bool {
    TAGS.contains(&tag)
}

pub fn validate(tag: &str, value: &Value) -> Result<(), String> {
    match tag {
        "study_gate.v1" => validate_study_gate(value),
        "claims.v1" => validate_claims(value),
        "grounded_claims.v1" => validate_grounded_claims(value),
        "tqa_items.v1" => validate_qa_items(value, false),
        "mqa_items.v1" => validate_qa_items(value, true),
        "vqa_item.v1" => validate_vqa(value),
        "judge_score.v1" => validate_judge_score(value),
        "failure_tag.v1" => validate_failure_tag(value),
        other => Err(format!("unknown schema tag '{other}'")),
    }
}

fn obj<'a>(
    value: &'a Value,
    path: &str,
) -> Result<&'a serde_json::Map<String, Value>, String> {
    value
        .as_object()
        .ok_or_else(|| format!("{path}: expected object"))
}

fn arr<'a>(value: &'a Value, path: &str) -> Result<&'a Vec<Value>, String> {
    value
        .as_array()
        .ok_or_else(|| format!("{path}: expected array"))
}

fn str_field<'a>(
    map: &'a serde_json::Map<String, Value>,
    path: &str,
    key: &str,
) -> Result<&'a str, String> {
    map.get(key)
        .ok_or_else(|| format!("{path}.{key}: missing required field"))?
        .as_str()
        .ok_or_else(|| format!("{path}.{key}: expected string"))
}

fn nonempty_str_field<'a>(
    map: &'a serde_json::Map<String, Value>,
    path: &str,
    key: &str,
) -> Result<&'a str, String> {
    let s = str_field(map, path, key)?;
    if s.trim().is_empty() {
        return Err(format!("{path}.{key}: must be non-empty"));
    }
    Ok(s)
}

fn string_array(
    map: &serde_json::Map<String, Value>,
    path: &str,
    key: &str,
) -> Result<Vec<String>, String> {
    let field = map
        .get(key)
        .ok_or_else(|| format!("{path}.{key}: missing required field"))?;
    let items = arr(field, &format!("{path}.{key}"))?;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let s = item
            .as_str()
            .ok_or_else(|| format!("{path}.{key}[{i}]: expected string"))?;
        out.push(s.to_string());
    }
    Ok(out)
}

fn validate_study_gate(value: &Value) -> Result<(), String> {
    let map = obj(value, "$")?;
    let is_experimental = map
        .get("is_experimental")
        .ok_or("$.is_experimental: missing required field")?
        .as_bool()
        .ok_or("$.is_experimental: expected boolean")?;
    let rationale = str_field(map, "$", "rationale")?;
    if !is_experimental && rationale.trim().is_empty() {
        return Err("$.rationale: must be non-empty when is_experimental is false".into());
    }
    Ok(())
}

fn validate_claims(value: &Value) -> Result<(), String> {
    let items = arr(value, "$")?;
    for (i, item) in items.iter().enumerate() {
        let path = format!("$[{i}]");
        let map = obj(item, &path)?;
        let id = nonempty_str_field(map, &path, "id")?;
        if !is_claim_id(id) {
            return Err(format!("{path}.id: must match T_claim_NN, got '{id}'"));
        }
        let claim_type = nonempty_str_field(map, &path, "claim_type")?;
        if !CLAIM_TYPES.contains(&claim_type) {
            return Err(format!(
                "{path}.claim_type: '{claim_type}' not in {CLAIM_TYPES:?}"
            ));
        }
        nonempty_str_field(map, &path, "content")?;
        let entities = string_array(map, &path, "key_entities")?;
        if entities.is_empty() || entities.iter().any(|e| e.trim().is_empty()) {
            return Err(format!("{path}.key_entities: expected non-empty strings"));
        }
        let sentences = string_array(map, &path, "source_sentences")?;
        if sentences.is_empty() {
            return Err(format!("{path}.source_sentences: must be non-empty"));
        }
        str_field(map, &path, "potential_question_focus")?;
    }
    Ok(())
}

fn is_claim_id(id: &str) -> bool {
    id.strip_prefix("T_claim_")
        .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
}

fn validate_grounding_object(value: &Value, path: &str) -> Result<(), String> {
    let map = obj(value, path)?;
    let exists = map
        .get("exists_in_visual")
        .ok_or_else(|| format!("{path}.exists_in_visual: missing required field"))?
        .as_bool()
        .ok_or_else(|| format!("{path}.exists_in_visual: expected boolean"))?;
    if exists {
        let rel = nonempty_str_field(map, path, "relationship_type")?;
        if !RELATIONSHIP_TYPES.contains(&rel) {
            return Err(format!(
                "{path}.relationship_type: '{rel}' not in {RELATIONSHIP_TYPES:?}"
            ));
        }
        nonempty_str_field(map, path, "visual_element_description")?;
        nonempty_str_field(map, path, "justification")?;
    } else {
        for key in [
            "relationship_type",
            "visual_element_description",
            "justification",
        ] {
            if map.get(key).is_some_and(|v| !v.is_null()) {
                return Err(format!(
                    "{path}.{key}: must be absent when exists_in_visual is false"
                ));
            }
        }
    }
    Ok(())
}

fn validate_grounded_claims(value: &Value) -> Result<(), String> {
    let items = arr(value, "$")?;
    for (i, item) in items.iter().enumerate() {
        let path = format!("$[{i}]");
        let map = obj(item, &path)?;
        nonempty_str_field(map, &path, "id")?;
        let grounding = map
            .get("visual_grounding")
            .ok_or_else(|| format!("{path}.visual_grounding: missing required field"))?;
        validate_grounding_object(grounding, &format!("{path}.visual_grounding"))?;
    }
    Ok(())
}

fn validate_answer_object(value: &Value, path: &str) -> Result<(), String> {
    let map = obj(value, path)?;
    str_field(map, path, "understand_question")?;
    let steps = map
        .get("chain_of_thought_answer")
        .ok_or_else(|| format!("{path}.chain_of_thought_answer: missing required field"))?;
    let steps = arr(steps, &format!("{path}.chain_of_thought_answer"))?;
    for (i, step) in steps.iter().enumerate() {
        let spath = format!("{path}.chain_of_thought_answer[{i}]");
        let map = obj(step, &spath)?;
        map.get("step")
            .ok_or_else(|| format!("{spath}.step: missing required field"))?
            .as_u64()
            .ok_or_else(|| format!("{spath}.step: expected positive integer"))?;
        nonempty_str_field(map, &spath, "reasoning")?;
    }
    nonempty_str_field(map, path, "conclusion")?;
    Ok(())
}

fn validate_qa_items(value: &Value, require_citations: bool) -> Result<(), String> {
    let items = arr(value, "$")?;
    if items.is_empty() {
        return Err("$: expected at least one item".into());
    }
    for (i, item) in items.iter().enumerate() {
        let path = format!("$[{i}]");
        let map = obj(item, &path)?;
        nonempty_str_field(map, &path, "question_type")?;
        nonempty_str_field(map, &path, "question")?;
        let answer = map
            .get("answer")
            .ok_or_else(|| format!("{path}.answer: missing required field"))?;
        validate_answer_object(answer, &format!("{path}.answer"))?;
        if require_citations {
            let citations = string_array(map, &path, "evidence_citations")?;
            if citations.is_empty() {
                return Err(format!("{path}.evidence_citations: must be non-empty"));
            }
        }
    }
    Ok(())
}

fn validate_vqa(value: &Value) -> Result<(), String> {
    // The generator emits a one-element array; accept a bare object too.
    let item = match value {
        Value::Array(items) if items.len() == 1 => &items[0],
        Value::Array(items) => {
            return Err(format!("$: expected exactly one item, got {}", items.len()))
        }
        other => other,
    };
    let map = obj(item, "$")?;
    let code = nonempty_str_field(map, "$", "question_type")?;
    if !VQA_CODES.contains(&code) {
        return Err(format!("$.question_type: '{code}' not in {VQA_CODES:?}"));
    }
    for key in [
        "question",
        "global_image_description",
        "relevant_parts_of_image",
        "step_by_step_reasoning",
        "answer",
        "short_form_answer",
    ] {
        nonempty_str_field(map, "$", key)?;
    }
    Ok(())
}

fn validate_judge_score(value: &Value) -> Result<(), String> {
    let map = obj(value, "$")?;
    for key in ["text_citation", "image_citation", "answer_accuracy"] {
        map.get(key)
            .ok_or_else(|| format!("$.{key}: missing required field"))?
            .as_f64()
            .ok_or_else(|| format!("$.{key}: expected number"))?;
    }
    map.get("binary_correct")
        .ok_or("$.binary_correct: missing required field")?
        .as_bool()
        .ok_or("$.binary_correct: expected boolean")?;
    Ok(())
}

fn validate_failure_tag(value: &Value) -> Result<(), String> {
    let map = obj(value, "$")?;
    let category = nonempty_str_field(map, "$", "category")?;
    if !FAILURE_CATEGORIES.contains(&category) {
        return Err(format!(
            "$.category: '{category}' not in {FAILURE_CATEGORIES:?}"
        ));
    }
    nonempty_str_field(map, "$", "rationale")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn study_gate_requires_rationale_when_false() {
        assert!(validate(
            "study_gate.v1",
            &json!({"is_experimental": true, "rationale": ""})
        )
        .is_ok());
        assert!(validate(
            "study_gate.v1",
            &json!({"is_experimental": false, "rationale": ""})
        )
        .is_err());
    }

    #[test]
    fn claims_schema_checks_id_pattern_and_types() {
        let good = json!([{
            "id": "T_claim_01",
            "claim_type": "Comparative",
            "content": "A beats B.",
            "key_entities": ["A", "B"],
            "source_sentences": ["A beats B on the benchmark."],
            "potential_question_focus": "Which is better?"
        }]);
        assert!(validate("claims.v1", &good).is_ok());

        let bad_id = json!([{"id": "claim-1", "claim_type": "Comparative", "content": "x",
            "key_entities": ["a"], "source_sentences": ["s"], "potential_question_focus": ""}]);
        assert!(validate("claims.v1", &bad_id).is_err());

        let bad_type = json!([{"id": "T_claim_01", "claim_type": "Speculative", "content": "x",
            "key_entities": ["a"], "source_sentences": ["s"], "potential_question_focus": ""}]);
        let err = validate("claims.v1", &bad_type).unwrap_err();
        assert!(err.contains("claim_type"));
    }

    #[test]
    fn grounding_conditional_fields() {
        let ok_false = json!([{"id": "x", "visual_grounding": {"exists_in_visual": false}}]);
        assert!(validate("grounded_claims.v1", &ok_false).is_ok());

        let missing_justification = json!([{"id": "x", "visual_grounding": {
            "exists_in_visual": true,
            "relationship_type": "Supports",
            "visual_element_description": "the bar"
        }}]);
        let err = validate("grounded_claims.v1", &missing_justification).unwrap_err();
        assert!(err.contains("justification"));

        let stray_field = json!([{"id": "x", "visual_grounding": {
            "exists_in_visual": false, "justification": "but why"
        }}]);
        assert!(validate("grounded_claims.v1", &stray_field).is_err());
    }

    #[test]
    fn vqa_schema_requires_short_form_and_known_code() {
        let mut item = json!({
            "question_type": "EI",
            "question": "Which bar is tallest?",
            "global_image_description": "A bar chart.",
            "relevant_parts_of_image": "The bars.",
            "step_by_step_reasoning": "Compare heights.",
            "answer": "The third bar is tallest.",
            "short_form_answer": "third"
        });
        assert!(validate("vqa_item.v1", &json!([item.clone()])).is_ok());
        assert!(validate("vqa_item.v1", &item).is_ok());

        item["question_type"] = json!("XX");
        assert!(validate("vqa_item.v1", &item).is_err());
        item["question_type"] = json!("EI");
        item.as_object_mut().unwrap().remove("short_form_answer");
        let err = validate("vqa_item.v1", &item).unwrap_err();
        assert!(err.contains("short_form_answer"));
    }

    #[test]
    fn failure_tag_category_membership() {
        assert!(validate(
            "failure_tag.v1",
            &json!({"category": "Hallucination of Context", "rationale": "made up a number"})
        )
        .is_ok());
        assert!(validate(
            "failure_tag.v1",
            &json!({"category": "Bad Vibes", "rationale": "nope"})
        )
        .is_err());
    }
}
