//! Parsed-paper data model and context-unit assembly.
//!
//! Papers arrive as one JSON file each (see `load_parsed_paper` for the
//! layout). This module validates them, detects sentences that mention a
//! figure or table, gates papers by study type via the LLM gateway, and
//! groups text around each visual into the multimodal context units that
//! drive synthesis.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::gateway::{Gateway, GatewayError, Message, Role};
use crate::prompts::PromptLibrary;

/// Where a paper was sourced from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaperSource {
    Arxiv,
    NatureComm,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualKind {
    Figure,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedPaper {
    pub paper_id: String,
    pub title: String,
    pub source: PaperSource,
    pub year: i32,
    pub sections: Vec<Section>,
    pub visuals: Vec<Visual>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub section_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub heading: String,
    pub paragraphs: Vec<Paragraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paragraph {
    pub paragraph_id: String,
    pub text: String,
    /// `(start, end)` character offsets of this paragraph within the
    /// document text (paragraphs joined by blank lines, in order).
    pub char_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visual {
    pub visual_id: String,
    pub kind: VisualKind,
    pub label: String,
    pub caption: String,
    pub image_ref: String,
}

/// One detected mention of a visual inside a paragraph sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualReference {
    pub paragraph_id: String,
    pub sentence_index: usize,
    pub sentence_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_visual_id: Option<String>,
    pub raw_mention: String,
}

/// A focused multimodal context: one visual, its caption, and the text
/// segment that discusses it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextUnit {
    pub unit_id: String,
    pub paper_id: String,
    pub visual_id: String,
    pub caption: String,
    pub paragraph_ids: Vec<String>,
    pub references: Vec<VisualReference>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section_label: Option<String>,
}

/// Verdict on whether a paper reports an original experiment-driven study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyGate {
    pub paper_id: String,
    pub is_experimental: bool,
    pub rationale: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed document at {path}: {detail}")]
    MalformedDocument { path: String, detail: String },
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("document has no sections")]
    EmptyDocument,
    #[error("no parseable study verdict after {attempts} attempts")]
    UnparsableVerdict { attempts: u32 },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Referencing paragraphs are expanded by one neighbor on each side.
const SEGMENT_NEIGHBOR_RADIUS: usize = 1;
/// Hard cap on paragraphs per context unit.
const SEGMENT_MAX_PARAGRAPHS: usize = 8;
/// Window size for visuals no paragraph refers to.
const UNREFERENCED_WINDOW: usize = 2;

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

// --- loading ---------------------------------------------------------------

#[derive(Deserialize)]
struct RawPaper {
    paper_id: Option<String>,
    title: Option<String>,
    source: Option<String>,
    year: Option<i32>,
    sections: Option<Vec<RawSection>>,
    visuals: Option<Vec<RawVisual>>,
}

#[derive(Deserialize)]
struct RawSection {
    section_id: Option<String>,
    #[serde(default)]
    label: Option<String>,
    heading: Option<String>,
    paragraphs: Option<Vec<RawParagraph>>,
}

#[derive(Deserialize)]
struct RawParagraph {
    paragraph_id: Option<String>,
    text: Option<String>,
    // Present when re-loading our own serialization; recomputed on load.
    #[serde(default)]
    #[allow(dead_code)]
    char_span: Option<(usize, usize)>,
}

#[derive(Deserialize)]
struct RawVisual {
    visual_id: Option<String>,
    kind: Option<String>,
    label: Option<String>,
    caption: Option<String>,
    image_ref: Option<String>,
}

fn malformed(path: &str, detail: impl Into<String>) -> CorpusError {
    CorpusError::MalformedDocument {
        path: path.to_string(),
        detail: detail.into(),
    }
}

fn require<T>(value: Option<T>, path: &str) -> Result<T, CorpusError> {
    value.ok_or_else(|| malformed(path, "missing required field"))
}

/// Load one paper from its JSON serialization.
///
/// Expected layout: top-level `paper_id`, `title`, `source`
/// (`arxiv` | `nature_comm` | `other`), `year`, `sections` (array of
/// `{section_id, label?, heading, paragraphs: [{paragraph_id, text}]}`) and
/// `visuals` (array of `{visual_id, kind, label, caption, image_ref}`).
/// Ids are trimmed, paragraph text is whitespace-normalized, and character
/// spans over the concatenated document text are computed here.
pub fn load_parsed_paper(path: &Path) -> Result<ParsedPaper, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_paper_json(&bytes)
}

/// Parse a paper from raw JSON bytes. See [`load_parsed_paper`].
pub fn parse_paper_json(bytes: &[u8]) -> Result<ParsedPaper, CorpusError> {
    let raw: RawPaper = serde_json::from_slice(bytes)
        .map_err(|e| malformed("$", format!("invalid JSON: {e}")))?;

    let paper_id = require(raw.paper_id, "paper_id")?.trim().to_string();
    if paper_id.is_empty() {
        return Err(malformed("paper_id", "must be non-empty"));
    }
    let title = require(raw.title, "title")?.trim().to_string();
    let source = match require(raw.source, "source")?.as_str() {
        "arxiv" => PaperSource::Arxiv,
        "nature_comm" => PaperSource::NatureComm,
        "other" => PaperSource::Other,
        other => {
            return Err(malformed(
                "source",
                format!("unknown source '{other}' (expected arxiv | nature_comm | other)"),
            ))
        }
    };
    let year = require(raw.year, "year")?;

    let raw_sections = require(raw.sections, "sections")?;
    if raw_sections.is_empty() {
        return Err(CorpusError::EmptyDocument);
    }

    let mut seen_ids: HashSet<String> = HashSet::new();
    let mut sections = Vec::with_capacity(raw_sections.len());
    let mut char_cursor = 0usize;
    for (si, rs) in raw_sections.into_iter().enumerate() {
        let spath = format!("sections[{si}]");
        let section_id = require(rs.section_id, &format!("{spath}.section_id"))?
            .trim()
            .to_string();
        if !seen_ids.insert(section_id.clone()) {
            return Err(CorpusError::DuplicateId(section_id));
        }
        let heading = require(rs.heading, &format!("{spath}.heading"))?
            .trim()
            .to_string();
        let label = rs.label.map(|l| l.trim().to_string()).filter(|l| !l.is_empty());
        let raw_paragraphs = require(rs.paragraphs, &format!("{spath}.paragraphs"))?;
        let mut paragraphs = Vec::with_capacity(raw_paragraphs.len());
        for (pi, rp) in raw_paragraphs.into_iter().enumerate() {
            let ppath = format!("{spath}.paragraphs[{pi}]");
            let paragraph_id = require(rp.paragraph_id, &format!("{ppath}.paragraph_id"))?
                .trim()
                .to_string();
            if !seen_ids.insert(paragraph_id.clone()) {
                return Err(CorpusError::DuplicateId(paragraph_id));
            }
            let text = collapse_whitespace(&require(rp.text, &format!("{ppath}.text"))?);
            if text.is_empty() {
                return Err(malformed(
                    &format!("{ppath}.text"),
                    "empty after whitespace normalization",
                ));
            }
            let len = text.chars().count();
            paragraphs.push(Paragraph {
                paragraph_id,
                text,
                char_span: (char_cursor, char_cursor + len),
            });
            // Two chars for the blank-line separator in the document text.
            char_cursor += len + 2;
        }
        sections.push(Section {
            section_id,
            label,
            heading,
            paragraphs,
        });
    }

    let raw_visuals = require(raw.visuals, "visuals")?;
    let mut visuals = Vec::with_capacity(raw_visuals.len());
    for (vi, rv) in raw_visuals.into_iter().enumerate() {
        let vpath = format!("visuals[{vi}]");
        let visual_id = require(rv.visual_id, &format!("{vpath}.visual_id"))?
            .trim()
            .to_string();
        if !seen_ids.insert(visual_id.clone()) {
            return Err(CorpusError::DuplicateId(visual_id));
        }
        let kind = match require(rv.kind, &format!("{vpath}.kind"))?.as_str() {
            "figure" => VisualKind::Figure,
            "table" => VisualKind::Table,
            other => {
                return Err(malformed(
                    &format!("{vpath}.kind"),
                    format!("unknown kind '{other}' (expected figure | table)"),
                ))
            }
        };
        let label = require(rv.label, &format!("{vpath}.label"))?.trim().to_string();
        let caption = require(rv.caption, &format!("{vpath}.caption"))?;
        let image_ref = require(rv.image_ref, &format!("{vpath}.image_ref"))?;
        visuals.push(Visual {
            visual_id,
            kind,
            label,
            caption: collapse_whitespace(&caption),
            image_ref,
        });
    }

    Ok(ParsedPaper {
        paper_id,
        title,
        source,
        year,
        sections,
        visuals,
    })
}

impl ParsedPaper {
    /// All paragraphs in document order.
    pub fn paragraphs(&self) -> impl Iterator<Item = &Paragraph> {
        self.sections.iter().flat_map(|s| s.paragraphs.iter())
    }

    pub fn paragraph(&self, paragraph_id: &str) -> Option<&Paragraph> {
        self.paragraphs().find(|p| p.paragraph_id == paragraph_id)
    }

    pub fn visual(&self, visual_id: &str) -> Option<&Visual> {
        self.visuals.iter().find(|v| v.visual_id == visual_id)
    }

    /// Document-order index of each paragraph id.
    pub fn paragraph_positions(&self) -> HashMap<&str, usize> {
        self.paragraphs()
            .enumerate()
            .map(|(i, p)| (p.paragraph_id.as_str(), i))
            .collect()
    }

    /// Citable section identifier for the section containing a paragraph:
    /// the numeric label when present, otherwise the heading verbatim.
    pub fn section_label_for(&self, paragraph_id: &str) -> Option<String> {
        self.sections
            .iter()
            .find(|s| s.paragraphs.iter().any(|p| p.paragraph_id == paragraph_id))
            .map(|s| s.label.clone().unwrap_or_else(|| s.heading.clone()))
    }

    /// Assumed in-document position of each visual, on the paragraph axis.
    ///
    /// The serialization lists visuals separately from text, so position is
    /// reconstructed by spacing the visuals evenly through the document:
    /// visual `i` of `V` sits between paragraphs at fraction `(i+1)/(V+1)`
    /// of the `P` paragraphs, i.e. at axis value `(i+1)*P/(V+1) - 0.5`.
    pub fn visual_positions(&self) -> Vec<f64> {
        let p = self.paragraphs().count();
        let v = self.visuals.len();
        (0..v)
            .map(|i| ((i + 1) as f64) * (p as f64) / ((v + 1) as f64) - 0.5)
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("paper serialization cannot fail")
    }
}

// --- sentence splitting ----------------------------------------------------

/// Abbreviations whose trailing period never ends a sentence.
const ABBREVIATIONS: &[&str] = &["fig.", "figs.", "et al.", "e.g.", "i.e."];

/// Split normalized text into sentences.
///
/// A sentence ends at `.`, `?` or `!` followed by whitespace and an
/// uppercase letter or digit, unless the period closes a known abbreviation
/// ("Fig. 3" stays in one sentence).
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (byte_idx, ch) = chars[i];
        if ch == '.' || ch == '?' || ch == '!' {
            let next_ws = chars.get(i + 1).is_some_and(|&(_, c)| c.is_whitespace());
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            let next_starts_sentence = chars
                .get(j)
                .is_some_and(|&(_, c)| c.is_uppercase() || c.is_ascii_digit());
            let is_abbrev = ch == '.' && {
                let upto = &text[..byte_idx + ch.len_utf8()];
                let lower = upto.to_lowercase();
                ABBREVIATIONS.iter().any(|a| lower.ends_with(a))
            };
            if next_ws && next_starts_sentence && !is_abbrev {
                let end = byte_idx + ch.len_utf8();
                let sentence = text[start..end].trim();
                if !sentence.is_empty() {
                    sentences.push(sentence.to_string());
                }
                start = chars[j].0;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

// --- visual reference detection ---------------------------------------------

static ARABIC_MENTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(figures?|figs?\.|tables?)\s+(\d{1,4})((?:\s*(?:,|and|&)\s*\d{1,4})*)",
    )
    .expect("static regex")
});

static ROMAN_MENTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b(?i:figures?|figs?\.|tables?)\s+([IVXLCDM]+)\b").expect("static regex")
});

static TRAILING_ORDINAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\d{1,4}").expect("static regex"));

fn mention_kind(head: &str) -> VisualKind {
    if head.to_lowercase().starts_with("tab") {
        VisualKind::Table
    } else {
        VisualKind::Figure
    }
}

/// Parse a visual label like "Figure 3" or "Table 2" into `(kind, ordinal)`.
/// Labels with non-arabic ordinals do not parse.
pub fn parse_visual_label(label: &str) -> Option<(VisualKind, u32)> {
    static LABEL: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"(?i)^(figure|figs?\.?|table|tab\.?)\s*(\d{1,4})$").expect("static regex")
    });
    let caps = LABEL.captures(label.trim())?;
    let kind = mention_kind(caps.get(1)?.as_str());
    let ordinal: u32 = caps.get(2)?.as_str().parse().ok()?;
    Some((kind, ordinal))
}

/// Find every figure/table mention in a paragraph and resolve it against the
/// paper's visuals by `(kind, ordinal)` label match. Unresolvable mentions
/// (unknown ordinal, roman numerals) come back with `resolved_visual_id`
/// unset; they are data, not errors.
pub fn detect_visual_references(
    paragraph: &Paragraph,
    visuals: &[Visual],
) -> Vec<VisualReference> {
    let mut by_label: HashMap<(VisualKind, u32), &str> = HashMap::new();
    for v in visuals {
        if let Some(key) = parse_visual_label(&v.label) {
            by_label.entry(key).or_insert(v.visual_id.as_str());
        }
    }

    let mut refs = Vec::new();
    for (sentence_index, sentence) in split_sentences(&paragraph.text).into_iter().enumerate() {
        let mut covered: Vec<(usize, usize)> = Vec::new();
        for caps in ARABIC_MENTION.captures_iter(&sentence) {
            let whole = caps.get(0).expect("match");
            covered.push((whole.start(), whole.end()));
            let kind = mention_kind(&caps[1]);
            let mut ordinals: Vec<u32> = vec![caps[2].parse().unwrap_or(0)];
            if let Some(tail) = caps.get(3) {
                for m in TRAILING_ORDINAL.find_iter(tail.as_str()) {
                    if let Ok(n) = m.as_str().parse() {
                        ordinals.push(n);
                    }
                }
            }
            for ordinal in ordinals {
                refs.push(VisualReference {
                    paragraph_id: paragraph.paragraph_id.clone(),
                    sentence_index,
                    sentence_text: sentence.clone(),
                    resolved_visual_id: by_label
                        .get(&(kind, ordinal))
                        .map(|id| (*id).to_string()),
                    raw_mention: whole.as_str().to_string(),
                });
            }
        }
        for m in ROMAN_MENTION.captures_iter(&sentence) {
            let whole = m.get(0).expect("match");
            let overlaps = covered
                .iter()
                .any(|&(s, e)| whole.start() < e && s < whole.end());
            if overlaps {
                continue;
            }
            refs.push(VisualReference {
                paragraph_id: paragraph.paragraph_id.clone(),
                sentence_index,
                sentence_text: sentence.clone(),
                resolved_visual_id: None,
                raw_mention: whole.as_str().to_string(),
            });
        }
    }
    refs
}

// --- study gating -----------------------------------------------------------

/// Ask the gate model whether the paper reports an original experiment-driven
/// study (as opposed to a survey, position paper, tutorial, or purely
/// conceptual work). Deterministic under the mock backend.
pub fn classify_paper(
    paper: &ParsedPaper,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    model_id: &str,
) -> Result<StudyGate, CorpusError> {
    let mut excerpt = String::new();
    'outer: for section in &paper.sections {
        for paragraph in &section.paragraphs {
            excerpt.push_str(&paragraph.text);
            excerpt.push_str("\n\n");
            if excerpt.chars().count() > 2000 {
                break 'outer;
            }
        }
    }
    let prompt = prompts.render(
        "study_gate",
        &[("title", paper.title.as_str()), ("excerpt", excerpt.trim())],
    );
    let request = crate::gateway::ChatRequest {
        model_id: model_id.to_string(),
        messages: vec![Message {
            role: Role::User,
            text: prompt,
            image_refs: vec![],
        }],
        temperature: 0.0,
        max_output_tokens: 512,
        schema_tag: "study_gate.v1".to_string(),
    };
    let value = gateway.complete_structured(&request).map_err(|e| match e {
        GatewayError::UnparsableOutput { attempts, .. } => {
            CorpusError::UnparsableVerdict { attempts }
        }
        other => CorpusError::Gateway(other),
    })?;
    Ok(StudyGate {
        paper_id: paper.paper_id.clone(),
        is_experimental: value["is_experimental"].as_bool().unwrap_or(false),
        rationale: value["rationale"].as_str().unwrap_or_default().to_string(),
    })
}

// --- context units ----------------------------------------------------------

/// Assemble one context unit per visual.
///
/// Visuals with at least one resolved reference get the referencing
/// paragraphs expanded by one neighbor on each side (merged, document order,
/// capped at 8 with referencing paragraphs kept first). Unreferenced visuals
/// with a caption get the two paragraphs straddling the visual's assumed
/// document position. Unreferenced caption-less visuals yield no unit.
pub fn build_context_units(paper: &ParsedPaper) -> Vec<ContextUnit> {
    let paragraphs: Vec<&Paragraph> = paper.paragraphs().collect();
    let n = paragraphs.len();

    // All resolved references, grouped by target visual, in document order.
    let mut by_visual: BTreeMap<&str, Vec<VisualReference>> = BTreeMap::new();
    for paragraph in &paragraphs {
        for reference in detect_visual_references(paragraph, &paper.visuals) {
            if let Some(ref vid) = reference.resolved_visual_id {
                let vid = paper
                    .visual(vid)
                    .map(|v| v.visual_id.as_str())
                    .unwrap_or_default();
                by_visual.entry(vid).or_default().push(reference);
            }
        }
    }

    let positions = paper.visual_positions();
    let mut units = Vec::new();
    for (vi, visual) in paper.visuals.iter().enumerate() {
        let references = by_visual
            .remove(visual.visual_id.as_str())
            .unwrap_or_default();

        let segment: Vec<usize> = if !references.is_empty() {
            let referencing: Vec<usize> = paragraphs
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    references.iter().any(|r| r.paragraph_id == p.paragraph_id)
                })
                .map(|(i, _)| i)
                .collect();
            let mut candidates: HashSet<usize> = HashSet::new();
            for &i in &referencing {
                let lo = i.saturating_sub(SEGMENT_NEIGHBOR_RADIUS);
                let hi = (i + SEGMENT_NEIGHBOR_RADIUS).min(n.saturating_sub(1));
                candidates.extend(lo..=hi);
            }
            let referencing_set: HashSet<usize> = referencing.iter().copied().collect();
            let mut ordered: Vec<usize> = candidates.into_iter().collect();
            ordered.sort_unstable();
            if ordered.len() > SEGMENT_MAX_PARAGRAPHS {
                // Keep referencing paragraphs first, then fill with neighbors.
                let mut keep: Vec<usize> = ordered
                    .iter()
                    .copied()
                    .filter(|i| referencing_set.contains(i))
                    .take(SEGMENT_MAX_PARAGRAPHS)
                    .collect();
                for i in &ordered {
                    if keep.len() >= SEGMENT_MAX_PARAGRAPHS {
                        break;
                    }
                    if !referencing_set.contains(i) {
                        keep.push(*i);
                    }
                }
                keep.sort_unstable();
                keep
            } else {
                ordered
            }
        } else if !visual.caption.trim().is_empty() && n > 0 {
            let anchor = positions[vi];
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                let da = (a as f64 - anchor).abs();
                let db = (b as f64 - anchor).abs();
                da.total_cmp(&db).then(a.cmp(&b))
            });
            let mut window: Vec<usize> = idx.into_iter().take(UNREFERENCED_WINDOW).collect();
            window.sort_unstable();
            window
        } else {
            continue;
        };

        if segment.is_empty() {
            continue;
        }
        let section_label = paper.section_label_for(&paragraphs[segment[0]].paragraph_id);
        units.push(ContextUnit {
            unit_id: format!("{}/{}", paper.paper_id, visual.visual_id),
            paper_id: paper.paper_id.clone(),
            visual_id: visual.visual_id.clone(),
            caption: visual.caption.clone(),
            paragraph_ids: segment
                .into_iter()
                .map(|i| paragraphs[i].paragraph_id.clone())
                .collect(),
            references,
            section_label,
        });
    }
    units
}

/// Plain text of a unit's segment, paragraphs joined by blank lines.
pub fn unit_text(paper: &ParsedPaper, unit: &ContextUnit) -> String {
    unit.paragraph_ids
        .iter()
        .filter_map(|id| paper.paragraph(id))
        .map(|p| p.text.clone())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Unit text with each referencing sentence wrapped in `[REF]…[/REF]`
/// markers, so the claim generator can prioritize them.
pub fn unit_text_marked(paper: &ParsedPaper, unit: &ContextUnit) -> String {
    let mut marked: Vec<String> = Vec::new();
    for id in &unit.paragraph_ids {
        let Some(paragraph) = paper.paragraph(id) else {
            continue;
        };
        let ref_sentences: HashSet<&str> = unit
            .references
            .iter()
            .filter(|r| &r.paragraph_id == id)
            .map(|r| r.sentence_text.as_str())
            .collect();
        if ref_sentences.is_empty() {
            marked.push(paragraph.text.clone());
            continue;
        }
        let rendered = split_sentences(&paragraph.text)
            .into_iter()
            .map(|s| {
                if ref_sentences.contains(s.as_str()) {
                    format!("[REF]{s}[/REF]")
                } else {
                    s
                }
            })
            .collect::<Vec<_>>()
            .join(" ");
        marked.push(rendered);
    }
    marked.join("\n\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paragraph(id: &str, text: &str) -> Paragraph {
        Paragraph {
            paragraph_id: id.to_string(),
            text: text.to_string(),
            char_span: (0, text.chars().count()),
        }
    }

    fn visual(id: &str, kind: VisualKind, label: &str) -> Visual {
        Visual {
            visual_id: id.to_string(),
            kind,
            label: label.to_string(),
            caption: format!("Caption for {label}."),
            image_ref: format!("images/{id}.png"),
        }
    }

    fn paper_with(paragraph_texts: &[&str], visuals: Vec<Visual>) -> ParsedPaper {
        ParsedPaper {
            paper_id: "p1".into(),
            title: "A study".into(),
            source: PaperSource::Arxiv,
            year: 2024,
            sections: vec![Section {
                section_id: "s1".into(),
                label: Some("3".into()),
                heading: "Results".into(),
                paragraphs: paragraph_texts
                    .iter()
                    .enumerate()
                    .map(|(i, t)| paragraph(&format!("p{}", i + 1), t))
                    .collect(),
            }],
            visuals,
        }
    }

    #[test]
    fn sentences_split_on_terminators() {
        let got = split_sentences("Accuracy improves. The gain is large! Why? Because of scale.");
        assert_eq!(
            got,
            vec![
                "Accuracy improves.",
                "The gain is large!",
                "Why?",
                "Because of scale."
            ]
        );
    }

    #[test]
    fn abbreviations_do_not_split() {
        let got = split_sentences("As shown in Fig. 3, accuracy improves. See also et al. 2020.");
        assert_eq!(
            got,
            vec![
                "As shown in Fig. 3, accuracy improves.",
                "See also et al. 2020."
            ]
        );
        let got = split_sentences("Some baselines, e.g. B1, fail. Others do not.");
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn resolves_single_figure_mention() {
        let p = paragraph("p1", "As shown in Figure 3, accuracy improves.");
        let visuals = vec![visual("f3", VisualKind::Figure, "Figure 3")];
        let refs = detect_visual_references(&p, &visuals);
        assert_eq!(refs.len(), 1);
        assert_eq!(refs[0].resolved_visual_id.as_deref(), Some("f3"));
        assert_eq!(refs[0].sentence_index, 0);
        assert_eq!(refs[0].raw_mention, "Figure 3");
    }

    #[test]
    fn no_mention_yields_empty() {
        let p = paragraph("p1", "We discuss configuration next.");
        let visuals = vec![visual("f1", VisualKind::Figure, "Figure 1")];
        assert!(detect_visual_references(&p, &visuals).is_empty());
    }

    #[test]
    fn fig_and_table_in_one_sentence() {
        let p = paragraph("p1", "Fig. 2 and Table 1 agree.");
        let visuals = vec![
            visual("f2", VisualKind::Figure, "Figure 2"),
            visual("t1", VisualKind::Table, "Table 1"),
        ];
        let refs = detect_visual_references(&p, &visuals);
        assert_eq!(refs.len(), 2);
        assert!(refs.iter().all(|r| r.resolved_visual_id.is_some()));
        assert_eq!(refs[0].resolved_visual_id.as_deref(), Some("f2"));
        assert_eq!(refs[1].resolved_visual_id.as_deref(), Some("t1"));
    }

    #[test]
    fn conjunction_expands_to_multiple_references() {
        let p = paragraph("p1", "Figures 2 and 3 show the trend.");
        let visuals = vec![
            visual("f2", VisualKind::Figure, "Figure 2"),
            visual("f3", VisualKind::Figure, "Figure 3"),
        ];
        let refs = detect_visual_references(&p, &visuals);
        assert_eq!(refs.len(), 2);
        let ids: Vec<_> = refs
            .iter()
            .map(|r| r.resolved_visual_id.clone().unwrap())
            .collect();
        assert_eq!(ids, vec!["f2", "f3"]);
    }

    #[test]
    fn roman_numerals_flagged_unresolved() {
        let p = paragraph("p1", "Table IV lists the datasets.");
        let visuals = vec![visual("t4", VisualKind::Table, "Table IV")];
        let refs = detect_visual_references(&p, &visuals);
        assert_eq!(refs.len(), 1);
        assert!(refs[0].resolved_visual_id.is_none());
    }

    #[test]
    fn unknown_ordinal_unresolved() {
        let p = paragraph("p1", "See Figure 9 for details.");
        let visuals = vec![visual("f1", VisualKind::Figure, "Figure 1")];
        let refs = detect_visual_references(&p, &visuals);
        assert_eq!(refs.len(), 1);
        assert!(refs[0].resolved_visual_id.is_none());
        assert_eq!(refs[0].raw_mention, "Figure 9");
    }

    #[test]
    fn detection_is_pure_and_indices_in_range() {
        let p = paragraph(
            "p1",
            "First sentence here. As shown in Fig. 1, accuracy improves. Table 2 agrees.",
        );
        let visuals = vec![
            visual("f1", VisualKind::Figure, "Figure 1"),
            visual("t2", VisualKind::Table, "Table 2"),
        ];
        let a = detect_visual_references(&p, &visuals);
        let b = detect_visual_references(&p, &visuals);
        assert_eq!(a, b);
        let sentence_count = split_sentences(&p.text).len();
        assert!(a.iter().all(|r| r.sentence_index < sentence_count));
    }

    #[test]
    fn label_parsing() {
        assert_eq!(
            parse_visual_label("Figure 3"),
            Some((VisualKind::Figure, 3))
        );
        assert_eq!(parse_visual_label("Table 12"), Some((VisualKind::Table, 12)));
        assert_eq!(parse_visual_label("Fig. 4"), Some((VisualKind::Figure, 4)));
        assert_eq!(parse_visual_label("Table IV"), None);
    }

    #[test]
    fn loader_happy_path_and_round_trip() {
        let json = serde_json::json!({
            "paper_id": "p-min",
            "title": "Minimal",
            "source": "arxiv",
            "year": 2023,
            "sections": [{
                "section_id": "s1",
                "label": "1",
                "heading": "Intro",
                "paragraphs": [
                    {"paragraph_id": "p1", "text": "First   paragraph."},
                    {"paragraph_id": "p2", "text": "Second paragraph, as shown in Figure 1."}
                ]
            }],
            "visuals": [
                {"visual_id": "f1", "kind": "figure", "label": "Figure 1",
                 "caption": "A bar chart.", "image_ref": "images/f1.png"}
            ]
        });
        let paper = parse_paper_json(json.to_string().as_bytes()).unwrap();
        assert_eq!(paper.visuals.len(), 1);
        assert_eq!(paper.sections[0].paragraphs[0].text, "First paragraph.");
        assert_eq!(paper.sections[0].paragraphs[0].char_span, (0, 16));
        assert_eq!(paper.sections[0].paragraphs[1].char_span.0, 18);

        let reloaded =
            parse_paper_json(serde_json::to_string(&paper).unwrap().as_bytes()).unwrap();
        assert_eq!(paper, reloaded);
    }

    #[test]
    fn loader_rejects_duplicate_visual_ids() {
        let json = serde_json::json!({
            "paper_id": "p", "title": "t", "source": "other", "year": 2020,
            "sections": [{"section_id": "s1", "heading": "H",
                          "paragraphs": [{"paragraph_id": "p1", "text": "x"}]}],
            "visuals": [
                {"visual_id": "fig1", "kind": "figure", "label": "Figure 1", "caption": "", "image_ref": ""},
                {"visual_id": "fig1", "kind": "figure", "label": "Figure 2", "caption": "", "image_ref": ""}
            ]
        });
        match parse_paper_json(json.to_string().as_bytes()) {
            Err(CorpusError::DuplicateId(id)) => assert_eq!(id, "fig1"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn loader_rejects_empty_document() {
        let json = serde_json::json!({
            "paper_id": "p", "title": "t", "source": "other", "year": 2020,
            "sections": [], "visuals": []
        });
        assert!(matches!(
            parse_paper_json(json.to_string().as_bytes()),
            Err(CorpusError::EmptyDocument)
        ));
    }

    #[test]
    fn loader_reports_field_path() {
        let json = serde_json::json!({
            "paper_id": "p", "title": "t", "source": "other", "year": 2020,
            "sections": [{"section_id": "s1", "heading": "H",
                          "paragraphs": [{"paragraph_id": "p1"}]}],
            "visuals": []
        });
        match parse_paper_json(json.to_string().as_bytes()) {
            Err(CorpusError::MalformedDocument { path, .. }) => {
                assert_eq!(path, "sections[0].paragraphs[0].text");
            }
            other => panic!("expected MalformedDocument, got {other:?}"),
        }
    }

    #[test]
    fn referenced_visual_unit_includes_referencing_paragraphs() {
        let texts = [
            "Intro text without mentions.",
            "As shown in Figure 1, accuracy improves.",
            "Middle filler paragraph.",
            "Unrelated discussion.",
            "Figure 1 also shows a second property.",
            "Closing remarks.",
        ];
        let paper = paper_with(&texts, vec![visual("f1", VisualKind::Figure, "Figure 1")]);
        let units = build_context_units(&paper);
        assert_eq!(units.len(), 1);
        let unit = &units[0];
        // p2 and p5 reference; p1, p3, p4, p6 join as neighbors.
        assert!(unit.paragraph_ids.contains(&"p2".to_string()));
        assert!(unit.paragraph_ids.contains(&"p5".to_string()));
        assert_eq!(
            unit.paragraph_ids,
            vec!["p1", "p2", "p3", "p4", "p5", "p6"]
        );
        assert_eq!(unit.references.len(), 2);
        assert_eq!(unit.section_label.as_deref(), Some("3"));
    }

    #[test]
    fn unreferenced_visual_gets_window_near_anchor() {
        let texts = [
            "Paragraph one.",
            "Paragraph two.",
            "Paragraph three.",
            "Paragraph four.",
        ];
        let paper = paper_with(&texts, vec![visual("t1", VisualKind::Table, "Table 1")]);
        // One visual over 4 paragraphs: anchor = 1*4/2 - 0.5 = 1.5, so the
        // window is the straddling pair p2, p3.
        let units = build_context_units(&paper);
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].paragraph_ids, vec!["p2", "p3"]);
        assert!(units[0].references.is_empty());
    }

    #[test]
    fn unreferenced_captionless_visual_yields_no_unit() {
        let mut v = visual("t1", VisualKind::Table, "Table 1");
        v.caption = String::new();
        let paper = paper_with(&["Only paragraph."], vec![v]);
        assert!(build_context_units(&paper).is_empty());
    }

    #[test]
    fn no_visuals_yields_no_units() {
        let paper = paper_with(&["Only paragraph."], vec![]);
        assert!(build_context_units(&paper).is_empty());
    }

    #[test]
    fn segment_capped_at_eight_keeps_referencing_paragraphs() {
        let texts: Vec<String> = (0..20)
            .map(|i| {
                if i % 3 == 0 {
                    format!("Paragraph {i} cites Figure 1 explicitly: see Figure 1.")
                } else {
                    format!("Paragraph {i} filler.")
                }
            })
            .collect();
        let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        let paper = paper_with(&refs, vec![visual("f1", VisualKind::Figure, "Figure 1")]);
        let units = build_context_units(&paper);
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].paragraph_ids.len(), 8);
        // All seven referencing paragraphs (0,3,6,9,12,15,18) survive the cap.
        for i in [0, 3, 6, 9, 12, 15, 18] {
            assert!(
                units[0].paragraph_ids.contains(&format!("p{}", i + 1)),
                "referencing paragraph p{} missing",
                i + 1
            );
        }
    }

    #[test]
    fn resolved_references_partition_across_units() {
        let texts = [
            "Figure 1 shows gains. Table 1 lists data.",
            "More about Figure 1 here.",
            "Table 1 is discussed again.",
        ];
        let paper = paper_with(
            &texts,
            vec![
                visual("f1", VisualKind::Figure, "Figure 1"),
                visual("t1", VisualKind::Table, "Table 1"),
            ],
        );
        let units = build_context_units(&paper);
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut total = 0;
        for unit in &units {
            for r in &unit.references {
                assert_eq!(r.resolved_visual_id.as_deref(), Some(unit.visual_id.as_str()));
                *seen
                    .entry(format!(
                        "{}:{}:{}",
                        r.paragraph_id, r.sentence_index, r.raw_mention
                    ))
                    .or_default() += 1;
                total += 1;
            }
        }
        assert_eq!(total, 4);
        assert!(seen.values().all(|&c| c == 1), "reference appears twice");
    }

    #[test]
    fn unit_paragraphs_in_document_order_and_exist() {
        let texts = [
            "Alpha. See Figure 1.",
            "Beta.",
            "Gamma with Figure 1 again.",
        ];
        let paper = paper_with(&texts, vec![visual("f1", VisualKind::Figure, "Figure 1")]);
        let positions = paper.paragraph_positions();
        for unit in build_context_units(&paper) {
            let idx: Vec<usize> = unit
                .paragraph_ids
                .iter()
                .map(|id| *positions.get(id.as_str()).expect("paragraph exists"))
                .collect();
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            assert_eq!(idx, sorted);
        }
    }

    #[test]
    fn marked_text_wraps_referencing_sentences() {
        let texts = ["Intro sentence. As shown in Figure 1, accuracy improves."];
        let paper = paper_with(&texts, vec![visual("f1", VisualKind::Figure, "Figure 1")]);
        let units = build_context_units(&paper);
        let marked = unit_text_marked(&paper, &units[0]);
        assert!(marked.contains("[REF]As shown in Figure 1, accuracy improves.[/REF]"));
        assert!(marked.starts_with("Intro sentence."));
    }
}
