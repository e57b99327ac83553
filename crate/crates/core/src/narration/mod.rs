//! Text generation around the quantitative indices: insight explanations,
//! opportunity suggestions, self-reflection filtering and an LLM judge.
//!
//! All parsing is rule-based; nothing here trusts the model to follow the
//! format, and every model call has a fail-closed path.

mod attribute_score;
mod client;
mod templates;

use std::sync::LazyLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::impact::ImpactBin;
use crate::indices::{insight_contributions, Polarity};
use crate::ingest::normalize_text;
use crate::ranking::{fractional_ranks, RankOrder};

pub use attribute_score::AttributeScoreProvider;
pub use client::{ChatClient, ChatRequest, HttpChatClient, ScriptedChatClient, DEFAULT_TEMPERATURE};
pub use templates::{PromptTemplates, TEMPLATE_EXTENSION};

const DEFAULT_EXEMPLARS: &str = include_str!("../../templates/insight_exemplars.json");

/// `surprising_statistic` → `Surprising Statistic`.
pub fn display_name(name: &str) -> String {
    name.split(|c: char| c == '_' || c == '-' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut cs = w.chars();
            match cs.next() {
                Some(f) => f.to_uppercase().chain(cs).collect::<String>(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Case- and punctuation-insensitive key used to match model output to
/// attribute names: `Surprising Statistic` and `surprising_statistic` agree.
pub fn attribute_key(name: &str) -> String {
    let mut out = String::new();
    for w in name.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        if !out.is_empty() {
            out.push('_');
        }
        out.push_str(&w.to_lowercase());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedAttribute {
    pub index: usize,
    pub attribute: String,
    pub polarity: Polarity,
    pub contribution: f64,
}

/// Attributes with strictly positive contribution (s_best − s_worst)_a·β″_a,
/// largest first, at most `k`.
pub fn select_insight_attributes(
    names: &[String],
    best: &nalgebra::DVector<f64>,
    worst: &nalgebra::DVector<f64>,
    beta_dprime: &nalgebra::DVector<f64>,
    k: usize,
) -> Result<Vec<SelectedAttribute>> {
    let contributions = insight_contributions(names, best, worst, beta_dprime)?;
    let mut chosen: Vec<SelectedAttribute> = contributions
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.contribution > 0.0)
        .map(|(index, c)| SelectedAttribute {
            index,
            attribute: c.attribute,
            polarity: c.polarity,
            contribution: c.contribution,
        })
        .collect();
    chosen.sort_by(|a, b| b.contribution.total_cmp(&a.contribution).then(a.index.cmp(&b.index)));
    chosen.truncate(k);
    Ok(chosen)
}

/// Attribute as presented to a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptAttribute {
    pub name: String,
    pub display: String,
    pub description: String,
    pub verb: String,
}

impl PromptAttribute {
    pub fn new(name: &str, description: &str, polarity: Polarity) -> Self {
        Self {
            name: name.to_string(),
            display: display_name(name),
            description: description.to_string(),
            verb: polarity.verb().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTreatment {
    pub text: String,
    /// Pre-formatted so prompts stay byte-stable.
    pub ctr: String,
}

impl PromptTreatment {
    pub fn new(text: &str, ctr: f64) -> Self {
        Self {
            text: text.to_string(),
            ctr: format!("{:.4}%", ctr * 100.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarAttribute {
    pub display: String,
    pub verb: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub treatments: Vec<String>,
    pub attributes: Vec<ExemplarAttribute>,
    pub output: String,
}

pub fn default_exemplars() -> Vec<Exemplar> {
    serde_json::from_str(DEFAULT_EXEMPLARS).expect("bundled exemplars are valid")
}

#[derive(Serialize)]
struct InsightContext<'a> {
    treatments: &'a [PromptTreatment],
    attributes: &'a [PromptAttribute],
    exemplars: &'a [Exemplar],
}

/// `treatments` must already be ordered best → worst.
pub fn build_insight_prompt(
    templates: &PromptTemplates,
    treatments: &[PromptTreatment],
    attributes: &[PromptAttribute],
    exemplars: &[Exemplar],
) -> Result<ChatRequest> {
    if attributes.is_empty() {
        return Err(Error::Validation("insight prompt needs at least one attribute".into()));
    }
    let (system, user) = templates.render_pair(
        "insight",
        &InsightContext {
            treatments,
            attributes,
            exemplars,
        },
    )?;
    Ok(ChatRequest::new(system, user))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    NoBlocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightCandidate {
    /// Normalized attribute key.
    pub attribute: String,
    pub polarity: Polarity,
    pub explanation: String,
    pub cited_phrases: Vec<String>,
    pub accepted: bool,
}

impl InsightCandidate {
    /// Header-plus-paragraph form, as shown to reviewers.
    pub fn render(&self) -> String {
        format!(
            "**{} {}**: {}",
            display_name(&self.attribute),
            self.polarity.verb(),
            self.explanation
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedInsights {
    pub candidates: IndexMap<String, InsightCandidate>,
    pub status: ParseStatus,
}

static BOLD_HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?:[-*]\s+|\d+[.)]\s+)?\*\*(?P<h>[^*]+?)\*\*\s*:?\s*(?P<rest>.*)$").unwrap()
});
static PLAIN_HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?:[-*]\s+|\d+[.)]\s+)?(?P<h>[A-Za-z][A-Za-z0-9 _&/'-]{0,60}?)\s*:\s*(?P<rest>.*)$").unwrap()
});
static QUOTED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#""([^"]+)"|“([^”]+)”"#).unwrap());
static POLARITY_SUFFIX: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^(?P<name>.*?)\s+(?P<verb>helps|hurts)$").unwrap());
static EXAMPLE_MARK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bexamples?\s*:").unwrap());
static VERDICT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(accept|reject)\b").unwrap());
static SCORE_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:verdict\s*:\s*)?(?:score\s*[:=]?\s*)?(?P<s>[01])(?:\s*[:.)\-–]\s*|\s+|$)(?P<j>.*)$").unwrap()
});

/// Double-quoted substrings, straight or curly, in order of appearance.
pub fn extract_quoted(text: &str) -> Vec<String> {
    QUOTED
        .captures_iter(text)
        .filter_map(|c| c.get(1).or_else(|| c.get(2)))
        .map(|m| m.as_str().trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn clean(text: &str) -> String {
    normalize_text(&text.replace("**", ""))
}

struct Block {
    header: String,
    body: String,
}

/// Splits text into header-led blocks. `plain_ok` decides whether an
/// unbolded `Name:` line may start a block.
fn split_blocks(raw: &str, plain_ok: impl Fn(&str) -> bool) -> Vec<Block> {
    let mut blocks: Vec<Block> = Vec::new();
    let mut closed = false;
    for line in raw.lines() {
        let header = BOLD_HEADER
            .captures(line)
            .map(|c| (c["h"].trim().trim_end_matches(':').trim().to_string(), c["rest"].to_string()))
            .or_else(|| {
                PLAIN_HEADER
                    .captures(line)
                    .filter(|c| plain_ok(&c["h"]))
                    .map(|c| (c["h"].trim().to_string(), c["rest"].to_string()))
            });
        match header {
            Some((h, rest)) => {
                blocks.push(Block { header: h, body: rest });
                closed = false;
            }
            None => {
                let Some(b) = blocks.last_mut() else { continue };
                if line.trim().is_empty() {
                    // one paragraph per block
                    closed = !b.body.trim().is_empty();
                } else if !closed {
                    b.body.push('\n');
                    b.body.push_str(line);
                }
            }
        }
    }
    blocks
}

/// One candidate per well-formed `**<Attribute> helps|hurts**: paragraph`
/// block. Blocks without a paragraph are dropped; a later block for the same
/// attribute is ignored.
pub fn parse_insights(raw: &str) -> ParsedInsights {
    let mut candidates = IndexMap::new();
    for block in split_blocks(raw, |_| false) {
        let (name, polarity) = match POLARITY_SUFFIX.captures(&block.header) {
            Some(c) => (
                c["name"].to_string(),
                if c["verb"].eq_ignore_ascii_case("helps") {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                },
            ),
            None => (block.header.clone(), Polarity::Neutral),
        };
        let key = attribute_key(&name);
        let explanation = clean(&block.body);
        if key.is_empty() || explanation.is_empty() {
            log::debug!("dropping malformed insight block `{}`", block.header);
            continue;
        }
        if candidates.contains_key(&key) {
            continue;
        }
        candidates.insert(
            key.clone(),
            InsightCandidate {
                attribute: key,
                polarity,
                cited_phrases: extract_quoted(&explanation),
                explanation,
                accepted: false,
            },
        );
    }
    let status = if candidates.is_empty() {
        log::warn!("no insight blocks could be parsed from the completion");
        ParseStatus::NoBlocks
    } else {
        ParseStatus::Ok
    };
    ParsedInsights { candidates, status }
}

/// True when the candidate cites at least one phrase and every cited phrase
/// occurs in some treatment, compared after whitespace normalization.
pub fn citations_grounded(candidate: &InsightCandidate, treatments: &[String]) -> bool {
    let norm: Vec<String> = treatments.iter().map(|t| normalize_text(t)).collect();
    !candidate.cited_phrases.is_empty()
        && candidate
            .cited_phrases
            .iter()
            .all(|p| {
                let p = normalize_text(p);
                norm.iter().any(|t| t.contains(&p))
            })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionStatus {
    Ok,
    /// At least one review call failed; affected candidates were excluded.
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub attribute: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionOutcome {
    pub accepted: Vec<InsightCandidate>,
    pub rejected: Vec<Rejection>,
    pub status: ReflectionStatus,
}

#[derive(Serialize)]
struct ReflectContext<'a> {
    treatments: &'a [String],
    attribute: String,
    verb: &'a str,
    explanation: &'a str,
}

/// Reviews candidates in order and keeps at most `k`.
///
/// The citation check runs locally first and cannot be overridden by the
/// model. A failed or unreadable review excludes the candidate.
pub fn self_reflect(
    client: &dyn ChatClient,
    templates: &PromptTemplates,
    candidates: Vec<InsightCandidate>,
    treatments: &[String],
    k: usize,
) -> Result<ReflectionOutcome> {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let mut status = ReflectionStatus::Ok;
    for mut c in candidates {
        if accepted.len() >= k {
            rejected.push(Rejection {
                attribute: c.attribute,
                reason: format!("limit of {k} reached"),
            });
            continue;
        }
        if !citations_grounded(&c, treatments) {
            rejected.push(Rejection {
                attribute: c.attribute,
                reason: "cited phrases missing or not found in treatments".into(),
            });
            continue;
        }
        let (system, user) = templates.render_pair(
            "reflect",
            &ReflectContext {
                treatments,
                attribute: display_name(&c.attribute),
                verb: c.polarity.verb(),
                explanation: &c.explanation,
            },
        )?;
        match client.complete(&ChatRequest::new(system, user)) {
            Err(e) => {
                log::warn!("reflection call failed for `{}`: {e}", c.attribute);
                status = ReflectionStatus::Degraded;
                rejected.push(Rejection {
                    attribute: c.attribute,
                    reason: format!("review unavailable: {e}"),
                });
            }
            Ok(reply) => match VERDICT.captures(&reply).map(|m| m[1].to_ascii_lowercase()) {
                Some(v) if v == "accept" => {
                    c.accepted = true;
                    accepted.push(c);
                }
                Some(_) => rejected.push(Rejection {
                    attribute: c.attribute,
                    reason: normalize_text(&reply),
                }),
                None => rejected.push(Rejection {
                    attribute: c.attribute,
                    reason: "unreadable review verdict".into(),
                }),
            },
        }
    }
    Ok(ReflectionOutcome {
        accepted,
        rejected,
        status,
    })
}

#[derive(Serialize)]
struct OpportunityContext<'a> {
    treatments: &'a [String],
    attributes: &'a [PromptAttribute],
}

pub fn build_opportunity_prompt(
    templates: &PromptTemplates,
    treatments: &[String],
    attributes: &[PromptAttribute],
) -> Result<ChatRequest> {
    if attributes.is_empty() {
        return Err(Error::Validation("opportunity prompt needs at least one attribute".into()));
    }
    let (system, user) = templates.render_pair("opportunity", &OpportunityContext { treatments, attributes })?;
    Ok(ChatRequest::new(system, user))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Potential {
    High,
    Medium,
    Low,
}

impl std::fmt::Display for Potential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Potential::High => "High",
            Potential::Medium => "Medium",
            Potential::Low => "Low",
        })
    }
}

pub fn conversion_potential(bin: ImpactBin) -> Potential {
    match bin {
        ImpactBin::Strong => Potential::High,
        ImpactBin::Medium => Potential::Medium,
        ImpactBin::Weak => Potential::Low,
    }
}

/// Novelty terciles over all attributes: the least explored third is High.
/// Position is (ascending rank − 0.5)/m.
pub fn learning_potentials(novelty: &[f64]) -> Vec<Potential> {
    let m = novelty.len() as f64;
    fractional_ranks(novelty, RankOrder::Ascending)
        .into_iter()
        .map(|r| {
            let q = (r - 0.5) / m;
            if q < 1.0 / 3.0 {
                Potential::High
            } else if q < 2.0 / 3.0 {
                Potential::Medium
            } else {
                Potential::Low
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpportunitySuggestion {
    pub attribute: String,
    pub rationale: String,
    pub examples: Vec<String>,
    pub learning_potential: Potential,
    pub conversion_potential: Potential,
}

impl OpportunitySuggestion {
    pub fn render(&self) -> String {
        let ex: Vec<String> = self.examples.iter().map(|e| format!("\"{e}\"")).collect();
        format!(
            "**{}**: {} Example: {}",
            display_name(&self.attribute),
            self.rationale,
            ex.join(" / ")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedOpportunities {
    pub suggestions: Vec<OpportunitySuggestion>,
    pub status: ParseStatus,
}

/// Parses `Name: rationale. Example: "..."` blocks and attaches potentials.
///
/// `names`, `bins` and `novelty` are aligned over every attribute in the
/// model; blocks naming an unknown attribute or carrying no example are
/// dropped.
pub fn parse_and_enrich_opportunities(
    raw: &str,
    names: &[String],
    bins: &[ImpactBin],
    novelty: &[f64],
) -> Result<ParsedOpportunities> {
    check_dim(names.len(), bins.len())?;
    check_dim(names.len(), novelty.len())?;
    let keys: Vec<String> = names.iter().map(|n| attribute_key(n)).collect();
    let learning = learning_potentials(novelty);
    let mut suggestions: Vec<OpportunitySuggestion> = Vec::new();
    for block in split_blocks(raw, |h| keys.contains(&attribute_key(h))) {
        let key = attribute_key(&block.header);
        let Some(a) = keys.iter().position(|k| *k == key) else {
            log::debug!("dropping opportunity block for unknown attribute `{}`", block.header);
            continue;
        };
        if suggestions.iter().any(|s| s.attribute == names[a]) {
            continue;
        }
        let body = clean(&block.body);
        let (rationale, tail) = match EXAMPLE_MARK.find(&body) {
            Some(m) => (body[..m.start()].trim().to_string(), body[m.end()..].trim().to_string()),
            None => (body.clone(), String::new()),
        };
        let mut examples = extract_quoted(&tail);
        if examples.is_empty() && !tail.is_empty() {
            examples.push(tail.clone());
        }
        examples.truncate(2);
        if rationale.is_empty() || examples.is_empty() {
            log::debug!("dropping malformed opportunity block `{}`", block.header);
            continue;
        }
        suggestions.push(OpportunitySuggestion {
            attribute: names[a].clone(),
            rationale,
            examples,
            learning_potential: learning[a],
            conversion_potential: conversion_potential(bins[a]),
        });
    }
    let status = if suggestions.is_empty() {
        log::warn!("no opportunity blocks could be parsed from the completion");
        ParseStatus::NoBlocks
    } else {
        ParseStatus::Ok
    };
    Ok(ParsedOpportunities { suggestions, status })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub score: u8,
    pub justification: String,
    pub parse_failure: bool,
}

/// Reads the first line shaped like `<0|1>: <justification>`.
pub fn parse_verdict(raw: &str) -> JudgeVerdict {
    for line in raw.lines() {
        if let Some(c) = SCORE_LINE.captures(line) {
            return JudgeVerdict {
                score: if &c["s"] == "1" { 1 } else { 0 },
                justification: normalize_text(&c["j"]),
                parse_failure: false,
            };
        }
    }
    JudgeVerdict {
        score: 0,
        justification: normalize_text(raw),
        parse_failure: true,
    }
}

#[derive(Serialize)]
struct JudgeContext<'a> {
    treatments: &'a [String],
    item: &'a str,
}

/// Scores one serialized item. Client failures count as 0 with the parse
/// failure flag set.
pub fn judge(client: &dyn ChatClient, templates: &PromptTemplates, item: &str, treatments: &[String]) -> Result<JudgeVerdict> {
    let (system, user) = templates.render_pair("judge", &JudgeContext { treatments, item })?;
    Ok(match client.complete(&ChatRequest::new(system, user)) {
        Ok(reply) => parse_verdict(&reply),
        Err(e) => JudgeVerdict {
            score: 0,
            justification: format!("judge unavailable: {e}"),
            parse_failure: true,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub verdicts: Vec<JudgeVerdict>,
    pub acceptance_rate: f64,
    pub parse_failures: usize,
}

pub fn acceptance_rate(verdicts: &[JudgeVerdict]) -> f64 {
    if verdicts.is_empty() {
        return 0.0;
    }
    verdicts.iter().filter(|v| v.score == 1).count() as f64 / verdicts.len() as f64
}

/// Judges items one at a time, in order.
pub fn judge_batch(
    client: &dyn ChatClient,
    templates: &PromptTemplates,
    items: &[String],
    treatments: &[String],
) -> Result<JudgeReport> {
    let verdicts = items
        .iter()
        .map(|i| judge(client, templates, i, treatments))
        .collect::<Result<Vec<_>>>()?;
    Ok(JudgeReport {
        acceptance_rate: acceptance_rate(&verdicts),
        parse_failures: verdicts.iter().filter(|v| v.parse_failure).count(),
        verdicts,
    })
}
