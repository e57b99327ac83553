//! Request/response layer shared by the HTTP service and the CLI.
//!
//! Both front ends deserialize the same request types, call the same
//! [`Engine`] method and serialize the same response types, so their output
//! for a given bundle and request is identical.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::attributes::attribute_scores;
use crate::bundle::ModelBundle;
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::impact::{bin_impact, ImpactBin};
use crate::indices::{
    decompose_gap, insight_contributions, opportunity_ranking, select_missing_attributes, ExpressionBasis,
    GapDecomposition, InsightContribution, Polarity, SelectionStatus, DEFAULT_IMPACT_FLOOR,
};
use crate::ingest::ArmRecord;
use crate::narration::{
    attribute_key, build_insight_prompt, build_opportunity_prompt, conversion_potential, default_exemplars,
    learning_potentials, parse_and_enrich_opportunities, parse_insights, select_insight_attributes, self_reflect,
    ChatClient, Exemplar, InsightCandidate, OpportunitySuggestion, ParseStatus, Potential, PromptAttribute,
    PromptTemplates, PromptTreatment, ReflectionStatus, Rejection, SelectedAttribute,
};
use crate::pipeline::{check_provider, RankingModel};
use crate::ranking::{fractional_ranks, RankOrder};

pub const DEFAULT_K: usize = 3;
const NO_CHAT_WARNING: &str = "narration requested but no chat client is configured; returning quantitative results only";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRequest {
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredVariant {
    pub id: String,
    pub score: f64,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResponse {
    /// Scores only order variants against each other; they are not CTRs.
    pub relative: bool,
    /// Sorted by rank, input order among ties.
    pub scored: Vec<ScoredVariant>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmInput {
    pub id: String,
    pub text: String,
    pub impressions: u64,
    pub clicks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightsRequest {
    pub arms: Vec<ArmInput>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub narrate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub id: String,
    pub ctr: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightNarration {
    pub parse_status: ParseStatus,
    pub reflection_status: ReflectionStatus,
    pub insights: Vec<InsightCandidate>,
    /// `insights` rendered as display paragraphs, same order.
    pub rendered: Vec<String>,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightsResponse {
    pub best: ArmSummary,
    pub worst: ArmSummary,
    /// One entry per attribute, model order.
    pub contributions: Vec<InsightContribution>,
    /// Sum of `contributions`, i.e. (s_best − s_worst)ᵀβ″.
    pub contribution_total: f64,
    pub selected: Vec<SelectedAttribute>,
    pub gap: GapDecomposition,
    pub narration: Option<InsightNarration>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpportunitiesRequest {
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub history_means: Option<Vec<f64>>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub narrate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeOpportunity {
    pub attribute: String,
    pub impact: f64,
    pub bin: ImpactBin,
    pub expression: f64,
    pub importance_rank: f64,
    pub expression_rank: f64,
    pub opportunity_rank: f64,
    pub novelty_rank: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedOpportunity {
    pub index: usize,
    pub attribute: String,
    pub impact: f64,
    pub bin: ImpactBin,
    pub learning_potential: Potential,
    pub conversion_potential: Potential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpportunityNarration {
    pub parse_status: ParseStatus,
    pub suggestions: Vec<OpportunitySuggestion>,
    pub rendered: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpportunitiesResponse {
    pub expression_basis: ExpressionBasis,
    pub attributes: Vec<AttributeOpportunity>,
    pub selected: Vec<SelectedOpportunity>,
    pub status: SelectionStatus,
    pub narration: Option<OpportunityNarration>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub bundle_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub format_version: u32,
    pub provider_id: String,
    pub p: usize,
    pub q: usize,
    pub m: usize,
    pub lambda: f64,
    pub cv_folds: Option<usize>,
    pub config_hash: String,
    pub attributes: Vec<String>,
    pub created_at_unix: Option<u64>,
    pub library_version: String,
    pub n_training_experiments: usize,
    pub notes: Vec<String>,
}

pub struct EngineOptions {
    pub impact_floor: f64,
    pub expression_basis: ExpressionBasis,
    pub default_k: usize,
    pub exemplars: Vec<Exemplar>,
    pub templates: PromptTemplates,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            impact_floor: DEFAULT_IMPACT_FLOOR,
            expression_basis: ExpressionBasis::default(),
            default_k: DEFAULT_K,
            exemplars: default_exemplars(),
            templates: PromptTemplates::builtin(),
        }
    }
}

/// Immutable scoring state: one bundle, one embedder, an optional chat client.
pub struct Engine {
    bundle: ModelBundle,
    ranking: RankingModel,
    embedder: Embedder,
    chat: Option<Arc<dyn ChatClient>>,
    options: EngineOptions,
}

impl Engine {
    /// Fails when the embedder is not the one the bundle was trained with.
    pub fn new(bundle: ModelBundle, embedder: Embedder, options: EngineOptions) -> Result<Self> {
        bundle.validate()?;
        check_provider(&bundle, &embedder)?;
        if options.default_k == 0 {
            return Err(Error::Config("default k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&options.impact_floor) {
            return Err(Error::Config(format!(
                "impact floor must be in [0, 1], got {}",
                options.impact_floor
            )));
        }
        let ranking = RankingModel {
            centering: bundle.centering.clone(),
            projection: bundle.projection.clone(),
            ranker: bundle.ranker.clone(),
        };
        Ok(Self {
            bundle,
            ranking,
            embedder,
            chat: None,
            options,
        })
    }

    pub fn with_chat_client(mut self, client: Arc<dyn ChatClient>) -> Self {
        self.chat = Some(client);
        self
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn health(&self) -> HealthResponse {
        HealthResponse {
            status: "ok".into(),
            bundle_version: self.bundle.format_version,
        }
    }

    pub fn model_info(&self) -> ModelInfo {
        let b = &self.bundle;
        ModelInfo {
            format_version: b.format_version,
            provider_id: b.provider_id.clone(),
            p: b.p(),
            q: b.q(),
            m: b.m(),
            lambda: b.impact.lambda,
            cv_folds: b.impact.cv_folds,
            config_hash: b.metadata.config_hash.clone(),
            attributes: b.dictionary.names.clone(),
            created_at_unix: b.metadata.created_at_unix,
            library_version: b.metadata.library_version.clone(),
            n_training_experiments: b.metadata.n_training_experiments,
            notes: b.metadata.notes.clone(),
        }
    }

    pub fn rank(&self, req: &RankRequest) -> Result<RankResponse> {
        validate_variants(&req.variants, 2)?;
        let texts: Vec<String> = req.variants.iter().map(|v| v.text.clone()).collect();
        let scores = self.ranking.score(&self.embed(&texts)?)?;
        let ranks = fractional_ranks(&scores, RankOrder::Descending);
        let mut scored: Vec<ScoredVariant> = req
            .variants
            .iter()
            .zip(scores.iter().zip(&ranks))
            .map(|(v, (s, r))| ScoredVariant {
                id: v.id.clone(),
                score: *s,
                rank: *r,
            })
            .collect();
        // stable sort keeps input order among tied ranks
        scored.sort_by(|a, b| a.rank.total_cmp(&b.rank));
        Ok(RankResponse { relative: true, scored })
    }

    pub fn insights(&self, req: &InsightsRequest) -> Result<InsightsResponse> {
        let k = self.resolve_k(req.k)?;
        if req.arms.len() < 2 {
            return Err(Error::field("arms", format!("need at least 2 arms, got {}", req.arms.len())));
        }
        check_ids(req.arms.iter().map(|a| a.id.as_str()), "arms")?;
        let mut ctrs = Vec::with_capacity(req.arms.len());
        for (i, a) in req.arms.iter().enumerate() {
            check_text(&a.text, &format!("arms[{i}].text"))?;
            let rec = ArmRecord {
                arm_id: a.id.clone(),
                text: a.text.clone(),
                impressions: a.impressions,
                clicks: a.clicks,
            };
            if a.clicks > a.impressions {
                return Err(Error::field(format!("arms[{i}].clicks"), "clicks exceed impressions"));
            }
            let ctr = rec
                .observed_ctr()
                .ok_or_else(|| Error::field(format!("arms[{i}].impressions"), "must be positive"))?;
            ctrs.push(ctr);
        }

        let mut warnings = Vec::new();
        let order = fractional_ranks(&ctrs, RankOrder::Descending);
        // best: lowest rank, first index on ties; worst: highest rank, first index on ties
        let best = first_extreme(&order, |a, b| a < b);
        let worst = first_extreme(&order, |a, b| a > b);
        if ctrs[best] == ctrs[worst] {
            warnings.push("all arms have the same observed CTR; contributions are zero".into());
        }

        let texts: Vec<String> = req.arms.iter().map(|a| a.text.clone()).collect();
        let raw = self.embed(&texts)?;
        let scores = self.ranking.score(&raw)?;
        let phi: Vec<DVector<f64>> = raw.iter().map(|e| e - &self.bundle.centering.mean).collect();
        let s_best = attribute_scores(&self.bundle.dictionary, &phi[best])?;
        let s_worst = attribute_scores(&self.bundle.dictionary, &phi[worst])?;
        let names = &self.bundle.dictionary.names;
        let beta = &self.bundle.impact.beta_dprime;
        let contributions = insight_contributions(names, &s_best, &s_worst, beta)?;
        let contribution_total = contributions.iter().map(|c| c.contribution).sum();
        let selected = select_insight_attributes(names, &s_best, &s_worst, beta, k)?;
        let gap = decompose_gap(&self.bundle.dictionary, &self.bundle.impact.beta_prime, &phi[best], &phi[worst])?;

        let narration = if req.narrate {
            match &self.chat {
                None => {
                    warnings.push(NO_CHAT_WARNING.into());
                    None
                }
                Some(_) if selected.is_empty() => {
                    warnings.push("no attribute contributes positively to the gap; nothing to narrate".into());
                    None
                }
                Some(client) => Some(self.narrate_insights(client.as_ref(), req, &ctrs, &selected, k, &mut warnings)?),
            }
        } else {
            None
        };

        let summary = |i: usize| ArmSummary {
            id: req.arms[i].id.clone(),
            ctr: ctrs[i],
            score: scores[i],
        };
        Ok(InsightsResponse {
            best: summary(best),
            worst: summary(worst),
            contributions,
            contribution_total,
            selected,
            gap,
            narration,
            warnings,
        })
    }

    fn narrate_insights(
        &self,
        client: &dyn ChatClient,
        req: &InsightsRequest,
        ctrs: &[f64],
        selected: &[SelectedAttribute],
        k: usize,
        warnings: &mut Vec<String>,
    ) -> Result<InsightNarration> {
        let mut by_ctr: Vec<usize> = (0..req.arms.len()).collect();
        by_ctr.sort_by(|a, b| ctrs[*b].total_cmp(&ctrs[*a]).then(a.cmp(b)));
        let treatments: Vec<PromptTreatment> =
            by_ctr.iter().map(|i| PromptTreatment::new(&req.arms[*i].text, ctrs[*i])).collect();
        let texts: Vec<String> = by_ctr.iter().map(|i| req.arms[*i].text.clone()).collect();
        let attrs = self.prompt_attributes(selected.iter().map(|s| (s.index, s.polarity)));
        let request = build_insight_prompt(&self.options.templates, &treatments, &attrs, &self.options.exemplars)?;
        let raw = match client.complete(&request) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("insight narration failed: {e}");
                warnings.push(format!("narration unavailable: {e}"));
                return Ok(InsightNarration {
                    parse_status: ParseStatus::NoBlocks,
                    reflection_status: ReflectionStatus::Degraded,
                    insights: Vec::new(),
                    rendered: Vec::new(),
                    rejected: Vec::new(),
                });
            }
        };
        let parsed = parse_insights(&raw);
        // only attributes the model selected are eligible, in selection order
        let mut candidates = Vec::new();
        let mut rejected = Vec::new();
        for s in selected {
            if let Some(c) = parsed.candidates.get(&attribute_key(&s.attribute)) {
                candidates.push(c.clone());
            }
        }
        for key in parsed.candidates.keys() {
            if !selected.iter().any(|s| attribute_key(&s.attribute) == *key) {
                rejected.push(Rejection {
                    attribute: key.clone(),
                    reason: "attribute was not selected".into(),
                });
            }
        }
        let outcome = self_reflect(client, &self.options.templates, candidates, &texts, k)?;
        if outcome.status == ReflectionStatus::Degraded {
            warnings.push("some insights were dropped because review was unavailable".into());
        }
        rejected.extend(outcome.rejected);
        Ok(InsightNarration {
            parse_status: parsed.status,
            reflection_status: outcome.status,
            rendered: outcome.accepted.iter().map(|c| c.render()).collect(),
            insights: outcome.accepted,
            rejected,
        })
    }

    pub fn opportunities(&self, req: &OpportunitiesRequest) -> Result<OpportunitiesResponse> {
        let k = self.resolve_k(req.k)?;
        validate_variants(&req.variants, 1)?;
        let m = self.bundle.m();
        let history = match &req.history_means {
            None => None,
            Some(h) => {
                if h.len() != m {
                    return Err(Error::field(
                        "history_means",
                        format!("expected {m} values (one per attribute), got {}", h.len()),
                    ));
                }
                if let Some(i) = h.iter().position(|v| !v.is_finite()) {
                    return Err(Error::field(format!("history_means[{i}]"), "must be finite"));
                }
                Some(DVector::from_column_slice(h))
            }
        };

        let texts: Vec<String> = req.variants.iter().map(|v| v.text.clone()).collect();
        let raw = self.embed(&texts)?;
        let scores = raw
            .iter()
            .map(|e| attribute_scores(&self.bundle.dictionary, &(e - &self.bundle.centering.mean)))
            .collect::<Result<Vec<_>>>()?;
        let names = &self.bundle.dictionary.names;
        let beta = &self.bundle.impact.beta_dprime;
        let basis = self.options.expression_basis;
        let ranking = opportunity_ranking(names, beta, &scores, basis, history.as_ref())?;
        let bins = bin_impact(beta, self.bundle.bin_thresholds);
        let missing = select_missing_attributes(beta, &scores, basis, self.options.impact_floor, k)?;

        // without history, novelty falls back to how weakly the current drafts express each attribute
        let novelty_basis = match &ranking.novelty {
            Some(n) => n.clone(),
            None => fractional_ranks(&ranking.expression_values, RankOrder::Ascending),
        };
        let learning = learning_potentials(&novelty_basis);

        let attributes = (0..m)
            .map(|a| AttributeOpportunity {
                attribute: names[a].clone(),
                impact: beta[a],
                bin: bins[a],
                expression: ranking.expression_values[a],
                importance_rank: ranking.importance[a],
                expression_rank: ranking.expression[a],
                opportunity_rank: ranking.opportunity[a],
                novelty_rank: ranking.novelty.as_ref().map(|n| n[a]),
            })
            .collect();
        let selected: Vec<SelectedOpportunity> = missing
            .indices
            .iter()
            .map(|&a| SelectedOpportunity {
                index: a,
                attribute: names[a].clone(),
                impact: beta[a],
                bin: bins[a],
                learning_potential: learning[a],
                conversion_potential: conversion_potential(bins[a]),
            })
            .collect();

        let mut warnings = Vec::new();
        if missing.status == SelectionStatus::NoOpportunity {
            warnings.push("no attribute has a positive impact coefficient".into());
        }
        let narration = if req.narrate {
            match &self.chat {
                None => {
                    warnings.push(NO_CHAT_WARNING.into());
                    None
                }
                Some(_) if selected.is_empty() => None,
                Some(client) => {
                    let attrs = self.prompt_attributes(selected.iter().map(|s| (s.index, Polarity::Positive)));
                    let request = build_opportunity_prompt(&self.options.templates, &texts, &attrs)?;
                    match client.complete(&request) {
                        Ok(raw) => {
                            let parsed = parse_and_enrich_opportunities(&raw, names, &bins, &novelty_basis)?;
                            let suggestions: Vec<OpportunitySuggestion> = parsed
                                .suggestions
                                .into_iter()
                                .filter(|s| selected.iter().any(|x| x.attribute == s.attribute))
                                .collect();
                            Some(OpportunityNarration {
                                parse_status: parsed.status,
                                rendered: suggestions.iter().map(|s| s.render()).collect(),
                                suggestions,
                            })
                        }
                        Err(e) => {
                            log::warn!("opportunity narration failed: {e}");
                            warnings.push(format!("narration unavailable: {e}"));
                            None
                        }
                    }
                }
            }
        } else {
            None
        };

        Ok(OpportunitiesResponse {
            expression_basis: basis,
            attributes,
            selected,
            status: missing.status,
            narration,
            warnings,
        })
    }

    fn prompt_attributes(&self, picks: impl Iterator<Item = (usize, Polarity)>) -> Vec<PromptAttribute> {
        picks
            .map(|(a, pol)| {
                let attr = &self.bundle.lexicon.attributes[a];
                PromptAttribute::new(&attr.name, &attr.description, pol)
            })
            .collect()
    }

    fn resolve_k(&self, k: Option<usize>) -> Result<usize> {
        match k {
            Some(0) => Err(Error::field("k", "must be at least 1")),
            Some(k) => Ok(k),
            None => Ok(self.options.default_k),
        }
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<DVector<f64>>> {
        Ok(self.embedder.embed_batch(texts)?.into_iter().map(|v| v.values).collect())
    }
}

fn first_extreme(values: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        if better(values[i], values[best]) {
            best = i;
        }
    }
    best
}

fn check_text(text: &str, field: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::field(field, "text must not be empty"));
    }
    Ok(())
}

fn check_ids<'a>(ids: impl Iterator<Item = &'a str>, field: &str) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (i, id) in ids.enumerate() {
        if id.is_empty() {
            return Err(Error::field(format!("{field}[{i}].id"), "id must not be empty"));
        }
        if !seen.insert(id) {
            return Err(Error::field(format!("{field}[{i}].id"), format!("duplicate id `{id}`")));
        }
    }
    Ok(())
}

fn validate_variants(variants: &[Variant], min: usize) -> Result<()> {
    if variants.len() < min {
        return Err(Error::field(
            "variants",
            format!("need at least {min} variant{}, got {}", if min == 1 { "" } else { "s" }, variants.len()),
        ));
    }
    check_ids(variants.iter().map(|v| v.id.as_str()), "variants")?;
    for (i, v) in variants.iter().enumerate() {
        check_text(&v.text, &format!("variants[{i}].text"))?;
    }
    Ok(())
}

/// Chat backend selection: an HTTP endpoint or a scripted JSONL file
/// (`script:PATH`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChatSpec {
    Http(String),
    Script(std::path::PathBuf),
}

impl std::str::FromStr for ChatSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(p) = s.strip_prefix("script:") {
            return Ok(Self::Script(p.into()));
        }
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(Self::Http(s.to_string()));
        }
        Err(Error::Config(format!("unrecognised chat endpoint `{s}` (use an http(s) URL or script:PATH)")))
    }
}

impl ChatSpec {
    pub fn build(&self) -> Result<Arc<dyn ChatClient>> {
        Ok(match self {
            Self::Http(url) => Arc::new(crate::narration::HttpChatClient::new(url.clone())),
            Self::Script(path) => Arc::new(crate::narration::ScriptedChatClient::load(path)?),
        })
    }
}

/// Everything needed to stand up an [`Engine`] from files.
#[derive(Debug, Clone, Default)]
pub struct EngineConfig {
    pub bundle: std::path::PathBuf,
    /// Defaults to the provider recorded in the bundle when that can be rebuilt.
    pub provider: Option<crate::embedding::ProviderSpec>,
    pub cache_dir: Option<std::path::PathBuf>,
    pub chat: Option<ChatSpec>,
    pub templates_dir: Option<std::path::PathBuf>,
    pub impact_floor: Option<f64>,
    pub expression_basis: Option<ExpressionBasis>,
    pub default_k: Option<usize>,
}

impl EngineConfig {
    pub fn build(&self) -> Result<Engine> {
        let bundle = crate::bundle::load_bundle(&self.bundle)?;
        let provider = match &self.provider {
            Some(p) => p.clone(),
            None => provider_from_id(&bundle.provider_id)?,
        };
        let embedder = provider.embedder(self.cache_dir.as_deref())?;
        let mut options = EngineOptions::default();
        if let Some(dir) = &self.templates_dir {
            options.templates = PromptTemplates::with_overrides(dir)?;
        }
        if let Some(f) = self.impact_floor {
            options.impact_floor = f;
        }
        if let Some(b) = self.expression_basis {
            options.expression_basis = b;
        }
        if let Some(k) = self.default_k {
            options.default_k = k;
        }
        let engine = Engine::new(bundle, embedder, options)?;
        Ok(match &self.chat {
            Some(c) => engine.with_chat_client(c.build()?),
            None => engine,
        })
    }
}

/// Rebuilds a provider spec from a recorded provider id, when the id alone
/// determines the provider.
pub fn provider_from_id(id: &str) -> Result<crate::embedding::ProviderSpec> {
    use crate::embedding::ProviderSpec;
    if let Some(url) = id.strip_prefix("http:") {
        return Ok(ProviderSpec::Http { url: url.to_string(), id: None });
    }
    if let Some(rest) = id.strip_prefix("hash-d") {
        if let Some((d, s)) = rest.split_once("-s") {
            if let (Ok(dim), Ok(seed)) = (d.parse(), s.parse()) {
                return Ok(ProviderSpec::Hash { dim, seed });
            }
        }
    }
    Err(Error::Config(format!(
        "bundle was trained with provider `{id}`; pass the matching provider explicitly"
    )))
}
