//! Offline training: embed, center, project, fit the ranker, then re-express
//! the ranker over the attribute dictionary. Also the ranking-only pipeline
//! used by leave-one-out comparisons.

use std::collections::HashMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attributes::{build_dictionary, AttributeLexicon};
use crate::bundle::{BundleMetadata, ModelBundle, FORMAT_VERSION};
use crate::embedding::{cache::hex, Embedder, CenteringStats};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_with, spearman, BackendSummary, EvalResult};
use crate::impact::{fit_impact, reexpress, BinThresholds, LambdaChoice};
use crate::ingest::{ExperimentRecord, ExperimentSet};
use crate::projection::{fit_pca, project, FitCorpus, ProjectionModel};
use crate::ranker::{fit_ranker, predict_scores, Observation, RankerModel, Weighting};
use crate::ranking::{fractional_ranks, RankOrder};

pub const DEFAULT_SEED: u64 = 20_240_917;
pub const DEFAULT_Q: usize = 64;
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LambdaSetting {
    Cv { folds: usize },
    Fixed { value: f64 },
}

impl std::str::FromStr for LambdaSetting {
    type Err = Error;
    /// `cv`, `cv:<K>` or a number.
    fn from_str(s: &str) -> Result<Self> {
        if s == "cv" {
            return Ok(Self::Cv { folds: DEFAULT_FOLDS });
        }
        if let Some(k) = s.strip_prefix("cv:") {
            let folds = k
                .parse()
                .map_err(|_| Error::Validation(format!("bad fold count in `{s}`")))?;
            return Ok(Self::Cv { folds });
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .map(|value| Self::Fixed { value })
            .ok_or_else(|| Error::Validation(format!("λ must be `cv`, `cv:K` or a number >= 0, got `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub q: usize,
    pub ridge: f64,
    pub weighting: Weighting,
    pub fit_corpus: FitCorpus,
    pub lambda: LambdaSetting,
    pub seed: u64,
    pub bin_thresholds: BinThresholds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            q: DEFAULT_Q,
            ridge: DEFAULT_RIDGE,
            weighting: Weighting::Uniform,
            fit_corpus: FitCorpus::Target,
            lambda: LambdaSetting::Cv { folds: DEFAULT_FOLDS },
            seed: DEFAULT_SEED,
            bin_thresholds: BinThresholds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::field("q", "must be at least 1"));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::field("ridge", "must be finite and >= 0"));
        }
        if let LambdaSetting::Cv { folds } = self.lambda {
            if folds < 2 {
                return Err(Error::field("lambda", "cross-validation needs at least 2 folds"));
            }
        }
        let t = self.bin_thresholds;
        if !(0.0 <= t.medium && t.medium <= t.strong && t.strong <= 1.0) {
            return Err(Error::field("bin_thresholds", "need 0 <= medium <= strong <= 1"));
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    fn lambda_choice(&self) -> LambdaChoice {
        match self.lambda {
            LambdaSetting::Cv { folds } => LambdaChoice::CrossValidated { folds, seed: self.seed },
            LambdaSetting::Fixed { value } => LambdaChoice::Fixed(value),
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Raw embeddings for every distinct text, keyed by the text as given.
fn embed_all(embedder: &Embedder, texts: Vec<String>) -> Result<HashMap<String, DVector<f64>>> {
    let mut unique = texts;
    unique.sort();
    unique.dedup();
    if unique.is_empty() {
        return Ok(HashMap::new());
    }
    let vectors = embedder.embed_batch(&unique)?;
    Ok(unique.into_iter().zip(vectors.into_iter().map(|v| v.values)).collect())
}

/// Centering, projection and ranker: everything needed to score variants.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingModel {
    pub centering: CenteringStats,
    pub projection: ProjectionModel,
    pub ranker: RankerModel,
}

impl RankingModel {
    pub fn score(&self, raw: &[DVector<f64>]) -> Result<Vec<f64>> {
        let psis = raw
            .iter()
            .map(|e| {
                crate::error::check_dim(self.centering.dim(), e.len())?;
                project(&self.projection, &(e - &self.centering.mean))
            })
            .collect::<Result<Vec<_>>>()?;
        predict_scores(&self.ranker, &psis)
    }
}

/// Fits centering, PCA and the ranker.
///
/// `target` holds raw embeddings of the treatments the model will rank; it is
/// the PCA corpus under [`FitCorpus::Target`] and is added to the training
/// vectors under [`FitCorpus::Pooled`]. Without usable target vectors the
/// training vectors are used, and a note says so. `q` is clamped to what the
/// PCA corpus supports.
pub fn fit_ranking_model(
    training: &ExperimentSet,
    vectors: &HashMap<String, DVector<f64>>,
    target: Option<&[DVector<f64>]>,
    config: &TrainConfig,
    notes: &mut Vec<String>,
) -> Result<RankingModel> {
    let lookup = |t: &str| {
        vectors
            .get(t)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(t.to_string()))
    };
    let mut train_raw = Vec::new();
    for exp in &training.experiments {
        for arm in &exp.arms {
            train_raw.push(lookup(&arm.text)?);
        }
    }
    if train_raw.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let p = train_raw[0].len();
    let mut mean = DVector::zeros(p);
    for v in &train_raw {
        crate::error::check_dim(p, v.len())?;
        mean += v;
    }
    mean /= train_raw.len() as f64;
    let centering = CenteringStats {
        mean,
        corpus_size: train_raw.len(),
        corpus_tag: format!("training:{}", training.source_tag),
    };
    let phi_train: Vec<DVector<f64>> = train_raw.iter().map(|v| v - &centering.mean).collect();
    let phi_target: Option<Vec<DVector<f64>>> = target
        .filter(|t| t.len() >= 2)
        .map(|t| t.iter().map(|v| v - &centering.mean).collect());

    let (pca_corpus, tag): (Vec<DVector<f64>>, &str) = match (config.fit_corpus, phi_target) {
        (FitCorpus::Training, _) => (phi_train.clone(), "training"),
        (FitCorpus::Target, Some(t)) => (t, "target"),
        (FitCorpus::Pooled, Some(t)) => (phi_train.iter().cloned().chain(t).collect(), "pooled"),
        (other, None) => {
            notes.push(format!(
                "PCA fit corpus `{}` requested but fewer than 2 target treatments were supplied; fitted on training treatments",
                serde_json::to_value(other).expect("enum").as_str().unwrap_or("?")
            ));
            (phi_train.clone(), "training")
        }
    };
    let q_max = p.min(pca_corpus.len().saturating_sub(1));
    if q_max == 0 {
        return Err(Error::Validation("PCA corpus needs at least 2 distinct treatments".into()));
    }
    let q = config.q.min(q_max);
    if q < config.q {
        notes.push(format!("q reduced from {} to {q} (p = {p}, PCA corpus size {})", config.q, pca_corpus.len()));
    }
    let projection = fit_pca(&pca_corpus, q, tag)?;

    let mut observations = Vec::with_capacity(phi_train.len());
    let mut i = 0;
    for exp in &training.experiments {
        let ctr = exp.observed_ctr()?;
        for (arm, y) in exp.arms.iter().zip(ctr) {
            observations.push(Observation {
                experiment_id: exp.experiment_id.clone(),
                psi: project(&projection, &phi_train[i])?,
                ctr: y,
                weight: match config.weighting {
                    Weighting::Uniform => 1.0,
                    Weighting::Impressions => arm.impressions as f64,
                },
            });
            i += 1;
        }
    }
    let ranker = fit_ranker(&observations, config.ridge, config.weighting)?;
    Ok(RankingModel {
        centering,
        projection,
        ranker,
    })
}

/// Full training run producing a bundle.
///
/// `target_texts` are the treatments the model is meant to rank (used by the
/// target and pooled PCA policies). Errors carry the name of the failing stage.
pub fn train(
    embedder: &Embedder,
    training: &ExperimentSet,
    target_texts: Option<&[String]>,
    lexicon: &AttributeLexicon,
    config: &TrainConfig,
) -> Result<ModelBundle> {
    stage("config", config.validate())?;
    if training.len() < 2 {
        return Err(Error::Stage {
            stage: "ingest",
            source: Box::new(Error::Validation(format!(
                "training needs at least 2 experiments, got {}",
                training.len()
            ))),
        });
    }
    let mut texts = training.all_texts();
    if let Some(t) = target_texts {
        texts.extend(t.iter().cloned());
    }
    let vectors = stage("embedding", embed_all(embedder, texts))?;
    let target: Option<Vec<DVector<f64>>> = target_texts.map(|ts| {
        let mut seen = std::collections::HashSet::new();
        ts.iter()
            .filter(|t| seen.insert(t.as_str()))
            .map(|t| vectors[t].clone())
            .collect()
    });

    let mut notes = Vec::new();
    let model = stage(
        "ranker",
        fit_ranking_model(training, &vectors, target.as_deref(), config, &mut notes),
    )?;
    for n in &notes {
        log::warn!("{n}");
    }

    let beta_prime = stage("re-expression", reexpress(&model.projection, &model.ranker))?;
    let dictionary = stage("dictionary", build_dictionary(embedder, lexicon))?;
    let impact = stage("impact", fit_impact(&dictionary, beta_prime, config.lambda_choice()))?;

    let bundle = ModelBundle {
        format_version: FORMAT_VERSION,
        provider_id: embedder.provider_id().to_string(),
        centering: model.centering,
        projection: model.projection,
        ranker: model.ranker,
        dictionary,
        lexicon: lexicon.clone(),
        impact,
        bin_thresholds: config.bin_thresholds,
        metadata: BundleMetadata {
            created_at_unix: std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()),
            config: config.clone(),
            config_hash: config.hash(),
            training_source: training.source_tag.clone(),
            n_training_experiments: training.len(),
            n_training_arms: training.experiments.iter().map(|e| e.arms.len()).sum(),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            notes,
        },
    };
    stage("bundle", bundle.validate())?;
    Ok(bundle)
}

/// Relative scores for `texts` under a bundle.
pub fn score_texts(bundle: &ModelBundle, embedder: &Embedder, texts: &[String]) -> Result<Vec<f64>> {
    check_provider(bundle, embedder)?;
    let raw: Vec<DVector<f64>> = embedder.embed_batch(texts)?.into_iter().map(|v| v.values).collect();
    RankingModel {
        centering: bundle.centering.clone(),
        projection: bundle.projection.clone(),
        ranker: bundle.ranker.clone(),
    }
    .score(&raw)
}

pub fn check_provider(bundle: &ModelBundle, embedder: &Embedder) -> Result<()> {
    if bundle.provider_id != embedder.provider_id() {
        return Err(Error::Config(format!(
            "bundle was trained with embedding provider `{}` but `{}` is configured",
            bundle.provider_id,
            embedder.provider_id()
        )));
    }
    Ok(())
}

/// Scores each test experiment with the bundle and compares against the
/// observed CTR ranking.
pub fn evaluate_transfer(bundle: &ModelBundle, embedder: &Embedder, test: &ExperimentSet) -> Result<EvalResult> {
    check_provider(bundle, embedder)?;
    evaluate_with(test, |exp| score_texts(bundle, embedder, &exp.texts()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LooOptions {
    /// Never let a held-out experiment influence the PCA fit.
    pub strict_no_peek: bool,
}

/// Hold out each experiment in turn, fit the ranking pipeline on the rest and
/// record Spearman ρ on the held-out one. One summary per backend; folds that
/// fail (for example constant CTR) are counted, not aggregated.
pub fn leave_one_out(
    corpus: &ExperimentSet,
    backends: &[(String, &Embedder)],
    config: &TrainConfig,
    options: LooOptions,
) -> Result<Vec<BackendSummary>> {
    config.validate()?;
    if corpus.len() < 2 {
        return Err(Error::Validation(format!(
            "leave-one-out needs at least 2 experiments, got {}",
            corpus.len()
        )));
    }
    let mut out = Vec::with_capacity(backends.len());
    for (name, embedder) in backends {
        let vectors = embed_all(embedder, corpus.all_texts())?;
        let folds: Vec<Result<f64>> = (0..corpus.len())
            .into_par_iter()
            .map(|k| loo_fold(corpus, k, &vectors, config, options))
            .collect();
        for (k, f) in folds.iter().enumerate() {
            if let Err(e) = f {
                log::info!("{name}: fold {} excluded: {e}", corpus.experiments[k].experiment_id);
            }
        }
        out.push(BackendSummary::from_folds(name.clone(), &folds));
    }
    Ok(out)
}

fn loo_fold(
    corpus: &ExperimentSet,
    k: usize,
    vectors: &HashMap<String, DVector<f64>>,
    config: &TrainConfig,
    options: LooOptions,
) -> Result<f64> {
    let held: &ExperimentRecord = &corpus.experiments[k];
    let rest = ExperimentSet {
        experiments: corpus
            .experiments
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .map(|(_, e)| e.clone())
            .collect(),
        source_tag: corpus.source_tag.clone(),
    };
    let held_raw: Vec<DVector<f64>> = held.arms.iter().map(|a| vectors[&a.text].clone()).collect();
    let mut cfg = config.clone();
    if options.strict_no_peek {
        cfg.fit_corpus = FitCorpus::Training;
    }
    let ctr = held.observed_ctr()?;
    let true_ranks = fractional_ranks(&ctr, RankOrder::Descending);
    // fail early on a constant-CTR fold before any fitting
    spearman(&true_ranks, &true_ranks)?;
    let model = fit_ranking_model(&rest, vectors, Some(&held_raw), &cfg, &mut Vec::new())?;
    let scores = model.score(&held_raw)?;
    spearman(&true_ranks, &fractional_ranks(&scores, RankOrder::Descending))
}
