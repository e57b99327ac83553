//! Ranking metrics and the transfer-evaluation harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::ingest::{ExperimentRecord, ExperimentSet};
use crate::ranking::{argmax_first, fractional_ranks, RankOrder};

/// Pearson correlation of two rank vectors.
pub fn spearman(true_ranks: &[f64], predicted_ranks: &[f64]) -> Result<f64> {
    check_dim(true_ranks.len(), predicted_ranks.len())?;
    let n = true_ranks.len();
    if n < 2 {
        return Err(Error::UndefinedCorrelation(format!("need at least 2 ranks, got {n}")));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(true_ranks), mean(predicted_ranks));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (a, b) in true_ranks.iter().zip(predicted_ranks) {
        let (da, db) = (a - ma, b - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation("a rank vector has zero variance".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Fraction of (true best, predicted best) pairs that agree.
pub fn top1_accuracy(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("top-1 accuracy needs at least one experiment".into()));
    }
    Ok(pairs.iter().filter(|(t, p)| t == p).count() as f64 / pairs.len() as f64)
}

/// Expected top-1 accuracy of a uniform guess: mean of 1/arms.
pub fn random_top1_baseline(arm_counts: &[usize]) -> Result<f64> {
    if arm_counts.is_empty() {
        return Err(Error::Validation("baseline needs at least one experiment".into()));
    }
    if let Some(c) = arm_counts.iter().find(|c| **c < 2) {
        return Err(Error::Validation(format!("arm count {c} < 2")));
    }
    Ok(exact_mean_reciprocal(arm_counts)
        .unwrap_or_else(|| arm_counts.iter().map(|c| 1.0 / *c as f64).sum::<f64>() / arm_counts.len() as f64))
}

/// Σ(1/c)/n as a reduced fraction, divided once at the end so the result is
/// correctly rounded. None on overflow.
fn exact_mean_reciprocal(counts: &[usize]) -> Option<f64> {
    fn gcd(mut a: u128, mut b: u128) -> u128 {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    }
    let (mut num, mut den) = (0u128, 1u128);
    for &c in counts {
        let c = c as u128;
        // num/den + 1/c
        num = num.checked_mul(c)?.checked_add(den)?;
        den = den.checked_mul(c)?;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    den = den.checked_mul(counts.len() as u128)?;
    let g = gcd(num, den);
    let (num, den) = (num / g, den / g);
    // both must be exactly representable for the division to round once
    (num < (1u128 << 53) && den < (1u128 << 53)).then(|| num as f64 / den as f64)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::Validation("bootstrap needs values and at least one resample".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Validation(format!("confidence level must be in (0, 1), got {level}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let pick = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok((pick(tail), pick(1.0 - tail)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEval {
    pub experiment_id: String,
    pub n_arms: usize,
    pub rho: f64,
    pub true_best: usize,
    pub predicted_best: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub experiment_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_experiment: Vec<ExperimentEval>,
    pub per_experiment_rho: Vec<f64>,
    pub mean_rho: f64,
    pub rho_stddev: f64,
    pub top1_accuracy: f64,
    pub top1_stddev: f64,
    pub random_top1_baseline: f64,
    pub n_experiments: usize,
    pub excluded: Vec<Exclusion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_bootstrap_ci: Option<(f64, f64)>,
}

impl EvalResult {
    fn from_parts(per_experiment: Vec<ExperimentEval>, excluded: Vec<Exclusion>) -> Result<Self> {
        if per_experiment.is_empty() {
            return Err(Error::Validation(format!(
                "no experiment could be evaluated ({} excluded)",
                excluded.len()
            )));
        }
        let rhos: Vec<f64> = per_experiment.iter().map(|e| e.rho).collect();
        let hits: Vec<f64> = per_experiment
            .iter()
            .map(|e| (e.true_best == e.predicted_best) as u8 as f64)
            .collect();
        let (mean_rho, rho_stddev) = mean_std(&rhos);
        let (_, top1_stddev) = mean_std(&hits);
        let pairs: Vec<(usize, usize)> = per_experiment.iter().map(|e| (e.true_best, e.predicted_best)).collect();
        let counts: Vec<usize> = per_experiment.iter().map(|e| e.n_arms).collect();
        Ok(Self {
            top1_accuracy: top1_accuracy(&pairs)?,
            random_top1_baseline: random_top1_baseline(&counts)?,
            n_experiments: per_experiment.len(),
            per_experiment_rho: rhos,
            mean_rho,
            rho_stddev,
            top1_stddev,
            per_experiment,
            excluded,
            rho_bootstrap_ci: None,
        })
    }

    pub fn with_bootstrap(mut self, resamples: usize, level: f64, seed: u64) -> Result<Self> {
        self.rho_bootstrap_ci = Some(bootstrap_mean_ci(&self.per_experiment_rho, resamples, level, seed)?);
        Ok(self)
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![
            ("experiments", self.n_experiments.to_string()),
            ("excluded", self.excluded.len().to_string()),
            ("mean rho", format!("{:.4} ± {:.4}", self.mean_rho, self.rho_stddev)),
            ("top-1 accuracy", format!("{:.4} ± {:.4}", self.top1_accuracy, self.top1_stddev)),
            ("random top-1", format!("{:.4}", self.random_top1_baseline)),
        ];
        if let Some((lo, hi)) = self.rho_bootstrap_ci {
            rows.push(("rho bootstrap CI", format!("[{lo:.4}, {hi:.4}]")));
        }
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
    }

    /// `experiment_id,n_arms,rho,true_best,predicted_best`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["experiment_id", "n_arms", "rho", "true_best", "predicted_best"])
            .map_err(|e| Error::Validation(e.to_string()))?;
        for e in &self.per_experiment {
            w.write_record([
                e.experiment_id.clone(),
                e.n_arms.to_string(),
                format!("{}", e.rho),
                e.true_best.to_string(),
                e.predicted_best.to_string(),
            ])
            .map_err(|e| Error::Validation(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Scores every experiment with `scorer` and compares the predicted ranking
/// with the observed CTR ranking. Experiments whose ranks are degenerate, or
/// whose scoring fails, are excluded and listed.
pub fn evaluate_with<F>(test: &ExperimentSet, mut scorer: F) -> Result<EvalResult>
where
    F: FnMut(&ExperimentRecord) -> Result<Vec<f64>>,
{
    if test.is_empty() {
        return Err(Error::Validation("test set is empty".into()));
    }
    let mut per = Vec::new();
    let mut excluded = Vec::new();
    for exp in &test.experiments {
        match evaluate_one(exp, &mut scorer) {
            Ok(e) => per.push(e),
            Err(err) => {
                log::info!("excluding experiment {}: {err}", exp.experiment_id);
                excluded.push(Exclusion {
                    experiment_id: exp.experiment_id.clone(),
                    reason: err.to_string(),
                });
            }
        }
    }
    EvalResult::from_parts(per, excluded)
}

fn evaluate_one<F>(exp: &ExperimentRecord, scorer: &mut F) -> Result<ExperimentEval>
where
    F: FnMut(&ExperimentRecord) -> Result<Vec<f64>>,
{
    if exp.arms.len() < 2 {
        return Err(Error::Validation("fewer than 2 arms".into()));
    }
    let ctr = exp.observed_ctr()?;
    let scores = scorer(exp)?;
    check_dim(ctr.len(), scores.len())?;
    let rho = spearman(
        &fractional_ranks(&ctr, RankOrder::Descending),
        &fractional_ranks(&scores, RankOrder::Descending),
    )?;
    let predicted_best = argmax_first(&scores).expect("non-empty");
    if scores.iter().filter(|s| **s == scores[predicted_best]).count() > 1 {
        log::debug!("{}: tied top score, first index taken", exp.experiment_id);
    }
    Ok(ExperimentEval {
        experiment_id: exp.experiment_id.clone(),
        n_arms: exp.arms.len(),
        rho,
        true_best: argmax_first(&ctr).expect("non-empty"),
        predicted_best,
    })
}

/// One row of a multi-backend leave-one-out comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSummary {
    pub backend: String,
    pub mean_rho: f64,
    pub rho_stddev: f64,
    pub folds_evaluated: usize,
    pub folds_failed: usize,
    pub fold_rho: Vec<f64>,
}

impl BackendSummary {
    pub fn from_folds(backend: impl Into<String>, folds: &[Result<f64>]) -> Self {
        let ok: Vec<f64> = folds.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let (mean_rho, rho_stddev) = mean_std(&ok);
        Self {
            backend: backend.into(),
            mean_rho,
            rho_stddev,
            folds_evaluated: ok.len(),
            folds_failed: folds.len() - ok.len(),
            fold_rho: ok,
        }
    }
}

pub fn backend_table(rows: &[BackendSummary]) -> String {
    let w = rows.iter().map(|r| r.backend.len()).max().unwrap_or(7).max(7);
    let mut out = format!("{:<w$}  {:>8}  {:>8}  {:>6}  {:>6}\n", "backend", "mean rho", "stddev", "folds", "failed");
    for r in rows {
        out.push_str(&format!(
            "{:<w$}  {:>8.4}  {:>8.4}  {:>6}  {:>6}\n",
            r.backend, r.mean_rho, r.rho_stddev, r.folds_evaluated, r.folds_failed
        ));
    }
    out
}
