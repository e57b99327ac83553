//! Fixed-effects regression of CTR on projected embeddings, and relative
//! scoring of new variants.
//!
//! Experiment fixed effects are absorbed by demeaning ψ and y inside each
//! experiment (the "within" transformation). That estimator is identical to
//! ordinary least squares with one dummy column per experiment.

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::ranking::{fractional_ranks, RankOrder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Uniform,
    Impressions,
}

impl std::str::FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "none" => Ok(Self::Uniform),
            "impressions" => Ok(Self::Impressions),
            other => Err(Error::Validation(format!("unknown weighting `{other}`"))),
        }
    }
}

/// One training arm.
#[derive(Debug, Clone)]
pub struct Observation {
    pub experiment_id: String,
    pub psi: DVector<f64>,
    /// Observed CTR as a fraction.
    pub ctr: f64,
    /// Regression weight; 1 for unweighted fits.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub residual_variance: f64,
    pub n_experiments: usize,
    pub n_arms: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerModel {
    pub beta: DVector<f64>,
    pub fixed_effects: IndexMap<String, f64>,
    pub ridge: f64,
    pub weighting: Weighting,
    pub diagnostics: FitDiagnostics,
}

impl RankerModel {
    pub fn q(&self) -> usize {
        self.beta.len()
    }
}

/// Within-experiment least squares with an optional ridge penalty.
///
/// Minimizes Σ w·(ỹ − ψ̃ᵀβ)² + ridge·‖β‖², then sets
/// fe_k = ȳ_k − ψ̄_kᵀβ̂ (weighted means).
pub fn fit_ranker(observations: &[Observation], ridge: f64, weighting: Weighting) -> Result<RankerModel> {
    if observations.is_empty() {
        return Err(Error::Validation("no training observations".into()));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::Validation(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let q = observations[0].psi.len();
    let mut groups: IndexMap<&str, Vec<&Observation>> = IndexMap::new();
    for o in observations {
        check_dim(q, o.psi.len())?;
        if !o.ctr.is_finite() || !(o.weight > 0.0) || !o.weight.is_finite() {
            return Err(Error::Validation(format!(
                "experiment `{}`: CTR and weight must be finite, weight > 0",
                o.experiment_id
            )));
        }
        groups.entry(o.experiment_id.as_str()).or_default().push(o);
    }
    if groups.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 experiments, got {}",
            groups.len()
        )));
    }
    if let Some((id, g)) = groups.iter().find(|(_, g)| g.len() < 2) {
        return Err(Error::Validation(format!(
            "experiment `{id}` has {} arm(s); every experiment needs at least 2",
            g.len()
        )));
    }

    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DVector::<f64>::zeros(q);
    let mut means: Vec<(DVector<f64>, f64)> = Vec::with_capacity(groups.len());
    for g in groups.values() {
        let (psi_bar, y_bar) = weighted_means(g, q);
        for o in g {
            let dpsi = &o.psi - &psi_bar;
            let dy = o.ctr - y_bar;
            gram.ger(o.weight, &dpsi, &dpsi, 1.0);
            rhs.axpy(o.weight * dy, &dpsi, 1.0);
        }
        means.push((psi_bar, y_bar));
    }

    if ridge == 0.0 {
        let eig = gram.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        let min = eig.eigenvalues.min();
        if max == 0.0 || min <= 1e-12 * max {
            return Err(Error::Singular(
                "within-experiment covariance of ψ is singular; set ridge > 0".into(),
            ));
        }
    }
    for i in 0..q {
        gram[(i, i)] += ridge;
    }
    let beta = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("regression normal equations are not positive definite; increase ridge".into()))?
        .solve(&rhs);

    let mut fixed_effects = IndexMap::with_capacity(groups.len());
    let mut rss = 0.0;
    for ((id, g), (psi_bar, y_bar)) in groups.iter().zip(&means) {
        let fe = y_bar - psi_bar.dot(&beta);
        for o in g {
            let r = o.ctr - fe - o.psi.dot(&beta);
            rss += r * r;
        }
        fixed_effects.insert(id.to_string(), fe);
    }
    let n = observations.len();
    let dof = n as i64 - groups.len() as i64 - q as i64;
    let residual_variance = if dof > 0 { rss / dof as f64 } else { rss / n as f64 };

    Ok(RankerModel {
        beta,
        fixed_effects,
        ridge,
        weighting,
        diagnostics: FitDiagnostics {
            residual_variance,
            n_experiments: groups.len(),
            n_arms: n,
        },
    })
}

fn weighted_means(group: &[&Observation], q: usize) -> (DVector<f64>, f64) {
    let mut psi = DVector::zeros(q);
    let mut y = 0.0;
    let mut w = 0.0;
    for o in group {
        psi.axpy(o.weight, &o.psi, 1.0);
        y += o.weight * o.ctr;
        w += o.weight;
    }
    (psi / w, y / w)
}

/// Relative scores ψᵀβ̂. No fixed effect is added, so these are not CTRs.
pub fn predict_scores(model: &RankerModel, psis: &[DVector<f64>]) -> Result<Vec<f64>> {
    psis.iter()
        .map(|psi| {
            check_dim(model.q(), psi.len())?;
            Ok(psi.dot(&model.beta))
        })
        .collect()
}

/// Rank 1 = highest score; ties share the average position.
pub fn rank_variants(scores: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Validation(format!("non-finite score {bad}")));
    }
    Ok(fractional_ranks(scores, RankOrder::Descending))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn obs(id: &str, psi: &[f64], y: f64) -> Observation {
        Observation {
            experiment_id: id.into(),
            psi: DVector::from_column_slice(psi),
            ctr: y,
            weight: 1.0,
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng, k: usize, arms: usize, q: usize) -> Vec<Observation> {
        let mut out = Vec::new();
        for e in 0..k {
            for _ in 0..arms {
                let psi: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
                out.push(obs(&format!("e{e}"), &psi, rng.random_range(0.0..0.2)));
            }
        }
        out
    }

    #[test]
    fn exact_recovery_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let beta_star = DVector::from_vec(vec![0.3, -0.2, 0.05]);
        let mut data = Vec::new();
        for e in 0..6 {
            let fe = 0.01 * e as f64;
            for _ in 0..4 {
                let psi = DVector::from_fn(3, |_, _| rng.sample(StandardNormal));
                let y = fe + psi.dot(&beta_star);
                data.push(Observation { experiment_id: format!("e{e}"), psi, ctr: y, weight: 1.0 });
            }
        }
        let m = fit_ranker(&data, 0.0, Weighting::Uniform).unwrap();
        assert!((&m.beta - &beta_star).amax() < 1e-8);
        for e in 0..6 {
            assert!((m.fixed_effects[&format!("e{e}")] - 0.01 * e as f64).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_within_experiment_gives_zero_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = random_instance(&mut rng, 4, 5, 2);
        for o in &mut data {
            o.ctr = if o.experiment_id == "e0" { 0.1 } else { 0.03 };
        }
        let m = fit_ranker(&data, 0.0, Weighting::Uniform).unwrap();
        assert!(m.beta.amax() < 1e-14);
    }

    #[test]
    fn shifted_experiment_changes_only_its_fixed_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let base = random_instance(&mut rng, 1, 5, 2);
        let mut data: Vec<Observation> = base.clone();
        for o in &base {
            let mut o2 = o.clone();
            o2.experiment_id = "shifted".into();
            o2.ctr += 0.1;
            data.push(o2);
        }
        let m = fit_ranker(&data, 0.0, Weighting::Uniform).unwrap();
        let dummy = dummy_variable_ols(&data);
        assert!((&m.beta - dummy.rows(0, 2)).amax() < 1e-8);
        let diff = m.fixed_effects["shifted"] - m.fixed_effects["e0"];
        assert!((diff - 0.1).abs() < 1e-10);
    }

    /// Test oracle: OLS with explicit one-hot intercept columns via SVD.
    fn dummy_variable_ols(data: &[Observation]) -> DVector<f64> {
        let mut ids: Vec<&str> = Vec::new();
        for o in data {
            if !ids.contains(&o.experiment_id.as_str()) {
                ids.push(&o.experiment_id);
            }
        }
        let q = data[0].psi.len();
        let x = DMatrix::from_fn(data.len(), q + ids.len(), |r, c| {
            if c < q {
                data[r].psi[c]
            } else {
                (data[r].experiment_id == ids[c - q]) as u8 as f64
            }
        });
        let y = DVector::from_iterator(data.len(), data.iter().map(|o| o.ctr));
        x.svd(true, true).solve(&y, 1e-14).unwrap()
    }

    #[test]
    fn matches_dummy_variable_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let k = rng.random_range(2..=10);
            let arms = rng.random_range(3..=8);
            let q = rng.random_range(1..=3);
            let data = random_instance(&mut rng, k, arms, q);
            let m = fit_ranker(&data, 0.0, Weighting::Uniform).unwrap();
            let oracle = dummy_variable_ols(&data);
            assert!((&m.beta - oracle.rows(0, q)).amax() < 1e-8);
        }
    }

    #[test]
    fn residuals_sum_to_zero_per_experiment() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data = random_instance(&mut rng, 5, 6, 3);
        let m = fit_ranker(&data, 0.0, Weighting::Uniform).unwrap();
        for (id, fe) in &m.fixed_effects {
            let s: f64 = data
                .iter()
                .filter(|o| &o.experiment_id == id)
                .map(|o| o.ctr - fe - o.psi.dot(&m.beta))
                .sum();
            assert!(s.abs() < 1e-8);
        }
    }

    #[test]
    fn singular_design_without_ridge() {
        let data = vec![
            obs("a", &[1.0, 1.0], 0.1),
            obs("a", &[2.0, 2.0], 0.2),
            obs("b", &[0.0, 0.0], 0.1),
            obs("b", &[1.0, 1.0], 0.3),
        ];
        assert!(matches!(fit_ranker(&data, 0.0, Weighting::Uniform), Err(Error::Singular(_))));
        assert!(fit_ranker(&data, 1e-6, Weighting::Uniform).is_ok());
    }

    #[test]
    fn input_validation() {
        assert!(fit_ranker(&[], 0.0, Weighting::Uniform).is_err());
        let one_exp = vec![obs("a", &[1.0], 0.1), obs("a", &[2.0], 0.2)];
        assert!(fit_ranker(&one_exp, 0.0, Weighting::Uniform).is_err());
        let singleton = vec![obs("a", &[1.0], 0.1), obs("a", &[2.0], 0.2), obs("b", &[1.0], 0.1)];
        assert!(fit_ranker(&singleton, 0.0, Weighting::Uniform).is_err());
        let ok = vec![obs("a", &[1.0], 0.1), obs("a", &[2.0], 0.2), obs("b", &[1.0], 0.1), obs("b", &[3.0], 0.3)];
        assert!(fit_ranker(&ok, -1.0, Weighting::Uniform).is_err());
    }

    #[test]
    fn prediction_examples() {
        let m = RankerModel {
            beta: DVector::from_vec(vec![0.3, -0.1]),
            fixed_effects: IndexMap::new(),
            ridge: 0.0,
            weighting: Weighting::Uniform,
            diagnostics: FitDiagnostics { residual_variance: 0.0, n_experiments: 0, n_arms: 0 },
        };
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(predict_scores(&m, &[e1]).unwrap(), vec![0.3]);
        let zero = RankerModel { beta: DVector::zeros(2), ..m.clone() };
        assert_eq!(predict_scores(&zero, &[DVector::from_vec(vec![5.0, 2.0])]).unwrap(), vec![0.0]);

        // shift every ψ by c·β: scores move by c‖β‖², ranks unchanged
        let psis: Vec<DVector<f64>> = vec![
            DVector::from_vec(vec![0.2, 0.4]),
            DVector::from_vec(vec![-1.0, 0.3]),
            DVector::from_vec(vec![0.7, -0.2]),
        ];
        let c = 2.5;
        let shifted: Vec<DVector<f64>> = psis.iter().map(|p| p + &m.beta * c).collect();
        let s0 = predict_scores(&m, &psis).unwrap();
        let s1 = predict_scores(&m, &shifted).unwrap();
        for (a, b) in s0.iter().zip(&s1) {
            assert!((b - a - c * m.beta.norm_squared()).abs() < 1e-12);
        }
        assert_eq!(rank_variants(&s0).unwrap(), rank_variants(&s1).unwrap());
        assert!(predict_scores(&m, &[DVector::zeros(3)]).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_variants(&[0.2, 0.5, 0.1]).unwrap(), vec![2.0, 1.0, 3.0]);
        assert_eq!(rank_variants(&[1.0; 4]).unwrap(), vec![2.5; 4]);
        assert!(rank_variants(&[f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn ranks_invariant_under_monotone_maps(
            scores in prop::collection::vec(-10.0f64..10.0, 1..20),
            a in 0.1f64..5.0, b in -3.0f64..3.0, shift in -100.0f64..100.0,
        ) {
            let base = rank_variants(&scores).unwrap();
            let cubic: Vec<f64> = scores.iter().map(|s| a * s.powi(3) + b.abs() * s + shift).collect();
            let exp: Vec<f64> = scores.iter().map(|s| (s / 4.0).exp()).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            prop_assert_eq!(&base, &rank_variants(&cubic).unwrap());
            prop_assert_eq!(&base, &rank_variants(&exp).unwrap());
            prop_assert_eq!(&base, &rank_variants(&shifted).unwrap());
        }
    }
}
