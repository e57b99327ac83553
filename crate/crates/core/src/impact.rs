//! Re-expression of the ranker in attribute space.
//!
//! The ranker's q-dimensional weights are mapped back to embedding space
//! (β′ = Πᵀβ̂) and then onto the attribute dictionary by solving
//!
//! ```text
//!     min ‖β′ − Vᵀβ″‖² + λ‖β″‖₁   s.t.  β″_a · sign((Vβ′)_a) ≥ 0
//! ```
//!
//! With D = diag(sign(Vβ′)) and β″ = Dγ the constraint becomes γ ≥ 0, so the
//! problem is a non-negative Lasso on the design VᵀD, solved by cyclic
//! coordinate descent on the Gram matrix.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeDictionary;
use crate::error::{check_dim, Error, Result};
use crate::projection::ProjectionModel;
use crate::ranker::RankerModel;

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_SWEEPS: usize = 10_000;
pub const GRID_POINTS: usize = 50;
pub const GRID_FLOOR: f64 = 1e-4;

/// β′ = Πᵀβ̂, so that φᵀβ′ = (Πφ)ᵀβ̂ for every φ.
pub fn reexpress(projection: &ProjectionModel, ranker: &RankerModel) -> Result<DVector<f64>> {
    check_dim(projection.q(), ranker.q())?;
    Ok(projection.pi.transpose() * &ranker.beta)
}

/// Unconstrained least-squares coefficients (VVᵀ)⁻¹Vβ′.
pub fn pseudo_inverse_coefficients(dict: &AttributeDictionary, beta_prime: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(dict.p(), beta_prime.len())?;
    let gram = &dict.v * dict.v.transpose();
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if max == 0.0 || min <= 1e-12 * max {
        return Err(Error::Singular(format!(
            "attribute dictionary is rank deficient (VVᵀ eigenvalues in [{min:e}, {max:e}]); \
             attribute rows must be linearly independent"
        )));
    }
    let rhs = &dict.v * beta_prime;
    gram.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Singular("VVᵀ is not positive definite".into()))
}

/// Minimum-norm least-squares coefficients (Vᵀ)⁺β′ through a thin SVD.
///
/// Equal to [`pseudo_inverse_coefficients`] when V has full row rank. A
/// dictionary built with phrase-weighted demeaning has rows that sum to zero
/// under the phrase weights, so it is rank deficient by construction; singular
/// values below `1e-10·σ_max` are treated as zero.
pub fn min_norm_coefficients(dict: &AttributeDictionary, beta_prime: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(dict.p(), beta_prime.len())?;
    let svd = dict.v.transpose().svd(true, true);
    let smax = svd.singular_values.amax();
    if smax == 0.0 {
        return Ok(DVector::zeros(dict.m()));
    }
    svd.solve(beta_prime, 1e-10 * smax)
        .map_err(|e| Error::Singular(format!("SVD solve failed: {e}")))
}

/// sign(Vβ′) as −1 / 0 / +1.
pub fn sign_vector(dict: &AttributeDictionary, beta_prime: &DVector<f64>) -> Result<Vec<i8>> {
    check_dim(dict.p(), beta_prime.len())?;
    Ok((&dict.v * beta_prime).iter().map(|x| signum(*x)).collect())
}

fn signum(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Smallest λ at which the constrained solution is identically zero:
/// 2‖Vβ′‖∞ for the unhalved squared loss.
pub fn lambda_max(dict: &AttributeDictionary, beta_prime: &DVector<f64>) -> Result<f64> {
    check_dim(dict.p(), beta_prime.len())?;
    Ok(2.0 * (&dict.v * beta_prime).amax())
}

/// Logarithmic grid from `top` down to `GRID_FLOOR·top`, `GRID_POINTS` values.
pub fn lambda_grid(top: f64) -> Vec<f64> {
    let n = GRID_POINTS;
    (0..n)
        .map(|i| top * GRID_FLOOR.powf(i as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LassoOptions {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    pub coefficients: DVector<f64>,
    pub sweeps: usize,
    pub final_update: f64,
    /// Objective after each sweep.
    pub objective_trace: Vec<f64>,
}

/// Sign-constrained Lasso for a general design: min ‖b − Xw‖² + λ‖w‖₁ with
/// w_a·signs[a] ≥ 0 and w_a = 0 where signs[a] = 0.
///
/// `warm` is an optional starting point (must already be sign-feasible).
pub fn solve_sign_constrained(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    signs: &[i8],
    lambda: f64,
    warm: Option<&DVector<f64>>,
    opts: LassoOptions,
) -> Result<LassoFit> {
    let m = design.ncols();
    check_dim(design.nrows(), response.len())?;
    check_dim(m, signs.len())?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Validation(format!("λ must be finite and >= 0, got {lambda}")));
    }
    let d: Vec<f64> = signs.iter().map(|s| *s as f64).collect();
    // Gram and correlation in γ-space: G̃ = D XᵀX D, c̃ = D Xᵀb.
    let xtx = design.transpose() * design;
    let xtb = design.transpose() * response;
    let g = DMatrix::from_fn(m, m, |i, j| d[i] * d[j] * xtx[(i, j)]);
    let c = DVector::from_fn(m, |i, _| d[i] * xtb[i]);
    let bb = response.norm_squared();

    let mut gamma = DVector::zeros(m);
    if let Some(w) = warm {
        check_dim(m, w.len())?;
        for a in 0..m {
            gamma[a] = (d[a] * w[a]).max(0.0);
        }
    }
    let mut g_gamma = &g * &gamma;
    let objective = |gamma: &DVector<f64>, g_gamma: &DVector<f64>| {
        gamma.dot(g_gamma) - 2.0 * c.dot(gamma) + bb + lambda * gamma.sum()
    };

    let mut trace = Vec::new();
    let mut last = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        let mut max_update = 0.0f64;
        for a in 0..m {
            let gaa = g[(a, a)];
            let new = if d[a] == 0.0 || gaa <= 0.0 {
                0.0
            } else {
                let partial = c[a] - (g_gamma[a] - gaa * gamma[a]);
                ((partial - lambda / 2.0) / gaa).max(0.0)
            };
            let delta = new - gamma[a];
            if delta != 0.0 {
                g_gamma.axpy(delta, &g.column(a), 1.0);
                gamma[a] = new;
                max_update = max_update.max(delta.abs());
            }
        }
        let mut obj = objective(&gamma, &g_gamma);
        if max_update >= opts.tolerance {
            if let Some((polished, g_polished, o)) = polish_support(&g, &c, lambda, &gamma, &objective) {
                if o <= obj {
                    gamma = polished;
                    g_gamma = g_polished;
                    obj = o;
                }
            }
        }
        trace.push(obj);
        last = max_update;
        if max_update < opts.tolerance {
            let coefficients = DVector::from_fn(m, |a, _| d[a] * gamma[a]);
            return Ok(LassoFit {
                coefficients,
                sweeps: sweep,
                final_update: max_update,
                objective_trace: trace,
            });
        }
    }
    Err(Error::NonConvergence {
        sweeps: opts.max_sweeps,
        last_update: last,
    })
}

/// Feasible descent on the current support {a : γ_a > 0}.
///
/// While the support Gram is singular, move along a null direction of the
/// design restricted to the support. The quadratic part is flat there, so
/// heading where Σγ shrinks cannot increase the objective; the step ends when
/// a coordinate reaches zero and leaves the support. Once the Gram is
/// positive definite, step toward the restricted minimizer, stopping at the
/// first coordinate that would go negative. Coordinate descent alone can
/// crawl on correlated or rank-deficient designs.
fn polish_support(
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    lambda: f64,
    gamma: &DVector<f64>,
    objective: &dyn Fn(&DVector<f64>, &DVector<f64>) -> f64,
) -> Option<(DVector<f64>, DVector<f64>, f64)> {
    let mut out = gamma.clone();
    loop {
        let support: Vec<usize> = (0..out.len()).filter(|a| out[*a] > 0.0).collect();
        if support.is_empty() {
            return None;
        }
        let g_ss = g.select_rows(&support).select_columns(&support);
        let eig = g_ss.clone().symmetric_eigen();
        let (imin, emin) = eig
            .eigenvalues
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        let emax = eig.eigenvalues.amax();
        if emin > 1e-10 * emax.max(f64::MIN_POSITIVE) {
            let rhs = DVector::from_iterator(support.len(), support.iter().map(|a| c[*a] - lambda / 2.0));
            let x = g_ss.cholesky()?.solve(&rhs);
            if x.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let mut t = 1.0f64;
            let mut hit = None;
            for (i, a) in support.iter().enumerate() {
                if x[i] <= 0.0 {
                    let ti = out[*a] / (out[*a] - x[i]);
                    if ti < t {
                        t = ti;
                        hit = Some(*a);
                    }
                }
            }
            for (i, a) in support.iter().enumerate() {
                out[*a] = (out[*a] + t * (x[i] - out[*a])).max(0.0);
            }
            if let Some(a) = hit {
                out[a] = 0.0;
            }
            break;
        }
        let mut dir = eig.eigenvectors.column(imin).into_owned();
        if dir.sum() > 0.0 {
            dir.neg_mut();
        }
        let mut t = f64::INFINITY;
        let mut hit = None;
        for (i, a) in support.iter().enumerate() {
            if dir[i] < 0.0 {
                let ti = out[*a] / -dir[i];
                if ti < t {
                    t = ti;
                    hit = Some(*a);
                }
            }
        }
        let hit = hit?;
        for (i, a) in support.iter().enumerate() {
            out[*a] = (out[*a] + t * dir[i]).max(0.0);
        }
        out[hit] = 0.0;
    }
    let g_out = g * &out;
    let o = objective(&out, &g_out);
    Some((out, g_out, o))
}

/// β″ for a fixed λ on the full attribute problem (design Vᵀ, response β′).
pub fn fit_sign_constrained_lasso(
    dict: &AttributeDictionary,
    beta_prime: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    let signs = sign_vector(dict, beta_prime)?;
    let design = dict.v.transpose();
    Ok(solve_sign_constrained(&design, beta_prime, &signs, lambda, None, LassoOptions::default())?.coefficients)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub cv_trace: Vec<CvPoint>,
}

/// K-fold cross-validation over the p embedding coordinates.
///
/// Coordinates are the pseudo-samples: row j of Vᵀ is a design row with
/// response β′_j. Rows are shuffled with `seed` and dealt into K folds. Each
/// fold's penalty is scaled by n_train/p so the per-row penalty matches the
/// full problem. The λ with the lowest mean held-out squared error wins;
/// ties go to the larger λ.
pub fn select_lambda(
    dict: &AttributeDictionary,
    beta_prime: &DVector<f64>,
    folds: usize,
    seed: u64,
) -> Result<LambdaSelection> {
    let p = dict.p();
    check_dim(p, beta_prime.len())?;
    if folds < 2 {
        return Err(Error::Validation(format!("K must be at least 2, got {folds}")));
    }
    if folds > p {
        return Err(Error::Validation(format!(
            "K = {folds} exceeds the number of embedding coordinates p = {p}"
        )));
    }
    let signs = sign_vector(dict, beta_prime)?;
    let grid = lambda_grid(lambda_max(dict, beta_prime)?);
    let design = dict.v.transpose();

    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment: Vec<usize> = {
        let mut a = vec![0; p];
        for (pos, &row) in order.iter().enumerate() {
            a[row] = pos % folds;
        }
        a
    };

    let per_fold: Vec<Vec<f64>> = (0..folds)
        .into_par_iter()
        .map(|f| -> Result<Vec<f64>> {
            let train: Vec<usize> = (0..p).filter(|j| assignment[*j] != f).collect();
            let test: Vec<usize> = (0..p).filter(|j| assignment[*j] == f).collect();
            let x_train = design.select_rows(&train);
            let b_train = beta_prime.select_rows(&train);
            let x_test = design.select_rows(&test);
            let b_test = beta_prime.select_rows(&test);
            let scale = train.len() as f64 / p as f64;
            let mut warm: Option<DVector<f64>> = None;
            let mut errors = Vec::with_capacity(grid.len());
            for &lambda in &grid {
                let fit = solve_sign_constrained(
                    &x_train,
                    &b_train,
                    &signs,
                    lambda * scale,
                    warm.as_ref(),
                    LassoOptions::default(),
                )?;
                let resid = &b_test - &x_test * &fit.coefficients;
                errors.push(resid.norm_squared() / test.len() as f64);
                warm = Some(fit.coefficients);
            }
            Ok(errors)
        })
        .collect::<Result<_>>()?;

    let cv_trace: Vec<CvPoint> = grid
        .iter()
        .enumerate()
        .map(|(i, &lambda)| CvPoint {
            lambda,
            mean_error: per_fold.iter().map(|e| e[i]).sum::<f64>() / folds as f64,
        })
        .collect();
    let mut best = 0;
    for (i, pt) in cv_trace.iter().enumerate() {
        if pt.mean_error < cv_trace[best].mean_error {
            best = i;
        }
    }
    Ok(LambdaSelection {
        lambda: cv_trace[best].lambda,
        cv_trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImpactBin {
    Strong,
    Medium,
    Weak,
}

impl std::fmt::Display for ImpactBin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ImpactBin::Strong => "Strong",
            ImpactBin::Medium => "Medium",
            ImpactBin::Weak => "Weak",
        })
    }
}

/// Cutoffs on |β″_a| / max|β″|.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinThresholds {
    pub medium: f64,
    pub strong: f64,
}

impl Default for BinThresholds {
    fn default() -> Self {
        Self {
            medium: 1.0 / 3.0,
            strong: 2.0 / 3.0,
        }
    }
}

pub fn bin_impact(beta_dprime: &DVector<f64>, thresholds: BinThresholds) -> Vec<ImpactBin> {
    let max = beta_dprime.amax();
    beta_dprime
        .iter()
        .map(|b| {
            if max == 0.0 {
                return ImpactBin::Weak;
            }
            let r = b.abs() / max;
            if r >= thresholds.strong {
                ImpactBin::Strong
            } else if r >= thresholds.medium {
                ImpactBin::Medium
            } else {
                ImpactBin::Weak
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    Fixed(f64),
    CrossValidated { folds: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpactModel {
    pub beta_prime: DVector<f64>,
    pub beta_dprime: DVector<f64>,
    pub lambda: f64,
    pub sign_vector: Vec<i8>,
    pub cv_trace: Vec<CvPoint>,
    pub cv_folds: Option<usize>,
    pub cv_seed: Option<u64>,
}

pub fn fit_impact(dict: &AttributeDictionary, beta_prime: DVector<f64>, choice: LambdaChoice) -> Result<ImpactModel> {
    let sign_vector = sign_vector(dict, &beta_prime)?;
    let (lambda, cv_trace, cv_folds, cv_seed) = match choice {
        LambdaChoice::Fixed(l) => (l, Vec::new(), None, None),
        LambdaChoice::CrossValidated { folds, seed } => {
            let sel = select_lambda(dict, &beta_prime, folds, seed)?;
            (sel.lambda, sel.cv_trace, Some(folds), Some(seed))
        }
    };
    let beta_dprime = fit_sign_constrained_lasso(dict, &beta_prime, lambda)?;
    Ok(ImpactModel {
        beta_prime,
        beta_dprime,
        lambda,
        sign_vector,
        cv_trace,
        cv_folds,
        cv_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranker::{FitDiagnostics, Weighting};
    use indexmap::IndexMap;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_dict(rng: &mut ChaCha8Rng, m: usize, p: usize) -> AttributeDictionary {
        AttributeDictionary {
            v: DMatrix::from_fn(m, p, |_, _| rng.sample(StandardNormal)),
            names: (0..m).map(|i| format!("a{i}")).collect(),
            provider_id: "t".into(),
        }
    }

    fn orthonormal_dict(rng: &mut ChaCha8Rng, m: usize, p: usize) -> AttributeDictionary {
        let q = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
        AttributeDictionary {
            v: q.transpose().rows(0, m).into_owned(),
            names: (0..m).map(|i| format!("a{i}")).collect(),
            provider_id: "t".into(),
        }
    }

    fn rvec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
    }

    fn ranker(beta: DVector<f64>) -> RankerModel {
        RankerModel {
            beta,
            fixed_effects: IndexMap::new(),
            ridge: 0.0,
            weighting: Weighting::Uniform,
            diagnostics: FitDiagnostics { residual_variance: 0.0, n_experiments: 0, n_arms: 0 },
        }
    }

    fn projection(pi: DMatrix<f64>) -> ProjectionModel {
        let p = pi.ncols();
        ProjectionModel { pi, sample_mean: DVector::zeros(p), explained_variance: vec![], fit_corpus_tag: "t".into() }
    }

    #[test]
    fn reexpress_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let beta = rvec(&mut rng, 4);
        let id = projection(DMatrix::identity(4, 4));
        assert_eq!(reexpress(&id, &ranker(beta.clone())).unwrap(), beta);

        let pi = DMatrix::from_fn(6, 6, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q().rows(0, 3).into_owned();
        let proj = projection(pi.clone());
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(reexpress(&proj, &ranker(e1)).unwrap(), pi.row(0).transpose());

        let beta = rvec(&mut rng, 3);
        let bp = reexpress(&proj, &ranker(beta.clone())).unwrap();
        for _ in 0..100 {
            let phi = rvec(&mut rng, 6);
            let psi = &pi * &phi;
            assert!((phi.dot(&bp) - psi.dot(&beta)).abs() < 1e-10);
        }
        assert!(reexpress(&proj, &ranker(rvec(&mut rng, 2))).is_err());
    }

    #[test]
    fn pseudo_inverse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = orthonormal_dict(&mut rng, 4, 10);
        let bp = rvec(&mut rng, 10);
        let got = pseudo_inverse_coefficients(&d, &bp).unwrap();
        assert!((got - &d.v * &bp).amax() < 1e-12);

        // β′ orthogonal to the row space → zero
        let proj = d.v.transpose() * (&d.v * &bp);
        let perp = &bp - proj;
        assert!(pseudo_inverse_coefficients(&d, &perp).unwrap().amax() < 1e-12);

        let d = random_dict(&mut rng, 8, 32);
        let bp = rvec(&mut rng, 32);
        let x = pseudo_inverse_coefficients(&d, &bp).unwrap();
        let resid = &d.v * d.v.transpose() * &x - &d.v * &bp;
        assert!(resid.amax() < 1e-8);

        let mut singular = d.clone();
        let r0 = singular.v.row(0).clone_owned();
        singular.v.row_mut(1).copy_from(&r0);
        assert!(matches!(pseudo_inverse_coefficients(&singular, &bp), Err(Error::Singular(_))));
    }

    #[test]
    fn min_norm_matches_closed_form_and_handles_rank_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let d = random_dict(&mut rng, 8, 32);
        let bp = rvec(&mut rng, 32);
        let a = pseudo_inverse_coefficients(&d, &bp).unwrap();
        let b = min_norm_coefficients(&d, &bp).unwrap();
        assert!((a - b).amax() < 1e-10);

        // rows summing to zero: the normal equations still hold and the
        // solution has no component along the null vector (1, ..., 1)
        let mut dep = d.clone();
        let total: DVector<f64> = dep.v.row_sum().transpose();
        let last = dep.v.row(7).clone_owned() - total.transpose();
        dep.v.row_mut(7).copy_from(&last);
        assert!(dep.v.row_sum().amax() < 1e-12);
        let x = min_norm_coefficients(&dep, &bp).unwrap();
        let resid = &dep.v * dep.v.transpose() * &x - &dep.v * &bp;
        assert!(resid.amax() < 1e-8);
        assert!(x.sum().abs() < 1e-8);
    }

    /// KKT check of the γ ≥ 0 problem, independent of the solver.
    fn kkt_violation(d: &AttributeDictionary, bp: &DVector<f64>, lambda: f64, beta: &DVector<f64>) -> f64 {
        let s = sign_vector(d, bp).unwrap();
        let x = d.v.transpose();
        let resid = bp - &x * beta;
        let grad_ls = -2.0 * x.transpose() * resid; // ∂/∂β″ of the squared loss
        let mut worst = 0.0f64;
        for a in 0..beta.len() {
            if s[a] == 0 {
                worst = worst.max(beta[a].abs());
                continue;
            }
            let g = s[a] as f64 * grad_ls[a] + lambda; // gradient in γ_a
            let gamma = s[a] as f64 * beta[a];
            if gamma > 0.0 {
                worst = worst.max(g.abs());
            } else {
                worst = worst.max((-g).max(0.0));
            }
        }
        worst
    }

    #[test]
    fn lasso_full_shrinkage() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let d = random_dict(&mut rng, 5, 20);
        let bp = rvec(&mut rng, 20);
        let lmax = lambda_max(&d, &bp).unwrap();
        assert_eq!(fit_sign_constrained_lasso(&d, &bp, lmax).unwrap(), DVector::zeros(5));
        assert_eq!(fit_sign_constrained_lasso(&d, &bp, 10.0 * lmax).unwrap(), DVector::zeros(5));
        // just below the threshold something enters
        assert!(fit_sign_constrained_lasso(&d, &bp, 0.9 * lmax).unwrap().amax() > 0.0);
    }

    #[test]
    fn lasso_orthonormal_unpenalized_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let d = orthonormal_dict(&mut rng, 6, 12);
        let bp = rvec(&mut rng, 12);
        let got = fit_sign_constrained_lasso(&d, &bp, 0.0).unwrap();
        assert!((got - &d.v * &bp).amax() < 1e-8);
    }

    #[test]
    fn lasso_kkt_sign_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..25 {
            let d = random_dict(&mut rng, 8, 32);
            let bp = rvec(&mut rng, 32);
            let s = sign_vector(&d, &bp).unwrap();
            let lmax = lambda_max(&d, &bp).unwrap();
            // λ decreases along the loop, so ‖β″‖₁ must not shrink
            let mut prev_l1 = 0.0;
            for i in 0..10 {
                let lambda = lmax * 1.2 * (1.0 - i as f64 / 10.0);
                let b = fit_sign_constrained_lasso(&d, &bp, lambda).unwrap();
                for a in 0..8 {
                    assert!(b[a] * s[a] as f64 >= 0.0);
                }
                let k = kkt_violation(&d, &bp, lambda, &b); assert!(k < 1e-6, "kkt {k} lambda {lambda}");
                let l1 = b.lp_norm(1);
                assert!(l1 >= prev_l1 - 1e-9);
                prev_l1 = l1;
            }
        }
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let d = random_dict(&mut rng, 8, 16);
        let bp = rvec(&mut rng, 16);
        let s = sign_vector(&d, &bp).unwrap();
        let fit = solve_sign_constrained(&d.v.transpose(), &bp, &s, 0.3, None, LassoOptions::default()).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn zero_sign_coordinate_pinned() {
        // attribute 1 is orthogonal to β′
        let v = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let d = AttributeDictionary { v, names: vec!["a".into(), "b".into()], provider_id: "t".into() };
        let bp = DVector::from_vec(vec![2.0, 0.0, 1.0]);
        assert_eq!(sign_vector(&d, &bp).unwrap(), vec![1, 0]);
        let b = fit_sign_constrained_lasso(&d, &bp, 0.0).unwrap();
        assert_eq!(b[1], 0.0);
        assert!((b[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_convergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let d = random_dict(&mut rng, 8, 10);
        let bp = rvec(&mut rng, 10);
        let s = sign_vector(&d, &bp).unwrap();
        let opts = LassoOptions { tolerance: 0.0, max_sweeps: 3 };
        match solve_sign_constrained(&d.v.transpose(), &bp, &s, 0.01, None, opts) {
            Err(Error::NonConvergence { sweeps, .. }) => assert_eq!(sweeps, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cv_noiseless_prefers_small_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let d = orthonormal_dict(&mut rng, 5, 40);
        let truth = DVector::from_vec(vec![1.0, -0.5, 0.8, 0.3, -1.2]);
        let bp = d.v.transpose() * truth;
        let sel = select_lambda(&d, &bp, 5, 7).unwrap();
        assert_eq!(sel.cv_trace.len(), GRID_POINTS);
        let min_lambda = sel.cv_trace.last().unwrap().lambda;
        assert!(sel.lambda <= min_lambda * 10.0, "{} vs {}", sel.lambda, min_lambda);
        let best = sel.cv_trace.iter().map(|p| p.mean_error).fold(f64::INFINITY, f64::min);
        assert!(best < 1e-4);
    }

    #[test]
    fn cv_zero_target_picks_lambda_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let d = random_dict(&mut rng, 4, 20);
        let sel = select_lambda(&d, &DVector::zeros(20), 5, 1).unwrap();
        assert!(sel.cv_trace.iter().all(|p| p.mean_error == 0.0));
        assert_eq!(sel.lambda, sel.cv_trace[0].lambda);
    }

    #[test]
    fn cv_is_deterministic_and_validates_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let d = random_dict(&mut rng, 4, 20);
        let bp = rvec(&mut rng, 20);
        let a = select_lambda(&d, &bp, 4, 99).unwrap();
        let b = select_lambda(&d, &bp, 4, 99).unwrap();
        assert_eq!(a, b);
        assert!(select_lambda(&d, &bp, 21, 1).is_err());
        assert!(select_lambda(&d, &bp, 1, 1).is_err());
    }

    #[test]
    fn binning() {
        let b = |x: &[f64]| bin_impact(&DVector::from_column_slice(x), BinThresholds::default());
        assert_eq!(b(&[0.9, 0.5, 0.1]), vec![ImpactBin::Strong, ImpactBin::Medium, ImpactBin::Weak]);
        assert_eq!(b(&[0.0, 0.0]), vec![ImpactBin::Weak; 2]);
        assert_eq!(b(&[0.0, -0.2, 0.0]), vec![ImpactBin::Weak, ImpactBin::Strong, ImpactBin::Weak]);
    }
}
