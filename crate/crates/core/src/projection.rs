//! PCA projection of centered embeddings down to `q` dimensions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Which treatments the projection is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FitCorpus {
    Training,
    /// Candidate/test treatments; transfers best in practice.
    #[default]
    Target,
    Pooled,
}

impl std::str::FromStr for FitCorpus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" | "train" => Ok(Self::Training),
            "target" | "test" => Ok(Self::Target),
            "pooled" => Ok(Self::Pooled),
            other => Err(Error::Validation(format!("unknown PCA fit corpus `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    /// q×p, orthonormal rows ordered by explained variance.
    pub pi: DMatrix<f64>,
    /// Sample mean removed before the decomposition. Not applied by [`project`].
    pub sample_mean: DVector<f64>,
    pub explained_variance: Vec<f64>,
    pub fit_corpus_tag: String,
}

impl ProjectionModel {
    pub fn q(&self) -> usize {
        self.pi.nrows()
    }

    pub fn p(&self) -> usize {
        self.pi.ncols()
    }
}

/// Fits the top-`q` principal directions of `vectors`.
///
/// Inputs are additionally centered by their own sample mean; each row of Π
/// is sign-fixed so that its largest-magnitude entry is non-negative.
pub fn fit_pca(vectors: &[DVector<f64>], q: usize, tag: impl Into<String>) -> Result<ProjectionModel> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::Validation(format!("PCA needs at least 2 vectors, got {n}")));
    }
    let p = vectors[0].len();
    for v in vectors {
        check_dim(p, v.len())?;
    }
    if q == 0 || q > p.min(n) {
        return Err(Error::Validation(format!(
            "q = {q} must be in 1..={} (p = {p}, n = {n})",
            p.min(n)
        )));
    }

    let mut mean = DVector::zeros(p);
    for v in vectors {
        mean += v;
    }
    mean /= n as f64;

    let mut x = DMatrix::zeros(n, p);
    for (i, v) in vectors.iter().enumerate() {
        x.row_mut(i).copy_from(&(v - &mean).transpose());
    }
    let total_ss = x.norm_squared();
    if total_ss == 0.0 || !total_ss.is_finite() {
        return Err(Error::ZeroVariance("all PCA input vectors are identical".into()));
    }

    // Right singular vectors of the centered data = covariance eigenvectors.
    let svd = x.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));

    let mut pi = DMatrix::zeros(q, p);
    let mut explained_variance = Vec::with_capacity(q);
    for (row, &k) in order.iter().take(q).enumerate() {
        let mut dir = v_t.row(k).clone_owned();
        let (imax, _) = dir
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) });
        if dir[imax] < 0.0 {
            dir = -dir;
        }
        pi.row_mut(row).copy_from(&dir);
        let s = svd.singular_values[k];
        explained_variance.push(s * s / (n - 1) as f64);
    }

    Ok(ProjectionModel {
        pi,
        sample_mean: mean,
        explained_variance,
        fit_corpus_tag: tag.into(),
    })
}

/// ψ = Π·φ.
pub fn project(model: &ProjectionModel, phi: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(model.p(), phi.len())?;
    Ok(&model.pi * phi)
}
