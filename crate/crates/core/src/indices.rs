//! Insight contributions, importance/expression/opportunity ranks and the
//! novelty index.
//!
//! Two rank conventions are used on purpose. Importance and expression rank
//! descending (rank 1 = largest), so a small opportunity value marks an
//! important attribute that the variants barely express. Inside the novelty
//! index both terms rank ascending, so a small value marks an attribute that
//! is rare both now and historically.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeDictionary;
use crate::error::{check_dim, Error, Result};
use crate::impact::min_norm_coefficients;
use crate::ranking::{fractional_ranks, RankOrder};

pub const DEFAULT_IMPACT_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub fn of(coefficient: f64) -> Self {
        if coefficient > 0.0 {
            Polarity::Positive
        } else if coefficient < 0.0 {
            Polarity::Negative
        } else {
            Polarity::Neutral
        }
    }

    /// "helps" / "hurts" as used in narrated headers.
    pub fn verb(self) -> &'static str {
        match self {
            Polarity::Positive => "helps",
            Polarity::Negative => "hurts",
            Polarity::Neutral => "is neutral",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightContribution {
    pub attribute: String,
    pub delta_score: f64,
    pub contribution: f64,
    pub polarity: Polarity,
}

/// (s_i − s_j) ⊙ β″, one entry per attribute.
pub fn insight_contributions(
    names: &[String],
    s_i: &DVector<f64>,
    s_j: &DVector<f64>,
    beta_dprime: &DVector<f64>,
) -> Result<Vec<InsightContribution>> {
    check_dim(beta_dprime.len(), s_i.len())?;
    check_dim(beta_dprime.len(), s_j.len())?;
    check_dim(beta_dprime.len(), names.len())?;
    Ok((0..beta_dprime.len())
        .map(|a| {
            let delta = s_i[a] - s_j[a];
            InsightContribution {
                attribute: names[a].clone(),
                delta_score: delta,
                contribution: delta * beta_dprime[a],
                polarity: Polarity::of(beta_dprime[a]),
            }
        })
        .collect())
}

/// R^Imp: rank 1 = largest coefficient.
pub fn importance_ranks(beta_dprime: &DVector<f64>) -> Vec<f64> {
    fractional_ranks(beta_dprime.as_slice(), RankOrder::Descending)
}

/// How per-arm scores are collapsed to one expression value per attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpressionBasis {
    #[default]
    Max,
    Mean,
}

impl std::str::FromStr for ExpressionBasis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Validation(format!("unknown expression basis `{other}`"))),
        }
    }
}

/// Per-attribute max (or mean) of the arms' scores.
pub fn expression_values(scores: &[DVector<f64>], basis: ExpressionBasis) -> Result<DVector<f64>> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Validation("expression needs at least one arm".into()))?;
    let m = first.len();
    let mut out = first.clone();
    for s in &scores[1..] {
        check_dim(m, s.len())?;
        match basis {
            ExpressionBasis::Max => {
                for a in 0..m {
                    out[a] = out[a].max(s[a]);
                }
            }
            ExpressionBasis::Mean => out += s,
        }
    }
    if basis == ExpressionBasis::Mean {
        out /= scores.len() as f64;
    }
    Ok(out)
}

/// R^Exp: rank 1 = most expressed attribute.
pub fn expression_ranks(scores: &[DVector<f64>], basis: ExpressionBasis) -> Result<Vec<f64>> {
    let values = expression_values(scores, basis)?;
    Ok(fractional_ranks(values.as_slice(), RankOrder::Descending))
}

/// R^Opp = R^Imp − R^Exp. Smaller is a better opportunity.
pub fn opportunity_index(r_imp: &[f64], r_exp: &[f64]) -> Result<Vec<f64>> {
    check_dim(r_imp.len(), r_exp.len())?;
    Ok(r_imp.iter().zip(r_exp).map(|(i, e)| i - e).collect())
}

/// R^Novel = ascending rank of current expression + ascending rank of the
/// historical mean score.
pub fn novelty_index(current: &DVector<f64>, history_means: &DVector<f64>) -> Result<Vec<f64>> {
    check_dim(current.len(), history_means.len())?;
    let a = fractional_ranks(current.as_slice(), RankOrder::Ascending);
    let b = fractional_ranks(history_means.as_slice(), RankOrder::Ascending);
    Ok(a.iter().zip(&b).map(|(x, y)| x + y).collect())
}

/// Mean attribute score over every historical arm.
pub fn history_means(history_scores: &[DVector<f64>]) -> Result<DVector<f64>> {
    expression_values(history_scores, ExpressionBasis::Mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpportunityRanking {
    pub attributes: Vec<String>,
    pub importance: Vec<f64>,
    pub expression: Vec<f64>,
    pub opportunity: Vec<f64>,
    pub novelty: Option<Vec<f64>>,
    /// The per-attribute values R^Exp was computed from.
    pub expression_values: Vec<f64>,
}

pub fn opportunity_ranking(
    names: &[String],
    beta_dprime: &DVector<f64>,
    scores: &[DVector<f64>],
    basis: ExpressionBasis,
    history: Option<&DVector<f64>>,
) -> Result<OpportunityRanking> {
    check_dim(beta_dprime.len(), names.len())?;
    let values = expression_values(scores, basis)?;
    check_dim(beta_dprime.len(), values.len())?;
    let importance = importance_ranks(beta_dprime);
    let expression = fractional_ranks(values.as_slice(), RankOrder::Descending);
    let opportunity = opportunity_index(&importance, &expression)?;
    let novelty = history.map(|h| novelty_index(&values, h)).transpose()?;
    Ok(OpportunityRanking {
        attributes: names.to_vec(),
        importance,
        expression,
        opportunity,
        novelty,
        expression_values: values.iter().copied().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStatus {
    Selected,
    /// No attribute has a strictly positive coefficient.
    NoOpportunity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingAttributes {
    /// Attribute indices, best opportunity first.
    pub indices: Vec<usize>,
    pub status: SelectionStatus,
}

/// Positive-impact attributes above `impact_floor·max|β″|`, ordered by R^Opp
/// ascending (ties: larger β″ first), truncated to `k`. Short lists are
/// topped up with the remaining positive attributes by descending β″.
pub fn select_missing_attributes(
    beta_dprime: &DVector<f64>,
    scores: &[DVector<f64>],
    basis: ExpressionBasis,
    impact_floor: f64,
    k: usize,
) -> Result<MissingAttributes> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&impact_floor) {
        return Err(Error::Validation(format!("impact floor must be in [0, 1], got {impact_floor}")));
    }
    let values = expression_values(scores, basis)?;
    check_dim(beta_dprime.len(), values.len())?;
    let r_opp = opportunity_index(
        &importance_ranks(beta_dprime),
        &fractional_ranks(values.as_slice(), RankOrder::Descending),
    )?;

    let positive: Vec<usize> = (0..beta_dprime.len()).filter(|a| beta_dprime[*a] > 0.0).collect();
    if positive.is_empty() {
        return Ok(MissingAttributes {
            indices: Vec::new(),
            status: SelectionStatus::NoOpportunity,
        });
    }
    let floor = impact_floor * beta_dprime.amax();
    let (mut kept, mut dropped): (Vec<usize>, Vec<usize>) =
        positive.into_iter().partition(|a| beta_dprime[*a].abs() >= floor);
    kept.sort_by(|a, b| {
        r_opp[*a]
            .total_cmp(&r_opp[*b])
            .then(beta_dprime[*b].total_cmp(&beta_dprime[*a]))
            .then(a.cmp(b))
    });
    kept.truncate(k);
    if kept.len() < k {
        dropped.sort_by(|a, b| beta_dprime[*b].total_cmp(&beta_dprime[*a]).then(a.cmp(b)));
        kept.extend(dropped.into_iter().take(k - kept.len()));
    }
    Ok(MissingAttributes {
        indices: kept,
        status: SelectionStatus::Selected,
    })
}

/// Split of a predicted gap φ_iᵀβ′ − φ_jᵀβ′ into the part carried by the
/// attribute space and the part carried by its orthogonal complement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapDecomposition {
    /// (Δs)ᵀβ″ with the unconstrained (pseudo-inverse) β″.
    pub explained: f64,
    /// (Δφ̃)ᵀβ′, φ̃ = φ minus its projection onto the rows of V.
    pub residual: f64,
    /// Δφᵀβ′.
    pub total: f64,
}

pub fn decompose_gap(
    dict: &AttributeDictionary,
    beta_prime: &DVector<f64>,
    phi_i: &DVector<f64>,
    phi_j: &DVector<f64>,
) -> Result<GapDecomposition> {
    check_dim(dict.p(), phi_i.len())?;
    check_dim(dict.p(), phi_j.len())?;
    let beta_dprime = min_norm_coefficients(dict, beta_prime)?;
    let delta = phi_i - phi_j;
    let ds = &dict.v * &delta;
    // Vᵀ(Vᵀ)⁺ projects onto the row space of V, rank deficient or not
    let in_span = dict.v.transpose() * min_norm_coefficients(dict, &delta)?;
    let residual_vec = &delta - in_span;
    Ok(GapDecomposition {
        explained: ds.dot(&beta_dprime),
        residual: residual_vec.dot(beta_prime),
        total: delta.dot(beta_prime),
    })
}
