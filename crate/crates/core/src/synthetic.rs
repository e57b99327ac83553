//! Planted-signal experiment corpora for tests, demos and smoke runs.
//!
//! Each arm's CTR is `fe_k + scale·(eᵀw*)/‖w*‖` where `e` is the arm's raw
//! embedding under a [`HashProvider`] and `w*` is a random planted direction.
//! Centering only shifts every arm by the same constant, so the signal is
//! linear in the centered embedding too.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::embedding::HashProvider;
use crate::error::Result;
use crate::ingest::{ArmRecord, ExperimentRecord, ExperimentSet};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_experiments: usize,
    pub min_arms: usize,
    pub max_arms: usize,
    pub impressions: u64,
    /// CTR units per standard deviation of signal.
    pub signal_scale: f64,
    /// Noise standard deviation as a multiple of `signal_scale`.
    pub noise_ratio: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_experiments: 40,
            min_arms: 3,
            max_arms: 6,
            impressions: 1_000_000_000,
            signal_scale: 0.005,
            noise_ratio: 0.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub experiments: ExperimentSet,
    /// Planted direction in raw embedding space, unit norm.
    pub direction: DVector<f64>,
    /// Noise-free CTR per arm, aligned with `experiments`.
    pub true_ctr: Vec<Vec<f64>>,
}

pub fn generate(provider: &HashProvider, spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w = DVector::<f64>::from_fn(provider.dim(), |_, _| rng.sample(StandardNormal));
    let w = w.normalize();
    let noise = Normal::new(0.0, spec.noise_ratio * spec.signal_scale).expect("valid sd");
    let mut experiments = Vec::with_capacity(spec.n_experiments);
    let mut true_ctr = Vec::with_capacity(spec.n_experiments);
    for k in 0..spec.n_experiments {
        let fe = rng.random_range(0.03..0.07);
        let n_arms = rng.random_range(spec.min_arms..=spec.max_arms.max(spec.min_arms));
        let mut arms = Vec::with_capacity(n_arms);
        let mut clean = Vec::with_capacity(n_arms);
        for a in 0..n_arms {
            let text = format!("synthetic copy {k}-{a} variant {}", rng.random::<u32>());
            let e = DVector::from_vec(provider.vector(&text));
            let ctr = fe + spec.signal_scale * e.dot(&w);
            let observed = (ctr + noise.sample(&mut rng)).clamp(0.0, 1.0);
            clean.push(ctr);
            arms.push(ArmRecord {
                arm_id: format!("arm{a}"),
                text,
                impressions: spec.impressions,
                clicks: (observed * spec.impressions as f64).round() as u64,
            });
        }
        experiments.push(ExperimentRecord {
            experiment_id: format!("exp{k:03}"),
            arms,
        });
        true_ctr.push(clean);
    }
    Ok(SyntheticCorpus {
        experiments: ExperimentSet::new(experiments, format!("synthetic-s{}", spec.seed))?,
        direction: w,
        true_ctr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let p = HashProvider::new(8, 1);
        let spec = SyntheticSpec { n_experiments: 5, ..Default::default() };
        let a = generate(&p, &spec).unwrap();
        let b = generate(&p, &spec).unwrap();
        assert_eq!(a.experiments.experiments, b.experiments.experiments);
        for e in &a.experiments.experiments {
            assert!(e.arms.len() >= 3 && e.arms.len() <= 6);
            for arm in &e.arms {
                assert!(arm.clicks <= arm.impressions);
            }
        }
        assert!((a.direction.norm() - 1.0).abs() < 1e-12);
    }
}
