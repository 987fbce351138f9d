//! Client-local contrastive training: triplet mining over the client's own
//! database, the margin triplet loss, the local optimizer and feature
//! augmentation.

mod augment;
mod local;
mod mining;

pub use augment::{apply_augmentation, client_jitter, AugmentMode, AugmentSpec, APPLY_PROBABILITY};
pub use local::{local_train, planned_iterations, LocalConfig, LocalStats, LocalTrainer};
pub use mining::{
    mine_negatives, mine_positive, random_negatives, restrict_mining_pool, NegativeSelection,
    Ranked,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::SampleId;
use crate::model::Descriptors;

/// A mined training triplet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub query: SampleId,
    pub positive: SampleId,
    pub negatives: Vec<SampleId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolRestriction {
    pub max_sequences: usize,
    pub images_per_sequence: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeStrategy {
    /// Nearest negatives in descriptor space.
    #[default]
    Hard,
    /// Uniform draws from the negative set.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Positive radius in meters.
    pub tau: f64,
    /// Minimum distance of a negative in meters.
    pub tau_neg: f64,
    pub margin: f64,
    pub n_neg: usize,
    pub pool_restriction: Option<PoolRestriction>,
    pub negatives: NegativeStrategy,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            tau: 25.0,
            tau_neg: 25.0,
            margin: 0.1,
            n_neg: 5,
            pool_restriction: None,
            negatives: NegativeStrategy::Hard,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        crate::geo::validate_thresholds(self.tau, self.tau_neg)
            .map_err(|e| Error::config(e.to_string()))?;
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config("margin must be finite and >= 0"));
        }
        if self.n_neg == 0 {
            return Err(Error::config("n_neg must be >= 1"));
        }
        if let Some(r) = self.pool_restriction {
            if r.max_sequences == 0 || r.images_per_sequence == 0 {
                return Err(Error::config("pool restriction fields must be >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalOptimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalTrainConfig {
    /// Triplets per optimizer step.
    pub batch_triplets: usize,
    pub lr: f64,
    pub optimizer: LocalOptimizer,
    /// Cap on the one-epoch iteration count.
    pub max_local_iterations: usize,
    /// Overrides the epoch rule with an exact iteration count.
    pub fixed_iterations: Option<usize>,
    pub seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        LocalTrainConfig {
            batch_triplets: 2,
            lr: 1e-5,
            optimizer: LocalOptimizer::Adam,
            max_local_iterations: 2500,
            fixed_iterations: None,
            seed: 0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_triplets == 0 {
            return Err(Error::config("batch_triplets must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("local lr must be > 0"));
        }
        Ok(())
    }
}

/// `max(d_qp^2 - d_qn^2 + m, 0)`.
pub fn triplet_loss(d_qp: f64, d_qn: f64, margin: f64) -> f64 {
    (d_qp * d_qp - d_qn * d_qn + margin).max(0.0)
}

/// Row indices of one triplet inside a descriptor matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletRows {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Batch objective and its gradient with respect to every descriptor row.
///
/// Each triplet contributes the sum of its per-negative hinge terms; the
/// batch value is the mean over triplets.
pub fn triplet_objective(
    desc: &Descriptors,
    triplets: &[TripletRows],
    margin: f64,
) -> (f64, Descriptors) {
    let dim = desc.dim();
    let mut grad = vec![vec![0.0; dim]; desc.len()];
    if triplets.is_empty() {
        return (0.0, Descriptors::from_rows(&grad).expect("uniform rows"));
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut total = 0.0;
    for t in triplets {
        let q = desc.row(t.query);
        let p = desc.row(t.positive);
        let d_qp2 = crate::model::squared_distance(q, p);
        for &ni in &t.negatives {
            let n = desc.row(ni);
            let d_qn2 = crate::model::squared_distance(q, n);
            let hinge = d_qp2 - d_qn2 + margin;
            if hinge <= 0.0 {
                continue;
            }
            total += hinge;
            for k in 0..dim {
                // d/dq = 2(n - p), d/dp = -2(q - p), d/dn = 2(q - n)
                grad[t.query][k] += scale * 2.0 * (n[k] - p[k]);
                grad[t.positive][k] -= scale * 2.0 * (q[k] - p[k]);
                grad[ni][k] += scale * 2.0 * (q[k] - n[k]);
            }
        }
    }
    (
        total * scale,
        Descriptors::from_rows(&grad).expect("uniform rows"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, init_params, Activation, EmbedderSpec, ParamVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_distances_give_the_margin() {
        for m in [0.0, 0.1, 0.5] {
            assert_eq!(triplet_loss(0.7, 0.7, m), m);
        }
    }

    #[test]
    fn far_negatives_give_zero() {
        assert_eq!(triplet_loss(0.2, 1.0, 0.1), 0.0);
        // d_qn^2 = d_qp^2 + m exactly
        assert_eq!(triplet_loss(0.0, 0.5, 0.25), 0.0);
    }

    #[test]
    fn hand_arithmetic_case() {
        // 0.25 - 0.36 + 0.1 = -0.01 -> 0
        assert_eq!(triplet_loss(0.5, 0.6, 0.1), 0.0);
        assert!((triplet_loss(0.6, 0.5, 0.1) - 0.21).abs() < 1e-15);
    }

    #[test]
    fn mining_config_validation() {
        assert!(MiningConfig::default().validate().is_ok());
        let mut c = MiningConfig {
            n_neg: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.n_neg = 5;
        c.tau_neg = 10.0;
        assert!(c.validate().is_err());
        c.tau_neg = 25.0;
        c.pool_restriction = Some(PoolRestriction {
            max_sequences: 0,
            images_per_sequence: 3,
        });
        assert!(c.validate().is_err());
    }

    fn rows(rng: &mut ChaCha8Rng, n: usize, f: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..f).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    /// Objective through the embedder versus central finite differences.
    pub(crate) fn objective_gradient_error(s: &EmbedderSpec, seed: u64, margin: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = init_params(s, seed).unwrap();
        let x = rows(&mut rng, 8, s.input_dim);
        let triplets = vec![
            TripletRows {
                query: 0,
                positive: 1,
                negatives: vec![2, 3, 4],
            },
            TripletRows {
                query: 5,
                positive: 6,
                negatives: vec![7, 1],
            },
        ];
        let f = |q: &ParamVector| {
            let d = model::forward(q, s, &x).unwrap();
            triplet_objective(&d, &triplets, margin).0
        };
        let trace = model::forward_trace(&p, s, &x).unwrap();
        let (_, up) = triplet_objective(trace.output(), &triplets, margin);
        let g = model::backward_from_trace(&p, s, &trace, &up).unwrap();
        let h = 1e-5;
        let mut num = vec![0.0; p.len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let mut a = p.clone();
            a.values_mut()[i] += h;
            let mut b = p.clone();
            b.values_mut()[i] -= h;
            *slot = (f(&a) - f(&b)) / (2.0 * h);
        }
        let diff: f64 = num
            .iter()
            .zip(g.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt()
            + g.values().iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / norm.max(1e-12)
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let s = EmbedderSpec {
            input_dim: 6,
            hidden_dims: vec![7],
            output_dim: 4,
            activation: Activation::Tanh,
            l2_normalize: true,
        };
        // A large margin keeps every hinge active, away from its kink.
        let err = objective_gradient_error(&s, 21, 2.0);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn empty_batch_has_zero_objective() {
        let d = Descriptors::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (l, g) = triplet_objective(&d, &[], 0.1);
        assert_eq!(l, 0.0);
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
    }
}
