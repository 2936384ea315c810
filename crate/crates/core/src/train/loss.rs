use connex_autodiff::{Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Weights of the per-view losses (`alpha`, `beta`, `gamma`) and of the
/// fused loss (`phi`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub phi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            beta: 0.15,
            gamma: 0.15,
            phi: 0.55,
        }
    }
}

pub const WEIGHT_TOLERANCE: f64 = 1e-9;

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, phi: f64) -> Result<Self> {
        let w = Self {
            alpha,
            beta,
            gamma,
            phi,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.phi];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CoreError::Config(format!("loss weights must be non-negative: {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(CoreError::Config(format!("loss weights sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Weights for a model with `heads` classification heads. Four heads
    /// use all weights; three (no unified view) drop `gamma` and rescale
    /// the rest to sum to 1; a single head gets weight 1.
    pub fn for_heads(&self, heads: usize) -> Result<Vec<f64>> {
        self.validate()?;
        match heads {
            1 => Ok(vec![1.0]),
            3 => {
                let s = self.alpha + self.beta + self.phi;
                if s <= 0.0 {
                    return Err(CoreError::Config(
                        "loss weights leave nothing for a model without the unified view".into(),
                    ));
                }
                Ok(vec![self.alpha / s, self.beta / s, self.phi / s])
            }
            4 => Ok(vec![self.alpha, self.beta, self.gamma, self.phi]),
            n => Err(CoreError::Config(format!("no loss weighting for {n} heads"))),
        }
    }

    /// The built-in grid: each of alpha, beta, gamma in {0.1, 0.15, 0.2},
    /// phi taking the remainder.
    pub fn grid() -> Vec<LossWeights> {
        const VALUES: [f64; 3] = [0.1, 0.15, 0.2];
        let mut out = Vec::with_capacity(27);
        for a in VALUES {
            for b in VALUES {
                for c in VALUES {
                    out.push(LossWeights {
                        alpha: a,
                        beta: b,
                        gamma: c,
                        phi: 1.0 - a - b - c,
                    });
                }
            }
        }
        out
    }
}

/// Weighted sum of per-head cross-entropies. Each term averages over the
/// valid rows only; padded rows contribute nothing.
pub fn joint_loss(
    g: &mut Graph,
    logits: &[NodeId],
    labels: &[u8],
    weights: &[f64],
    valid: &[bool],
) -> Result<NodeId> {
    if logits.len() != weights.len() || logits.is_empty() {
        return Err(CoreError::Config(format!(
            "{} heads but {} loss weights",
            logits.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(CoreError::Config(format!("loss weights {weights:?} do not sum to 1")));
    }
    if labels.len() != valid.len() {
        return Err(CoreError::Parameter("labels and validity mask differ in length".into()));
    }
    if !valid.iter().any(|v| *v) {
        return Err(CoreError::Parameter("batch has no valid rows".into()));
    }
    let mut targets = Tensor::zeros(&[labels.len(), 2]);
    for (r, &l) in labels.iter().enumerate() {
        targets.values_mut()[r * 2 + l as usize] = 1.0;
    }
    let rows: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mut total: Option<NodeId> = None;
    for (&z, &w) in logits.iter().zip(weights) {
        let ce = g.cross_entropy(z, targets.clone(), rows.clone());
        let term = g.scale(ce, w);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    Ok(total.expect("at least one head"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use connex_autodiff::ParamStore;

    #[test]
    fn default_weights_are_valid_and_grid_sums_to_one() {
        LossWeights::default().validate().unwrap();
        let grid = LossWeights::grid();
        assert_eq!(grid.len(), 27);
        for w in grid {
            w.validate().unwrap();
        }
    }

    #[test]
    fn bad_sum_is_a_config_error() {
        assert!(matches!(
            LossWeights::new(0.3, 0.3, 0.3, 0.3),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let zero = g.constant(Tensor::from_rows(&[vec![5.0, -3.0]]));
        let loss = joint_loss(&mut g, &[zero, zero, zero, z], &[1], &[0.0, 0.0, 0.0, 1.0], &[true]).unwrap();
        let v = g.forward(loss, &ParamStore::new()).unwrap().item();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn three_heads_drop_gamma() {
        let w = LossWeights::default().for_heads(3).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[2] / w[0] - 0.55 / 0.15).abs() < 1e-12);
    }
}
