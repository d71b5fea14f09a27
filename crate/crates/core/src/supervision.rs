//! Deeply supervised segmentation losses.
//!
//! Each map is scored with a class-weighted binary cross-entropy written as a
//! negative log-likelihood (so it is minimised). The side losses are summed
//! with per-side weights and the fused loss is added on top.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::graph::{weighted_bce_value, Graph, Var};
use crate::mask::{BinaryMask, ProbabilityMap};
use crate::tensor::Tensor;

pub use crate::graph::BCE_EPS;

/// How the crack/background weights of the cross-entropy are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BalanceMode {
    /// Recomputed from every ground-truth mask by [`class_balance`].
    #[default]
    PerBatch,
    /// The same `beta` (crack) and `gamma` (background) for every image.
    Fixed { beta: f64, gamma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of each side loss.
    pub alpha: Vec<f64>,
    pub balance: BalanceMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: alloc::vec![1.0; crate::segnet::SIDES],
            balance: BalanceMode::PerBatch,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidConfig(alloc::format!(
                "side weights must be finite and non-negative, got {:?}",
                self.alpha
            )));
        }
        if let BalanceMode::Fixed { beta, gamma } = self.balance {
            if !(beta.is_finite() && gamma.is_finite() && beta >= 0.0 && gamma >= 0.0) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "class weights must be finite and non-negative, got beta {beta}, gamma {gamma}"
                )));
            }
        }
        Ok(())
    }

    /// `(beta, gamma)` for a given ground truth.
    pub fn balance_for(&self, gt: &BinaryMask) -> (f64, f64) {
        match self.balance {
            BalanceMode::PerBatch => class_balance(gt),
            BalanceMode::Fixed { beta, gamma } => (beta, gamma),
        }
    }
}

/// Loss terms of one prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub side_losses: Vec<f64>,
    pub l_side: f64,
    pub l_fuse: f64,
    pub l_total: f64,
}

/// `(beta, gamma) = (N_neg / N, N_pos / N)`; `(1, 0)` for a crack-free mask.
pub fn class_balance(gt: &BinaryMask) -> (f64, f64) {
    let n = gt.data().len();
    let pos = gt.count();
    if pos == 0 || n == 0 {
        return (1.0, 0.0);
    }
    ((n - pos) as f64 / n as f64, pos as f64 / n as f64)
}

/// Weighted cross-entropy of a probability map against a mask.
pub fn weighted_bce(pred: &ProbabilityMap, gt: &BinaryMask, beta: f64, gamma: f64) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(
            "weighted_bce",
            &[1, gt.height(), gt.width()],
            pred.tensor().shape(),
        ));
    }
    Ok(weighted_bce_value(
        pred.data(),
        &gt.to_tensor().into_data(),
        beta,
        gamma,
    ))
}

/// Graph nodes of [`total_loss_on`].
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub side_losses: Vec<Var>,
    pub l_side: Option<Var>,
    pub l_fuse: Var,
    pub l_total: Var,
}

impl LossNodes {
    pub fn report(&self, g: &Graph<'_>) -> LossReport {
        LossReport {
            side_losses: self.side_losses.iter().map(|&v| g.value(v).item()).collect(),
            l_side: self.l_side.map_or(0.0, |v| g.value(v).item()),
            l_fuse: g.value(self.l_fuse).item(),
            l_total: g.value(self.l_total).item(),
        }
    }
}

/// Records the side, fused and total losses on a graph. Each map is
/// balanced independently under [`BalanceMode::PerBatch`]; since every map
/// is scored against the same mask the weights coincide.
pub fn total_loss_on(
    g: &mut Graph<'_>,
    sides: &[Var],
    fused: Var,
    gt: &BinaryMask,
    weights: &LossWeights,
) -> Result<LossNodes> {
    if sides.len() != weights.alpha.len() {
        return Err(contract!(
            "{} side maps but {} side weights",
            sides.len(),
            weights.alpha.len()
        ));
    }
    let target = gt.to_tensor();
    let (beta, gamma) = weights.balance_for(gt);
    let mut side_losses = Vec::with_capacity(sides.len());
    let mut weighted = Vec::with_capacity(sides.len());
    for (&s, &a) in sides.iter().zip(&weights.alpha) {
        let l = g.weighted_bce(s, &target, beta, gamma)?;
        side_losses.push(l);
        weighted.push(g.scale(l, a));
    }
    let l_side = if weighted.is_empty() {
        None
    } else {
        Some(g.sum(&weighted)?)
    };
    let l_fuse = g.weighted_bce(fused, &target, beta, gamma)?;
    let l_total = match l_side {
        Some(ls) => g.add(ls, l_fuse)?,
        None => l_fuse,
    };
    Ok(LossNodes {
        side_losses,
        l_side,
        l_fuse,
        l_total,
    })
}

/// [`total_loss_on`] for plain maps.
pub fn total_loss(
    sides: &[ProbabilityMap],
    fused: &ProbabilityMap,
    gt: &BinaryMask,
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let side_vars: Vec<Var> = sides.iter().map(|s| g.input(s.tensor().clone())).collect();
    let fused_var = g.input(fused.tensor().clone());
    let nodes = total_loss_on(&mut g, &side_vars, fused_var, gt, weights)?;
    Ok(nodes.report(&g))
}

/// Convenience: a `[1,H,W]` tensor as a probability map.
pub fn as_probability(t: &Tensor) -> Result<ProbabilityMap> {
    ProbabilityMap::new(t.clone())
}
