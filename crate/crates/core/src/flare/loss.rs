use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the MLM term; the contrastive term gets `1 - alpha`.
    pub alpha: f64,
    /// Softmax temperature of the contrastive term.
    pub tau: f64,
    /// Additive margin subtracted from each positive pair's logit.
    pub margin: f64,
    pub contrastive_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 0.3,
            margin: 0.2,
            contrastive_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau {} must be positive", self.tau)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "margin {} must be non-negative",
                self.margin
            )));
        }
        Ok(())
    }
}

pub fn loss_total(l_mlm: f64, l_c: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * l_mlm + (1.0 - alpha) * l_c)
}

/// InfoNCE with additive margin: row `i` of `e` is the positive for row `i`
/// of `t`, every other row of `t` a negative.
pub fn contrastive_loss(g: &mut Graph, e: Var, t: Var, tau: f64, margin: f64) -> Result<Var> {
    let n = g.value(e).rows();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs at least one pair".into(),
        ));
    }
    let sim = g.matmul_nt(e, t)?;
    let sim = g.scale(sim, 1.0 / tau);
    let mut shift = Tensor::zeros(n, n);
    for i in 0..n {
        shift.row_mut(i)[i] = -margin;
    }
    let shift = g.constant(shift);
    let logits = g.add(sim, shift)?;
    let labels: Vec<usize> = (0..n).collect();
    g.cross_entropy(logits, &labels, 1.0 / n as f64)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn loss_mlm(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no masked positions".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, labels, 1.0 / labels.len() as f64)?;
    Ok(g.value(loss).item())
}

pub fn loss_contrastive(e: &Tensor, t: &Tensor, tau: f64, margin: f64) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (ev, tv) = (g.constant(e.clone()), g.constant(t.clone()));
    let loss = contrastive_loss(&mut g, ev, tv, tau, margin)?;
    Ok(g.value(loss).item())
}
