//! Diagonal Gaussian posteriors and the two group-aggregation rules.
//!
//! Everything here exists twice: as plain functions over [`DiagGaussian`]
//! values, and as graph builders over rows of a batch ([`GaussianRows`]) so
//! the same formulas can be differentiated inside the objective.

use std::f64::consts::PI;

use crate::tensor::{Graph, NodeId, ReduceKind, Tensor, TensorError};
use crate::{Error, Result};

/// Lower bound applied to every variance produced by a network.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(TensorError::Dimension {
                op: "DiagGaussian",
                axis: 0,
                expected: mean.len(),
                found: variance.len(),
            }
            .into());
        }
        if let Some(v) = variance
            .iter()
            .find(|&&v| v.is_nan() || v < VARIANCE_FLOOR || v.is_infinite())
        {
            return Err(Error::Contract(format!(
                "variance {v} below floor {VARIANCE_FLOOR}"
            )));
        }
        Ok(DiagGaussian { mean, variance })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn precision(&self) -> Vec<f64> {
        self.variance.iter().map(|v| 1.0 / v).collect()
    }

    /// `KL(self ‖ N(0, I))`.
    pub fn kl_to_standard(&self) -> f64 {
        0.5 * self
            .mean
            .iter()
            .zip(&self.variance)
            .map(|(m, v)| m * m + v - v.ln() - 1.0)
            .sum::<f64>()
    }

    /// `mean + sqrt(variance) * noise`.
    pub fn reparam_sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        check_len("reparam_sample", self.dim(), noise.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.variance)
            .zip(noise)
            .map(|((m, v), e)| m + v.sqrt() * e)
            .collect())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_len("log_density", self.dim(), x.len())?;
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((x, m), v)| -0.5 * (x - m).powi(2) / v - 0.5 * (2.0 * PI * v).ln())
            .sum())
    }
}

fn check_len(op: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(TensorError::Dimension {
            op,
            axis: 0,
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

/// `log N(x; x_hat, I)`.
pub fn recon_log_density(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    check_len("recon_log_density", x.len(), x_hat.len())?;
    let sq: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(-0.5 * sq - 0.5 * x.len() as f64 * (2.0 * PI).ln())
}

fn check_members(members: &[DiagGaussian]) -> Result<usize> {
    let first = members
        .first()
        .ok_or_else(|| Error::Contract("aggregation over an empty member list".into()))?;
    for m in &members[1..] {
        check_len("aggregate", first.dim(), m.dim())?;
    }
    Ok(first.dim())
}

/// Plain average of member means and of member variances.
pub fn aggregate_average(members: &[DiagGaussian]) -> Result<DiagGaussian> {
    let dim = check_members(members)?;
    let k = members.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut variance = vec![0.0; dim];
    for m in members {
        for i in 0..dim {
            mean[i] += m.mean[i];
            variance[i] += m.variance[i];
        }
    }
    mean.iter_mut().for_each(|v| *v /= k);
    variance.iter_mut().for_each(|v| *v /= k);
    Ok(DiagGaussian { mean, variance })
}

/// Normalized product of member densities: precisions add, the mean is the
/// precision-weighted average of member means.
pub fn aggregate_product(members: &[DiagGaussian]) -> Result<DiagGaussian> {
    let dim = check_members(members)?;
    let mut precision = vec![0.0; dim];
    let mut weighted = vec![0.0; dim];
    for m in members {
        for i in 0..dim {
            let p = 1.0 / m.variance[i];
            precision[i] += p;
            weighted[i] += m.mean[i] * p;
        }
    }
    let mean = weighted
        .iter()
        .zip(&precision)
        .map(|(w, p)| w / p)
        .collect();
    let variance = precision
        .iter()
        .map(|p| (1.0 / p).max(VARIANCE_FLOOR))
        .collect();
    Ok(DiagGaussian { mean, variance })
}

/// Batched Gaussians inside a graph: row `r` of `mean`/`variance` is one
/// distribution.
#[derive(Debug, Clone, Copy)]
pub struct GaussianRows {
    pub mean: NodeId,
    pub variance: NodeId,
}

impl GaussianRows {
    pub fn rows(&self, graph: &Graph) -> Vec<DiagGaussian> {
        let m = graph.value(self.mean);
        let v = graph.value(self.variance);
        let cols = m.shape()[1];
        m.data()
            .chunks(cols)
            .zip(v.data().chunks(cols))
            .map(|(m, v)| DiagGaussian {
                mean: m.to_vec(),
                variance: v.to_vec(),
            })
            .collect()
    }
}

/// Sum over all rows of `KL(q_r ‖ N(0, I))`.
pub fn kl_to_standard_sum(graph: &mut Graph, q: GaussianRows) -> Result<NodeId> {
    let m2 = graph.square(q.mean);
    let lv = graph.ln(q.variance);
    let a = graph.add(m2, q.variance)?;
    let b = graph.sub(a, lv)?;
    let s = graph.sum(b);
    let n = graph.value(q.mean).len() as f64;
    let s = graph.offset(s, -n);
    Ok(graph.scale(s, 0.5))
}

pub fn reparam_rows(graph: &mut Graph, q: GaussianRows, noise: Tensor) -> Result<NodeId> {
    let eps = graph.constant(noise);
    let sd = graph.sqrt(q.variance);
    let scaled = graph.mul(sd, eps)?;
    Ok(graph.add(q.mean, scaled)?)
}

/// Sum over rows of `log N(x_r; x_hat_r, I)`, with `x` a constant.
pub fn recon_log_density_sum(graph: &mut Graph, x: NodeId, x_hat: NodeId) -> Result<NodeId> {
    let diff = graph.sub(x, x_hat)?;
    let sq = graph.square(diff);
    let s = graph.sum(sq);
    let s = graph.scale(s, -0.5);
    let n = graph.value(x).len() as f64;
    Ok(graph.offset(s, -0.5 * n * (2.0 * PI).ln()))
}

/// Averages consecutive blocks of `group` member rows.
pub fn aggregate_average_rows(
    graph: &mut Graph,
    members: GaussianRows,
    group: usize,
) -> Result<GaussianRows> {
    Ok(GaussianRows {
        mean: graph.group_rows(members.mean, group, ReduceKind::Mean)?,
        variance: graph.group_rows(members.variance, group, ReduceKind::Mean)?,
    })
}

/// Product aggregation over consecutive blocks of `group` rows, given member
/// means and member precisions.
pub fn aggregate_product_rows(
    graph: &mut Graph,
    means: NodeId,
    precisions: NodeId,
    group: usize,
) -> Result<GaussianRows> {
    let total = graph.group_rows(precisions, group, ReduceKind::Sum)?;
    let weighted = graph.mul(means, precisions)?;
    let weighted = graph.group_rows(weighted, group, ReduceKind::Sum)?;
    let mean = graph.div(weighted, total)?;
    let variance = graph.recip(total);
    let variance = graph.clamp(variance, VARIANCE_FLOOR, f64::INFINITY);
    Ok(GaussianRows { mean, variance })
}
