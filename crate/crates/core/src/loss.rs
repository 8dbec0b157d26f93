//! Multi-Similarity loss with hard pair mining.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Matrix};

/// Tolerance on the unit norm of batch descriptors.
pub const BATCH_UNIT_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsParams {
    /// Positive-pair scale.
    pub alpha: f64,
    /// Negative-pair scale.
    pub beta: f64,
    /// Similarity offset.
    pub lambda: f64,
    /// Mining margin.
    pub epsilon: f64,
}

impl Default for MsParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            lambda: 1.0,
            epsilon: 0.1,
        }
    }
}

impl MsParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ms.alpha", self.alpha),
            ("ms.beta", self.beta),
            ("ms.lambda", self.lambda),
            ("ms.epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Descriptors of `P` places with `K` images each.
#[derive(Clone, Debug)]
pub struct Batch {
    pub descriptors: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(descriptors: Matrix, labels: Vec<usize>) -> Result<Self> {
        if descriptors.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} descriptors but {} labels",
                descriptors.rows(),
                labels.len()
            )));
        }
        for i in 0..descriptors.rows() {
            let n = norm(descriptors.row(i));
            if (n - 1.0).abs() > BATCH_UNIT_TOL {
                return Err(Error::invalid(format!("batch descriptor {i} has norm {n}")));
            }
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in &labels {
            *counts.entry(l).or_default() += 1;
        }
        let mut sizes = counts.values();
        if let Some(&k) = sizes.next() {
            if sizes.any(|&c| c != k) {
                return Err(Error::invalid("batch is not place-balanced"));
            }
        }
        Ok(Self { descriptors, labels })
    }
}

/// Cosine similarities between all descriptor pairs, kept in `f64`.
pub fn similarity_matrix(descriptors: &Matrix) -> Matrix<f64> {
    let n = descriptors.rows();
    let mut s = Matrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(descriptors.row(i), descriptors.row(j));
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    s
}

/// `dL/dG = (dS + dSᵀ)·G` for `S = G·Gᵀ`.
pub fn similarity_backward(descriptors: &Matrix, d_sim: &Matrix<f64>) -> Matrix {
    let (n, d) = descriptors.shape();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let mut acc = vec![0.0f64; d];
        for j in 0..n {
            let w = d_sim.get(i, j) + d_sim.get(j, i);
            if w != 0.0 {
                for (a, &x) in acc.iter_mut().zip(descriptors.row(j)) {
                    *a += w * x as f64;
                }
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(acc) {
            *o = a as f32;
        }
    }
    out
}

/// Selected pair indices for every anchor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MinedPairs {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl MinedPairs {
    pub fn is_empty(&self) -> bool {
        self.positives.iter().all(Vec::is_empty) && self.negatives.iter().all(Vec::is_empty)
    }

    pub fn count(&self) -> usize {
        self.positives.iter().chain(&self.negatives).map(Vec::len).sum()
    }
}

/// Keeps negative `n` of anchor `i` if `S_in > min_p S_ip − ε` and positive
/// `p` if `S_ip < max_n S_in + ε`. Anchors without positives get empty sets.
pub fn mine_pairs<L: PartialEq>(sim: &Matrix<f64>, labels: &[L], epsilon: f64) -> Result<MinedPairs> {
    let n = labels.len();
    if sim.shape() != (n, n) {
        return Err(Error::Shape {
            op: "mine_pairs",
            left: sim.shape(),
            right: (n, n),
        });
    }
    let mut mined = MinedPairs {
        positives: vec![Vec::new(); n],
        negatives: vec![Vec::new(); n],
    };
    for i in 0..n {
        let mut min_pos = f64::INFINITY;
        let mut max_neg = f64::NEG_INFINITY;
        for j in (0..n).filter(|&j| j != i) {
            let s = sim.get(i, j);
            if labels[j] == labels[i] {
                min_pos = min_pos.min(s);
            } else {
                max_neg = max_neg.max(s);
            }
        }
        if min_pos == f64::INFINITY {
            continue;
        }
        for j in (0..n).filter(|&j| j != i) {
            let s = sim.get(i, j);
            if labels[j] == labels[i] {
                if s < max_neg + epsilon {
                    mined.positives[i].push(j);
                }
            } else if s > min_pos - epsilon {
                mined.negatives[i].push(j);
            }
        }
    }
    Ok(mined)
}

#[derive(Clone, Debug)]
pub struct MsLoss {
    pub loss: f64,
    /// `dL/dS`, nonzero only at mined pairs.
    pub d_sim: Matrix<f64>,
}

/// `log(1 + Σ exp(x))`, evaluated stably.
fn softplus_sum(xs: &[f64]) -> (f64, Vec<f64>) {
    let max = xs.iter().copied().fold(0.0f64, f64::max);
    let shifted: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let denom = (-max).exp() + shifted.iter().sum::<f64>();
    let value = max + denom.ln();
    let weights = shifted.iter().map(|e| e / denom).collect();
    (value, weights)
}

/// Multi-Similarity loss averaged over all `N` anchors:
///
/// ```text
/// L = 1/N Σ_i [ 1/α · log(1 + Σ_{p∈P_i} exp(−α(S_ip − λ)))
///             + 1/β · log(1 + Σ_{n∈N_i} exp( β(S_in − λ))) ]
/// ```
pub fn ms_loss(sim: &Matrix<f64>, mined: &MinedPairs, p: &MsParams) -> MsLoss {
    let n = sim.rows();
    let mut d_sim = Matrix::<f64>::zeros(n, n);
    let mut loss = 0.0;
    let inv_n = 1.0 / n.max(1) as f64;
    for i in 0..n {
        let pos = &mined.positives[i];
        if !pos.is_empty() {
            let xs: Vec<f64> = pos.iter().map(|&j| -p.alpha * (sim.get(i, j) - p.lambda)).collect();
            let (v, w) = softplus_sum(&xs);
            loss += v / p.alpha;
            for (&j, wj) in pos.iter().zip(w) {
                d_sim.set(i, j, d_sim.get(i, j) - wj * inv_n);
            }
        }
        let neg = &mined.negatives[i];
        if !neg.is_empty() {
            let xs: Vec<f64> = neg.iter().map(|&j| p.beta * (sim.get(i, j) - p.lambda)).collect();
            let (v, w) = softplus_sum(&xs);
            loss += v / p.beta;
            for (&j, wj) in neg.iter().zip(w) {
                d_sim.set(i, j, d_sim.get(i, j) + wj * inv_n);
            }
        }
    }
    MsLoss {
        loss: loss * inv_n,
        d_sim,
    }
}

/// Mines, evaluates the loss and maps its gradient back to the descriptors.
pub fn batch_loss(batch: &Batch, p: &MsParams) -> Result<(f64, Matrix, MinedPairs)> {
    let sim = similarity_matrix(&batch.descriptors);
    let mined = mine_pairs(&sim, &batch.labels, p.epsilon)?;
    let out = ms_loss(&sim, &mined, p);
    let d_desc = similarity_backward(&batch.descriptors, &out.d_sim);
    Ok((out.loss, d_desc, mined))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_extremes() {
        let g = Matrix::from_rows(&[vec![1.0f32, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let s = similarity_matrix(&g);
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(0, 2), -1.0);
        let same = Matrix::from_rows(&[vec![0.6f32, 0.8], vec![0.6, 0.8]]).unwrap();
        assert!(similarity_matrix(&same).data().iter().all(|&x| (x - 1.0).abs() < 1e-6));
    }

    #[test]
    fn separated_batch_mines_nothing() {
        // positives at 1, negatives at −1
        let g = Matrix::from_rows(&[vec![1.0f32, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let s = similarity_matrix(&g);
        let mined = mine_pairs(&s, &[0, 0, 1, 1], 0.1).unwrap();
        assert!(mined.is_empty());
        let out = ms_loss(&s, &mined, &MsParams::default());
        assert_eq!(out.loss, 0.0);
        assert!(out.d_sim.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn violating_negative_is_selected() {
        let mut s = Matrix::<f64>::identity(4);
        // anchor 0: positive 1 at 0.5, negatives 2 at 0.7 and 3 at −0.5
        for (i, j, v) in [
            (0, 1, 0.5),
            (0, 2, 0.7),
            (0, 3, -0.5),
            (1, 2, -0.9),
            (1, 3, -0.9),
            (2, 3, 0.9),
        ] {
            s.set(i, j, v);
            s.set(j, i, v);
        }
        let mined = mine_pairs(&s, &[0, 0, 1, 1], 0.1).unwrap();
        assert_eq!(mined.negatives[0], vec![2]);
        assert_eq!(mined.positives[0], vec![1]);
    }

    #[test]
    fn anchor_without_positive_is_skipped() {
        let s = Matrix::<f64>::identity(3);
        let mined = mine_pairs(&s, &[0, 1, 2], 0.1).unwrap();
        assert!(mined.is_empty());
    }

    #[test]
    fn single_positive_at_offset_contributes_log_two() {
        let mut s = Matrix::<f64>::identity(2);
        s.set(0, 1, 1.0);
        s.set(1, 0, 1.0);
        let mined = MinedPairs {
            positives: vec![vec![1], vec![]],
            negatives: vec![vec![], vec![]],
        };
        let p = MsParams::default();
        let out = ms_loss(&s, &mined, &p);
        assert!((out.loss - 2f64.ln() / p.alpha / 2.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_signs() {
        let mut s = Matrix::<f64>::identity(4);
        for (i, j, v) in [
            (0, 1, 0.2),
            (0, 2, 0.4),
            (0, 3, 0.1),
            (1, 2, 0.3),
            (1, 3, 0.5),
            (2, 3, 0.0),
        ] {
            s.set(i, j, v);
            s.set(j, i, v);
        }
        let labels = [0, 0, 1, 1];
        let mined = mine_pairs(&s, &labels, 0.1).unwrap();
        let out = ms_loss(&s, &mined, &MsParams::default());
        for i in 0..4 {
            for &p in &mined.positives[i] {
                assert!(out.d_sim.get(i, p) < 0.0);
            }
            for &n in &mined.negatives[i] {
                assert!(out.d_sim.get(i, n) > 0.0);
            }
        }
        assert!(out.loss > 0.0);
    }

    #[test]
    fn batch_validation() {
        let g = Matrix::from_rows(&[vec![1.0f32, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(Batch::new(g.clone(), vec![0, 0, 1]).is_err());
        assert!(Batch::new(g, vec![0, 1, 2]).is_ok());
        let bad = Matrix::from_rows(&[vec![2.0f32, 0.0]]).unwrap();
        assert!(Batch::new(bad, vec![0]).is_err());
    }
}
