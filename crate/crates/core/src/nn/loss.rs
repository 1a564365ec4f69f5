//! Scalar losses. Each returns the loss and its gradient w.r.t. the
//! prediction input(s).

use crate::error::{Error, Result};
use crate::nn::ops::sigmoid;
use crate::nn::Tensor;
use crate::scalar::Scalar;

fn same_len<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean absolute error. The subgradient at zero residual is zero.
pub fn mae<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<(S, Tensor<S>)> {
    same_len("mae", pred, target)?;
    let inv = S::one() / S::of(pred.len() as f64);
    let mut loss = S::zero();
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let r = p - t;
            loss += r.abs();
            if r > S::zero() {
                inv
            } else if r < S::zero() {
                -inv
            } else {
                S::zero()
            }
        })
        .collect();
    Ok((loss * inv, Tensor::from_vec(pred.shape(), grad)?))
}

/// Binary cross-entropy on logits, averaged. Targets may be soft, in [0, 1].
pub fn bce_with_logits<S: Scalar>(logits: &Tensor<S>, target: &Tensor<S>) -> Result<(S, Tensor<S>)> {
    same_len("bce_with_logits", logits, target)?;
    let inv = S::one() / S::of(logits.len() as f64);
    let mut loss = S::zero();
    let grad = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&x, &t)| {
            loss += x.max(S::zero()) - x * t + (S::one() + (-x.abs()).exp()).ln();
            (sigmoid(x) - t) * inv
        })
        .collect();
    Ok((loss * inv, Tensor::from_vec(logits.shape(), grad)?))
}

/// Softmax cross-entropy of a single logit vector against a class index.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, class: usize) -> Result<(S, Tensor<S>)> {
    if class >= logits.len() {
        return Err(Error::shape("cross_entropy", logits.shape(), &[class + 1]));
    }
    let m = logits.data().iter().copied().fold(S::neg_infinity(), S::max);
    let z: S = logits.data().iter().map(|&v| (v - m).exp()).sum();
    let lse = m + z.ln();
    let loss = lse - logits.data()[class];
    let mut grad: Vec<S> = logits.data().iter().map(|&v| (v - lse).exp()).collect();
    grad[class] -= S::one();
    Ok((loss.max(S::zero()), Tensor::from_vec(logits.shape(), grad)?))
}

pub struct NtXentGrads<S> {
    pub loss: S,
    pub dz1: Tensor<S>,
    pub dz2: Tensor<S>,
}

/// Normalized temperature-scaled cross-entropy over `2N` views: row `i` of
/// `z1` and row `i` of `z2` are the positive pair, every other row in the
/// batch is a negative. Embeddings are L2-normalized internally.
pub fn nt_xent<S: Scalar>(z1: &Tensor<S>, z2: &Tensor<S>, temperature: f64) -> Result<NtXentGrads<S>> {
    if z1.shape() != z2.shape() || z1.shape().len() != 2 || z1.rows() < 2 {
        return Err(Error::shape("nt_xent", z1.shape(), z2.shape()));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidHyper(format!("temperature {temperature} must be > 0")));
    }
    let (n, d) = (z1.rows(), z1.cols());
    let m = 2 * n;
    let tau = S::of(temperature);
    let eps = S::of(1e-12);

    let mut u = Vec::with_capacity(m * d);
    let mut norms = Vec::with_capacity(m);
    for i in 0..m {
        let row = if i < n { z1.row(i) } else { z2.row(i - n) };
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt().max(eps);
        norms.push(norm);
        u.extend(row.iter().map(|&v| v / norm));
    }

    let mut sim = vec![S::zero(); m * m];
    for i in 0..m {
        for j in 0..m {
            let dot: S = (0..d).map(|k| u[i * d + k] * u[j * d + k]).sum();
            sim[i * m + j] = dot / tau;
        }
    }

    let inv_m = S::one() / S::of(m as f64);
    let mut loss = S::zero();
    // g[i][k] = dloss/dsim[i][k]
    let mut g = vec![S::zero(); m * m];
    for i in 0..m {
        let pos = (i + n) % m;
        let row = &sim[i * m..(i + 1) * m];
        let mx = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .map(|(_, &v)| v)
            .fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for (k, &v) in row.iter().enumerate() {
            if k != i {
                z += (v - mx).exp();
            }
        }
        let lse = mx + z.ln();
        loss += lse - row[pos];
        for (k, &v) in row.iter().enumerate() {
            if k != i {
                g[i * m + k] = (v - lse).exp() * inv_m;
            }
        }
        g[i * m + pos] -= inv_m;
    }

    let mut dz = vec![S::zero(); m * d];
    for i in 0..m {
        let mut du = vec![S::zero(); d];
        for k in 0..m {
            let w = (g[i * m + k] + g[k * m + i]) / tau;
            if w != S::zero() {
                for c in 0..d {
                    du[c] += w * u[k * d + c];
                }
            }
        }
        let ui = &u[i * d..(i + 1) * d];
        let proj: S = ui.iter().zip(&du).map(|(&a, &b)| a * b).sum();
        for c in 0..d {
            dz[i * d + c] = (du[c] - ui[c] * proj) / norms[i];
        }
    }
    let (d1, d2) = dz.split_at(n * d);
    Ok(NtXentGrads {
        loss: loss * inv_m,
        dz1: Tensor::from_vec(&[n, d], d1.to_vec())?,
        dz2: Tensor::from_vec(&[n, d], d2.to_vec())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_of_identical_is_zero() {
        let x = Tensor::<f64>::vector(vec![1.0, -2.0, 3.5]);
        let (l, g) = mae(&x, &x).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bce_at_zero_logit_half_target() {
        let (l, g) = bce_with_logits(&Tensor::<f64>::vector(vec![0.0]), &Tensor::vector(vec![0.5])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g.data()[0], 0.0);
    }

    #[test]
    fn cross_entropy_vanishes_with_gap() {
        let mut prev = f64::INFINITY;
        for gap in [1.0, 5.0, 20.0, 60.0] {
            let mut logits = vec![0.0; 15];
            logits[3] = gap;
            let (l, _) = cross_entropy(&Tensor::<f64>::vector(logits), 3).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn losses_reject_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[3]);
        let b = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(mae(&a, &b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(bce_with_logits(&a, &b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(cross_entropy(&a, 3), Err(Error::ShapeMismatch { .. })));
        let z1 = Tensor::<f64>::zeros(&[4, 3]);
        let z2 = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(nt_xent(&z1, &z2, 0.5), Err(Error::ShapeMismatch { .. })));
    }
}
