//! Batch normalization kernels.
//!
//! Works on `[B,C,H,W]` (per channel) and `[B,F]` (per feature). Training
//! normalizes with biased batch variance and updates running statistics
//! with the unbiased estimate; evaluation normalizes with the running
//! statistics.

use crate::{Error, Real, Result, Tensor};

/// Layout of a normalized tensor: elements of channel `c` live at
/// `(bo * channels + c) * inner + i`.
struct BnLayout {
    outer: usize,
    channels: usize,
    inner: usize,
}

fn layout<T: Real>(x: &Tensor<T>, features: usize) -> Result<BnLayout> {
    let s = x.shape();
    let (outer, channels, inner) = match s.len() {
        2 => (s[0], s[1], 1),
        4 => (s[0], s[1], s[2] * s[3]),
        _ => {
            return Err(Error::invalid(
                "batch_norm",
                format!("expected 2-d or 4-d input, got {:?}", s),
            ))
        }
    };
    if channels != features {
        return Err(Error::ShapeMismatch {
            op: "batch_norm features",
            lhs: s.to_vec(),
            rhs: vec![features],
        });
    }
    Ok(BnLayout {
        outer,
        channels,
        inner,
    })
}

/// Per-channel context saved by the training forward pass.
#[derive(Clone)]
pub struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub invstd: Vec<T>,
}

/// Biased batch statistics, exposed so the owner of the layer can update
/// its running buffers.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel in this batch.
    pub count: usize,
}

pub fn bn_train_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnSaved<T>, BnBatchStats<T>)> {
    let lay = layout(x, gamma.numel())?;
    let (outer, c, inner) = (lay.outer, lay.channels, lay.inner);
    let n = outer * inner;
    if n < 2 {
        return Err(Error::invalid(
            "batch_norm",
            format!("training statistics need at least 2 elements per channel, got {}", n),
        ));
    }
    let xd = x.data();
    let inv_n = T::from_f64(1.0 / n as f64);
    let epst = T::from_f64(eps);

    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = T::zero();
        for bo in 0..outer {
            let base = (bo * c + ci) * inner;
            for i in 0..inner {
                acc += xd[base + i];
            }
        }
        mean[ci] = acc * inv_n;
        let mut v = T::zero();
        for bo in 0..outer {
            let base = (bo * c + ci) * inner;
            for i in 0..inner {
                let d = xd[base + i] - mean[ci];
                v += d * d;
            }
        }
        var[ci] = v * inv_n;
    }

    let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + epst).sqrt()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for bo in 0..outer {
        for ci in 0..c {
            let base = (bo * c + ci) * inner;
            for i in 0..inner {
                let h = (xd[base + i] - mean[ci]) * invstd[ci];
                xhat[base + i] = h;
                y[base + i] = gd[ci] * h + bd[ci];
            }
        }
    }

    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BnSaved {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            invstd,
        },
        BnBatchStats {
            mean,
            var,
            count: n,
        },
    ))
}

pub fn bn_backward<T: Real>(
    saved: &BnSaved<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let lay = layout(dy, gamma.numel())?;
    let (outer, c, inner) = (lay.outer, lay.channels, lay.inner);
    let n = outer * inner;
    let inv_n = T::from_f64(1.0 / n as f64);
    let (hd, dyd, gd) = (saved.xhat.data(), dy.data(), gamma.data());

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut sum_dxhat = vec![T::zero(); c];
    let mut sum_dxhat_xhat = vec![T::zero(); c];
    for bo in 0..outer {
        for ci in 0..c {
            let base = (bo * c + ci) * inner;
            for i in 0..inner {
                let d = dyd[base + i];
                let h = hd[base + i];
                dgamma[ci] += d * h;
                dbeta[ci] += d;
                let dxh = d * gd[ci];
                sum_dxhat[ci] += dxh;
                sum_dxhat_xhat[ci] += dxh * h;
            }
        }
    }

    let nt = T::from_f64(n as f64);
    let mut dx = vec![T::zero(); dyd.len()];
    for bo in 0..outer {
        for ci in 0..c {
            let base = (bo * c + ci) * inner;
            let scale = saved.invstd[ci] * inv_n;
            for i in 0..inner {
                let dxh = dyd[base + i] * gd[ci];
                dx[base + i] = scale
                    * (nt * dxh - sum_dxhat[ci] - hd[base + i] * sum_dxhat_xhat[ci]);
            }
        }
    }

    Ok((
        Tensor::new(dy.shape().to_vec(), dx)?,
        Tensor::vector(dgamma),
        Tensor::vector(dbeta),
    ))
}

pub fn bn_eval_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    bn_eval_forward_saved(x, gamma, beta, running_mean, running_var, eps).map(|(y, _)| y)
}

/// Inference-mode forward that also returns the normalization context, for
/// callers that need a backward pass through the frozen statistics.
pub fn bn_eval_forward_saved<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let lay = layout(x, gamma.numel())?;
    let (outer, c, inner) = (lay.outer, lay.channels, lay.inner);
    let epst = T::from_f64(eps);
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let (rm, rv) = (running_mean.data(), running_var.data());
    let invstd: Vec<T> = rv.iter().map(|&v| T::one() / (v + epst).sqrt()).collect();
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    for bo in 0..outer {
        for ci in 0..c {
            let base = (bo * c + ci) * inner;
            for i in 0..inner {
                let xh = (xd[base + i] - rm[ci]) * invstd[ci];
                xhat[base + i] = xh;
                y[base + i] = gd[ci] * xh + bd[ci];
            }
        }
    }
    let saved = BnSaved {
        xhat: Tensor::new(x.shape().to_vec(), xhat)?,
        invstd,
    };
    Ok((Tensor::new(x.shape().to_vec(), y)?, saved))
}

/// Backward through inference-mode normalization. The statistics are
/// constants there, so the input gradient is a per-channel rescale of `dy`
/// rather than the full batch formula.
pub fn bn_eval_backward<T: Real>(
    saved: &BnSaved<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let lay = layout(dy, gamma.numel())?;
    let (outer, c, inner) = (lay.outer, lay.channels, lay.inner);
    let (dyd, gd, xh) = (dy.data(), gamma.data(), saved.xhat.data());
    let mut dx = vec![T::zero(); dyd.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bo in 0..outer {
        for ci in 0..c {
            let base = (bo * c + ci) * inner;
            for i in 0..inner {
                let d = dyd[base + i];
                dx[base + i] = d * gd[ci] * saved.invstd[ci];
                dgamma[ci] += d * xh[base + i];
                dbeta[ci] += d;
            }
        }
    }
    Ok((
        Tensor::new(dy.shape().to_vec(), dx)?,
        Tensor::vector(dgamma),
        Tensor::vector(dbeta),
    ))
}

/// `running <- (1 - momentum) * running + momentum * batch`, with the
/// variance converted to its unbiased form first.
pub fn bn_update_running<T: Real>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    stats: &BnBatchStats<T>,
    momentum: f64,
) -> Result<()> {
    let m = T::from_f64(momentum);
    let keep = T::one() - m;
    let bessel = if stats.count > 1 {
        T::from_f64(stats.count as f64 / (stats.count - 1) as f64)
    } else {
        T::one()
    };
    let new_mean: Vec<T> = running_mean
        .data()
        .iter()
        .zip(&stats.mean)
        .map(|(&r, &b)| keep * r + m * b)
        .collect();
    let new_var: Vec<T> = running_var
        .data()
        .iter()
        .zip(&stats.var)
        .map(|(&r, &b)| keep * r + m * b * bessel)
        .collect();
    *running_mean = running_mean.with_data(new_mean)?;
    *running_var = running_var.with_data(new_var)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-5;

    #[test]
    fn two_point_batch_normalizes_to_unit_spread() {
        let x = Tensor::new(vec![2, 1], vec![1.0f64, 3.0]).unwrap();
        let gamma = Tensor::vector(vec![1.0]);
        let beta = Tensor::vector(vec![0.0]);
        let (y, _, stats) = bn_train_forward(&x, &gamma, &beta, EPS).unwrap();
        let expect = 1.0 / (1.0 + EPS).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        assert_eq!(stats.mean[0], 2.0);
        assert_eq!(stats.var[0], 1.0);
    }

    #[test]
    fn train_forward_rejects_single_element_channels() {
        let x = Tensor::new(vec![1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let gamma = Tensor::filled(vec![3], 1.0);
        let beta = Tensor::zeros(vec![3]);
        assert!(bn_train_forward(&x, &gamma, &beta, EPS).is_err());
    }

    #[test]
    fn eval_matches_train_when_running_equals_batch_stats() {
        let x = Tensor::from_fn(vec![4, 2, 2, 2], |i| (i as f64 * 0.37).sin());
        let gamma = Tensor::new(vec![2], vec![1.5, 0.5]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let (y_train, _, stats) = bn_train_forward(&x, &gamma, &beta, EPS).unwrap();
        let rm = Tensor::vector(stats.mean.clone());
        let rv = Tensor::vector(stats.var.clone());
        let y_eval = bn_eval_forward(&x, &gamma, &beta, &rm, &rv, EPS).unwrap();
        assert!(crate::tensor::max_abs_diff(&y_train, &y_eval) < 1e-12);
    }

    #[test]
    fn running_update_uses_unbiased_variance() {
        let mut rm = Tensor::vector(vec![0.0f64]);
        let mut rv = Tensor::vector(vec![1.0f64]);
        let stats = BnBatchStats {
            mean: vec![2.0],
            var: vec![1.0],
            count: 2,
        };
        bn_update_running(&mut rm, &mut rv, &stats, 0.1).unwrap();
        assert!((rm.data()[0] - 0.2).abs() < 1e-12);
        // unbiased var = 1.0 * 2/1 = 2.0; 0.9 * 1.0 + 0.1 * 2.0 = 1.1
        assert!((rv.data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn feature_count_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros(vec![2, 3]);
        let gamma = Tensor::filled(vec![4], 1.0);
        let beta = Tensor::zeros(vec![4]);
        assert!(bn_train_forward(&x, &gamma, &beta, EPS).is_err());
    }

    #[test]
    fn eval_backward_is_a_fixed_rescale() {
        // running_var = 1 - eps makes invstd exactly 1, so dx = dy * gamma.
        let x = Tensor::new(vec![2, 2], vec![1.0, 4.0, 3.0, 8.0]).unwrap();
        let gamma = Tensor::new(vec![2], vec![2.0, 0.5]).unwrap();
        let beta = Tensor::zeros(vec![2]);
        let rm = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let rv = Tensor::filled(vec![2], 1.0 - EPS);
        let (_, saved) = bn_eval_forward_saved(&x, &gamma, &beta, &rm, &rv, EPS).unwrap();
        let dy = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.5, 2.0]).unwrap();
        let (dx, dgamma, dbeta) = bn_eval_backward(&saved, &gamma, &dy).unwrap();
        assert!(crate::tensor::max_abs_diff(&dx, &Tensor::new(vec![2, 2], vec![2.0, 0.5, 1.0, 1.0]).unwrap()) < 1e-12);
        // xhat = x - rm = [[0, 2], [2, 6]]; dgamma = [1*0 + 0.5*2, 1*2 + 2*6]
        assert!((dgamma.data()[0] - 1.0).abs() < 1e-12);
        assert!((dgamma.data()[1] - 14.0).abs() < 1e-12);
        assert!((dbeta.data()[0] - 1.5).abs() < 1e-12);
        assert!((dbeta.data()[1] - 3.0).abs() < 1e-12);
    }
}
