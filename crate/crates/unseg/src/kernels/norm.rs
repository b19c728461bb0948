//! Normalization kernels: batch norm, per-position channel layer norm, and
//! global response normalization (GRN).
//!
//! Each forward returns the saved values its backward needs. The backward
//! formulas are the standard chain-rule reductions; all of them are covered
//! by finite-difference checks in the gradcheck suite.

use crate::elem::Element;
use crate::error::Result;
use crate::tensor::Tensor;

/// Saved state from a train-mode batch-norm forward.
pub struct BatchNormSaved<E: Element> {
    /// Normalized input (x - mean) / sqrt(var + eps).
    pub xhat: Tensor<E>,
    /// Per-channel 1 / sqrt(var + eps).
    pub inv_std: Vec<E>,
    /// Per-channel batch mean (for the running-stat update).
    pub mean: Vec<E>,
    /// Per-channel biased batch variance (for the running-stat update).
    pub var: Vec<E>,
}

/// Train-mode batch norm: normalize per channel over (N, H, W).
pub fn batchnorm_forward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, BatchNormSaved<E>)> {
    let (n, c, h, w) = x.dims4()?;
    let m = (n * h * w) as f64;
    let xs = x.data();
    let gs = gamma.data();
    let bs = beta.data();

    let mut mean = vec![E::ZERO; c];
    let mut var = vec![E::ZERO; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                sum += xs[base + i].to_f64();
            }
        }
        let mu = sum / m;
        let mut sq = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                let d = xs[base + i].to_f64() - mu;
                sq += d * d;
            }
        }
        mean[ci] = E::from_f64(mu);
        var[ci] = E::from_f64(sq / m);
    }

    let inv_std: Vec<E> = var
        .iter()
        .map(|v| E::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
        .collect();

    let mut xhat = vec![E::ZERO; xs.len()];
    let mut out = vec![E::ZERO; xs.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                let xh = (xs[base + i] - mean[ci]) * inv_std[ci];
                xhat[base + i] = xh;
                out[base + i] = gs[ci] * xh + bs[ci];
            }
        }
    }
    let xhat = Tensor::new(x.shape().to_vec(), xhat)?;
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BatchNormSaved {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Backward of train-mode batch norm. Returns (dx, dgamma, dbeta).
pub fn batchnorm_backward<E: Element>(
    go: &Tensor<E>,
    gamma: &Tensor<E>,
    saved: &BatchNormSaved<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, c, h, w) = go.dims4()?;
    let m = E::from_f64((n * h * w) as f64);
    let gs = go.data();
    let xh = saved.xhat.data();
    let gam = gamma.data();

    let mut dgamma = vec![E::ZERO; c];
    let mut dbeta = vec![E::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                dgamma[ci] += gs[base + i] * xh[base + i];
                dbeta[ci] += gs[base + i];
            }
        }
    }

    let mut dx = vec![E::ZERO; gs.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let scale = gam[ci] * saved.inv_std[ci];
            for i in 0..h * w {
                dx[base + i] = scale
                    * (gs[base + i] - dbeta[ci] / m - xh[base + i] * dgamma[ci] / m);
            }
        }
    }
    Ok((
        Tensor::new(go.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Saved state from a channel layer-norm forward.
pub struct LayerNormSaved<E: Element> {
    pub xhat: Tensor<E>,
    /// 1 / sqrt(var + eps) per spatial position (N*H*W values).
    pub inv_std: Vec<E>,
}

/// Layer norm over the channel vector at each spatial position.
pub fn layernorm_ch_forward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, LayerNormSaved<E>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xs = x.data();
    let gs = gamma.data();
    let bs = beta.data();

    let mut xhat = vec![E::ZERO; xs.len()];
    let mut out = vec![E::ZERO; xs.len()];
    let mut inv_std = vec![E::ZERO; n * hw];
    for ni in 0..n {
        for p in 0..hw {
            let mut sum = 0.0;
            for ci in 0..c {
                sum += xs[(ni * c + ci) * hw + p].to_f64();
            }
            let mu = sum / c as f64;
            let mut sq = 0.0;
            for ci in 0..c {
                let d = xs[(ni * c + ci) * hw + p].to_f64() - mu;
                sq += d * d;
            }
            let istd = 1.0 / (sq / c as f64 + eps).sqrt();
            inv_std[ni * hw + p] = E::from_f64(istd);
            for ci in 0..c {
                let idx = (ni * c + ci) * hw + p;
                let xh = E::from_f64((xs[idx].to_f64() - mu) * istd);
                xhat[idx] = xh;
                out[idx] = gs[ci] * xh + bs[ci];
            }
        }
    }
    let xhat = Tensor::new(x.shape().to_vec(), xhat)?;
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormSaved { xhat, inv_std },
    ))
}

/// Backward of channel layer norm. Returns (dx, dgamma, dbeta).
pub fn layernorm_ch_backward<E: Element>(
    go: &Tensor<E>,
    gamma: &Tensor<E>,
    saved: &LayerNormSaved<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, c, h, w) = go.dims4()?;
    let hw = h * w;
    let gs = go.data();
    let xh = saved.xhat.data();
    let gam = gamma.data();
    let cf = E::from_f64(c as f64);

    let mut dgamma = vec![E::ZERO; c];
    let mut dbeta = vec![E::ZERO; c];
    let mut dx = vec![E::ZERO; gs.len()];
    for ni in 0..n {
        for p in 0..hw {
            let mut sum_g = E::ZERO;
            let mut sum_gx = E::ZERO;
            for ci in 0..c {
                let idx = (ni * c + ci) * hw + p;
                let gg = gs[idx] * gam[ci];
                sum_g += gg;
                sum_gx += gg * xh[idx];
                dgamma[ci] += gs[idx] * xh[idx];
                dbeta[ci] += gs[idx];
            }
            let istd = saved.inv_std[ni * hw + p];
            for ci in 0..c {
                let idx = (ni * c + ci) * hw + p;
                let gg = gs[idx] * gam[ci];
                dx[idx] = istd * (gg - sum_g / cf - xh[idx] * sum_gx / cf);
            }
        }
    }
    Ok((
        Tensor::new(go.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

pub const GRN_EPS: f64 = 1e-6;

/// Saved state from a GRN forward.
pub struct GrnSaved<E: Element> {
    /// Per (n, c) spatial L2 norm of the input.
    pub g_norm: Vec<E>,
    /// Per (n, c) normalized response g_c / (mean_c g + eps).
    pub n_resp: Vec<E>,
    /// Per n mean of g over channels plus eps.
    pub m_eps: Vec<E>,
}

/// Global response normalization:
/// `G_c = ||x_c||_2` over (H, W); `N_c = G_c / (mean_c' G_c' + eps)`;
/// `out = gamma * x * N + beta + x`.
///
/// The residual form makes gamma = beta = 0 an exact identity.
pub fn grn_forward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> Result<(Tensor<E>, GrnSaved<E>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xs = x.data();
    let gs = gamma.data();
    let bs = beta.data();

    let mut g_norm = vec![E::ZERO; n * c];
    let mut m_eps = vec![E::ZERO; n];
    for ni in 0..n {
        let mut sum = 0.0;
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let mut sq = 0.0;
            for i in 0..hw {
                let v = xs[base + i].to_f64();
                sq += v * v;
            }
            let g = sq.sqrt();
            g_norm[ni * c + ci] = E::from_f64(g);
            sum += g;
        }
        m_eps[ni] = E::from_f64(sum / c as f64 + GRN_EPS);
    }

    let mut n_resp = vec![E::ZERO; n * c];
    let mut out = vec![E::ZERO; xs.len()];
    for ni in 0..n {
        for ci in 0..c {
            let nc = ni * c + ci;
            let nr = g_norm[nc] / m_eps[ni];
            n_resp[nc] = nr;
            let base = nc * hw;
            for i in 0..hw {
                let xv = xs[base + i];
                out[base + i] = gs[ci] * xv * nr + bs[ci] + xv;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        GrnSaved {
            g_norm,
            n_resp,
            m_eps,
        },
    ))
}

/// Backward of GRN. Returns (dx, dgamma, dbeta).
pub fn grn_backward<E: Element>(
    go: &Tensor<E>,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    saved: &GrnSaved<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, c, h, w) = go.dims4()?;
    let hw = h * w;
    let gs = go.data();
    let xs = x.data();
    let gam = gamma.data();

    let mut dgamma = vec![E::ZERO; c];
    let mut dbeta = vec![E::ZERO; c];
    let mut dx = vec![E::ZERO; gs.len()];

    for ni in 0..n {
        // dL/dN_c: sensitivity of the loss to each channel's response.
        let mut s = vec![E::ZERO; c];
        for ci in 0..c {
            let nc = ni * c + ci;
            let base = nc * hw;
            let mut acc = E::ZERO;
            for i in 0..hw {
                acc += gs[base + i] * xs[base + i];
                dgamma[ci] += gs[base + i] * xs[base + i] * saved.n_resp[nc];
                dbeta[ci] += gs[base + i];
            }
            s[ci] = acc * gam[ci];
        }
        // dL/dG_k through N = G / (mean(G) + eps).
        let me = saved.m_eps[ni];
        let mut dot = E::ZERO;
        for ci in 0..c {
            dot += s[ci] * saved.g_norm[ni * c + ci];
        }
        let cf = E::from_f64(c as f64);
        for ci in 0..c {
            let nc = ni * c + ci;
            let dg = s[ci] / me - dot / (cf * me * me);
            let base = nc * hw;
            let direct = gam[ci] * saved.n_resp[nc] + E::ONE;
            if saved.g_norm[nc].to_f64() > 0.0 {
                let scale = dg / saved.g_norm[nc];
                for i in 0..hw {
                    dx[base + i] = gs[base + i] * direct + scale * xs[base + i];
                }
            } else {
                for i in 0..hw {
                    dx[base + i] = gs[base + i] * direct;
                }
            }
        }
    }
    Ok((
        Tensor::new(go.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}
