//! Finite-difference gradient checking.
//!
//! Runs in `f64`: central differences with h = 1e-4 resolve relative errors
//! well below the 1e-4 acceptance bound there, which `f32` cannot do.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// Evaluate `f` once, without gradients, at the given input.
pub fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let root = f(&mut tape, xv)?;
    Ok(tape.value(root).scalar_value()?)
}

/// Central difference of `f` in coordinate `i` of `x`.
pub fn central_diff<F>(f: &F, x: &Tensor<f64>, i: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut xp = x.clone();
    xp.data_mut()[i] += h;
    let fp = eval_scalar(f, &xp)?;
    let mut xm = x.clone();
    xm.data_mut()[i] -= h;
    let fm = eval_scalar(f, &xm)?;
    Ok((fp - fm) / (2.0 * h))
}

/// Max relative error between the tape gradient of the scalar function `f`
/// and central finite differences, over every element of `x`.
///
/// The error metric is `|analytic - fd| / max(1, |analytic|)`. A NaN anywhere
/// propagates as the returned value, which fails any `< tol` comparison.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_sampled(f, x, h, &all)
}

/// Like [`grad_check`] but only probes the listed coordinates; used for
/// end-to-end checks where differencing every parameter would be wasteful.
pub fn grad_check_sampled<F>(f: F, x: &Tensor<f64>, h: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let root = f(&mut tape, xv)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::NotScalar(tape.value(root).numel()));
    }
    let grads = tape.backward(root)?;
    let analytic = match grads.get(xv) {
        Some(g) => g.clone(),
        None => Tensor::zeros(x.shape()),
    };

    let mut max_rel = 0.0f64;
    for &i in indices {
        let fd = central_diff(&f, x, i, h)?;
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / f64::max(1.0, a.abs());
        if rel.is_nan() {
            return Ok(f64::NAN);
        }
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Result of one finite-difference check.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Finite-difference the whole op set on small random tensors.
///
/// Each differentiable op is probed w.r.t. every differentiable operand
/// (input, weight, bias, gamma, beta). The suite is deterministic for a
/// given seed.
pub fn op_suite(seed: u64) -> Vec<OpCheck> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::kernels::pad::Pad2;
    use crate::kernels::pool::UpsampleMode;
    use crate::nn::ConvSpec;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks: Vec<OpCheck> = Vec::new();

    // Smooth random values bounded away from zero so kinked ops (relu,
    // maxpool argmax) stay locally linear under the h = 1e-4 probe.
    let away_from_zero = |shape: &[usize], rng: &mut ChaCha8Rng| {
        Tensor::from_fn(shape, |_| {
            let mag = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
    };

    let mut run = |name: &str,
                   x: Tensor<f64>,
                   f: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>| {
        let err = grad_check(f, &x, DEFAULT_STEP).unwrap_or(f64::NAN);
        checks.push(OpCheck {
            name: name.to_string(),
            max_rel_err: err,
        });
    };

    let x44 = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    let other = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    let chan = Tensor::rand_uniform(&[2], 0.5, 1.5, &mut rng);

    {
        let o = other.clone();
        run("add", x44.clone(), &move |t, v| {
            let c = t.constant(o.clone());
            let y = t.add(v, c)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        });
    }
    {
        let c = chan.clone();
        run("add_bias", x44.clone(), &move |t, v| {
            let b = t.constant(c.clone());
            let y = t.add(v, b)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        });
    }
    {
        let xc = x44.clone();
        run("add_bias/b", chan.clone(), &move |t, v| {
            let x = t.constant(xc.clone());
            let y = t.add(x, v)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        });
    }
    {
        let o = other.clone();
        run("sub", x44.clone(), &move |t, v| {
            let c = t.constant(o.clone());
            let y = t.sub(v, c)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        });
    }
    {
        let o = other.clone();
        run("mul", x44.clone(), &move |t, v| {
            let c = t.constant(o.clone());
            let y = t.mul(v, c)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        });
    }
    {
        let c = chan.clone();
        run("mul_channel", x44.clone(), &move |t, v| {
            let s = t.constant(c.clone());
            let y = t.mul(v, s)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        });
    }
    {
        let xc = x44.clone();
        run("mul_channel/s", chan.clone(), &move |t, v| {
            let x = t.constant(xc.clone());
            let y = t.mul(x, v)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        });
    }
    run("add_scalar", x44.clone(), &|t, v| {
        let y = t.add_scalar(v, 0.7);
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    run("mul_scalar", x44.clone(), &|t, v| {
        let y = t.mul_scalar(v, -1.3);
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });

    let a_mat = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let b_mat = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
    {
        let b = b_mat.clone();
        run("matmul/a", a_mat.clone(), &move |t, v| {
            let c = t.constant(b.clone());
            let y = t.matmul(v, c)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        });
    }
    {
        let a = a_mat.clone();
        run("matmul/b", b_mat.clone(), &move |t, v| {
            let c = t.constant(a.clone());
            let y = t.matmul(c, v)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        });
    }

    run("sum", x44.clone(), &|t, v| {
        let sq = t.mul(v, v)?;
        Ok(t.sum(sq))
    });
    run("mean", x44.clone(), &|t, v| {
        let sq = t.mul(v, v)?;
        Ok(t.mean(sq))
    });

    let x_nz = away_from_zero(&[1, 2, 4, 4], &mut rng);
    run("relu", x_nz.clone(), &|t, v| {
        let y = t.relu(v);
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    run("gelu", x44.clone(), &|t, v| {
        let y = t.gelu(v);
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    run("sigmoid", x44.clone(), &|t, v| {
        let y = t.sigmoid(v);
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });

    // conv2d variants: dense, strided, depthwise, grouped
    let conv_cases = [
        ("conv2d(k3,p1)", ConvSpec::dense(2, 3, 3), [1usize, 2, 5, 5]),
        (
            "conv2d(k3,s2,p1)",
            ConvSpec::dense(2, 3, 3).stride(2),
            [1, 2, 6, 6],
        ),
        (
            "conv2d(depthwise k3)",
            ConvSpec::dense(4, 4, 3).groups(4),
            [1, 4, 5, 5],
        ),
        (
            "conv2d(groups=2)",
            ConvSpec::dense(4, 6, 3).groups(2),
            [1, 4, 5, 5],
        ),
    ];
    for (name, spec, xshape) in conv_cases {
        let x = Tensor::rand_uniform(&xshape, -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&spec.weight_shape(), -0.5, 0.5, &mut rng);
        let b = Tensor::rand_uniform(&[spec.out_channels], -0.5, 0.5, &mut rng);
        {
            let (w, b, spec) = (w.clone(), b.clone(), spec.clone());
            run(&format!("{name}/x"), x.clone(), &move |t, v| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(v, wv, Some(bv), &spec)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            });
        }
        {
            let (x, b, spec) = (x.clone(), b.clone(), spec.clone());
            run(&format!("{name}/w"), w.clone(), &move |t, v| {
                let xv = t.constant(x.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(xv, v, Some(bv), &spec)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            });
        }
        {
            let (x, w, spec) = (x.clone(), w.clone(), spec.clone());
            run(&format!("{name}/b"), b.clone(), &move |t, v| {
                let xv = t.constant(x.clone());
                let wv = t.constant(w.clone());
                let y = t.conv2d(xv, wv, Some(v), &spec)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            });
        }
    }

    let x_pool = away_from_zero(&[1, 2, 6, 6], &mut rng);
    run("maxpool2", x_pool, &|t, v| {
        let y = t.maxpool2(v)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    run("upsample2(nearest)", x44.clone(), &|t, v| {
        let y = t.upsample2(v, UpsampleMode::Nearest)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    run("upsample2(bilinear)", x44.clone(), &|t, v| {
        let y = t.upsample2(v, UpsampleMode::Bilinear)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    {
        let o = other.clone();
        run("concat_channels", x44.clone(), &move |t, v| {
            let c = t.constant(o.clone());
            let y = t.concat_channels(v, c)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        });
    }

    // norms: check each differentiable operand
    let xn = Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let gam = Tensor::rand_uniform(&[3], 0.5, 1.5, &mut rng);
    let bet = Tensor::rand_uniform(&[3], -0.5, 0.5, &mut rng);
    let norm_cases: [(&str, fn(&mut Tape<f64>, Var, Var, Var) -> Result<Var>); 3] = [
        ("batchnorm", |t, x, g, b| {
            Ok(t.batchnorm_train(x, g, b, 1e-5)?.0)
        }),
        ("layernorm_channels", |t, x, g, b| {
            t.layernorm_channels(x, g, b, 1e-6)
        }),
        ("grn", |t, x, g, b| t.grn(x, g, b)),
    ];
    for (name, op) in norm_cases {
        {
            let (g, b) = (gam.clone(), bet.clone());
            run(&format!("{name}/x"), xn.clone(), &move |t, v| {
                let gv = t.constant(g.clone());
                let bv = t.constant(b.clone());
                let y = op(t, v, gv, bv)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            });
        }
        {
            let (x, b) = (xn.clone(), bet.clone());
            run(&format!("{name}/gamma"), gam.clone(), &move |t, v| {
                let xv = t.constant(x.clone());
                let bv = t.constant(b.clone());
                let y = op(t, xv, v, bv)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            });
        }
        {
            let (x, g) = (xn.clone(), gam.clone());
            run(&format!("{name}/beta"), bet.clone(), &move |t, v| {
                let xv = t.constant(x.clone());
                let gv = t.constant(g.clone());
                let y = op(t, xv, gv, v)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            });
        }
    }

    let logits = Tensor::rand_uniform(&[1, 1, 4, 4], -2.0, 2.0, &mut rng);
    let targets = Tensor::from_fn(&[1, 1, 4, 4], |_| {
        if rng.random_bool(0.3) {
            1.0
        } else {
            0.0
        }
    });
    {
        let y = targets.clone();
        run("bce_with_logits", logits, &move |t, v| {
            t.bce_with_logits_mean(v, &y)
        });
    }

    run("reflect_pad", x44.clone(), &|t, v| {
        let y = t.reflect_pad(
            v,
            Pad2 {
                top: 1,
                bottom: 2,
                left: 2,
                right: 1,
            },
        )?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    run("crop", x44, &|t, v| {
        let y = t.crop(v, 1, 1, 2, 2)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });

    checks
}

/// End-to-end finite-difference check of a U-Net: BCE(forward(x), mask)
/// differentiated w.r.t. a sampled ~1% of parameters (at least one index per
/// tensor), compared against the tape gradient.
///
/// Runs the 2-stage `*-micro` presets in f64 at 16x16; anything larger is
/// needlessly slow for a correctness probe.
pub fn unet_end_to_end_check(preset_name: &str, seed: u64) -> Result<OpCheck> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::nn::TensorRole;
    use crate::unet::{UNet, UNetConfig};

    let preset = crate::encoders::preset(preset_name)?;
    let size = 16usize;
    let config = UNetConfig::for_preset(preset, Some((size, size)));
    let mut model = UNet::<f64>::new(config, seed)?;
    model.set_training(true);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let x = Tensor::rand_uniform(&[2, 3, size, size], -1.0, 1.0, &mut rng);
    let targets = Tensor::from_fn(&[2, 1, size, size], |_| {
        if rng.random_bool(0.15) {
            1.0
        } else {
            0.0
        }
    });

    // Analytic gradients for every registered parameter.
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let logits = model.forward(&mut tape, xv)?;
    let loss = tape.bce_with_logits_mean(logits, &targets)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<(String, Tensor<f64>)> = Vec::new();
    for (name, var) in tape.params() {
        if let Some(g) = grads.get(*var) {
            analytic.push((name.clone(), g.clone()));
        }
    }

    let eval_loss = |model: &mut UNet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let logits = model.forward(&mut tape, xv)?;
        let loss = tape.bce_with_logits_mean(logits, &targets)?;
        Ok(tape.value(loss).scalar_value()?)
    };

    let nudge = |model: &mut UNet<f64>, name: &str, idx: usize, delta: f64| {
        model.visit_tensors(&mut |n, role, t| {
            if role == TensorRole::Param && n == name {
                t.data_mut()[idx] += delta;
            }
        });
    };

    let diff_at = |model: &mut UNet<f64>, name: &str, idx: usize, h: f64| -> Result<f64> {
        nudge(model, name, idx, h);
        let fp = eval_loss(model)?;
        nudge(model, name, idx, -2.0 * h);
        let fm = eval_loss(model)?;
        nudge(model, name, idx, h);
        Ok((fp - fm) / (2.0 * h))
    };

    let h = DEFAULT_STEP;
    let mut max_rel = 0.0f64;
    let mut probed = 0usize;
    let mut valid = 0usize;
    for (name, grad) in &analytic {
        let numel = grad.numel();
        let probes = (numel / 100).max(1).min(numel);
        for _ in 0..probes {
            let idx = rng.random_range(0..numel);
            probed += 1;
            let fd = diff_at(&mut model, name, idx, h)?;
            // A probe whose difference quotient moves when the step halves
            // is straddling a ReLU/max kink; it does not measure the
            // derivative, so it cannot judge the backward pass.
            let fd_half = diff_at(&mut model, name, idx, h / 2.0)?;
            if (fd - fd_half).abs() / f64::max(1.0, fd_half.abs()) > 1e-5 {
                continue;
            }
            valid += 1;
            let a = grad.data()[idx];
            let rel = (a - fd).abs() / f64::max(1.0, a.abs());
            if rel.is_nan() {
                max_rel = f64::NAN;
                break;
            }
            max_rel = max_rel.max(rel);
        }
    }
    // Kink hits must stay the rare exception or the check loses its teeth.
    if valid * 2 < probed {
        return Ok(OpCheck {
            name: format!("unet-end-to-end({preset_name})"),
            max_rel_err: f64::NAN,
        });
    }
    Ok(OpCheck {
        name: format!("unet-end-to-end({preset_name})"),
        max_rel_err: max_rel,
    })
}
