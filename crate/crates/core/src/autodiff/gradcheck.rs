use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, element)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compare tape gradients of a scalar function with central differences.
///
/// `f` builds the function on a fresh tape from leaf handles of `inputs`.
/// The relative error uses a denominator floor of `1e-6 * max(1, |f(x)|)`
/// so that entries whose true derivative is zero are judged by the absolute
/// round-off of the difference quotient instead of dividing by zero.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new().with_finite_check(false);
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new().with_finite_check(false);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let f0 = tape.value(root).item();
    tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(&x.shape)))
        .collect();

    let floor = 1e-6 * f0.abs().max(1.0);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        checked: 0,
        tol,
        passed: true,
    };
    let mut xs = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data[j];
            xs[i].data[j] = orig + h;
            let fp = eval(&xs)?;
            xs[i].data[j] = orig - h;
            let fm = eval(&xs)?;
            xs[i].data[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            // Written so that a NaN error also registers as the worst.
            if !(rel <= report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::seed;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const TRIALS: u64 = 20;

    fn rand_t(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn positive_t(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(0.2..2.0))
    }

    /// Reduce an arbitrary output to a scalar through a fixed random weighting
    /// so every output element influences the root.
    fn weighted(tape: &mut Tape<f64>, y: Var, salt: u64) -> Result<Var> {
        let mut rng = seed::rng(salt);
        let w = Tensor::from_fn(tape.shape(y), |_| rng.random_range(-1.0..1.0));
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }

    fn check_op<G, F>(name: &str, gen: G, f: F)
    where
        G: Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor<f64>>,
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Copy,
    {
        for trial in 0..TRIALS {
            let mut rng = seed::rng(seed::derive(0xAD, &[trial]));
            let inputs = gen(&mut rng);
            let report = grad_check(
                |t, v| {
                    let y = f(t, v)?;
                    weighted(t, y, trial)
                },
                &inputs,
                H,
                TOL,
            )
            .unwrap();
            assert!(report.passed, "{name} trial {trial}: {report:?}");
        }
    }

    fn dims(rng: &mut impl Rng) -> (usize, usize, usize) {
        (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
    }

    #[test]
    fn matmul_add_sub_mul() {
        check_op(
            "matmul",
            |r| {
                let (m, k, n) = dims(r);
                vec![rand_t(r, &[m, k]), rand_t(r, &[k, n])]
            },
            |t, v| t.matmul(v[0], v[1]),
        );
        let pair = |r: &mut rand_chacha::ChaCha8Rng| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m, n]), rand_t(r, &[m, n])]
        };
        check_op("add", pair, |t, v| t.add(v[0], v[1]));
        check_op("sub", pair, |t, v| t.sub(v[0], v[1]));
        check_op("mul", pair, |t, v| t.mul(v[0], v[1]));
    }

    #[test]
    fn row_forms_scale_transpose_reshape() {
        let gen = |r: &mut rand_chacha::ChaCha8Rng| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m, n]), rand_t(r, &[n])]
        };
        check_op("add_row", gen, |t, v| t.add_row(v[0], v[1]));
        check_op("mul_row", gen, |t, v| t.mul_row(v[0], v[1]));
        check_op("scale", gen, |t, v| t.scale(v[0], -1.7));
        check_op("transpose", gen, |t, v| t.transpose(v[0]));
        check_op("reshape", gen, |t, v| {
            let n = t.value(v[0]).numel();
            t.reshape(v[0], &[n])
        });
    }

    #[test]
    fn concat_slice_gather() {
        let gen = |r: &mut rand_chacha::ChaCha8Rng| {
            let (m, n, k) = dims(r);
            vec![rand_t(r, &[m, n]), rand_t(r, &[m, k]), rand_t(r, &[k, n])]
        };
        check_op("concat1", gen, |t, v| t.concat(&[v[0], v[1], v[0]], 1));
        check_op("concat0", gen, |t, v| t.concat(&[v[0], v[2]], 0));
        check_op("slice", gen, |t, v| {
            let (m, n) = t.value(v[0]).dims2()?;
            let a = t.slice(v[0], 1, n / 2, n - n / 2)?;
            let b = t.slice(v[0], 0, 0, m.div_ceil(2))?;
            let sa = t.sum(a)?;
            let sb = t.sum(b)?;
            t.add(sa, sb)
        });
        check_op("gather_rows", gen, |t, v| {
            let (m, _) = t.value(v[0]).dims2()?;
            t.gather_rows(v[0], &[m - 1, 0, m - 1])
        });
    }

    #[test]
    fn reductions() {
        let gen = |r: &mut rand_chacha::ChaCha8Rng| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m, n])]
        };
        check_op("sum", gen, |t, v| t.sum(v[0]));
        check_op("mean", gen, |t, v| t.mean(v[0]));
        check_op("sum_axis0", gen, |t, v| t.sum_axis(v[0], 0));
        check_op("sum_axis1", gen, |t, v| t.sum_axis(v[0], 1));
        check_op("mean_axis1", gen, |t, v| t.mean_axis(v[0], 1));
    }

    #[test]
    fn softmax_family_and_layer_norm() {
        let gen = |r: &mut rand_chacha::ChaCha8Rng| {
            let (m, n, _) = dims(r);
            let n = n + 1;
            vec![rand_t(r, &[m, n]), rand_t(r, &[n]), rand_t(r, &[n])]
        };
        check_op("softmax", gen, |t, v| t.softmax(v[0]));
        check_op("log_softmax", gen, |t, v| t.log_softmax(v[0]));
        check_op("layer_norm", gen, |t, v| t.layer_norm(v[0], v[1], v[2]));
        check_op("l2_normalize", gen, |t, v| t.l2_normalize(v[0]));
    }

    #[test]
    fn pointwise() {
        let gen = |r: &mut rand_chacha::ChaCha8Rng| {
            let (m, n, _) = dims(r);
            vec![rand_t(r, &[m, n]), positive_t(r, &[m, n])]
        };
        check_op("gelu", gen, |t, v| t.gelu(v[0]));
        check_op("exp", gen, |t, v| t.exp(v[0]));
        check_op("log", gen, |t, v| t.log(v[1]));
        check_op("sqrt", gen, |t, v| t.sqrt(v[1]));
        // Keep ReLU inputs away from the kink where differences straddle it.
        let away = |r: &mut rand_chacha::ChaCha8Rng| {
            let (m, n, _) = dims(r);
            let t = Tensor::from_fn(&[m, n], |_| {
                let s: f64 = r.random_range(0.05..1.0);
                if r.random::<bool>() {
                    s
                } else {
                    -s
                }
            });
            vec![t]
        };
        check_op("relu", away, |t, v| t.relu(v[0]));
    }

    #[test]
    fn conv1d_and_masked_select() {
        let gen = |r: &mut rand_chacha::ChaCha8Rng| {
            let cin = r.random_range(1..4);
            let cout = r.random_range(1..4);
            let len = r.random_range(3..9);
            vec![rand_t(r, &[cin, len]), rand_t(r, &[cout, cin, 3]), rand_t(r, &[cout])]
        };
        for trial in 0..TRIALS {
            let mut rng = seed::rng(seed::derive(0xC0, &[trial]));
            let inputs = gen(&mut rng);
            let report = grad_check(
                |t, v| {
                    let y = t.conv1d(v[0], v[1], v[2], 1)?;
                    weighted(t, y, trial)
                },
                &inputs,
                H,
                1e-5,
            )
            .unwrap();
            assert!(report.passed, "conv1d trial {trial}: {report:?}");
        }
        check_op("conv1d_valid", gen, |t, v| t.conv1d(v[0], v[1], v[2], 0));
        check_op("masked_select", gen, |t, v| {
            let n = t.value(v[0]).numel();
            let mask: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
            t.masked_select(v[0], &mask)
        });
    }

    #[test]
    fn linear_function_is_exact() {
        let a = Tensor::new(vec![3], vec![0.5, -2.0, 4.0]).unwrap();
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                t.sum(p)
            },
            &[a, x],
            H,
            1e-9,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn sum_of_product_matches_differences_tightly() {
        let mut rng = seed::rng(3);
        let a = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[4, 2]);
        let report = grad_check(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                t.sum(c)
            },
            &[a, b],
            H,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
