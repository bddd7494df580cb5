//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Step used for central differences on 64-bit values.
pub const FD_STEP: f64 = 1e-4;

/// Gradients smaller than `REL_FLOOR · max(1, |f|)` are compared in
/// absolute terms: finite-difference rounding noise grows with `|f|`.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tol: f64,
    /// `(input index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Relative error with a floor on the denominator.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(Error::GradCheck("function is not scalar-valued".into()));
    }
    Ok(v.item())
}

/// Compares `f`'s analytic gradient at `point` against central differences
/// at up to `samples` random coordinates of every input tensor.
///
/// Uses the five-point central stencil at step [`FD_STEP`]; its `O(h⁴)`
/// truncation error stays well below the tolerance even where layer
/// normalization of small activations makes the loss strongly curved.
pub fn grad_check<F>(
    f: F,
    point: &[Tensor],
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let first = eval(&f, point)?;
    let second = eval(&f, point)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is nondeterministic ({first} vs {second})"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let floor = REL_FLOOR * first.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        tol,
        worst: None,
    };
    let mut probe = point.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let numel = point[i].numel();
        for coord in sample(&mut rng, numel, samples.min(numel)) {
            let orig = point[i].data()[coord];
            let mut at = |offset: f64| -> Result<f64> {
                probe[i].data_mut()[coord] = orig + offset;
                eval(&f, &probe)
            };
            let (p1, m1) = (at(FD_STEP)?, at(-FD_STEP)?);
            let (p2, m2) = (at(2.0 * FD_STEP)?, at(-2.0 * FD_STEP)?);
            probe[i].data_mut()[coord] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
            let err = rel_error(analytic.data()[coord], numeric, floor);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, coord));
            }
        }
    }
    Ok(report)
}

/// A scalar test function over randomly drawn inputs.
pub type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

/// One composite function per differentiable operation, with input shapes.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![4, 5], vec![5, 3]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        }),
        ("matmul_nt", vec![vec![4, 5], vec![3, 5]], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            let y = g.gelu(y)?;
            g.sum(y)
        }),
        ("add_sub_mul", vec![vec![3, 3], vec![3, 3]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(v[0], v[1])?;
            let c = g.mul(a, b)?;
            let d = g.scale(c, 0.7)?;
            g.mean(d)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            let y = g.mul(y, y)?;
            g.sum(y)
        }),
        ("gelu", vec![vec![2, 6]], |g, v| {
            let y = g.gelu(v[0])?;
            let y = g.mul(y, y)?;
            g.sum(y)
        }),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6], vec![3, 6]],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                let y = g.mul(y, v[3])?;
                g.sum(y)
            },
        ),
        ("softmax", vec![vec![3, 5], vec![3, 5]], |g, v| {
            let y = g.softmax(v[0])?;
            let y = g.mul(y, v[1])?;
            g.sum(y)
        }),
        ("causal_softmax", vec![vec![3, 5], vec![3, 5]], |g, v| {
            let y = g.causal_softmax(v[0])?;
            let y = g.mul(y, v[1])?;
            g.sum(y)
        }),
        ("embedding", vec![vec![6, 3], vec![4, 3]], |g, v| {
            let y = g.embedding(v[0], &[1, 5, 1, 0])?;
            let y = g.mul(y, v[1])?;
            g.sum(y)
        }),
        ("slice_concat", vec![vec![4, 6], vec![4, 6]], |g, v| {
            let a = g.slice_rows(v[0], 1, 3)?;
            let b = g.slice_cols(v[1], 2, 5)?;
            let b = g.slice_rows(b, 0, 2)?;
            let c = g.concat_cols(&[a, b])?;
            let d = g.concat_rows(&[c, c])?;
            let e = g.gelu(d)?;
            g.sum(e)
        }),
        ("reductions", vec![vec![3, 4]], |g, v| {
            let m = g.mean_rows(v[0])?;
            let m = g.mul(m, m)?;
            let s = g.sum(m)?;
            let t = g.mean(v[0])?;
            let tt = g.mul(t, t)?;
            g.add_n(&[s, tt, s])
        }),
        ("log_sigmoid", vec![vec![5]], |g, v| {
            let y = g.log_sigmoid(v[0])?;
            g.sum(y)
        }),
        ("cross_entropy", vec![vec![4, 7]], |g, v| {
            g.softmax_cross_entropy(v[0], &[0, 6, 3, 3], &[1.0, 0.0, 1.0, 1.0])
        }),
        ("token_logprob_sum", vec![vec![3, 5]], |g, v| {
            g.token_logprob_sum(v[0], &[4, 0, 2], &[1.0, 1.0, 1.0])
        }),
    ]
}

/// Runs every entry of [`op_cases`] at `seeds` random points each.
pub fn check_all_ops(
    seeds: u64,
    samples: usize,
    tol: f64,
) -> Result<Vec<(&'static str, u64, GradCheckReport)>> {
    let mut out = Vec::new();
    for (name, shapes, f) in op_cases() {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + 7);
            let point: Vec<Tensor> = shapes
                .iter()
                .map(|s| Tensor::randn(s, 1.0, &mut rng))
                .collect();
            out.push((name, seed, grad_check(f, &point, samples, tol, seed)?));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::cell::Cell;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&[3, 4], &mut rng);
        let r = grad_check(
            |g, v| {
                let c = g.constant(w.clone());
                let p = g.mul(v[0], c)?;
                g.sum(p)
            },
            &[rand_tensor(&[3, 4], &mut rng)],
            12,
            1e-4,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn detects_nondeterminism() {
        let counter = Cell::new(0.0);
        let r = grad_check(
            |g, v| {
                counter.set(counter.get() + 1.0);
                let s = g.sum(v[0])?;
                let c = g.constant(Tensor::scalar(counter.get()));
                g.add(s, c)
            },
            &[Tensor::ones(&[2])],
            2,
            1e-4,
            0,
        );
        assert!(matches!(r, Err(Error::GradCheck(_))));
    }

    #[test]
    fn every_op_passes_grad_check_over_five_seeds() {
        for (name, seed, r) in check_all_ops(5, 16, 1e-4).unwrap() {
            assert!(r.passed(), "{name} seed {seed}: {r:?}");
        }
    }

    #[test]
    fn matmul_gradient_within_1e6() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point = vec![
                rand_tensor(&[4, 5], &mut rng),
                rand_tensor(&[5, 3], &mut rng),
            ];
            let r = grad_check(
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    let y = g.mul(y, y)?;
                    g.sum(y)
                },
                &point,
                20,
                1e-6,
                seed,
            )
            .unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn cross_entropy_gradient_within_1e6() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let point = vec![rand_tensor(&[5, 16], &mut rng)];
            let r = grad_check(
                |g, v| g.softmax_cross_entropy(v[0], &[1, 15, 0, 7, 7], &[1.0; 5]),
                &point,
                40,
                1e-6,
                seed,
            )
            .unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
