//! Central-difference verification of analytic gradients.
//!
//! The closure builds a scalar-valued expression from leaf nodes; the checker
//! compares the tape's gradients against (f(x+h) - f(x-h)) / 2h for every
//! element (or a seeded sample of elements for large parameter sets).

use crate::error::{Error, Result};
use crate::numkit::graph::{Graph, NodeId};
use crate::numkit::tensor::Tensor;
use crate::rng::Rng;

/// Builds a scalar output from the given leaves.
pub type ScalarFn<'a> = &'a dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;

fn eval_scalar(build: ScalarFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("closure must be scalar-valued, got {:?}", v.shape()),
        ));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite output".into()));
    }
    Ok(y)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

/// Max relative error over every element of every input.
pub fn grad_check(build: ScalarFn, inputs: &[Tensor<f64>], step: f64) -> Result<f64> {
    grad_check_impl(build, inputs, step, None)
}

/// Like [`grad_check`], but probes only `samples_per_input` seeded random
/// elements of each input. Used for whole-model checks where exhaustive
/// probing is quadratic in parameter count.
pub fn grad_check_sampled(
    build: ScalarFn,
    inputs: &[Tensor<f64>],
    step: f64,
    samples_per_input: usize,
    seed: u64,
) -> Result<f64> {
    grad_check_impl(build, inputs, step, Some((samples_per_input, seed)))
}

fn grad_check_impl(
    build: ScalarFn,
    inputs: &[Tensor<f64>],
    step: f64,
    sampling: Option<(usize, u64)>,
) -> Result<f64> {
    for t in inputs {
        if !t.all_finite() {
            return Err(Error::Numeric("grad_check: non-finite input".into()));
        }
    }
    // analytic pass
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
        })
        .collect();
    for t in &analytic {
        if !t.all_finite() {
            return Err(Error::Numeric(
                "grad_check: non-finite analytic gradient".into(),
            ));
        }
    }

    let mut rng = sampling.map(|(_, seed)| Rng::seed_from(seed));
    let mut max_err: f64 = 0.0;
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let probes: Vec<usize> = match sampling {
            None => (0..input.len()).collect(),
            Some((n, _)) => {
                let rng = rng.as_mut().unwrap();
                (0..n.min(input.len()))
                    .map(|_| rng.below(input.len()))
                    .collect()
            }
        };
        for j in probes {
            let orig = input.data()[j];
            perturbed[i].data_mut()[j] = orig + step;
            let plus = eval_scalar(build, &perturbed)?;
            perturbed[i].data_mut()[j] = orig - step;
            let minus = eval_scalar(build, &perturbed)?;
            perturbed[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[i].data()[j], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
