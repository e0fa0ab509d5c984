//! Central-difference gradient verification.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamTree;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A loss closure returning the loss value and its analytic gradients.
pub type LossAndGrads = (f64, BTreeMap<String, Tensor>);

/// Which parameter entries get perturbed.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Entries sampled per parameter tensor (all entries if the tensor is
    /// smaller).
    pub per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            per_tensor: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Max relative error between analytic and central-difference gradients.
pub fn grad_check<F>(loss_fn: F, params: &ParamTree, step: f64) -> Result<f64>
where
    F: Fn(&ParamTree) -> Result<LossAndGrads>,
{
    Ok(grad_check_with(loss_fn, params, step, &GradCheckOptions::default())?.max_rel_error)
}

pub fn grad_check_with<F>(
    loss_fn: F,
    params: &ParamTree,
    step: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamTree) -> Result<LossAndGrads>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Precondition(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let (first, grads) = loss_fn(params)?;
    let (second, _) = loss_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let n = params.get(&name).map_or(0, Tensor::len);
        let picks: Vec<usize> = if n <= opts.per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.per_tensor).into_vec()
        };
        for i in picks {
            let original = params.get(&name).expect("param").data()[i];
            let set = |probe: &mut ParamTree, v: f64| {
                probe.get_mut(&name).expect("param").data_mut()[i] = v;
            };
            set(&mut probe, original + step);
            let plus = loss_fn(&probe)?.0;
            set(&mut probe, original - step);
            let minus = loss_fn(&probe)?.0;
            set(&mut probe, original);
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(p: &ParamTree) -> Result<LossAndGrads> {
        let mut loss = 0.0;
        let mut grads = BTreeMap::new();
        for (k, t) in p.iter() {
            loss += 0.5 * t.data().iter().map(|v| v * v).sum::<f64>();
            grads.insert(k.clone(), t.clone());
        }
        Ok((loss, grads))
    }

    fn params() -> ParamTree {
        let mut p = ParamTree::new();
        p.insert("a", Tensor::vector(vec![1.5, -2.0, 0.25])).unwrap();
        p.insert("b", Tensor::matrix(2, 2, vec![3.0, 0.5, -1.0, 4.0])).unwrap();
        p
    }

    #[test]
    fn quadratic_loss_matches_central_differences() {
        let err = grad_check(quadratic, &params(), 1e-3).unwrap();
        assert!(err < 1e-9, "err={err}");
    }

    #[test]
    fn zero_step_is_a_precondition_error() {
        assert!(matches!(
            grad_check(quadratic, &params(), 0.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn nondeterministic_loss_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let flaky = |p: &ParamTree| {
            calls.set(calls.get() + 1);
            let (l, g) = quadratic(p)?;
            Ok((l + calls.get() as f64 * 1e-3, g))
        };
        assert!(matches!(
            grad_check(flaky, &params(), 1e-4),
            Err(Error::Determinism { .. })
        ));
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let wrong = |p: &ParamTree| {
            let (l, mut g) = quadratic(p)?;
            g.get_mut("a").unwrap().data_mut()[0] *= 2.0;
            Ok((l, g))
        };
        let opts = GradCheckOptions {
            per_tensor: 10,
            seed: 1,
        };
        let report = grad_check_with(wrong, &params(), 1e-4, &opts).unwrap();
        assert!(report.max_rel_error > 0.4);
        assert_eq!(report.worst_param, "a");
    }
}
