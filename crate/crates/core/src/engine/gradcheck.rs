use super::params::{Ctx, ParamStore};
use super::tape::Var;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    /// Scalars compared.
    pub checked: usize,
    /// Frozen parameters left out of the sweep.
    pub frozen_skipped: usize,
}

/// Compares reverse-mode gradients of a scalar function with central finite
/// differences for every scalar of every unfrozen parameter.
///
/// The relative error per scalar is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &ParamStore, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be > 0")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut ctx = Ctx::eval(store);
        let out = f(&mut ctx)?;
        let v = ctx.value(out);
        if v.numel() != 1 {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let first = eval(point)?;
    let second = eval(point)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut ctx = Ctx::train(point);
    let loss = f(&mut ctx)?;
    let analytic = ctx.backward(loss)?;

    let mut probe = point.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        frozen_skipped: 0,
    };
    let names: Vec<String> = point.names().map(str::to_string).collect();
    for name in names {
        if point.is_frozen(&name) {
            report.frozen_skipped += 1;
            continue;
        }
        let n = point.get(&name)?.numel();
        for i in 0..n {
            let numeric = {
                let orig = point.get(&name)?.data()[i];
                probe.get_mut(&name)?.data_mut()[i] = orig + epsilon;
                let plus = eval(&probe)?;
                probe.get_mut(&name)?.data_mut()[i] = orig - epsilon;
                let minus = eval(&probe)?;
                probe.get_mut(&name)?.data_mut()[i] = orig;
                (plus - minus) / (2.0 * epsilon)
            };
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Rng, Tensor};
    use std::cell::Cell;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::full(vec![1], 3.0)).unwrap();
        let report = grad_check(
            |ctx| {
                let x = ctx.param("x")?;
                let y = ctx.mul(x, x)?;
                ctx.sum(y)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn linear_layer() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        store.insert("w", rng.normal_tensor(vec![4, 3], 1.0)).unwrap();
        store.insert("b", rng.normal_tensor(vec![3], 1.0)).unwrap();
        let x = rng.normal_tensor(vec![5, 4], 1.0);
        let weights = rng.normal_tensor(vec![5, 3], 1.0);
        let report = grad_check(
            |ctx| {
                let xv = ctx.constant(x.clone());
                let w = ctx.param("w")?;
                let b = ctx.param("b")?;
                let h = ctx.matmul(xv, w)?;
                let y = ctx.add(h, b)?;
                let c = ctx.constant(weights.clone());
                let s = ctx.mul(y, c)?;
                ctx.sum(s)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, 15);
    }

    #[test]
    fn frozen_params_are_skipped_and_counted() {
        let mut store = ParamStore::new();
        store.insert("frozen.a", Tensor::full(vec![2], 1.0)).unwrap();
        store.insert("live.b", Tensor::full(vec![2], 2.0)).unwrap();
        store.freeze_prefix("frozen.");
        let report = grad_check(
            |ctx| {
                let a = ctx.param("frozen.a")?;
                let b = ctx.param("live.b")?;
                let y = ctx.mul(a, b)?;
                ctx.sum(y)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.frozen_skipped, 1);
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn detects_non_determinism() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::full(vec![1], 1.0)).unwrap();
        let calls = Cell::new(0.0);
        let err = grad_check(
            |ctx| {
                calls.set(calls.get() + 1.0);
                let x = ctx.param("x")?;
                let y = ctx.add_scalar(x, calls.get())?;
                ctx.sum(y)
            },
            &store,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
