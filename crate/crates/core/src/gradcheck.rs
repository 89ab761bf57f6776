//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamStore, Parameter};
use crate::tensor::Tensor;

/// Finite-difference step used throughout.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Anything that owns a [`ParamStore`].
pub trait Parametrized {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Parametrized for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Worst relative error among entries whose absolute error exceeds the
    /// rounding floor of the loss difference.
    pub max_rel_err_above_floor: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
    /// Set when the loss could not be evaluated or was not finite.
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        if self.failure.is_some() {
            return f64::INFINITY;
        }
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() <= tolerance
    }

    /// Like [`passed`](Self::passed), but entries whose disagreement is
    /// within [`roundoff_floor`] are not counted.
    pub fn passed_above_floor(&self, tolerance: f64) -> bool {
        self.failure.is_none() && self.params.iter().all(|p| p.max_rel_err_above_floor <= tolerance)
    }
}

/// Ulps of the loss assumed lost when the two perturbed losses are evaluated.
pub const ROUNDOFF_ULPS: f64 = 8.0;

/// Absolute error in a central difference caused by rounding the loss alone:
/// `ROUNDOFF_ULPS · ε · |loss| / (2·step)`.
pub fn roundoff_floor(loss: f64, step: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * loss.abs().max(f64::MIN_POSITIVE) / (2.0 * step)
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<M, F>(model: &M, f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &M) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let loss = f(&tape, model)?;
    Ok(loss.item())
}

/// Compares the tape gradient of `f` with central differences for every
/// entry of every trainable parameter.
pub fn gradcheck<M, F>(model: &mut M, step: f64, f: F) -> GradcheckReport
where
    M: Parametrized,
    F: for<'t> Fn(&'t Tape, &M) -> Result<Var<'t>>,
{
    let fail = |loss: f64, msg: String| GradcheckReport {
        loss,
        params: Vec::new(),
        failure: Some(msg),
    };
    let (loss, analytic) = {
        let tape = Tape::new();
        let loss = match f(&tape, model) {
            Ok(l) => l,
            Err(e) => return fail(f64::NAN, format!("loss evaluation failed: {e}")),
        };
        let value = loss.item();
        if !value.is_finite() {
            return fail(value, "non-finite loss".into());
        }
        match tape.backward(loss) {
            Ok(g) => (value, g.param_grads(model.params().len())),
            Err(e) => return fail(value, format!("backward failed: {e}")),
        }
    };
    let mut checks = Vec::new();
    for id in 0..model.params().len() {
        let p = model.params().get(id);
        if !p.trainable() {
            continue;
        }
        let name = p.name().to_string();
        let numel = p.value().numel();
        let grad = analytic.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let mut check = ParamCheck {
            name,
            numel,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            max_rel_err_above_floor: 0.0,
        };
        let floor = roundoff_floor(loss, step);
        for (i, &a) in grad.iter().enumerate() {
            let original = model.params().get(id).value().data()[i];
            model.params_mut().value_mut(id).data_mut()[i] = original + step;
            let plus = evaluate(model, &f);
            model.params_mut().value_mut(id).data_mut()[i] = original - step;
            let minus = evaluate(model, &f);
            model.params_mut().value_mut(id).data_mut()[i] = original;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                _ => return fail(loss, format!("non-finite perturbed loss at {}[{i}]", check.name)),
            };
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            if (a - numeric).abs() > floor {
                check.max_rel_err_above_floor = check.max_rel_err_above_floor.max(err);
            }
            if err >= check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    GradcheckReport {
        loss,
        params: checks,
        failure: None,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    ParamStore::from_params(
        entries
            .into_iter()
            .map(|(n, t)| Parameter::new(n, t, true))
            .collect(),
    )
    .expect("unique names")
}

/// Contracts every output entry against a fixed random weight so that no
/// operation's gradient vanishes by symmetry.
fn weighted_sum<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = out.tape().constant(random_tensor(&mut rng, &out.shape()));
    Ok(out.mul(w)?.sum())
}

type OpCase = (&'static str, ParamStore, Box<dyn for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>>);

/// Gradient checks of every tape primitive on seeded random shapes.
pub fn op_suite(seed: u64) -> Vec<(String, GradcheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (m, k, n) = (dim(2, 4), dim(2, 5), dim(2, 4));
    let b = dim(2, 3);
    let v = dim(3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape);
    let ids: Vec<usize> = (0..m).map(|i| (i * 7 + 3) % v).collect();
    let targets: Vec<usize> = (0..m).map(|i| (i * 5 + 1) % v).collect();
    let mask: Vec<bool> = (0..m * n).map(|i| i % n == 0 || (i * 31) % 3 != 0).collect();
    let cases: Vec<OpCase> = vec![
        (
            "matmul",
            store(vec![("a", r(&[m, k])), ("b", r(&[k, n]))]),
            Box::new(|t: &Tape, s: &ParamStore| {
                let y = t.param_named(s, "a")?.matmul(t.param_named(s, "b")?)?;
                weighted_sum(y, 1)
            }),
        ),
        (
            "matmul_batched",
            store(vec![("a", r(&[b, m, k])), ("b", r(&[b, k, n])), ("c", r(&[n, k]))]),
            Box::new(|t: &Tape, s: &ParamStore| {
                let y = t.param_named(s, "a")?.matmul(t.param_named(s, "b")?)?;
                let z = y.matmul(t.param_named(s, "c")?)?;
                weighted_sum(z, 2)
            }),
        ),
        (
            "transpose",
            store(vec![("a", r(&[m, k]))]),
            Box::new(|t: &Tape, s: &ParamStore| weighted_sum(t.param_named(s, "a")?.transpose()?, 3)),
        ),
        (
            "add_sub_broadcast",
            store(vec![("a", r(&[m, n])), ("row", r(&[n])), ("col", r(&[m, 1]))]),
            Box::new(|t: &Tape, s: &ParamStore| {
                let y = t.param_named(s, "a")?.add(t.param_named(s, "row")?)?;
                let y = y.sub(t.param_named(s, "col")?)?;
                weighted_sum(y, 4)
            }),
        ),
        (
            "mul_scale",
            store(vec![("a", r(&[m, n])), ("b", r(&[m, n])), ("col", r(&[m, 1]))]),
            Box::new(|t: &Tape, s: &ParamStore| {
                let y = t.param_named(s, "a")?.mul(t.param_named(s, "b")?)?;
                let y = y.mul(t.param_named(s, "col")?)?.scale(-1.7);
                weighted_sum(y, 5)
            }),
        ),
        (
            "softmax",
            store(vec![("a", r(&[b, m, n]))]),
            Box::new(|t: &Tape, s: &ParamStore| {
                let a = t.param_named(s, "a")?;
                let y = a.softmax(1)?.add(a.softmax(2)?)?;
                weighted_sum(y, 6)
            }),
        ),
        (
            "masked_softmax",
            store(vec![("a", r(&[m, n]))]),
            Box::new(move |t: &Tape, s: &ParamStore| {
                weighted_sum(t.param_named(s, "a")?.masked_softmax(&mask)?, 7)
            }),
        ),
        (
            "layer_norm",
            store(vec![("x", r(&[m, k])), ("gain", r(&[k])), ("bias", r(&[k]))]),
            Box::new(|t: &Tape, s: &ParamStore| {
                let y = t.param_named(s, "x")?.layer_norm(
                    t.param_named(s, "gain")?,
                    t.param_named(s, "bias")?,
                    1e-5,
                )?;
                weighted_sum(y, 8)
            }),
        ),
        (
            "gelu",
            store(vec![("a", r(&[m, n]).map(|x| 3.0 * x))]),
            Box::new(|t: &Tape, s: &ParamStore| weighted_sum(t.param_named(s, "a")?.gelu(), 9)),
        ),
        (
            "sigmoid",
            store(vec![("a", r(&[m, n]).map(|x| 3.0 * x))]),
            Box::new(|t: &Tape, s: &ParamStore| weighted_sum(t.param_named(s, "a")?.sigmoid(), 10)),
        ),
        (
            "cross_entropy",
            store(vec![("z", r(&[m, v]).map(|x| 2.0 * x))]),
            Box::new(move |t: &Tape, s: &ParamStore| {
                let w: Vec<f64> = (0..targets.len()).map(|i| 0.5 + i as f64).collect();
                t.param_named(s, "z")?.cross_entropy(&targets, &w)
            }),
        ),
        (
            "mse",
            store(vec![("a", r(&[m, k])), ("b", r(&[m, k]))]),
            Box::new(|t: &Tape, s: &ParamStore| t.param_named(s, "a")?.mse(t.param_named(s, "b")?)),
        ),
        (
            "dropout",
            store(vec![("a", r(&[m, n]))]),
            Box::new(|t: &Tape, s: &ParamStore| {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                weighted_sum(t.param_named(s, "a")?.dropout(0.3, true, &mut rng)?, 11)
            }),
        ),
        (
            "concat_narrow",
            store(vec![("a", r(&[m, k])), ("b", r(&[m, n]))]),
            Box::new(|t: &Tape, s: &ParamStore| {
                let c = Var::concat(&[t.param_named(s, "a")?, t.param_named(s, "b")?], 1)?;
                let d = Var::concat(&[c, c.narrow(1, 1, 2)?], 1)?;
                let e = Var::concat(&[d, d], 0)?;
                weighted_sum(e, 12)
            }),
        ),
        (
            "embedding",
            store(vec![("table", r(&[v, k]))]),
            Box::new(move |t: &Tape, s: &ParamStore| {
                weighted_sum(t.param_named(s, "table")?.embedding(&ids)?, 13)
            }),
        ),
        (
            "linear",
            store(vec![("x", r(&[m, k])), ("w", r(&[k, n])), ("b", r(&[n]))]),
            Box::new(|t: &Tape, s: &ParamStore| {
                let y = t
                    .param_named(s, "x")?
                    .linear(t.param_named(s, "w")?, Some(t.param_named(s, "b")?))?;
                weighted_sum(y, 14)
            }),
        ),
        (
            "sum_mean_reshape",
            store(vec![("a", r(&[m, n]))]),
            Box::new(move |t: &Tape, s: &ParamStore| {
                let a = t.param_named(s, "a")?;
                let sq = a.mul(a)?;
                let flat = sq.reshape(&[m * n])?;
                weighted_sum(flat, 15)?.add(sq.mean())?.add(a.sum())
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, mut params, f)| {
            let report = gradcheck(&mut params, DEFAULT_STEP, |t, s| f(t, s));
            (name.to_string(), report)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_zero_error() {
        let mut s = store(vec![("w", Tensor::scalar(0.7))]);
        let r = gradcheck(&mut s, DEFAULT_STEP, |t, s| Ok(t.param_named(s, "w")?.scale(3.0)));
        assert!(r.max_rel_err() < 1e-9, "{r:?}");
    }

    #[test]
    fn constant_function_gives_zero_both_ways() {
        let mut s = store(vec![("w", Tensor::scalar(0.7))]);
        let r = gradcheck(&mut s, DEFAULT_STEP, |t, _| Ok(t.constant(Tensor::scalar(2.0))));
        assert_eq!(r.params[0].analytic, 0.0);
        assert_eq!(r.params[0].numeric, 0.0);
        assert_eq!(r.max_rel_err(), 0.0);
    }

    #[test]
    fn non_finite_loss_reports_failure() {
        let mut s = store(vec![("w", Tensor::scalar(0.0))]);
        let r = gradcheck(&mut s, DEFAULT_STEP, |t, s| {
            let w = t.param_named(s, "w")?;
            let inf = t.constant(Tensor::scalar(f64::INFINITY));
            w.add(inf)
        });
        assert!(r.failure.is_some());
        assert!(!r.passed(1e-4));
    }

    #[test]
    fn every_op_passes_on_several_seeds() {
        for seed in 0..3 {
            for (name, report) in op_suite(seed) {
                assert!(report.passed(1e-4), "{name} seed {seed}: {report:?}");
            }
        }
    }
}
