//! Central finite-difference gradient checking.
//!
//! Analytic gradients come from [`Graph::backward`] at the dtype under test.
//! The finite-difference side only ever runs forward passes, always in
//! `f64`, so its error is dominated by the step size rather than by the
//! rounding of the dtype being checked.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{DType, Graph, Real, Tensor, Var};
use crate::transformer::{Ctx, Mode, TokenBatch, Transformer};

/// Central-difference step for checking gradients computed at `dtype`.
pub fn fd_step(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-3,
        DType::F64 => 1e-5,
    }
}

/// Maximum tolerated relative error for gradients computed at `dtype`.
pub fn rel_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-4,
        DType::F64 => 1e-8,
    }
}

/// Relative error `|a − n| / max(|a|, |n|, 1)`.
///
/// The unit floor turns the measure into an absolute error for components
/// below one, where a pure ratio is dominated by cancellation noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// A scalar function of tensors, buildable on a graph of any precision.
pub trait ScalarFn {
    fn eval<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(input, element)` with the largest error.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradReport {
    pub fn merge(self, other: GradReport) -> GradReport {
        let (max_rel_err, worst) = if other.max_rel_err > self.max_rel_err {
            (other.max_rel_err, other.worst)
        } else {
            (self.max_rel_err, self.worst)
        };
        GradReport {
            max_rel_err,
            worst,
            checked: self.checked + other.checked,
        }
    }
}

fn eval_f64<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f.eval(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Analytic gradients of `f` at precision `T`.
pub fn analytic_gradients<T: Real, F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::<T>::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.cast()))
        .collect::<Result<Vec<_>>>()?;
    let out = f.eval(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Central finite differences of `f` with respect to every input element.
pub fn numeric_gradients<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>], step: f64) -> Result<Vec<Tensor<f64>>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval_f64(f, &work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval_f64(f, &work)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares analytic gradients at precision `T` with f64 central differences.
pub fn check_gradients<T: Real, F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<GradReport> {
    let analytic = analytic_gradients::<T, F>(f, inputs)?;
    let numeric = numeric_gradients(f, inputs, fd_step(T::DTYPE))?;
    Ok(compare(&analytic, &numeric))
}

/// A scalar function of the parameters in a store.
pub trait StoreFn {
    fn eval<T: Real>(&self, ctx: &mut Ctx<'_, T>) -> Result<Var>;
}

fn store_loss<F: StoreFn>(f: &F, store: &ParamStore<f64>, mode: Mode) -> Result<f64> {
    let mut ctx = Ctx::new(store, mode);
    let out = f.eval(&mut ctx)?;
    Ok(ctx.graph.value(out).item())
}

/// Checks the gradient of `f` with respect to every trainable entry of
/// `store`. Buffers and frozen entries are skipped.
pub fn check_store_gradients<T: Real, F: StoreFn>(f: &F, store: &ParamStore<f64>, mode: Mode) -> Result<GradReport> {
    let cast = store.cast::<T>();
    let mut ctx = Ctx::new(&cast, mode);
    let out = f.eval(&mut ctx)?;
    ctx.backward(out)?;
    let grads = ctx.param_grads();
    let step = fd_step(T::DTYPE);
    let mut work = store.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in store.ids().filter(|&id| store.entry(id).trainable()) {
        let orig = store.value(id);
        let mut fd = Tensor::zeros(orig.shape());
        for j in 0..orig.numel() {
            let v = orig.data()[j];
            work.value_mut(id).data_mut()[j] = v + step;
            let plus = store_loss(f, &work, mode)?;
            work.value_mut(id).data_mut()[j] = v - step;
            let minus = store_loss(f, &work, mode)?;
            work.value_mut(id).data_mut()[j] = v;
            fd.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        analytic.push(grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(orig.shape())));
        numeric.push(fd);
    }
    Ok(compare(&analytic, &numeric))
}

/// Training loss of a model on one batch.
pub struct ModelLoss<'a> {
    pub model: &'a Transformer<f64>,
    pub batch: &'a TokenBatch,
    pub targets: &'a [usize],
}

impl StoreFn for ModelLoss<'_> {
    fn eval<T: Real>(&self, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        self.model.loss(ctx, self.batch, self.targets).map(|(_, loss)| loss)
    }
}

/// Full-model gradient check at precision `T`, in training mode.
pub fn check_model_gradients<T: Real>(
    model: &Transformer<f64>,
    batch: &TokenBatch,
    targets: &[usize],
) -> Result<GradReport> {
    check_store_gradients::<T, _>(&ModelLoss { model, batch, targets }, &model.store, Mode::Train)
}

pub fn compare<T: Real>(analytic: &[Tensor<T>], numeric: &[Tensor<f64>]) -> GradReport {
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let e = rel_err(av.as_f64(), nv);
            report.checked += 1;
            if e > report.max_rel_err || e.is_nan() {
                report.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
                report.worst = (i, j);
            }
        }
    }
    report
}
