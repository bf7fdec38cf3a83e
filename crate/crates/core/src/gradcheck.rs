//! Central finite-difference gradient checking used across the test suites.

use crate::params::ParamStore;
use crate::tape::{NodeId, Tape, Value};

pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `eval` with respect to every entry of `x`.
pub fn fd_grad(eval: &mut dyn FnMut(&Value) -> f64, x: &Value, step: f64) -> Value {
    let mut grad = Value::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_memory_order().unwrap()[idx];
        probe.as_slice_memory_order_mut().unwrap()[idx] = orig + step;
        let fp = eval(&probe);
        probe.as_slice_memory_order_mut().unwrap()[idx] = orig - step;
        let fm = eval(&probe);
        probe.as_slice_memory_order_mut().unwrap()[idx] = orig;
        grad.as_slice_memory_order_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Central differences on a subset of flat entry indices (for large tensors).
pub fn fd_grad_sampled(
    eval: &mut dyn FnMut(&Value) -> f64,
    x: &Value,
    step: f64,
    entries: &[usize],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(entries.len());
    let mut probe = x.clone();
    for &idx in entries {
        let orig = probe.as_slice_memory_order().unwrap()[idx];
        probe.as_slice_memory_order_mut().unwrap()[idx] = orig + step;
        let fp = eval(&probe);
        probe.as_slice_memory_order_mut().unwrap()[idx] = orig - step;
        let fm = eval(&probe);
        probe.as_slice_memory_order_mut().unwrap()[idx] = orig;
        out.push((fp - fm) / (2.0 * step));
    }
    out
}

/// Relative error with a floor so near-zero gradient pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error between an analytic and a numeric gradient array.
pub fn max_rel_err(analytic: &Value, numeric: &Value) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}

/// Analytic-vs-FD check over every entry of every non-frozen parameter in the
/// store. `build` must construct a scalar loss node from the given store.
pub fn store_grad_err(store: &ParamStore, build: &dyn Fn(&mut Tape, &ParamStore) -> NodeId) -> f64 {
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &work);
    let grads = tape.backward(loss);
    work.accumulate(&tape, &grads);

    let names = work.names();
    let mut worst: f64 = 0.0;
    for name in names {
        if work.get(&name).frozen {
            continue;
        }
        let base = work.get(&name).value.clone();
        let mut eval = |v: &Value| {
            let mut probe = work.clone();
            probe.set_value(&name, v.clone());
            let mut t = Tape::new();
            let l = build(&mut t, &probe);
            t.scalar(l)
        };
        let numeric = fd_grad(&mut eval, &base, FD_STEP);
        let err = max_rel_err(&work.get(&name).grad, &numeric);
        worst = worst.max(err);
    }
    worst
}

/// Like [`store_grad_err`] but checks at most `per_tensor` deterministic
/// entries of each parameter, for large models.
pub fn store_grad_err_sampled(
    store: &ParamStore,
    build: &dyn Fn(&mut Tape, &ParamStore) -> NodeId,
    per_tensor: usize,
) -> f64 {
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &work);
    let grads = tape.backward(loss);
    work.accumulate(&tape, &grads);

    let names = work.names();
    let mut worst: f64 = 0.0;
    for (t_idx, name) in names.iter().enumerate() {
        if work.get(name).frozen {
            continue;
        }
        let base = work.get(name).value.clone();
        let n = base.len();
        let count = per_tensor.min(n);
        // deterministic stride-spread sample over the flat entries
        let entries: Vec<usize> =
            (0..count).map(|i| (i * n / count + t_idx) % n).collect();
        let mut eval = |v: &Value| {
            let mut probe = work.clone();
            probe.set_value(name, v.clone());
            let mut t = Tape::new();
            let l = build(&mut t, &probe);
            t.scalar(l)
        };
        let numeric = fd_grad_sampled(&mut eval, &base, FD_STEP, &entries);
        let analytic = &work.get(name).grad;
        let flat = analytic.as_slice_memory_order().unwrap();
        for (slot, &e) in entries.iter().enumerate() {
            worst = worst.max(rel_err(flat[e], numeric[slot]));
        }
    }
    worst
}
