//! Central finite-difference gradient checks.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-6)` between analytic and numeric gradients.
/// The floor keeps structurally zero gradients from reporting pure noise.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-6)
}

fn scalar_loss(tape: &Tape<f64>, v: Var) -> f64 {
    let t = tape.value(v);
    assert_eq!(t.len(), 1, "gradient check needs a scalar loss");
    t.data()[0]
}

/// Checks `f` w.r.t. each leaf input. Returns the relative error per input.
pub fn check_inputs(inputs: &[Tensor<f64>], h: f64, f: impl Fn(&Tape<f64>, &[Var]) -> Var) -> Vec<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss);
    let mut errs = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut perturbed = inputs.to_vec();
                perturbed[k].data_mut()[i] += delta;
                let t = Tape::new();
                let vs: Vec<Var> = perturbed.into_iter().map(|p| t.leaf(p)).collect();
                let l = f(&t, &vs);
                scalar_loss(&t, l)
            };
            numeric[i] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        errs.push(relative_error(&analytic, &numeric));
    }
    errs
}

/// Checks `f` w.r.t. every trainable parameter in `store`. The closure gets a
/// fresh tape and the (possibly perturbed) store and must return the scalar
/// loss. Returns `(parameter name, relative error)` pairs.
pub fn check_params(
    store: &ParamStore<f64>,
    h: f64,
    f: impl Fn(&Tape<f64>, &ParamStore<f64>) -> Var,
) -> Vec<(String, f64)> {
    let tape = Tape::new();
    let loss = f(&tape, store);
    let grads = tape.backward(loss).param_grads();
    let mut out = Vec::new();
    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        let analytic: Vec<f64> = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, g)| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; p.value.len()]);
        let mut numeric = vec![0.0; p.value.len()];
        for i in 0..p.value.len() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).value.data_mut()[i] += delta;
                let t = Tape::new();
                let l = f(&t, &s);
                scalar_loss(&t, l)
            };
            numeric[i] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        out.push((p.name.clone(), relative_error(&analytic, &numeric)));
    }
    out
}
