//! Finite-difference oracles shared by unit tests.

use crate::{Result, Tape, Tensor, Var};

/// Evaluates `f` with all inputs as constants.
pub fn eval(f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Central-difference gradient of `f` with respect to every input.
pub fn numeric_grad(
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    h: f64,
) -> Vec<Tensor> {
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            g.data_mut()[i] = (eval(f, &plus) - eval(f, &minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

pub fn analytic_grad(
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    vars.iter().map(|&v| grads.or_zeros(&tape, v)).collect()
}

/// Asserts analytic and numeric gradients agree within
/// `max(rtol * scale, atol)` per entry.
pub fn assert_grad_close(
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    h: f64,
    rtol: f64,
    atol: f64,
) {
    let a = analytic_grad(f, inputs);
    let n = numeric_grad(f, inputs, h);
    for (k, (ga, gn)) in a.iter().zip(&n).enumerate() {
        for (i, (x, y)) in ga.data().iter().zip(gn.data()).enumerate() {
            let tol = (rtol * x.abs().max(y.abs())).max(atol);
            assert!(
                (x - y).abs() <= tol,
                "input {k} entry {i}: analytic {x} vs numeric {y}"
            );
        }
    }
}
