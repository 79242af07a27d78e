use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central finite differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every
/// element of `x`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<Tensor<f64>> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Domain(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both are zero.
pub fn rel_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.l2_norm().max(b.l2_norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compares tape gradients of a scalar function of several inputs against
/// central finite differences, returning one relative error per input.
///
/// `f` receives the leaf handles of `inputs` (all with `requires_grad`) and
/// must return a scalar.
pub fn check_gradients(
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let numeric = finite_diff_grad(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let out = f(&mut g, &vars)?;
                Ok(g.value(out).item())
            },
            input,
            h,
        )?;
        errors.push(rel_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Reduces an arbitrary tensor to a scalar with fixed pseudo-random weights,
/// so every output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = Tensor::from_fn(shape, |i| ((i as f64 * 0.618_033_988_7).fract() - 0.5) * 2.0 + 0.1);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}
