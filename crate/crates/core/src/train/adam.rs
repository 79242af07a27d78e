//! Adam with bias correction, no weight decay.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One update of a flat parameter slice at 1-based step `t`.
pub fn adam_step(param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], t: u64, h: &AdamHyper) -> Result<()> {
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::shape(
            "adam_step",
            format!("param {n}, grad {}, m {}, v {}", grad.len(), m.len(), v.len()),
        ));
    }
    let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
    let c1 = (1.0 - h.beta1.powi(t as i32)) as f32;
    let c2 = (1.0 - h.beta2.powi(t as i32)) as f32;
    let (lr, eps) = (h.lr as f32, h.eps as f32);
    for (((p, &g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer state over a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed steps.
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, hyper: AdamHyper) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.value(*id).shape().to_vec());
        Self {
            hyper,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
            t: 0,
        }
    }

    /// Applies one update. `grads[i]` belongs to `ids[i]`; `None` means the
    /// parameter did not reach the loss and counts as a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<&Tensor>]) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::shape(
                "adam",
                format!("{} grads for {} params", grads.len(), self.ids.len()),
            ));
        }
        self.t += 1;
        for (i, &id) in self.ids.iter().enumerate() {
            let p = store.value_mut(id);
            let zero;
            let g = match grads[i] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.shape().to_vec());
                    &zero
                }
            };
            p.expect_same_shape(g, "adam")?;
            adam_step(
                p.data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.t,
                &self.hyper,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: AdamHyper = AdamHyper {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    /// Index-by-index reference.
    fn adam_loop(param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], t: u64, h: &AdamHyper) {
        for i in 0..param.len() {
            m[i] = h.beta1 as f32 * m[i] + (1.0 - h.beta1 as f32) * grad[i];
            v[i] = h.beta2 as f32 * v[i] + (1.0 - h.beta2 as f32) * grad[i] * grad[i];
            let mhat = m[i] / (1.0 - h.beta1.powi(t as i32)) as f32;
            let vhat = v[i] / (1.0 - h.beta2.powi(t as i32)) as f32;
            param[i] -= h.lr as f32 * mhat / (vhat.sqrt() + h.eps as f32);
        }
    }

    #[test]
    fn zero_gradient_on_fresh_state() {
        let mut p = [1.0f32, -2.0, 3.0];
        let (mut m, mut v) = ([0.0f32; 3], [0.0f32; 3]);
        adam_step(&mut p, &[0.0; 3], &mut m, &mut v, 1, &H).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
        let (mut m, mut v) = ([0.5f32; 3], [0.25f32; 3]);
        adam_step(&mut p, &[0.0; 3], &mut m, &mut v, 2, &H).unwrap();
        assert_eq!(m, [0.9f32 * 0.5; 3]);
        assert_eq!(v, [0.999f32 * 0.25; 3]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // At t=1, mhat = g and vhat = g², so the step is lr·g/(|g|+eps).
        let g = [0.5f32, -2.0, 1e-3];
        let mut p = [0.0f32; 3];
        let (mut m, mut v) = ([0.0f32; 3], [0.0f32; 3]);
        adam_step(&mut p, &g, &mut m, &mut v, 1, &H).unwrap();
        for i in 0..3 {
            let want = -(1e-3 * g[i] as f64 / (g[i].abs() as f64 + 1e-8));
            // f32 arithmetic: a few ulps of relative error.
            assert!(
                (p[i] as f64 - want).abs() < 1e-5 * want.abs(),
                "{i}: {} vs {want}",
                p[i]
            );
        }
    }

    #[test]
    fn slice_and_loop_paths_agree_bitwise() {
        use crate::rng::stream;
        let mut rng = stream(5, 0);
        let p0 = Tensor::<f32>::randn([64], 1.0, &mut rng);
        let (mut a, mut b) = (p0.clone(), p0);
        let (mut ma, mut va, mut mb, mut vb) = (vec![0.0; 64], vec![0.0; 64], vec![0.0; 64], vec![0.0; 64]);
        for t in 1..=20 {
            let g = Tensor::<f32>::randn([64], 1.0, &mut rng);
            adam_step(a.data_mut(), g.data(), &mut ma, &mut va, t, &H).unwrap();
            adam_loop(b.data_mut(), g.data(), &mut mb, &mut vb, t, &H);
        }
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(va, vb);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = [0.3f32, 0.7];
        let (mut m, mut v) = ([0.0f32; 2], [0.0f32; 2]);
        let h = AdamHyper { lr: 0.0, ..H };
        adam_step(&mut p, &[4.0, -1.0], &mut m, &mut v, 1, &h).unwrap();
        assert_eq!(p, [0.3, 0.7]);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut p = [0.0f32; 2];
        let (mut m, mut v) = ([0.0f32; 2], [0.0f32; 2]);
        assert!(adam_step(&mut p, &[1.0], &mut m, &mut v, 1, &H).is_err());
    }
}
