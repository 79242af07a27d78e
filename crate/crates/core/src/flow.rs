//! Rectified-flow objective and Euler integration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EditInput, Model};
use crate::params::GradMode;
use crate::prompt::PromptTokens;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// One point on the straight path from noise `x0` to data `x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T: Scalar = f32> {
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub t: f64,
    pub xt: Tensor<T>,
    pub u: Tensor<T>,
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("flow time {t} outside [0, 1]")))
    }
}

/// `xt = t·x1 + (1−t)·x0`, `u = x1 − x0`. The endpoints are exact.
pub fn interpolate<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>, t: f64) -> Result<FlowSample<T>> {
    check_time(t)?;
    x0.expect_same_shape(x1, "interpolate")?;
    let xt = lerp(x0, x1, t)?;
    let u = x1.sub(x0)?;
    Ok(FlowSample {
        x0: x0.clone(),
        x1: x1.clone(),
        t,
        xt,
        u,
    })
}

fn lerp<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(x1.clone());
    }
    let (a, b) = (T::of(t), T::of(1.0 - t));
    x0.zip_map(x1, "interpolate", |n, d| a * d + b * n)
}

/// Per-sample interpolation along the leading axis: row `i` uses
/// `times[i]`. Returns `(xt, u)`.
pub fn interpolate_rows<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>, times: &[f64]) -> Result<(Tensor<T>, Tensor<T>)> {
    x0.expect_same_shape(x1, "interpolate_rows")?;
    let n = x0.shape().first().copied().unwrap_or(0);
    if times.len() != n {
        return Err(Error::shape(
            "interpolate_rows",
            format!("{} times for {n} rows", times.len()),
        ));
    }
    let row = x0.len().checked_div(n).unwrap_or(0);
    let mut xt = Vec::with_capacity(x0.len());
    for (i, &t) in times.iter().enumerate() {
        check_time(t)?;
        let r = i * row..(i + 1) * row;
        let (a, b) = (&x0.data()[r.clone()], &x1.data()[r]);
        if t == 0.0 {
            xt.extend_from_slice(a);
        } else if t == 1.0 {
            xt.extend_from_slice(b);
        } else {
            let (tt, ot) = (T::of(t), T::of(1.0 - t));
            xt.extend(a.iter().zip(b).map(|(&n, &d)| tt * d + ot * n));
        }
    }
    Ok((Tensor::new(x0.shape().to_vec(), xt)?, x1.sub(x0)?))
}

/// Which rows of a stacked batch the loss supervises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossRegion {
    All,
    /// Rows `[B, 2B)` of a `[source; target]` batch.
    TargetStream,
}

/// Binary mask selecting the target half of a stacked `[2B, ...]` shape.
pub fn target_stream_mask<T: Scalar>(shape: &[usize]) -> Result<Tensor<T>> {
    let n = shape.first().copied().unwrap_or(0);
    if n % 2 != 0 {
        return Err(Error::shape("target_stream_mask", format!("odd stacked batch {n}")));
    }
    let row: usize = shape[1..].iter().product();
    Ok(Tensor::from_fn(shape.to_vec(), |i| {
        if i >= (n / 2) * row {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Mean squared error between predicted velocity and `u`. For
/// [`LossRegion::TargetStream`], `u` covers the whole stacked batch and the
/// source rows are ignored.
pub fn fm_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, u: &Tensor<T>, region: LossRegion) -> Result<Var> {
    let target = g.constant(u.clone());
    match region {
        LossRegion::All => g.mse(pred, target, None),
        LossRegion::TargetStream => {
            let mask = target_stream_mask(u.shape())?;
            g.mse(pred, target, Some(&mask))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 32 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// A time-dependent velocity field over `f32` tensors.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

/// Forward Euler on the uniform grid `t_k = k/steps`.
pub fn euler_sample(field: &impl VelocityField, x0: &Tensor, cfg: &SamplerConfig) -> Result<Tensor> {
    cfg.validate()?;
    let dt = 1.0 / cfg.steps as f64;
    let mut x = x0.clone();
    for k in 0..cfg.steps {
        let t = k as f64 * dt;
        let v = field.velocity(&x, t)?;
        x.expect_same_shape(&v, "euler_sample")?;
        let dtf = dt as f32;
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dtf * vi;
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteState(k));
        }
    }
    Ok(x)
}

/// Pixels in `[0, 1]` to model space `[-1, 1]`.
pub fn encode_pixels(px: &Tensor) -> Tensor {
    px.map(|v| 2.0 * v - 1.0)
}

/// Model space back to pixels, clamped to `[0, 1]`.
pub fn decode_pixels(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Target-stream velocity of the stacked model with the source held clean.
pub struct EditField<'a> {
    pub model: &'a Model,
    /// Encoded source, `[B, F, C, S, S]`.
    pub source: &'a Tensor,
    pub src_prompts: &'a [PromptTokens],
    pub edit_prompts: &'a [PromptTokens],
}

impl VelocityField for EditField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let b = self.source.shape()[0];
        let mut g = Graph::<f32>::new();
        let p = self.model.bind(&mut g, GradMode::None);
        let times = vec![t; b];
        let input = EditInput {
            source: self.source,
            target: x,
            times: &times,
            src_prompts: self.src_prompts,
            edit_prompts: self.edit_prompts,
        };
        let (v, _) = self.model.edit_forward(&mut g, &p, &input)?;
        let v = g.narrow(v, 0, b, b)?;
        Ok(g.value(v).clone())
    }
}

/// Plain backbone velocity under fixed prompts.
pub struct BackboneField<'a> {
    pub model: &'a Model,
    pub prompts: &'a [PromptTokens],
}

impl VelocityField for BackboneField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let p = self.model.bind(&mut g, GradMode::None);
        let times = vec![t; self.prompts.len()];
        let v = self.model.backbone_forward(&mut g, &p, x, &times, self.prompts)?;
        Ok(g.value(v).clone())
    }
}

/// Edits `source` pixels `[B, F, C, S, S]` in `[0, 1]`; the target stream
/// starts from standard normal noise drawn from `rng`.
pub fn edit_sample(
    model: &Model,
    source: &Tensor,
    src_prompts: &[PromptTokens],
    edit_prompts: &[PromptTokens],
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if source.rank() != 5 {
        return Err(Error::shape(
            "edit_sample",
            format!("source {:?} is not [B,F,C,S,S]", source.shape()),
        ));
    }
    if source.shape()[1] > model.cfg().frames_max {
        return Err(Error::Domain(format!(
            "{} frames exceed the limit of {}",
            source.shape()[1],
            model.cfg().frames_max
        )));
    }
    let enc = encode_pixels(source);
    let field = EditField {
        model,
        source: &enc,
        src_prompts,
        edit_prompts,
    };
    let x0 = Tensor::randn(source.shape().to_vec(), 1.0, rng);
    let x1 = euler_sample(&field, &x0, cfg)?;
    Ok(decode_pixels(&x1))
}

/// Samples the bare backbone for `prompts` at `frames` frames.
pub fn backbone_sample(
    model: &Model,
    prompts: &[PromptTokens],
    frames: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let c = model.cfg();
    let shape = [prompts.len(), frames, c.channels, c.image_size, c.image_size];
    let field = BackboneField { model, prompts };
    let x0 = Tensor::randn(shape, 1.0, rng);
    let x1 = euler_sample(&field, &x0, cfg)?;
    Ok(decode_pixels(&x1))
}
