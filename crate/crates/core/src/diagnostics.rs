//! Finite-difference gradient suite over every differentiable operation, the
//! layers built from them, and the end-to-end flow-matching loss.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::DiTConfig;
use crate::error::Result;
use crate::flow::{fm_loss, interpolate_rows, LossRegion};
use crate::model::{EditInput, Model, ADAPTER_PREFIX};
use crate::nn::{GateProj, MultiHeadAttention};
use crate::params::{Bound, GradMode, ParamId, ParamStore};
use crate::predict_update::AblationMode;
use crate::prompt::PromptTokens;
use crate::rng::{stream, streams};
use crate::spatial::{phi, TokenGrid};
use crate::tensor::{check_gradients, finite_diff_grad, rel_error, weighted_sum, Graph, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        writeln!(f, "{:<w$}  {:>10}  {:>8}  result", "check", "rel_err", "tol")?;
        for r in &self.rows {
            let verdict = if r.passed { "PASS" } else { "FAIL" };
            writeln!(
                f,
                "{:<w$}  {:>10.3e}  {:>8.0e}  {verdict}",
                r.name, r.rel_error, r.tolerance
            )?;
        }
        Ok(())
    }
}

fn row(name: &str, errs: &[f64], tolerance: f64) -> GradcheckRow {
    let e = errs.iter().copied().fold(0.0, f64::max);
    GradcheckRow {
        name: name.to_string(),
        rel_error: e,
        tolerance,
        passed: e.is_finite() && e < tolerance,
    }
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn op_cases(r: &mut impl Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let mut n = |shape: &[usize]| Tensor::<f64>::randn(shape.to_vec(), 1.0, r);
    let mask = Tensor::from_fn([3, 4], |i| (i % 3 != 1) as u8 as f64);
    vec![
        (
            "matmul",
            vec![n(&[3, 4]), n(&[4, 2])],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "matmul/batched",
            vec![n(&[2, 3, 4]), n(&[2, 4, 2])],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "matmul/shared",
            vec![n(&[2, 3, 4]), n(&[4, 5])],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "matmul_t",
            vec![n(&[2, 3, 4]), n(&[2, 5, 4])],
            Box::new(|g, v| {
                let y = g.matmul_t(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "add",
            vec![n(&[2, 3]), n(&[2, 3])],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "sub",
            vec![n(&[2, 3]), n(&[2, 3])],
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "mul",
            vec![n(&[2, 3]), n(&[2, 3])],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "add_suffix",
            vec![n(&[2, 3, 4]), n(&[3, 4])],
            Box::new(|g, v| {
                let y = g.add_suffix(v[0], v[1])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "scale",
            vec![n(&[5])],
            Box::new(|g, v| {
                let y = g.scale(v[0], -1.7);
                weighted_sum(g, y)
            }),
        ),
        (
            "sigmoid",
            vec![n(&[6])],
            Box::new(|g, v| {
                let y = g.sigmoid(v[0]);
                weighted_sum(g, y)
            }),
        ),
        (
            "gelu",
            vec![n(&[8])],
            Box::new(|g, v| {
                let y = g.gelu(v[0]);
                weighted_sum(g, y)
            }),
        ),
        (
            "softmax",
            vec![n(&[3, 5])],
            Box::new(|g, v| {
                let y = g.softmax(v[0])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "layer_norm",
            vec![n(&[4, 6]), n(&[6]), n(&[6])],
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "reshape+permute",
            vec![n(&[2, 3, 4])],
            Box::new(|g, v| {
                let y = g.reshape(v[0], [6, 4])?;
                let y = g.permute(y, &[1, 0])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "concat+narrow",
            vec![n(&[2, 3]), n(&[2, 2])],
            Box::new(|g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let y = g.narrow(c, 1, 1, 3)?;
                weighted_sum(g, y)
            }),
        ),
        (
            "gather_rows",
            vec![n(&[5, 3])],
            Box::new(|g, v| {
                let y = g.gather_rows(v[0], &[4, 0, 4, 2])?;
                weighted_sum(g, y)
            }),
        ),
        (
            "repeat",
            vec![n(&[2, 1, 3])],
            Box::new(|g, v| {
                let y = g.repeat(v[0], 1, 4)?;
                weighted_sum(g, y)
            }),
        ),
        ("sum", vec![n(&[3, 2])], Box::new(|g, v| Ok(g.sum(v[0])))),
        (
            "mse/masked",
            vec![n(&[3, 4]), n(&[3, 4])],
            Box::new(move |g, v| g.mse(v[0], v[1], Some(&mask))),
        ),
    ]
}

/// Relative error of tape gradients for `ids` of `store` against central
/// differences, all parameters treated as one vector.
pub fn params_gradcheck(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    loss: &dyn Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, GradMode::All);
    let l = loss(&mut g, &p)?;
    let grads = g.backward(l)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = store.clone();
    for &id in ids {
        let a = grads
            .get(p[id])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec()));
        analytic.extend_from_slice(a.data());
        let fd = finite_diff_grad(
            |t| {
                *probe.value_mut(id) = t.clone();
                let mut g = Graph::new();
                let p = probe.bind(&mut g, GradMode::None);
                let l = loss(&mut g, &p)?;
                Ok(g.value(l).item())
            },
            store.value(id),
            STEP,
        )?;
        *probe.value_mut(id) = store.value(id).clone();
        numeric.extend_from_slice(fd.data());
    }
    let n = analytic.len();
    Ok(rel_error(&Tensor::new([n], analytic)?, &Tensor::new([n], numeric)?))
}

/// Replaces every adapter tensor with a random one so no path is zeroed out.
pub fn randomize_adapter(model: &mut Model, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with(ADAPTER_PREFIX))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let v = model.store.value_mut(id);
        let noise = Tensor::<f32>::randn(v.shape().to_vec(), 0.3, rng);
        *v = v.add(&noise).expect("same shape");
    }
}

/// Fixed two-sample batch for the end-to-end checks.
struct TinyBatch {
    source: Tensor<f64>,
    x0: Tensor<f64>,
    x1: Tensor<f64>,
    times: Vec<f64>,
    src: Vec<PromptTokens>,
    edit: Vec<PromptTokens>,
}

fn tiny_batch(cfg: &DiTConfig, r: &mut impl Rng) -> Result<TinyBatch> {
    let shape = [2, cfg.frames_max, cfg.channels, cfg.image_size, cfg.image_size];
    Ok(TinyBatch {
        source: Tensor::rand_uniform(shape, -1.0, 1.0, r),
        x0: Tensor::randn(shape, 1.0, r),
        x1: Tensor::rand_uniform(shape, -1.0, 1.0, r),
        times: vec![0.3, 0.8],
        src: vec![
            PromptTokens::new(&[1, 9, 17])?,
            PromptTokens::new(&[2, 10, 18, 11, 19])?,
        ],
        edit: vec![PromptTokens::new(&[1, 12, 17])?, PromptTokens::new(&[3, 10, 18])?],
    })
}

fn edit_loss<'a>(
    model: &'a Model,
    b: &'a TinyBatch,
    region: LossRegion,
) -> impl Fn(&mut Graph<f64>, &Bound) -> Result<Var> + 'a {
    move |g, p| {
        let (xt, u) = interpolate_rows(&b.x0, &b.x1, &b.times)?;
        let input = EditInput {
            source: &b.source,
            target: &xt,
            times: &b.times,
            src_prompts: &b.src,
            edit_prompts: &b.edit,
        };
        let (v, _) = model.edit_forward(g, p, &input)?;
        let u2 = Tensor::concat(&[&Tensor::zeros(u.shape().to_vec()), &u], 0)?;
        fm_loss(g, v, &u2, region)
    }
}

/// Runs the whole suite in 64-bit arithmetic.
pub fn gradcheck_suite(seed: u64) -> Result<GradcheckReport> {
    let mut r = stream(seed, streams::GRADCHECK);
    let mut rows = Vec::new();

    for (name, inputs, f) in op_cases(&mut r) {
        rows.push(row(name, &check_gradients(f, &inputs, STEP)?, OP_TOLERANCE));
    }

    let cfg = DiTConfig::tiny();
    let d = cfg.dim;
    let mut store = ParamStore::<f32>::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", d, cfg.heads, true, &mut r)?;
    let gate = GateProj::new(&mut store, "gate", d, true, &mut r)?;
    let s64 = store.cast::<f64>();
    let (q, kv) = (
        Tensor::<f64>::randn([2, 3, d], 1.0, &mut r),
        Tensor::<f64>::randn([2, 5, d], 1.0, &mut r),
    );
    let mha_ids = mha.ids().to_vec();
    let e = params_gradcheck(&s64, &mha_ids, &|g, p| {
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let y = mha.forward(g, p, qv, kvv)?;
        weighted_sum(g, y)
    })?;
    rows.push(row("mha/params", &[e], OP_TOLERANCE));
    let errs = check_gradients(
        |g, v| {
            let p = s64.bind(g, GradMode::None);
            let y = mha.forward(g, &p, v[0], v[1])?;
            weighted_sum(g, y)
        },
        &[q.clone(), kv.clone()],
        STEP,
    )?;
    rows.push(row("mha/inputs", &errs, OP_TOLERANCE));
    let e = params_gradcheck(&s64, &gate.ids(), &|g, p| {
        let x = g.constant(q.clone());
        let y = gate.forward(g, p, x)?;
        weighted_sum(g, y)
    })?;
    rows.push(row("gate_proj", &[e], OP_TOLERANCE));

    let grid = TokenGrid::new(2, 3, 2, 2, d)?;
    let x = Tensor::<f64>::randn(grid.stacked_shape().to_vec(), 1.0, &mut r);
    let errs = check_gradients(
        |g, v| {
            let p = s64.bind(g, GradMode::None);
            let y = phi(g, v[0], &grid, |g, s| mha.forward(g, &p, s, s))?;
            weighted_sum(g, y)
        },
        &[x],
        STEP,
    )?;
    rows.push(row("phi", &errs, OP_TOLERANCE));

    let model = Model::new_backbone(cfg.clone(), &mut r)?;
    let b64 = model.store.cast::<f64>();
    let time_ids = model.backbone.time_mlp_ids();
    let e = params_gradcheck(&b64, &time_ids, &|g, p| {
        let y = model.backbone.time_embed(g, p, &[0.0, 0.37, 1.0])?;
        weighted_sum(g, y)
    })?;
    rows.push(row("time_embed", &[e], OP_TOLERANCE));

    let batch = tiny_batch(&cfg, &mut r)?;
    let all: Vec<ParamId> = b64.ids().collect();
    let e = params_gradcheck(&b64, &all, &|g, p| {
        let (xt, u) = interpolate_rows(&batch.x0, &batch.x1, &batch.times)?;
        let v = model.backbone_forward(g, p, &xt, &batch.times, &batch.src)?;
        fm_loss(g, v, &u, LossRegion::All)
    })?;
    rows.push(row("fm_loss/backbone", &[e], END_TO_END_TOLERANCE));

    for mode in AblationMode::ALL {
        let mut m = Model::new_backbone(cfg.clone(), &mut stream(seed, streams::BACKBONE_INIT))?;
        m.attach(mode, &mut r)?;
        randomize_adapter(&mut m, &mut r);
        let s = m.store.cast::<f64>();
        let ids: Vec<ParamId> = s.ids().collect();
        let e = params_gradcheck(&s, &ids, &edit_loss(&m, &batch, LossRegion::TargetStream))?;
        rows.push(row(&format!("fm_loss/edit/{mode}"), &[e], END_TO_END_TOLERANCE));
    }

    Ok(GradcheckReport { seed, rows })
}
