use spatialedit::backbone::DiTConfig;
use spatialedit::diagnostics::randomize_adapter;
use spatialedit::model::{EditInput, Model, SOURCE_TIME};
use spatialedit::params::GradMode;
use spatialedit::predict_update::{AblationMode, PuModule};
use spatialedit::prompt::PromptTokens;
use spatialedit::rng::{stream, streams};
use spatialedit::spatial::TokenGrid;
use spatialedit::tensor::{Graph, Scalar, Tensor, Var};
use spatialedit::Error;

struct Batch<T: Scalar> {
    source: Tensor<T>,
    target: Tensor<T>,
    times: Vec<f64>,
    src: Vec<PromptTokens>,
    edit: Vec<PromptTokens>,
}

fn batch<T: Scalar>(cfg: &DiTConfig, frames: usize, seed: u64) -> Batch<T> {
    let mut r = stream(seed, 99);
    let shape = [2, frames, cfg.channels, cfg.image_size, cfg.image_size];
    Batch {
        source: Tensor::<f64>::rand_uniform(shape, -1.0, 1.0, &mut r).cast(),
        target: Tensor::<f64>::randn(shape, 1.0, &mut r).cast(),
        times: vec![0.25, 0.7],
        src: vec![
            PromptTokens::new(&[1, 9, 17]).unwrap(),
            PromptTokens::new(&[2, 10, 18, 20]).unwrap(),
        ],
        edit: vec![
            PromptTokens::new(&[1, 12, 17]).unwrap(),
            PromptTokens::new(&[4, 10, 18]).unwrap(),
        ],
    }
}

fn model(mode: Option<AblationMode>) -> Model {
    let mut m = Model::new_backbone(DiTConfig::tiny(), &mut stream(11, streams::BACKBONE_INIT)).unwrap();
    if let Some(mode) = mode {
        m.attach(mode, &mut stream(11, streams::ADAPTER_INIT)).unwrap();
    }
    m
}

fn edit_output<T: Scalar>(m: &Model, b: &Batch<T>) -> Tensor<T> {
    let mut g = Graph::<T>::new();
    let p = m.bind(&mut g, GradMode::None);
    let input = EditInput {
        source: &b.source,
        target: &b.target,
        times: &b.times,
        src_prompts: &b.src,
        edit_prompts: &b.edit,
    };
    let (v, _) = m.edit_forward(&mut g, &p, &input).unwrap();
    g.value(v).clone()
}

/// The bare backbone on the same stacked batch.
fn backbone_output<T: Scalar>(m: &Model, b: &Batch<T>) -> Tensor<T> {
    let mut g = Graph::<T>::new();
    let p = m.bind(&mut g, GradMode::None);
    let pixels = Tensor::concat(&[&b.source, &b.target], 0).unwrap();
    let mut times = vec![SOURCE_TIME; b.times.len()];
    times.extend(&b.times);
    let prompts: Vec<PromptTokens> = b.src.iter().chain(&b.edit).cloned().collect();
    let v = m.backbone_forward(&mut g, &p, &pixels, &times, &prompts).unwrap();
    g.value(v).clone()
}

#[test]
fn fresh_adapter_is_exact_identity_in_every_mode() {
    let bare = model(None);
    let cfg = bare.cfg().clone();
    let b64 = batch::<f64>(&cfg, 2, 1);
    let b32 = batch::<f32>(&cfg, 2, 1);
    let want64 = backbone_output(&bare, &b64);
    let want32 = backbone_output(&bare, &b32);
    for mode in AblationMode::ALL {
        let m = model(Some(mode));
        assert_eq!(edit_output(&m, &b64), want64, "{mode:?}");
        let got = edit_output(&m, &b32);
        assert!(got.max_abs_diff(&want32).unwrap() <= 1e-6, "{mode:?}");
    }
}

#[test]
fn identity_check_is_not_vacuous() {
    let bare = model(None);
    let b = batch::<f64>(bare.cfg(), 2, 2);
    let want = backbone_output(&bare, &b);
    for mode in AblationMode::ALL {
        let mut m = model(Some(mode));
        randomize_adapter(&mut m, &mut stream(2, 0));
        assert!(edit_output(&m, &b).max_abs_diff(&want).unwrap() > 1e-6, "{mode:?}");
    }
}

/// One module with randomized parameters plus inputs on a fresh tape.
struct Probe {
    g: Graph<f64>,
    p: spatialedit::params::Bound,
    module: PuModule,
    grid: TokenGrid,
    x: Var,
    h3d: Var,
    ctx: Var,
}

fn probe(mode: AblationMode, x: &Tensor<f64>, seed: u64) -> Probe {
    let mut m = model(Some(mode));
    randomize_adapter(&mut m, &mut stream(seed, 0));
    let cfg = m.cfg().clone();
    let grid = TokenGrid::new(1, 2, cfg.grid(), cfg.grid(), cfg.dim).unwrap();
    let mut r = stream(seed, 1);
    let mut g = Graph::<f64>::new();
    let p = m.bind(&mut g, GradMode::None);
    let xv = g.constant(x.clone());
    let h3d = g.constant(Tensor::randn(grid.stacked_shape(), 1.0, &mut r));
    let ctx = g.constant(Tensor::randn([2, cfg.prompt_len, cfg.dim], 1.0, &mut r));
    let module = m.adapter.as_ref().unwrap().modules[0].clone();
    Probe {
        g,
        p,
        module,
        grid,
        x: xv,
        h3d,
        ctx,
    }
}

fn probe_input(seed: u64) -> Tensor<f64> {
    let cfg = DiTConfig::tiny();
    let grid = TokenGrid::new(1, 2, cfg.grid(), cfg.grid(), cfg.dim).unwrap();
    Tensor::randn(grid.stacked_shape(), 1.0, &mut stream(seed, 2))
}

#[test]
fn no_update_output_is_the_predict_path() {
    let x = probe_input(3);
    let mut pr = probe(AblationMode::Full, &x, 3);
    let full = pr
        .module
        .forward(
            &mut pr.g,
            &pr.p,
            pr.x,
            pr.h3d,
            &pr.grid,
            Some(pr.ctx),
            AblationMode::Full,
        )
        .unwrap();
    let nu = pr
        .module
        .forward(&mut pr.g, &pr.p, pr.x, pr.h3d, &pr.grid, None, AblationMode::NoUpdate)
        .unwrap();
    assert_eq!(nu.h_update, nu.h_pred);
    assert_eq!(pr.g.value(nu.h_update), pr.g.value(full.h_pred));
    assert_ne!(pr.g.value(full.h_update), pr.g.value(full.h_pred));
    assert!(nu.gate.is_none() && nu.h_diff.is_none());
}

#[test]
fn no_text_gate_gate_is_all_ones() {
    let x = probe_input(4);
    let mut pr = probe(AblationMode::NoTextGate, &x, 4);
    let out = pr
        .module
        .forward(&mut pr.g, &pr.p, pr.x, pr.h3d, &pr.grid, None, AblationMode::NoTextGate)
        .unwrap();
    let gate = pr.g.value(out.gate.unwrap());
    assert!(gate.data().iter().all(|&v| v == 1.0));
}

#[test]
fn stages_compose_as_predict_update_gate_fuse() {
    let x = probe_input(5);
    for mode in [AblationMode::Full, AblationMode::NaiveParallel2D] {
        let mut pr = probe(mode, &x, 5);
        let out = pr
            .module
            .forward(&mut pr.g, &pr.p, pr.x, pr.h3d, &pr.grid, Some(pr.ctx), mode)
            .unwrap();
        let v = |v: Var| pr.g.value(v).clone();
        let (h_pred, h_diff, gate, h_2d) = (v(out.h_pred), v(out.h_diff.unwrap()), v(out.gate.unwrap()), v(out.h_2d));

        // Predict: h_pred = h3d + h_2d·W1 + b1.
        let z1 = &pr.module.zlin1.0;
        let w1 = pr.g.value(pr.p[z1.w]).clone();
        let b1 = pr.g.value(pr.p[z1.b.unwrap()]).clone();
        let want_pred = manual_linear(&h_2d, &w1, &b1).add(pr.g.value(pr.h3d)).unwrap();
        assert!(h_pred.max_abs_diff(&want_pred).unwrap() < 1e-12, "{mode:?}");

        // Fuse: h_update = h_pred + G ⊙ (h_diff·W2 + b2).
        let z2 = &pr.module.update.as_ref().unwrap().zlin2.0;
        let w2 = pr.g.value(pr.p[z2.w]).clone();
        let b2 = pr.g.value(pr.p[z2.b.unwrap()]).clone();
        let residual = manual_linear(&h_diff, &w2, &b2);
        let want = h_pred.add(&gate.mul(&residual).unwrap()).unwrap();
        assert!(v(out.h_update).max_abs_diff(&want).unwrap() < 1e-12, "{mode:?}");

        assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0), "{mode:?}");
    }
}

fn manual_linear(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let d_in = w.shape()[0];
    let d_out = w.shape()[1];
    let rows = x.len() / d_in;
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for o in 0..d_out {
            let mut acc = b.data()[o];
            for i in 0..d_in {
                acc += x.data()[r * d_in + i] * w.data()[i * d_out + o];
            }
            out[r * d_out + o] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, out).unwrap()
}

#[test]
fn module_never_mixes_frames() {
    let x = probe_input(6);
    let tokens = DiTConfig::tiny().tokens_per_frame();
    for mode in AblationMode::ALL {
        let run = |x: &Tensor<f64>| {
            let mut pr = probe(mode, x, 6);
            let ctx = Some(pr.ctx);
            let out = pr
                .module
                .forward(&mut pr.g, &pr.p, pr.x, pr.h3d, &pr.grid, ctx, mode)
                .unwrap();
            pr.g.value(out.h_update).clone()
        };
        let base = run(&x);
        let d = x.shape()[2];
        let seq = x.shape()[1];
        for (row, frame) in [(0usize, 0usize), (1, 1)] {
            let mut bumped = x.clone();
            let k = (row * seq + frame * tokens + 1) * d;
            bumped.data_mut()[k] += 0.5;
            let y = run(&bumped);
            for r in 0..2 {
                for t in 0..seq {
                    let moved = (0..d).any(|c| {
                        let i = (r * seq + t) * d + c;
                        y.data()[i] != base.data()[i]
                    });
                    if t / tokens != frame {
                        assert!(
                            !moved,
                            "{mode:?}: frame {} moved after bumping frame {frame}",
                            t / tokens
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn gated_modes_need_prompts() {
    let x = probe_input(7);
    for mode in [AblationMode::Full, AblationMode::NaiveParallel2D] {
        let mut pr = probe(mode, &x, 7);
        let err = pr
            .module
            .forward(&mut pr.g, &pr.p, pr.x, pr.h3d, &pr.grid, None, mode)
            .unwrap_err();
        assert!(matches!(err, Error::MissingPrompt(_)), "{mode:?}");
    }
    let mut pr = probe(AblationMode::NoUpdate, &x, 7);
    let err = pr
        .module
        .forward(
            &mut pr.g,
            &pr.p,
            pr.x,
            pr.h3d,
            &pr.grid,
            Some(pr.ctx),
            AblationMode::Full,
        )
        .unwrap_err();
    assert!(matches!(err, Error::InvalidMode(_)));
}

#[test]
fn randomized_edit_path_uses_every_frame_count() {
    let mut m = model(Some(AblationMode::Full));
    randomize_adapter(&mut m, &mut stream(8, 0));
    for frames in 1..=m.cfg().frames_max {
        let b = batch::<f32>(m.cfg(), frames, 8 + frames as u64);
        let out = edit_output(&m, &b);
        assert_eq!(out.shape()[..2], [4, frames]);
        assert!(out.is_finite());
    }
}
