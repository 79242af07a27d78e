//! Backbone plus optional predict-update adapter, evaluated on stacked
//! `[source; target]` batches.

use rand::Rng;

use crate::backbone::{Backbone, BackboneInput, BlockHook, DiTConfig, PREFIX};
use crate::error::{Error, Result};
use crate::params::{Bound, GradMode, ParamId, ParamStore};
use crate::predict_update::{AblationMode, PuModule, PuOutput};
use crate::prompt::PromptTokens;
use crate::spatial::TokenGrid;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const ADAPTER_PREFIX: &str = "adapter.";

/// Time given to the clean source stream.
pub const SOURCE_TIME: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adapter {
    pub mode: AblationMode,
    pub modules: Vec<PuModule>,
}

impl Adapter {
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.modules.iter().flat_map(|m| m.param_ids()).collect()
    }
}

/// Parameters and structure of the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub adapter: Option<Adapter>,
}

/// One stacked batch. `source` and `target` are `[B, F, C, S, S]`; `times`
/// are the target-stream flow times.
#[derive(Clone, Copy, Debug)]
pub struct EditInput<'a, T: Scalar> {
    pub source: &'a Tensor<T>,
    pub target: &'a Tensor<T>,
    pub times: &'a [f64],
    pub src_prompts: &'a [PromptTokens],
    pub edit_prompts: &'a [PromptTokens],
}

/// Per-block module intermediates captured during a forward pass.
pub type Taps = Vec<PuOutput>;

impl Model {
    /// Freshly initialized backbone with every parameter trainable.
    pub fn new_backbone(cfg: DiTConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::new(cfg, &mut store, rng)?;
        Ok(Self {
            store,
            backbone,
            adapter: None,
        })
    }

    /// Freezes the backbone and attaches one module per block. Module
    /// attention weights are copies of the host block's, so later updates
    /// never alias the backbone.
    pub fn attach(&mut self, mode: AblationMode, rng: &mut impl Rng) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::Config("adapter already attached".into()));
        }
        self.store.set_trainable_prefix(PREFIX, false);
        let g = self.backbone.cfg.grid();
        let mut modules = Vec::with_capacity(self.backbone.blocks.len());
        for (i, blk) in self.backbone.blocks.iter().enumerate() {
            let name = format!("{ADAPTER_PREFIX}{i}");
            modules.push(PuModule::attach(&mut self.store, &name, blk, (g, g), mode, rng)?);
        }
        self.adapter = Some(Adapter { mode, modules });
        Ok(())
    }

    pub fn cfg(&self) -> &DiTConfig {
        &self.backbone.cfg
    }

    pub fn mode(&self) -> Option<AblationMode> {
        self.adapter.as_ref().map(|a| a.mode)
    }

    /// Plain backbone velocity for `[N, F, C, S, S]` pixels.
    pub fn backbone_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pixels: &Tensor<T>,
        times: &[f64],
        prompts: &[PromptTokens],
    ) -> Result<Var> {
        let input = BackboneInput { pixels, times, prompts };
        self.backbone.forward(g, p, &input, None)
    }

    /// Velocity for the stacked batch, shape `[2B, F, C, S, S]`, plus the
    /// per-block module taps (empty without an adapter).
    pub fn edit_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: &EditInput<'_, T>,
    ) -> Result<(Var, Taps)> {
        let b = input.source.shape().first().copied().unwrap_or(0);
        if input.target.shape() != input.source.shape() {
            return Err(Error::shape(
                "edit_forward",
                format!("source {:?} vs target {:?}", input.source.shape(), input.target.shape()),
            ));
        }
        if input.times.len() != b {
            return Err(Error::shape(
                "edit_forward",
                format!("{} times for {b} pairs", input.times.len()),
            ));
        }
        if input.src_prompts.len() != b || input.edit_prompts.len() != b {
            return Err(Error::MissingPrompt(format!(
                "{} source and {} edit prompts for {b} pairs",
                input.src_prompts.len(),
                input.edit_prompts.len()
            )));
        }
        let pixels = Tensor::concat(&[input.source, input.target], 0)?;
        let mut times = vec![SOURCE_TIME; b];
        times.extend_from_slice(input.times);
        let mut prompts = input.src_prompts.to_vec();
        prompts.extend_from_slice(input.edit_prompts);
        let bb_input = BackboneInput {
            pixels: &pixels,
            times: &times,
            prompts: &prompts,
        };

        let Some(adapter) = &self.adapter else {
            let v = self.backbone.forward(g, p, &bb_input, None)?;
            return Ok((v, Vec::new()));
        };
        let cfg = self.cfg();
        let frames = input.source.shape()[1];
        let grid = TokenGrid::new(b, frames, cfg.grid(), cfg.grid(), cfg.dim)?;
        // The gate reads the edited prompt on both streams.
        let gate_ctx = match adapter.mode {
            AblationMode::Full | AblationMode::NaiveParallel2D => {
                let mut both = input.edit_prompts.to_vec();
                both.extend_from_slice(input.edit_prompts);
                Some(self.backbone.encode_prompts(g, p, &both)?)
            }
            AblationMode::NoTextGate | AblationMode::NoUpdate => None,
        };
        let mut taps = Vec::with_capacity(adapter.modules.len());
        let mut hook = |g: &mut Graph<T>, i: usize, x: Var, h3d: Var| -> Result<Var> {
            let out = adapter.modules[i].forward(g, p, x, h3d, &grid, gate_ctx, adapter.mode)?;
            taps.push(out);
            Ok(out.h_update)
        };
        let v = self
            .backbone
            .forward(g, p, &bb_input, Some(&mut hook as &mut BlockHook<'_, T>))?;
        Ok((v, taps))
    }

    /// Binds the store (cast to `T`) onto a fresh tape.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, mode: GradMode) -> Bound {
        self.store.cast::<T>().bind(g, mode)
    }
}
