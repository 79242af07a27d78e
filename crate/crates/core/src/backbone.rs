//! Tiny text-conditioned spatiotemporal diffusion transformer.
//!
//! Pixel-space patches → `blocks` × (3D self-attention, cross-attention, MLP),
//! pre-norm with residuals, sinusoidal time embedding added to every token →
//! per-patch velocity. Each block exposes its self-attention output to a hook
//! that may replace it before the residual add.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{Bound, ParamId, ParamStore};
use crate::prompt::{PromptTokens, PROMPT_LEN, VOCAB_SIZE};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub frames_max: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub prompt_len: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch: 2,
            frames_max: 8,
            dim: 64,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4,
            vocab: VOCAB_SIZE,
            prompt_len: PROMPT_LEN,
        }
    }
}

impl DiTConfig {
    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 4,
            channels: 3,
            patch: 2,
            frames_max: 2,
            dim: 8,
            heads: 2,
            blocks: 1,
            mlp_ratio: 2,
            vocab: VOCAB_SIZE,
            prompt_len: PROMPT_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad("image_size must be a positive multiple of patch");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be divisible by heads");
        }
        if !self.dim.is_multiple_of(2) {
            return bad("dim must be even for sinusoidal time features");
        }
        if self.frames_max == 0 || self.blocks == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("frames_max, blocks, channels and mlp_ratio must be positive");
        }
        if self.vocab != VOCAB_SIZE || self.prompt_len != PROMPT_LEN {
            return bad("vocab and prompt_len are fixed by the prompt grammar");
        }
        Ok(())
    }

    /// Token-grid height (= width).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// Rearranges `[N, F, C, S, S]` pixels into `[N, F·H·W, C·p·p]` patch rows.
/// Token `(f, h, w)` is row `f·H·W + h·W + w`; within a row the order is
/// `(c, dy, dx)`.
pub fn patchify_pixels<T: Scalar>(pixels: &Tensor<T>, cfg: &DiTConfig) -> Result<Tensor<T>> {
    let s = pixels.shape();
    let (p, side) = (cfg.patch, cfg.image_size);
    if s.len() != 5 || s[2] != cfg.channels || s[3] != side || s[4] != side {
        return Err(Error::shape("patchify", format!("pixels {s:?} for {cfg:?}")));
    }
    let (n, f, c, g) = (s[0], s[1], s[2], cfg.grid());
    pixels
        .reshape([n, f, c, g, p, g, p])?
        .permute(&[0, 1, 3, 5, 2, 4, 6])?
        .reshape([n, f * g * g, c * p * p])
}

/// Inverse of [`patchify_pixels`].
pub fn unpatchify_pixels<T: Scalar>(tokens: &Tensor<T>, frames: usize, cfg: &DiTConfig) -> Result<Tensor<T>> {
    let (p, c, g) = (cfg.patch, cfg.channels, cfg.grid());
    let n = tokens.shape().first().copied().unwrap_or(0);
    tokens
        .reshape([n, frames, g, g, c, p, p])?
        .permute(&[0, 1, 4, 2, 5, 3, 6])?
        .reshape([n, frames, c, g * p, g * p])
}

fn unpatchify_graph<T: Scalar>(g: &mut Graph<T>, tokens: Var, frames: usize, cfg: &DiTConfig) -> Result<Var> {
    let (p, c, gr) = (cfg.patch, cfg.channels, cfg.grid());
    let n = g.shape(tokens)[0];
    let x = g.reshape(tokens, [n, frames, gr, gr, c, p, p])?;
    let x = g.permute(x, &[0, 1, 4, 2, 5, 3, 6])?;
    g.reshape(x, [n, frames, c, gr * p, gr * p])
}

/// Sinusoidal features of `t ∈ [0, 1]`: `[sin(1000·t·ωᵢ)…, cos(1000·t·ωᵢ)…]`
/// with `ωᵢ = 10000^(−i/(d/2))`.
pub fn time_features(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    let half = dim / 2;
    let angles: Vec<f64> = (0..half)
        .map(|i| 1000.0 * t * (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    Ok(angles
        .iter()
        .map(|a| a.sin())
        .chain(angles.iter().map(|a| a.cos()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiTBlock {
    pub ln_attn: LayerNorm,
    pub attn3d: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub xattn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Backbone {
    pub cfg: DiTConfig,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub time_mlp: Mlp,
    pub token_embed: ParamId,
    pub prompt_pos: ParamId,
    pub blocks: Vec<DiTBlock>,
    pub ln_out: LayerNorm,
    pub head: Linear,
}

/// Inputs for one forward pass. `pixels` are model-space values
/// `[N, F, C, S, S]`, one time and one prompt per sample.
#[derive(Clone, Copy, Debug)]
pub struct BackboneInput<'a, T: Scalar> {
    pub pixels: &'a Tensor<T>,
    pub times: &'a [f64],
    pub prompts: &'a [PromptTokens],
}

/// Per-block replacement of the self-attention output. Receives the block's
/// input hidden state and its 3D attention output.
pub type BlockHook<'h, T> = dyn FnMut(&mut Graph<T>, usize, Var, Var) -> Result<Var> + 'h;

pub const PREFIX: &str = "backbone.";

impl Backbone {
    pub fn new(cfg: DiTConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let name = |s: &str| format!("{PREFIX}{s}");
        let patch_embed = Linear::new(store, &name("patch_embed"), cfg.patch_dim(), d, true, true, rng)?;
        let pos_embed = store.add(
            name("pos_embed"),
            Tensor::randn([cfg.frames_max * cfg.tokens_per_frame(), d], 0.5, rng),
            true,
        )?;
        let time_mlp = Mlp::new(store, &name("time_mlp"), d, d, d, true, rng)?;
        let token_embed = store.add(name("token_embed"), Tensor::randn([cfg.vocab, d], 1.0, rng), true)?;
        let prompt_pos = store.add(name("prompt_pos"), Tensor::randn([cfg.prompt_len, d], 0.5, rng), true)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let b = |s: &str| name(&format!("blocks.{i}.{s}"));
            blocks.push(DiTBlock {
                ln_attn: LayerNorm::new(store, &b("ln_attn"), d, true)?,
                attn3d: MultiHeadAttention::new(store, &b("attn3d"), d, cfg.heads, true, rng)?,
                ln_cross: LayerNorm::new(store, &b("ln_cross"), d, true)?,
                xattn: MultiHeadAttention::new(store, &b("xattn"), d, cfg.heads, true, rng)?,
                ln_mlp: LayerNorm::new(store, &b("ln_mlp"), d, true)?,
                mlp: Mlp::new(store, &b("mlp"), d, d * cfg.mlp_ratio, d, true, rng)?,
            });
        }
        let ln_out = LayerNorm::new(store, &name("ln_out"), d, true)?;
        let head = Linear::new(store, &name("head"), d, cfg.patch_dim(), true, true, rng)?;
        Ok(Self {
            cfg,
            patch_embed,
            pos_embed,
            time_mlp,
            token_embed,
            prompt_pos,
            blocks,
            ln_out,
            head,
        })
    }

    pub fn time_mlp_ids(&self) -> Vec<ParamId> {
        let m = &self.time_mlp;
        [Some(m.fc1.w), m.fc1.b, Some(m.fc2.w), m.fc2.b]
            .into_iter()
            .flatten()
            .collect()
    }

    /// `[N, d]` time embeddings.
    pub fn time_embed<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, times: &[f64]) -> Result<Var> {
        let d = self.cfg.dim;
        let mut feats = Vec::with_capacity(times.len() * d);
        for &t in times {
            feats.extend(time_features(t, d)?.into_iter().map(T::of));
        }
        let x = g.constant(Tensor::new([times.len(), d], feats)?);
        self.time_mlp.forward(g, p, x)
    }

    /// `[N, L, d]` prompt embeddings.
    pub fn encode_prompts<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, prompts: &[PromptTokens]) -> Result<Var> {
        if prompts.is_empty() {
            return Err(Error::MissingPrompt("empty prompt batch".into()));
        }
        let ids: Vec<usize> = prompts
            .iter()
            .flat_map(|pr| pr.ids().iter().map(|&t| t as usize))
            .collect();
        let rows = g.gather_rows(p[self.token_embed], &ids)?;
        let e = g.reshape(rows, [prompts.len(), self.cfg.prompt_len, self.cfg.dim])?;
        g.add_suffix(e, p[self.prompt_pos])
    }

    fn check_input<T: Scalar>(&self, input: &BackboneInput<'_, T>) -> Result<(usize, usize)> {
        let s = input.pixels.shape();
        if s.len() != 5 {
            return Err(Error::shape("backbone", format!("pixels {s:?} are not [N,F,C,S,S]")));
        }
        let (n, f) = (s[0], s[1]);
        if f == 0 || f > self.cfg.frames_max {
            return Err(Error::shape(
                "backbone",
                format!("{f} frames, limit {}", self.cfg.frames_max),
            ));
        }
        if input.times.len() != n {
            return Err(Error::shape(
                "backbone",
                format!("{} times for {n} samples", input.times.len()),
            ));
        }
        if input.prompts.len() != n {
            return Err(Error::MissingPrompt(format!(
                "{} prompts for {n} samples",
                input.prompts.len()
            )));
        }
        Ok((n, f))
    }

    /// Velocity prediction `[N, F, C, S, S]`. `hook`, when given, replaces
    /// each block's self-attention output.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: &BackboneInput<'_, T>,
        mut hook: Option<&mut BlockHook<'_, T>>,
    ) -> Result<Var> {
        let (n, frames) = self.check_input(input)?;
        let seq = frames * self.cfg.tokens_per_frame();
        let d = self.cfg.dim;

        let patches = g.constant(patchify_pixels(input.pixels, &self.cfg)?);
        let h = self.patch_embed.forward(g, p, patches)?;
        let pos = g.narrow(p[self.pos_embed], 0, 0, seq)?;
        let h = g.add_suffix(h, pos)?;
        let temb = self.time_embed(g, p, input.times)?;
        let temb = g.reshape(temb, [n, 1, d])?;
        let temb = g.repeat(temb, 1, seq)?;
        let mut h = g.add(h, temb)?;
        let ctx = self.encode_prompts(g, p, input.prompts)?;

        for (i, blk) in self.blocks.iter().enumerate() {
            let a = blk.ln_attn.forward(g, p, h)?;
            let h3d = blk.attn3d.forward(g, p, a, a)?;
            let upd = match hook.as_mut() {
                Some(f) => f(g, i, h, h3d)?,
                None => h3d,
            };
            h = g.add(h, upd)?;
            let c = blk.ln_cross.forward(g, p, h)?;
            let c = blk.xattn.forward(g, p, c, ctx)?;
            h = g.add(h, c)?;
            let m = blk.ln_mlp.forward(g, p, h)?;
            let m = blk.mlp.forward(g, p, m)?;
            h = g.add(h, m)?;
        }
        let out = self.ln_out.forward(g, p, h)?;
        let out = self.head.forward(g, p, out)?;
        unpatchify_graph(g, out, frames, &self.cfg)
    }
}
