//! Predict-update spatial difference attention with text-guided gating.
//!
//! One module runs beside every backbone block on the stacked
//! `[source; target]` batch:
//!
//! ```text
//! h_2d     = Φ(LN₁(x), Attn2D₁)
//! h_pred   = h_3d + ZeroLin₁(h_2d)
//! h_res    = h_pred − h_2d
//! h_diff   = Φ(LN₂(h_res), Attn2D₂)
//! G        = GateProj(CrossAttn(LN₃(h_diff), C))        G ∈ (0, 1)
//! h_update = h_pred + G ⊙ ZeroLin₂(h_diff)
//! ```
//!
//! Both zero-initialized projections make a fresh module an exact identity on
//! `h_3d`, so attaching it leaves the frozen backbone's output unchanged.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::DiTBlock;
use crate::error::{Error, Result};
use crate::nn::{GateProj, LayerNorm, MultiHeadAttention, ZeroLinear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::spatial::{phi, TokenGrid};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Predict → update → gate → fuse.
    Full,
    /// Gate fixed to all ones.
    NoTextGate,
    /// Predict stage only.
    NoUpdate,
    /// Two 2D attentions read the same input; their difference is injected.
    #[serde(rename = "naive-parallel-2d")]
    NaiveParallel2D,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::NoTextGate,
        AblationMode::NoUpdate,
        AblationMode::NaiveParallel2D,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoTextGate => "no-text-gate",
            AblationMode::NoUpdate => "no-update",
            AblationMode::NaiveParallel2D => "naive-parallel-2d",
        }
    }

    pub fn needs_update(self) -> bool {
        self != AblationMode::NoUpdate
    }

    pub fn needs_gate(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::NaiveParallel2D)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidMode(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateParams {
    pub ln2: LayerNorm,
    pub attn2d_2: MultiHeadAttention,
    pub zlin2: ZeroLinear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateParams {
    pub ln3: LayerNorm,
    pub xattn: MultiHeadAttention,
    pub proj: GateProj,
}

/// Parameters of one module. Update and gate parameters exist only when the
/// allocation mode uses them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PuModule {
    pub ln1: LayerNorm,
    pub attn2d_1: MultiHeadAttention,
    /// Learned `[H, 2W, d]` position table for the joined sequence.
    pub pos2d: ParamId,
    pub zlin1: ZeroLinear,
    pub update: Option<UpdateParams>,
    pub gate: Option<GateParams>,
    pub grid_hw: (usize, usize),
}

/// Intermediate values of one module evaluation.
#[derive(Clone, Copy, Debug)]
pub struct PuOutput {
    pub h_update: Var,
    pub h_pred: Var,
    pub h_2d: Var,
    pub h_diff: Option<Var>,
    pub gate: Option<Var>,
}

impl PuModule {
    /// Registers a module for `host`, inheriting its attention weights.
    /// `grid_hw` is the token grid `(H, W)` of one frame.
    pub fn attach(
        store: &mut ParamStore,
        name: &str,
        host: &DiTBlock,
        grid_hw: (usize, usize),
        mode: AblationMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = host.attn3d.dim;
        let n = |s: &str| format!("{name}.{s}");
        let ln1 = LayerNorm::new(store, &n("ln1"), d, true)?;
        let attn2d_1 = MultiHeadAttention::copy_of(store, &n("attn2d_1"), &host.attn3d, true)?;
        let pos2d = store.add(n("pos2d"), Tensor::zeros([grid_hw.0, 2 * grid_hw.1, d]), true)?;
        let zlin1 = ZeroLinear::new(store, &n("zlin1"), d, true)?;
        let update = if mode.needs_update() {
            Some(UpdateParams {
                ln2: LayerNorm::new(store, &n("ln2"), d, true)?,
                attn2d_2: MultiHeadAttention::copy_of(store, &n("attn2d_2"), &host.attn3d, true)?,
                zlin2: ZeroLinear::new(store, &n("zlin2"), d, true)?,
            })
        } else {
            None
        };
        let gate = if mode.needs_gate() {
            Some(GateParams {
                ln3: LayerNorm::new(store, &n("ln3"), d, true)?,
                xattn: MultiHeadAttention::copy_of(store, &n("xattn_gate"), &host.xattn, true)?,
                proj: GateProj::new(store, &n("gate_proj"), d, true, rng)?,
            })
        } else {
            None
        };
        Ok(Self {
            ln1,
            attn2d_1,
            pos2d,
            zlin1,
            update,
            gate,
            grid_hw,
        })
    }

    fn update_params(&self) -> Result<&UpdateParams> {
        self.update
            .as_ref()
            .ok_or_else(|| Error::InvalidMode("module was built without update parameters".into()))
    }

    fn gate_params(&self) -> Result<&GateParams> {
        self.gate
            .as_ref()
            .ok_or_else(|| Error::InvalidMode("module was built without gate parameters".into()))
    }

    /// `Φ(x, attn)` with the joined-sequence positions added before attention.
    fn spatial_attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        grid: &TokenGrid,
        attn: &MultiHeadAttention,
    ) -> Result<Var> {
        if (grid.height, grid.width) != self.grid_hw {
            return Err(Error::shape(
                "predict_update",
                format!("grid {}x{} vs module {:?}", grid.height, grid.width, self.grid_hw),
            ));
        }
        let pos_shape = [2 * grid.height * grid.width, grid.channels];
        phi(g, x, grid, |g, seq| {
            let pos = g.reshape(p[self.pos2d], pos_shape)?;
            let s = g.add_suffix(seq, pos)?;
            attn.forward(g, p, s, s)
        })
    }

    /// Predict stage with the first 2D attention supplied by the caller.
    pub fn predict_with<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        h3d: Var,
        grid: &TokenGrid,
        attn: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
    ) -> Result<(Var, Var)> {
        let normed = self.ln1.forward(g, p, x)?;
        let h_2d = phi(g, normed, grid, attn)?;
        let injected = self.zlin1.forward(g, p, h_2d)?;
        let h_pred = g.add(h3d, injected)?;
        Ok((h_pred, h_2d))
    }

    /// Returns `(h_pred, h_2d)`.
    pub fn predict_stage<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        h3d: Var,
        grid: &TokenGrid,
    ) -> Result<(Var, Var)> {
        let normed = self.ln1.forward(g, p, x)?;
        let h_2d = self.spatial_attention(g, p, normed, grid, &self.attn2d_1)?;
        let injected = self.zlin1.forward(g, p, h_2d)?;
        let h_pred = g.add(h3d, injected)?;
        Ok((h_pred, h_2d))
    }

    /// Returns `h_diff = Φ(LN₂(h_pred − h_2d), Attn2D₂)`.
    pub fn update_stage<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        h_pred: Var,
        h_2d: Var,
        grid: &TokenGrid,
    ) -> Result<Var> {
        let up = self.update_params()?;
        let h_res = g.sub(h_pred, h_2d)?;
        let normed = up.ln2.forward(g, p, h_res)?;
        self.spatial_attention(g, p, normed, grid, &up.attn2d_2)
    }

    /// `G = GateProj(CrossAttn(LN₃(h_diff), C))` for prompt embeddings
    /// `C: [2B, L, d]`.
    pub fn semantic_gate<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, h_diff: Var, prompt_embed: Var) -> Result<Var> {
        let gp = self.gate_params()?;
        let normed = gp.ln3.forward(g, p, h_diff)?;
        let ctx = gp.xattn.forward(g, p, normed, prompt_embed)?;
        gp.proj.forward(g, p, ctx)
    }

    /// `h_pred + G ⊙ ZeroLin₂(h_diff)`.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, h_pred: Var, h_diff: Var, gate: Var) -> Result<Var> {
        let up = self.update_params()?;
        let residual = up.zlin2.forward(g, p, h_diff)?;
        let gated = g.mul(gate, residual)?;
        g.add(h_pred, gated)
    }

    /// All-ones gate; checked on the tape so the ablation cannot silently drift.
    fn unit_gate<T: Scalar>(g: &mut Graph<T>, like: Var) -> Result<Var> {
        let ones = g.constant(Tensor::ones(g.shape(like).to_vec()));
        if g.value(ones).data().iter().any(|&v| v != T::one()) {
            return Err(Error::InvalidMode("unit gate is not identically one".into()));
        }
        Ok(ones)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        h3d: Var,
        grid: &TokenGrid,
        prompt_embed: Option<Var>,
        mode: AblationMode,
    ) -> Result<PuOutput> {
        let need_prompt =
            || prompt_embed.ok_or_else(|| Error::MissingPrompt("text gate needs prompt embeddings".into()));
        match mode {
            AblationMode::Full => {
                let (h_pred, h_2d) = self.predict_stage(g, p, x, h3d, grid)?;
                let h_diff = self.update_stage(g, p, h_pred, h_2d, grid)?;
                let gate = self.semantic_gate(g, p, h_diff, need_prompt()?)?;
                let h_update = self.fuse(g, p, h_pred, h_diff, gate)?;
                Ok(PuOutput {
                    h_update,
                    h_pred,
                    h_2d,
                    h_diff: Some(h_diff),
                    gate: Some(gate),
                })
            }
            AblationMode::NoTextGate => {
                let (h_pred, h_2d) = self.predict_stage(g, p, x, h3d, grid)?;
                let h_diff = self.update_stage(g, p, h_pred, h_2d, grid)?;
                let gate = Self::unit_gate(g, h_diff)?;
                let h_update = self.fuse(g, p, h_pred, h_diff, gate)?;
                Ok(PuOutput {
                    h_update,
                    h_pred,
                    h_2d,
                    h_diff: Some(h_diff),
                    gate: Some(gate),
                })
            }
            AblationMode::NoUpdate => {
                let (h_pred, h_2d) = self.predict_stage(g, p, x, h3d, grid)?;
                Ok(PuOutput {
                    h_update: h_pred,
                    h_pred,
                    h_2d,
                    h_diff: None,
                    gate: None,
                })
            }
            AblationMode::NaiveParallel2D => {
                let up = self.update_params()?;
                let (h_pred, h_2d) = self.predict_stage(g, p, x, h3d, grid)?;
                let normed = up.ln2.forward(g, p, x)?;
                let second = self.spatial_attention(g, p, normed, grid, &up.attn2d_2)?;
                let h_diff = g.sub(second, h_2d)?;
                let gate = self.semantic_gate(g, p, h_diff, need_prompt()?)?;
                let h_update = self.fuse(g, p, h_pred, h_diff, gate)?;
                Ok(PuOutput {
                    h_update,
                    h_pred,
                    h_2d,
                    h_diff: Some(h_diff),
                    gate: Some(gate),
                })
            }
        }
    }

    /// Every parameter id owned by this module.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln1.gain, self.ln1.bias];
        ids.extend(self.attn2d_1.ids());
        ids.push(self.pos2d);
        ids.extend([self.zlin1.0.w, self.zlin1.0.b.unwrap()]);
        if let Some(u) = &self.update {
            ids.extend([u.ln2.gain, u.ln2.bias]);
            ids.extend(u.attn2d_2.ids());
            ids.extend([u.zlin2.0.w, u.zlin2.0.b.unwrap()]);
        }
        if let Some(gp) = &self.gate {
            ids.extend([gp.ln3.gain, gp.ln3.bias]);
            ids.extend(gp.xattn.ids());
            ids.extend(gp.proj.ids());
        }
        ids
    }

    pub fn gate_param_ids(&self) -> Vec<ParamId> {
        match &self.gate {
            Some(gp) => {
                let mut ids = vec![gp.ln3.gain, gp.ln3.bias];
                ids.extend(gp.xattn.ids());
                ids.extend(gp.proj.ids());
                ids
            }
            None => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!(matches!("bogus".parse::<AblationMode>(), Err(Error::InvalidMode(_))));
    }
}
