use serde::{Deserialize, Serialize};

use super::mask::MaskPlan;
use crate::encoder::{add_block_params, block_tape, sincos_2d, BlockIds, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{trunc_normal, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Cnn,
    Vit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub depth: usize,
    /// Odd convolution kernel side (CNN only).
    pub kernel: usize,
    /// Attention heads (ViT only).
    pub heads: usize,
    /// MLP expansion (ViT only).
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            kind: DecoderKind::Cnn,
            depth: 6,
            kernel: 3,
            heads: 4,
            mlp_ratio: 4,
            ln_eps: 1e-6,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("decoder depth must be >= 1".into()));
        }
        match self.kind {
            DecoderKind::Cnn if self.kernel % 2 == 0 => {
                Err(Error::Config(format!("decoder kernel must be odd, got {}", self.kernel)))
            }
            DecoderKind::Vit if self.heads == 0 || dim % self.heads != 0 || self.mlp_ratio == 0 => Err(
                Error::Config(format!("decoder width {dim} not divisible by {} heads", self.heads)),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
enum Layers {
    Cnn(Vec<ConvIds>),
    Vit(Vec<BlockIds>),
}

/// Predicts all N token latents from the visible encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub params: ParamStore,
    pub dim: usize,
    pub grid: (usize, usize),
    mask_token: ParamId,
    layers: Layers,
    head_w: ParamId,
    head_b: ParamId,
    pos: Tensor,
}

impl Decoder {
    pub fn init(cfg: DecoderConfig, dim: usize, grid: (usize, usize), rng: &mut Rng) -> Result<Self> {
        cfg.validate(dim)?;
        let mut p = ParamStore::new();
        let mask_token = p.add("dec.mask_token", trunc_normal(rng, &[1, dim], INIT_STD), false);
        let layers = match cfg.kind {
            DecoderKind::Cnn => Layers::Cnn(
                (0..cfg.depth)
                    .map(|i| {
                        let k2 = cfg.kernel * cfg.kernel;
                        ConvIds {
                            w: p.add(format!("dec.conv.{i}.w"), trunc_normal(rng, &[k2 * dim, dim], INIT_STD), true),
                            b: p.add(format!("dec.conv.{i}.b"), Tensor::zeros(&[dim]), false),
                            ln_g: p.add(format!("dec.conv.{i}.ln.g"), Tensor::full(&[dim], 1.0), false),
                            ln_b: p.add(format!("dec.conv.{i}.ln.b"), Tensor::zeros(&[dim]), false),
                        }
                    })
                    .collect(),
            ),
            DecoderKind::Vit => Layers::Vit(
                (0..cfg.depth)
                    .map(|i| add_block_params(&mut p, &format!("dec.blocks.{i}"), dim, dim * cfg.mlp_ratio, false, rng))
                    .collect(),
            ),
        };
        let head_w = p.add("dec.head.w", trunc_normal(rng, &[dim, dim], INIT_STD), true);
        let head_b = p.add("dec.head.b", Tensor::zeros(&[dim]), false);
        Ok(Decoder {
            cfg,
            params: p,
            dim,
            grid,
            mask_token,
            layers,
            head_w,
            head_b,
            pos: sincos_2d(grid, dim),
        })
    }

    /// Replaces parameter values (e.g. from a checkpoint); names and shapes must match.
    pub fn load_params(&mut self, params: &ParamStore) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "decoder expects {} tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for e in self.params.entries() {
            if params.by_name(&e.name).is_none() {
                return Err(Error::Config(format!("missing parameter `{}`", e.name)));
            }
        }
        self.params.assign_from(params)
    }

    /// Scatters the visible rows and the shared mask token back onto the grid,
    /// adds positions, and runs the decoder stack and output head.
    pub fn forward_tape(&self, tape: &mut Tape, b: &Bound, visible: Var, plan: &MaskPlan) -> Result<Var> {
        let n = self.grid.0 * self.grid.1;
        if plan.n != n {
            return Err(Error::shape("decoder", format!("plan over {} tokens, grid has {n}", plan.n)));
        }
        if tape.value(visible).shape() != [plan.visible.len(), self.dim] {
            return Err(Error::shape(
                "decoder",
                format!("visible {:?} for {} visible tokens", tape.value(visible).shape(), plan.visible.len()),
            ));
        }
        let nv = plan.visible.len();
        let fill = tape.gather_rows(b[self.mask_token], &vec![0; plan.masked.len()])?;
        let seq = tape.concat_rows(&[visible, fill])?;
        let mut perm = vec![0; n];
        plan.visible.iter().enumerate().for_each(|(r, &p)| perm[p] = r);
        plan.masked.iter().enumerate().for_each(|(r, &p)| perm[p] = nv + r);
        let x = tape.gather_rows(seq, &perm)?;
        let pos = tape.constant(self.pos.clone());
        let mut x = tape.add(x, pos)?;
        match &self.layers {
            Layers::Cnn(convs) => {
                for c in convs {
                    let cols = tape.im2col(x, self.grid.0, self.grid.1, self.cfg.kernel)?;
                    let h = tape.linear(cols, b[c.w], Some(b[c.b]))?;
                    let h = tape.gelu(h)?;
                    let r = tape.add(x, h)?;
                    x = tape.layer_norm(r, b[c.ln_g], b[c.ln_b], self.cfg.ln_eps)?;
                }
            }
            Layers::Vit(blocks) => {
                for ids in blocks {
                    x = block_tape(tape, b, ids, x, self.cfg.heads, self.cfg.ln_eps)?.z_d;
                }
            }
        }
        tape.linear(x, b[self.head_w], Some(b[self.head_b]))
    }
}
