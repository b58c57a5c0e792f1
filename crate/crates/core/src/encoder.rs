//! Post-norm ViT encoder with optional sigmoid-gated attention and per-block
//! traces of the attention output, first norm, MLP output and block output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Dtype, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{trunc_normal, Rng};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_true")]
    pub gated: bool,
    /// Flattened patch length k².
    pub patch_dim: usize,
    /// Token grid (time blocks, frequency blocks).
    pub grid: (usize, usize),
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_true() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be >= 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "width {} must be a multiple of 4 for 2-D sinusoidal positions",
                self.dim
            )));
        }
        if self.patch_dim == 0 || self.grid.0 == 0 || self.grid.1 == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("patch_dim, grid and mlp_ratio must be positive".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

/// Which block intermediate a [`LayerStack`] holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// MLP branch output z_c.
    Mlp,
    /// End-of-block output z_d.
    Eob,
}

/// Per-layer patch (L×N×D) and cls (L×D) embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub patch: Tensor,
    pub cls: Tensor,
    pub tap: Tap,
}

impl LayerStack {
    pub fn new(patch: Tensor, cls: Tensor, tap: Tap) -> Result<Self> {
        let ps = patch.shape();
        if ps.len() != 3 || cls.shape() != [ps[0], ps[2]] || ps[0] == 0 || ps[1] == 0 {
            return Err(Error::shape(
                "layer_stack",
                format!("patch {:?} with cls {:?}", patch.shape(), cls.shape()),
            ));
        }
        patch.check_finite("layer stack patch")?;
        cls.check_finite("layer stack cls")?;
        Ok(LayerStack { patch, cls, tap })
    }

    /// Builds a stack from per-layer `(N+1)×D` matrices whose row 0 is cls.
    pub fn from_layers(layers: &[Tensor], tap: Tap) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::EmptyInput("layer stack with zero layers".into()))?;
        let (rows, d) = first.dims2("layer_stack")?;
        if rows < 2 {
            return Err(Error::shape("layer_stack", "need a cls row and at least one patch row"));
        }
        let mut patch = Vec::with_capacity(layers.len() * (rows - 1) * d);
        let mut cls = Vec::with_capacity(layers.len() * d);
        for t in layers {
            if t.shape() != first.shape() {
                return Err(Error::shape("layer_stack", format!("{:?} vs {:?}", t.shape(), first.shape())));
            }
            cls.extend_from_slice(t.row(0));
            patch.extend_from_slice(&t.data()[d..]);
        }
        Self::new(
            Tensor::new(vec![layers.len(), rows - 1, d], patch)?,
            Tensor::matrix(layers.len(), d, cls)?,
            tap,
        )
    }

    pub fn layers(&self) -> usize {
        self.patch.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.patch.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.patch.shape()[2]
    }

    /// Patch rows of layer `l` as N×D.
    pub fn layer_patch(&self, l: usize) -> Tensor {
        let (n, d) = (self.tokens(), self.dim());
        Tensor::matrix(n, d, self.patch.data()[l * n * d..(l + 1) * n * d].to_vec()).expect("slice")
    }

    pub fn layer_cls(&self, l: usize) -> Tensor {
        Tensor::matrix(1, self.dim(), self.cls.row(l).to_vec()).expect("row")
    }

    pub fn mean_patch(&self, l: usize) -> Vec<f64> {
        self.layer_patch(l).mean_axis(0).expect("rank 2").into_data()
    }
}

/// Fixed 2-D sinusoidal encodings for a row-major `(rows, cols)` grid:
/// the first D/2 channels encode the row, the rest the column.
pub fn sincos_2d(grid: (usize, usize), dim: usize) -> Tensor {
    let quarter = dim / 4;
    let mut out = Tensor::zeros(&[grid.0 * grid.1, dim]);
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let row = out.row_mut(r * grid.1 + c);
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                row[i] = (r as f64 * omega).sin();
                row[quarter + i] = (r as f64 * omega).cos();
                row[2 * quarter + i] = (c as f64 * omega).sin();
                row[3 * quarter + i] = (c as f64 * omega).cos();
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub wg: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockIds {
    pub attn: AttentionIds,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

/// Adds one transformer block's parameters under `prefix`.
pub fn add_block_params(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    hidden: usize,
    gated: bool,
    rng: &mut Rng,
) -> BlockIds {
    let mut w = |store: &mut ParamStore, name: &str, r: usize, c: usize| {
        store.add(format!("{prefix}.{name}"), trunc_normal(rng, &[r, c], INIT_STD), true)
    };
    let wq = w(store, "attn.wq", dim, dim);
    let wk = w(store, "attn.wk", dim, dim);
    let wv = w(store, "attn.wv", dim, dim);
    let wo = w(store, "attn.wo", dim, dim);
    let wg = gated.then(|| w(store, "attn.wg", dim, dim));
    let w1 = w(store, "mlp.w1", dim, hidden);
    let w2 = w(store, "mlp.w2", hidden, dim);
    let ones = |n| Tensor::full(&[n], 1.0);
    let zeros = |n| Tensor::zeros(&[n]);
    BlockIds {
        attn: AttentionIds { wq, wk, wv, wo, wg },
        ln1_g: store.add(format!("{prefix}.ln1.g"), ones(dim), false),
        ln1_b: store.add(format!("{prefix}.ln1.b"), zeros(dim), false),
        w1,
        b1: store.add(format!("{prefix}.mlp.b1"), zeros(hidden), false),
        w2,
        b2: store.add(format!("{prefix}.mlp.b2"), zeros(dim), false),
        ln2_g: store.add(format!("{prefix}.ln2.g"), ones(dim), false),
        ln2_b: store.add(format!("{prefix}.ln2.b"), zeros(dim), false),
    }
}

fn lookup_block(store: &ParamStore, prefix: &str, gated: bool) -> Result<BlockIds> {
    let id = |name: &str| {
        let full = format!("{prefix}.{name}");
        store
            .id(&full)
            .ok_or_else(|| Error::Config(format!("missing parameter `{full}`")))
    };
    Ok(BlockIds {
        attn: AttentionIds {
            wq: id("attn.wq")?,
            wk: id("attn.wk")?,
            wv: id("attn.wv")?,
            wo: id("attn.wo")?,
            wg: if gated { Some(id("attn.wg")?) } else { None },
        },
        ln1_g: id("ln1.g")?,
        ln1_b: id("ln1.b")?,
        w1: id("mlp.w1")?,
        b1: id("mlp.b1")?,
        w2: id("mlp.w2")?,
        b2: id("mlp.b2")?,
        ln2_g: id("ln2.g")?,
        ln2_b: id("ln2.b")?,
    })
}

/// Tape handles for one block's intermediates.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub input: Var,
    pub z_a: Var,
    pub z_b: Var,
    pub z_c: Var,
    pub z_d: Var,
    /// The attention op node; its probabilities are kept on the tape.
    pub attn: Var,
    pub gate: Option<Var>,
}

/// Multi-head self-attention. With a gate, the head-concatenated values are
/// multiplied elementwise by `σ(x·W_G)` before the output projection.
pub fn mhsa_tape(tape: &mut Tape, b: &Bound, ids: &AttentionIds, x: Var, heads: usize) -> Result<(Var, Var, Option<Var>)> {
    let q = tape.matmul(x, b[ids.wq])?;
    let k = tape.matmul(x, b[ids.wk])?;
    let v = tape.matmul(x, b[ids.wv])?;
    let attn = tape.attention(q, k, v, heads)?;
    let (mixed, gate) = match ids.wg {
        Some(wg) => {
            let logits = tape.matmul(x, b[wg])?;
            let g = tape.sigmoid(logits)?;
            (tape.mul(g, attn)?, Some(g))
        }
        None => (attn, None),
    };
    Ok((tape.matmul(mixed, b[ids.wo])?, attn, gate))
}

/// `z_a = MHSA(x)`, `z_b = LN(x + z_a)`, `z_c = MLP(z_b)`, `z_d = LN(z_b + z_c)`.
pub fn block_tape(tape: &mut Tape, b: &Bound, ids: &BlockIds, x: Var, heads: usize, eps: f64) -> Result<BlockVars> {
    let (z_a, attn, gate) = mhsa_tape(tape, b, &ids.attn, x, heads)?;
    let r1 = tape.add(x, z_a)?;
    let z_b = tape.layer_norm(r1, b[ids.ln1_g], b[ids.ln1_b], eps)?;
    let h = tape.linear(z_b, b[ids.w1], Some(b[ids.b1]))?;
    let h = tape.gelu(h)?;
    let z_c = tape.linear(h, b[ids.w2], Some(b[ids.b2]))?;
    let r2 = tape.add(z_b, z_c)?;
    let z_d = tape.layer_norm(r2, b[ids.ln2_g], b[ids.ln2_b], eps)?;
    Ok(BlockVars {
        input: x,
        z_a,
        z_b,
        z_c,
        z_d,
        attn,
        gate,
    })
}

#[derive(Clone, Debug)]
pub struct TapeForward {
    /// Embedded tokens with cls at row 0.
    pub tokens: Var,
    pub blocks: Vec<BlockVars>,
}

impl TapeForward {
    pub fn output(&self) -> Var {
        self.blocks.last().expect("depth >= 1").z_d
    }
}

/// One block's recorded intermediates as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    pub input: Tensor,
    pub z_a: Tensor,
    pub z_b: Tensor,
    pub z_c: Tensor,
    pub z_d: Tensor,
    /// heads × n × n attention probabilities.
    pub attn: Tensor,
    pub gate: Option<Tensor>,
}

impl BlockTrace {
    fn read(tape: &Tape, v: &BlockVars) -> Self {
        BlockTrace {
            input: tape.value(v.input).clone(),
            z_a: tape.value(v.z_a).clone(),
            z_b: tape.value(v.z_b).clone(),
            z_c: tape.value(v.z_c).clone(),
            z_d: tape.value(v.z_d).clone(),
            attn: tape.attention_probs(v.attn).expect("attention node"),
            gate: v.gate.map(|g| tape.value(g).clone()),
        }
    }
}

/// Result of a gradient-free pass: both taps from the same forward.
#[derive(Clone, Debug)]
pub struct FullForward {
    pub traces: Vec<BlockTrace>,
    pub mlp: LayerStack,
    pub eob: LayerStack,
}

impl FullForward {
    pub fn stack(&self, tap: Tap) -> &LayerStack {
        match tap {
            Tap::Mlp => &self.mlp,
            Tap::Eob => &self.eob,
        }
    }

    pub fn attention_maps(&self) -> Vec<Tensor> {
        self.traces.iter().map(|t| t.attn.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: ParamStore,
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    blocks: Vec<BlockIds>,
    pos: Tensor,
}

impl Encoder {
    pub fn init(cfg: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.dim, cfg.hidden());
        let mut params = ParamStore::new();
        params.add("enc.patch.w", trunc_normal(rng, &[cfg.patch_dim, d], INIT_STD), true);
        params.add("enc.patch.b", Tensor::zeros(&[d]), false);
        params.add("enc.cls", trunc_normal(rng, &[1, d], INIT_STD), false);
        for l in 0..cfg.depth {
            add_block_params(&mut params, &format!("enc.blocks.{l}"), d, h, cfg.gated, rng);
        }
        Self::from_params(cfg, params)
    }

    /// Wraps an existing parameter set, checking names and shapes against `cfg`.
    pub fn from_params(cfg: EncoderConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let id = |name: &str| params.id(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")));
        let patch_w = id("enc.patch.w")?;
        let patch_b = id("enc.patch.b")?;
        let cls = id("enc.cls")?;
        let blocks = (0..cfg.depth)
            .map(|l| lookup_block(&params, &format!("enc.blocks.{l}"), cfg.gated))
            .collect::<Result<Vec<_>>>()?;
        let mut reference = ParamStore::new();
        let mut scratch = crate::rng::substream(0, "shape-check");
        reference.add("enc.patch.w", Tensor::zeros(&[cfg.patch_dim, cfg.dim]), true);
        reference.add("enc.patch.b", Tensor::zeros(&[cfg.dim]), false);
        reference.add("enc.cls", Tensor::zeros(&[1, cfg.dim]), false);
        for l in 0..cfg.depth {
            add_block_params(&mut reference, &format!("enc.blocks.{l}"), cfg.dim, cfg.hidden(), cfg.gated, &mut scratch);
        }
        if reference.len() != params.len() {
            return Err(Error::Config(format!(
                "encoder expects {} tensors, got {}",
                reference.len(),
                params.len()
            )));
        }
        for e in reference.entries() {
            let got = params.by_name(&e.name).expect("looked up above");
            if got.shape() != e.value.shape() {
                return Err(Error::Config(format!(
                    "`{}` has shape {:?}, config implies {:?}",
                    e.name,
                    got.shape(),
                    e.value.shape()
                )));
            }
        }
        let pos = sincos_2d(cfg.grid, cfg.dim);
        Ok(Encoder {
            cfg,
            params,
            patch_w,
            patch_b,
            cls,
            blocks,
            pos,
        })
    }

    pub fn positions(&self) -> &Tensor {
        &self.pos
    }

    /// Linear patch projection plus positional rows of the original grid
    /// positions, with the cls token prepended. `visible` selects and orders
    /// the embedded patches; `None` embeds all of them.
    pub fn embed_tokens(&self, tape: &mut Tape, b: &Bound, patches: &Tensor, visible: Option<&[usize]>) -> Result<Var> {
        let n = self.cfg.num_tokens();
        if patches.shape() != [n, self.cfg.patch_dim] {
            return Err(Error::shape(
                "embed_tokens",
                format!("patches {:?}, expected [{n}, {}]", patches.shape(), self.cfg.patch_dim),
            ));
        }
        let all: Vec<usize>;
        let idx = match visible {
            Some(v) => {
                if let Some(&bad) = v.iter().find(|&&i| i >= n) {
                    return Err(Error::Param(format!("visible index {bad} out of range for {n} tokens")));
                }
                v
            }
            None => {
                all = (0..n).collect();
                &all
            }
        };
        let x = tape.constant(patches.gather_rows(idx)?);
        let pos = tape.constant(self.pos.gather_rows(idx)?);
        let x = tape.linear(x, b[self.patch_w], Some(b[self.patch_b]))?;
        let x = tape.add(x, pos)?;
        tape.concat_rows(&[b[self.cls], x])
    }

    pub fn forward_tape(&self, tape: &mut Tape, b: &Bound, patches: &Tensor, visible: Option<&[usize]>) -> Result<TapeForward> {
        let tokens = self.embed_tokens(tape, b, patches, visible)?;
        let mut x = tokens;
        let mut blocks = Vec::with_capacity(self.cfg.depth);
        for ids in &self.blocks {
            let v = block_tape(tape, b, ids, x, self.cfg.heads, self.cfg.ln_eps)?;
            x = v.z_d;
            blocks.push(v);
        }
        Ok(TapeForward { tokens, blocks })
    }

    /// Gradient-free forward returning every block trace and both layer stacks.
    pub fn forward_full(&self, patches: &Tensor, visible: Option<&[usize]>, dtype: Dtype) -> Result<FullForward> {
        self.forward_full_with(&self.params, patches, visible, dtype)
    }

    /// [`Encoder::forward_full`] with another parameter set of the same
    /// layout, such as an EMA copy.
    pub fn forward_full_with(
        &self,
        params: &ParamStore,
        patches: &Tensor,
        visible: Option<&[usize]>,
        dtype: Dtype,
    ) -> Result<FullForward> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "forward_full",
                format!("{} tensors for an encoder of {}", params.len(), self.params.len()),
            ));
        }
        let mut tape = Tape::new(dtype);
        let b = params.bind(&mut tape, false);
        let fwd = self.forward_tape(&mut tape, &b, patches, visible)?;
        let traces: Vec<BlockTrace> = fwd.blocks.iter().map(|v| BlockTrace::read(&tape, v)).collect();
        let mlp = LayerStack::from_layers(&traces.iter().map(|t| t.z_c.clone()).collect::<Vec<_>>(), Tap::Mlp)?;
        let eob = LayerStack::from_layers(&traces.iter().map(|t| t.z_d.clone()).collect::<Vec<_>>(), Tap::Eob)?;
        Ok(FullForward { traces, mlp, eob })
    }

    /// Trace of block `layer` applied to an arbitrary token matrix.
    pub fn encoder_block(&self, x: &Tensor, layer: usize, dtype: Dtype) -> Result<BlockTrace> {
        let ids = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Param(format!("layer {layer} out of range")))?;
        let mut tape = Tape::new(dtype);
        let b = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let v = block_tape(&mut tape, &b, ids, xv, self.cfg.heads, self.cfg.ln_eps)?;
        Ok(BlockTrace::read(&tape, &v))
    }

    pub fn block_ids(&self, layer: usize) -> &BlockIds {
        &self.blocks[layer]
    }
}

/// Attention-sink statistic: for each layer and head, the largest column of
/// row-averaged attention mass; averaged over heads and layers.
pub fn attention_sink(maps: &[Tensor]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for m in maps {
        let (h, n) = (m.shape()[0], m.shape()[1]);
        for head in 0..h {
            let p = &m.data()[head * n * n..(head + 1) * n * n];
            let mut best = 0.0f64;
            for j in 0..n {
                let col = (0..n).map(|i| p[i * n + j]).sum::<f64>() / n as f64;
                best = best.max(col);
            }
            total += best;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
