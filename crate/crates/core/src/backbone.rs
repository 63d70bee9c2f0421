//! The toy text-to-image diffusion transformer.
//!
//! Weights live in a [`ParamStore`] under these prefixes:
//!
//! * `backbone.patch.{weight,bias,pos}`: generate-mode patch embedding
//! * `backbone.time.{fc1,fc2}.*`: timestep MLP
//! * `backbone.text.embed`: token table; row 0 is the null (pad) embedding
//! * `backbone.blocks.{i}.{sa,ca,ffn}.*`: the T2I blocks
//! * `backbone.head.{mod,linear}.*`: final modulated norm and unpatchify
//! * `task_patch.*`: channel-doubled patch embedding for depth/normal modes
//!
//! Every block sub-layer carries its own modulation linear fed with
//! `silu(t_embed)`: self-attention and FFN produce shift/scale/gate, the
//! cross-attention produces a gate only.

use crate::config::BackboneConfig;
use crate::converters::ConverterStack;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Rng, Tensor, Var};
use crate::schedule::Timestep;
use crate::tasks::TaskMode;

/// Token id of the null / pad symbol.
pub const PAD: usize = 0;

const LN_EPS: f64 = 1e-6;

pub const GENERATE_PATCH: &str = "backbone.patch";
pub const TASK_PATCH: &str = "task_patch";

/// Which sub-layers a block carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub self_attn: bool,
    pub cross_attn: bool,
    pub ffn_expansion: Option<usize>,
}

impl BlockLayout {
    pub fn full(expansion: usize) -> Self {
        Self {
            self_attn: true,
            cross_attn: true,
            ffn_expansion: Some(expansion),
        }
    }
}

/// Exact parameter count of one block with the given layout.
///
/// `d` is the model width, `ctx` the width of the text context the
/// cross-attention keys and values are projected from.
pub fn block_param_count(layout: BlockLayout, d: usize, ctx: usize) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let mut n = 0;
    if layout.self_attn {
        n += 2 * d + lin(d, 3 * d) + 4 * lin(d, d);
    }
    if layout.cross_attn {
        n += cross_attn_param_count(d, ctx);
    }
    if let Some(e) = layout.ffn_expansion {
        n += 2 * d + lin(d, 3 * d) + lin(d, e * d) + lin(e * d, d);
    }
    n
}

/// Parameters of the cross-attention sub-layer: Q and O projections on the
/// tokens, K and V from the context, and the gate modulation.
pub fn cross_attn_param_count(d: usize, ctx: usize) -> usize {
    2 * (d * d + d) + 2 * (ctx * d + d) + (d * d + d)
}

/// Sequence of token ids fed to the text embedder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextContext {
    ids: Vec<usize>,
}

impl TextContext {
    /// The empty prompt: all pad ids, which map to the null embedding row.
    pub fn empty(len: usize) -> Self {
        Self { ids: vec![PAD; len] }
    }

    /// Right-pads `tokens` with [`PAD`] to `len`.
    pub fn new(tokens: &[usize], len: usize, vocab: usize) -> Result<Self> {
        if tokens.len() > len {
            return Err(crate::error::invalid(format!(
                "prompt of {} tokens exceeds text_len {len}",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(crate::error::invalid(format!(
                "token {t} outside vocabulary of {vocab}"
            )));
        }
        let mut ids = tokens.to_vec();
        ids.resize(len, PAD);
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

/// One batch of model inputs.
#[derive(Clone, Debug)]
pub struct ModelInput<F: Real = f32> {
    /// `[B, C, H, W]`; `C` is the image channel count in generate mode and
    /// twice that (condition first) in task modes.
    pub z: Tensor<F>,
    pub times: Vec<Timestep>,
    pub text: Vec<TextContext>,
}

pub struct ForwardOutput {
    /// `[B, C, H, W]` prediction.
    pub prediction: Var,
    pub converter_calls: usize,
    /// Output of each T2I block, when captured.
    pub block_outputs: Vec<Var>,
}

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.uniform_tensor(&[fan_in, fan_out], -a, a)
}

/// How a freshly created block is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockInit {
    /// Xavier projections, zero modulation (gates start closed).
    ZeroGates,
    /// Every weight matrix, modulation included, drawn from the stream.
    Random,
}

fn insert_linear(store: &mut ParamStore, name: &str, i: usize, o: usize, w: Tensor, trainable: bool) -> Result<()> {
    debug_assert_eq!(w.shape(), &[i, o]);
    store.insert(format!("{name}.weight"), w, trainable)?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[o]), trainable)
}

fn insert_norm(store: &mut ParamStore, name: &str, d: usize, trainable: bool) -> Result<()> {
    store.insert(format!("{name}.weight"), Tensor::full(&[d], 1.0), trainable)?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[d]), trainable)
}

/// Adds the weights of one block under `prefix`.
pub fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    layout: BlockLayout,
    d: usize,
    ctx: usize,
    init: BlockInit,
    rng: &mut Rng,
    trainable: bool,
) -> Result<()> {
    let modulation = |rng: &mut Rng, o: usize| match init {
        BlockInit::ZeroGates => Tensor::zeros(&[d, o]),
        BlockInit::Random => xavier(rng, d, o),
    };
    if layout.self_attn {
        insert_norm(store, &format!("{prefix}.sa.norm"), d, trainable)?;
        let m = modulation(rng, 3 * d);
        insert_linear(store, &format!("{prefix}.sa.mod"), d, 3 * d, m, trainable)?;
        for p in ["q", "k", "v", "o"] {
            insert_linear(store, &format!("{prefix}.sa.{p}"), d, d, xavier(rng, d, d), trainable)?;
        }
    }
    if layout.cross_attn {
        insert_linear(store, &format!("{prefix}.ca.q"), d, d, xavier(rng, d, d), trainable)?;
        insert_linear(store, &format!("{prefix}.ca.k"), ctx, d, xavier(rng, ctx, d), trainable)?;
        insert_linear(store, &format!("{prefix}.ca.v"), ctx, d, xavier(rng, ctx, d), trainable)?;
        insert_linear(store, &format!("{prefix}.ca.o"), d, d, xavier(rng, d, d), trainable)?;
        let m = modulation(rng, d);
        insert_linear(store, &format!("{prefix}.ca.gate"), d, d, m, trainable)?;
    }
    if let Some(e) = layout.ffn_expansion {
        insert_norm(store, &format!("{prefix}.ffn.norm"), d, trainable)?;
        let m = modulation(rng, 3 * d);
        insert_linear(store, &format!("{prefix}.ffn.mod"), d, 3 * d, m, trainable)?;
        insert_linear(
            store,
            &format!("{prefix}.ffn.fc1"),
            d,
            e * d,
            xavier(rng, d, e * d),
            trainable,
        )?;
        insert_linear(
            store,
            &format!("{prefix}.ffn.fc2"),
            e * d,
            d,
            xavier(rng, e * d, d),
            trainable,
        )?;
    }
    Ok(())
}

/// Fixed 2-D sine/cosine table `[tokens, d]` used to initialize the learned
/// positional embedding.
fn sincos_positions(side: usize, d: usize) -> Tensor {
    let quarter = d / 4;
    Tensor::from_fn(&[side * side, d], |idx| {
        let (tok, k) = (idx / d, idx % d);
        let (row, col) = ((tok / side) as f64, (tok % side) as f64);
        let pos = if k < d / 2 { col } else { row };
        let k = k % (d / 2);
        let i = (k % quarter.max(1)) as f64;
        let freq = 1.0 / 10000f64.powf(i / quarter.max(1) as f64);
        let v = if k < quarter {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        };
        v as f32
    })
}

/// Creates a fresh, fully trainable backbone.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let pd = cfg.patch_dim(cfg.channels);
    insert_linear(&mut s, GENERATE_PATCH, pd, d, xavier(&mut rng, pd, d), true)?;
    s.insert(
        format!("{GENERATE_PATCH}.pos"),
        sincos_positions(cfg.image_size / cfg.patch, d),
        true,
    )?;
    let small = |rng: &mut Rng, shape: &[usize]| rng.normal_tensor::<f32>(shape).map(|v| 0.02 * v);
    insert_linear(&mut s, "backbone.time.fc1", d, d, small(&mut rng, &[d, d]), true)?;
    insert_linear(&mut s, "backbone.time.fc2", d, d, small(&mut rng, &[d, d]), true)?;
    s.insert("backbone.text.embed", small(&mut rng, &[cfg.text_vocab, d]), true)?;
    for i in 0..cfg.depth {
        init_block(
            &mut s,
            &format!("backbone.blocks.{i}"),
            BlockLayout::full(cfg.ffn_expansion),
            d,
            d,
            BlockInit::ZeroGates,
            &mut rng,
            true,
        )?;
    }
    insert_linear(&mut s, "backbone.head.mod", d, 2 * d, Tensor::zeros(&[d, 2 * d]), true)?;
    insert_linear(&mut s, "backbone.head.linear", d, pd, Tensor::zeros(&[d, pd]), true)?;
    Ok(s)
}

/// Exact backbone parameter count (excluding the task patch embedding).
pub fn backbone_param_count(cfg: &BackboneConfig) -> usize {
    let d = cfg.d_model;
    let pd = cfg.patch_dim(cfg.channels);
    let patch = pd * d + d + cfg.tokens() * d;
    let time = 2 * (d * d + d);
    let text = cfg.text_vocab * d;
    let blocks = cfg.depth * block_param_count(BlockLayout::full(cfg.ffn_expansion), d, d);
    let head = (d * 2 * d + 2 * d) + (d * pd + pd);
    patch + time + text + blocks + head
}

/// Task patch embedding initialized from the generate one: weights copied
/// into both channel halves and halved; bias and positions copied.
pub fn init_task_patch(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<()> {
    let gen_w = store.tensor(&format!("{GENERATE_PATCH}.weight"))?.clone();
    let c = cfg.channels;
    let p2 = cfg.patch * cfg.patch;
    let d = cfg.d_model;
    let mut w = Tensor::zeros(&[p2 * 2 * c, d]);
    for pix in 0..p2 {
        for ch in 0..2 * c {
            let src = (pix * c + ch % c) * d;
            let dst = (pix * 2 * c + ch) * d;
            for j in 0..d {
                w.data_mut()[dst + j] = 0.5 * gen_w.data()[src + j];
            }
        }
    }
    let bias = store.tensor(&format!("{GENERATE_PATCH}.bias"))?.clone();
    let pos = store.tensor(&format!("{GENERATE_PATCH}.pos"))?.clone();
    store.set(format!("{TASK_PATCH}.weight"), w, true);
    store.set(format!("{TASK_PATCH}.bias"), bias, true);
    store.set(format!("{TASK_PATCH}.pos"), pos, true);
    Ok(())
}

/// Parameter totals split by owner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct ParamBreakdown {
    pub backbone: usize,
    pub converters: usize,
    pub task_patch: usize,
    pub total: usize,
}

/// Counts parameters by prefix, optionally only the trainable ones.
pub fn count_params(store: &ParamStore, trainable_only: bool) -> ParamBreakdown {
    let mut out = ParamBreakdown::default();
    for (name, p) in store.iter() {
        if trainable_only && !p.trainable {
            continue;
        }
        let n = p.tensor.len();
        if name.starts_with("backbone.") {
            out.backbone += n;
        } else if name.starts_with("converters.") {
            out.converters += n;
        } else if name.starts_with(TASK_PATCH) {
            out.task_patch += n;
        }
        out.total += n;
    }
    out
}

fn linear<F: Real>(g: &mut Graph<'_, F>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.weight"))?;
    let b = g.param(&format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn affine_norm<F: Real>(g: &mut Graph<'_, F>, name: &str, x: Var) -> Result<Var> {
    let h = g.layer_norm(x, LN_EPS)?;
    let w = g.param(&format!("{name}.weight"))?;
    let b = g.param(&format!("{name}.bias"))?;
    let h = g.mul(h, w)?;
    g.add(h, b)
}

/// `k` modulation vectors `[B, 1, d]` from `c = silu(t_embed)`.
fn modulation<F: Real>(g: &mut Graph<'_, F>, name: &str, c: Var, k: usize) -> Result<Vec<Var>> {
    let m = linear(g, name, c)?;
    let (b, kd) = (g.shape(m)[0], g.shape(m)[1]);
    let m = g.reshape(m, &[b, 1, kd])?;
    g.split(m, 2, &vec![kd / k; k])
}

fn modulate<F: Real>(g: &mut Graph<'_, F>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s1 = g.add_scalar(scale, 1.0);
    let y = g.mul(x, s1)?;
    g.add(y, shift)
}

/// Multi-head attention with queries from `xq [B, Nq, d]` and keys/values
/// from `xkv [B, Nk, dk]`.
fn attention<F: Real>(g: &mut Graph<'_, F>, name: &str, xq: Var, xkv: Var, heads: usize) -> Result<Var> {
    let (b, nq) = (g.shape(xq)[0], g.shape(xq)[1]);
    let nk = g.shape(xkv)[1];
    let q = linear(g, &format!("{name}.q"), xq)?;
    let k = linear(g, &format!("{name}.k"), xkv)?;
    let v = linear(g, &format!("{name}.v"), xkv)?;
    let d = g.shape(q)[2];
    let dh = d / heads;
    let split_heads = |g: &mut Graph<'_, F>, t: Var, n: usize| -> Result<Var> {
        let t = g.reshape(t, &[b, n, heads, dh])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[b * heads, n, dh])
    };
    let q = split_heads(g, q, nq)?;
    let k = split_heads(g, k, nk)?;
    let v = split_heads(g, v, nk)?;
    let s = g.bmm(q, k, false, true)?;
    let s = g.scale(s, 1.0 / (dh as f64).sqrt());
    let p = g.softmax(s)?;
    let o = g.bmm(p, v, false, false)?;
    let o = g.reshape(o, &[b, heads, nq, dh])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, nq, d])?;
    linear(g, &format!("{name}.o"), o)
}

/// Residual block: `x + g1*SA(mod1(LN(x)))`, then `+ g_ca*CA(., ctx)`, then
/// `+ g2*FFN(mod2(LN(.)))`, skipping the sub-layers absent from `layout`.
///
/// `x` is `[B, N, d]`, `ctx` is `[B, L, d_ctx]`, `c` is `silu(t_embed)` `[B, d]`.
pub fn block_forward<F: Real>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    layout: BlockLayout,
    heads: usize,
    x: Var,
    ctx: Var,
    c: Var,
) -> Result<Var> {
    let mut x = x;
    if layout.self_attn {
        let m = modulation(g, &format!("{prefix}.sa.mod"), c, 3)?;
        let h = affine_norm(g, &format!("{prefix}.sa.norm"), x)?;
        let h = modulate(g, h, m[0], m[1])?;
        let a = attention(g, &format!("{prefix}.sa"), h, h, heads)?;
        let a = g.mul(a, m[2])?;
        x = g.add(x, a)?;
    }
    if layout.cross_attn {
        let gate = modulation(g, &format!("{prefix}.ca.gate"), c, 1)?[0];
        let a = attention(g, &format!("{prefix}.ca"), x, ctx, heads)?;
        let a = g.mul(a, gate)?;
        x = g.add(x, a)?;
    }
    if layout.ffn_expansion.is_some() {
        let m = modulation(g, &format!("{prefix}.ffn.mod"), c, 3)?;
        let h = affine_norm(g, &format!("{prefix}.ffn.norm"), x)?;
        let h = modulate(g, h, m[0], m[1])?;
        let h = linear(g, &format!("{prefix}.ffn.fc1"), h)?;
        let h = g.gelu(h);
        let h = linear(g, &format!("{prefix}.ffn.fc2"), h)?;
        let h = g.mul(h, m[2])?;
        x = g.add(x, h)?;
    }
    Ok(x)
}

/// Sinusoidal features `[B, d]` of the time values.
pub fn timestep_features<F: Real>(times: &[Timestep], d: usize) -> Tensor<F> {
    let half = d / 2;
    Tensor::from_fn(&[times.len(), d], |idx| {
        let (b, k) = (idx / d, idx % d);
        let i = k % half;
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = times[b].embedding_value() * freq;
        F::lit(if k < half { arg.cos() } else { arg.sin() })
    })
}

/// `x [B, C, H, W]` -> `[B, N, p*p*C]` with patch vectors ordered (row, col, channel).
fn patches<F: Real>(g: &mut Graph<'_, F>, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let t = g.reshape(x, &[b, c, h / p, p, w / p, p])?;
    let t = g.permute(t, &[0, 2, 4, 3, 5, 1])?;
    g.reshape(t, &[b, (h / p) * (w / p), p * p * c])
}

/// Inverse of [`patches`].
fn unpatchify<F: Real>(g: &mut Graph<'_, F>, x: Var, p: usize, c: usize, side: usize) -> Result<Var> {
    let b = g.shape(x)[0];
    let hp = side / p;
    let t = g.reshape(x, &[b, hp, hp, p, p, c])?;
    let t = g.permute(t, &[0, 5, 1, 3, 2, 4])?;
    g.reshape(t, &[b, c, side, side])
}

/// Patch embedding of `x [B, C, H, W]` through the table at `prefix`.
pub fn patchify<F: Real>(g: &mut Graph<'_, F>, cfg: &BackboneConfig, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let expected = g.shape(w)[0] / (cfg.patch * cfg.patch);
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != expected {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![expected, cfg.image_size, cfg.image_size],
            rhs: s[1.min(s.len())..].to_vec(),
        });
    }
    if s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![expected, cfg.image_size, cfg.image_size],
            rhs: s[1..].to_vec(),
        });
    }
    let t = patches(g, x, cfg.patch)?;
    let t = linear(g, prefix, t)?;
    let pos = g.param(&format!("{prefix}.pos"))?;
    g.add(t, pos)
}

/// Full denoiser forward pass.
///
/// Generate mode uses only `backbone.*` weights and must not be handed
/// converters. Task modes embed through `task_patch` and run `converters`
/// when present (absent only for the full fine-tune baseline). The output
/// head is shared by every mode.
#[allow(clippy::too_many_arguments)]
pub fn backbone_forward<F: Real>(
    g: &mut Graph<'_, F>,
    cfg: &BackboneConfig,
    input: &ModelInput<F>,
    mode: TaskMode,
    converters: Option<&ConverterStack>,
    capture_blocks: bool,
) -> Result<ForwardOutput> {
    if mode == TaskMode::Generate && converters.is_some() {
        return Err(Error::Mode(
            "generate mode skips converters; none may be supplied".into(),
        ));
    }
    let b = input.z.shape().first().copied().unwrap_or(0);
    if input.times.len() != b || input.text.len() != b {
        return Err(Error::Shape {
            op: "backbone_forward",
            lhs: vec![b],
            rhs: vec![input.times.len(), input.text.len()],
        });
    }
    let d = cfg.d_model;
    let x = g.constant(input.z.clone());
    let prefix = if mode == TaskMode::Generate {
        GENERATE_PATCH
    } else {
        TASK_PATCH
    };
    let mut h = patchify(g, cfg, prefix, x)?;

    let tf = g.constant(timestep_features(&input.times, d));
    let t = linear(g, "backbone.time.fc1", tf)?;
    let t = g.silu(t);
    let t_embed = linear(g, "backbone.time.fc2", t)?;
    let c = g.silu(t_embed);

    let mut ids = Vec::with_capacity(b * cfg.text_len);
    for text in &input.text {
        if text.ids().len() != cfg.text_len {
            return Err(Error::Shape {
                op: "text_context",
                lhs: vec![cfg.text_len],
                rhs: vec![text.ids().len()],
            });
        }
        ids.extend_from_slice(text.ids());
    }
    let table = g.param("backbone.text.embed")?;
    let ctx = g.gather(table, &ids)?;
    let ctx = g.reshape(ctx, &[b, cfg.text_len, d])?;

    // converters see the null prompt whatever the backbone is given
    let null_ctx = match converters {
        Some(_) => {
            let t = g.gather(table, &vec![PAD; b * cfg.text_len])?;
            Some(g.reshape(t, &[b, cfg.text_len, d])?)
        }
        None => None,
    };

    let mut converter_calls = 0;
    let mut block_outputs = Vec::new();
    let full = BlockLayout::full(cfg.ffn_expansion);
    for i in 0..cfg.depth {
        if let (Some(stack), Some(null_ctx)) = (converters, null_ctx) {
            let (out, calls) = stack.before_block(g, cfg, i, h, null_ctx, c)?;
            h = out;
            converter_calls += calls;
        }
        h = block_forward(g, &format!("backbone.blocks.{i}"), full, cfg.heads, h, ctx, c)?;
        if capture_blocks {
            block_outputs.push(h);
        }
    }

    let m = modulation(g, "backbone.head.mod", c, 2)?;
    let y = g.layer_norm(h, LN_EPS)?;
    let y = modulate(g, y, m[0], m[1])?;
    let y = linear(g, "backbone.head.linear", y)?;
    let prediction = unpatchify(g, y, cfg.patch, cfg.channels, cfg.image_size)?;
    Ok(ForwardOutput {
        prediction,
        converter_calls,
        block_outputs,
    })
}
