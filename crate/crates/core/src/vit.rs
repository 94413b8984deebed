//! Pre-LayerNorm Vision Transformer with per-block injection hooks.
//!
//! Token layout for every image is `[CLS; extra tokens; patch tokens]`, and a
//! batch is processed as one `[B*T, D]` matrix with attention confined to each
//! image's `T` rows.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::{fan_in_uniform, trunc_normal};
use crate::param::{ParamId, ParamStore};
use crate::peft::{BottleneckAdapter, LoraAdapter};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosMode {
    LearnedAbsolute,
    Rope,
}

impl PosMode {
    pub fn name(self) -> &'static str {
        match self {
            PosMode::LearnedAbsolute => "learned-absolute",
            PosMode::Rope => "rope",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learned-absolute" | "learned" => Ok(PosMode::LearnedAbsolute),
            "rope" => Ok(PosMode::Rope),
            other => Err(Error::Config(format!("unknown pos_mode {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub pos_mode: PosMode,
    /// Non-patch tokens placed after CLS (the ship-size token).
    pub extra_tokens: usize,
    pub rope_base: f64,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            patch: 8,
            image_h: 32,
            image_w: 32,
            channels: 1,
            pos_mode: PosMode::LearnedAbsolute,
            extra_tokens: 0,
            rope_base: 100.0,
            ln_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.patch == 0 || self.channels == 0 {
            return err(format!("vit config has a zero field: {self:?}"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return err(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return err(format!(
                "image {}x{} is not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            ));
        }
        if self.pos_mode == PosMode::Rope && !self.head_dim().is_multiple_of(2) {
            return err(format!("rope needs an even head width, got {}", self.head_dim()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// `1 + extra_tokens + (H/P)(W/P)`
    pub fn seq_len(&self) -> usize {
        1 + self.extra_tokens + self.num_patches()
    }

    /// Position of every token in a sequence: zero (identity rotation) for
    /// CLS and extra tokens, `1 + raster index` for patches.
    pub fn token_positions<T: Real>(&self) -> Vec<T> {
        let mut p = vec![T::zero(); 1 + self.extra_tokens];
        p.extend((0..self.num_patches()).map(|i| T::from_usize(i + 1).unwrap()));
        p
    }
}

/// Splits `image[C, H, W]` into `[N, P·P·C]` rows. Patches are taken in
/// row-major scan order; inside a row the layout is channel, then pixel row,
/// then pixel column.
pub fn patchify<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("patchify expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!("image {h}x{w} is not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    let row = ch * h * w + (py * patch + y) * w + px * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * c], out)
}

/// Rotates one head vector by the rotary embedding at `pos`.
pub fn rope_rotate<T: Real>(v: &[T], pos: T, base: T) -> Vec<T> {
    let (cos, sin) = crate::autograd::rope_tables(&[pos], v.len(), base);
    let mut out = v.to_vec();
    for i in 0..v.len() / 2 {
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        out[2 * i] = a * cos[i] - b * sin[i];
        out[2 * i + 1] = a * sin[i] + b * cos[i];
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub enum LinearInit {
    TruncNormal(f64),
    Zeros,
    FanInUniform,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: LinearInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (w, b) = match init {
            LinearInit::TruncNormal(std) => (trunc_normal(&[out_dim, in_dim], std, rng), Tensor::zeros(&[out_dim])),
            LinearInit::Zeros => (Tensor::zeros(&[out_dim, in_dim]), Tensor::zeros(&[out_dim])),
            LinearInit::FanInUniform => (
                fan_in_uniform(&[out_dim, in_dim], in_dim, rng),
                fan_in_uniform(&[out_dim], in_dim, rng),
            ),
        };
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), b)?) } else { None };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
            eps,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, T::lit(self.eps))
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        let init = LinearInit::TruncNormal(0.02);
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, cfg.ln_eps)?,
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), d, 3 * d, true, init, rng)?,
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, true, init, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, cfg.ln_eps)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, hidden, true, init, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, d, true, init, rng)?,
            heads: cfg.heads,
        })
    }
}

/// Where a per-block deviation meets the LayerNorm of its sub-layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormSite {
    /// `Sub(Norm(x) + Δ)`
    PostNorm,
    /// `Sub(Norm(x + Δ))`
    PreNorm,
}

/// Feature deviations for one block, each `[B, D]` and broadcast over the
/// tokens of its image. Absent entries are exact zeros: no add is recorded.
#[derive(Clone, Copy, Debug)]
pub struct BlockDeviation {
    pub attn: Option<Var>,
    pub mlp: Option<Var>,
    /// Added to the attention residual sum.
    pub attn_residual: Option<Var>,
    /// Added to the MLP residual sum.
    pub mlp_residual: Option<Var>,
    pub site: NormSite,
}

impl BlockDeviation {
    pub fn none() -> Self {
        Self {
            attn: None,
            mlp: None,
            attn_residual: None,
            mlp_residual: None,
            site: NormSite::PostNorm,
        }
    }
}

impl Default for BlockDeviation {
    fn default() -> Self {
        Self::none()
    }
}

/// Everything a block may be modified by without touching its weights.
#[derive(Clone, Copy, Default)]
pub struct BlockHooks<'a> {
    pub deviation: BlockDeviation,
    pub lora_qkv: Option<&'a LoraAdapter>,
    pub lora_proj: Option<&'a LoraAdapter>,
    pub adapter_attn: Option<&'a BottleneckAdapter>,
    pub adapter_mlp: Option<&'a BottleneckAdapter>,
}

/// Static shape of the batch being run through a block.
#[derive(Clone, Copy, Debug)]
pub struct SeqLayout<'a, T> {
    pub batch: usize,
    pub tokens: usize,
    /// Per-token rotary positions; `None` disables rotation.
    pub rope: Option<(&'a [T], T)>,
}

fn check_delta<T: Real>(tape: &Tape<T>, delta: Var, layout: &SeqLayout<'_, T>, dim: usize) -> Result<()> {
    let s = tape.shape(delta);
    let ok = tape.value(delta).last_dim() == dim && tape.value(delta).rows() == layout.batch;
    if !ok {
        return Err(Error::Dimension(format!(
            "deviation {s:?} does not match batch {} and width {dim}",
            layout.batch
        )));
    }
    Ok(())
}

fn normed_input<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    norm: &LayerNorm,
    x: Var,
    delta: Option<Var>,
    site: NormSite,
    layout: &SeqLayout<'_, T>,
) -> Result<Var> {
    match (delta, site) {
        (None, _) => norm.forward(tape, store, x),
        (Some(d), NormSite::PreNorm) => {
            let shifted = tape.add_group(x, d, layout.tokens)?;
            norm.forward(tape, store, shifted)
        }
        (Some(d), NormSite::PostNorm) => {
            let h = norm.forward(tape, store, x)?;
            tape.add_group(h, d, layout.tokens)
        }
    }
}

/// Multi-head self-attention on already-normalized tokens `h[B*T, D]`,
/// including the output projection.
pub fn attention<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &TransformerBlock,
    h: Var,
    layout: &SeqLayout<'_, T>,
    hooks: &BlockHooks<'_>,
) -> Result<Var> {
    let mut qkv = crate::peft::lora_forward(tape, store, h, &block.qkv, hooks.lora_qkv)?;
    if let Some((positions, base)) = layout.rope {
        if positions.len() != layout.tokens {
            return Err(Error::Dimension(format!(
                "{} rope positions for {} tokens",
                positions.len(),
                layout.tokens
            )));
        }
        qkv = tape.rope_qkv(qkv, positions, block.heads, base)?;
    }
    let a = tape.attention(qkv, layout.batch, block.heads)?;
    crate::peft::lora_forward(tape, store, a, &block.proj, hooks.lora_proj)
}

/// One pre-LN block:
/// `x' = x + Attn(Norm(x) ⊕ Δattn)`, `x'' = x' + MLP(Norm(x') ⊕ Δmlp)`,
/// where `⊕` follows the deviation's [`NormSite`] and residual deviations are
/// added to the sums.
pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &TransformerBlock,
    x: Var,
    layout: &SeqLayout<'_, T>,
    hooks: &BlockHooks<'_>,
) -> Result<Var> {
    let dev = &hooks.deviation;
    let dim = block.proj.out_dim;
    for d in [dev.attn, dev.mlp, dev.attn_residual, dev.mlp_residual].into_iter().flatten() {
        check_delta(tape, d, layout, dim)?;
    }

    let h = normed_input(tape, store, &block.norm1, x, dev.attn, dev.site, layout)?;
    let mut a = attention(tape, store, block, h, layout, hooks)?;
    if let Some(ad) = hooks.adapter_attn {
        a = crate::peft::adapter_forward(tape, store, a, ad)?;
    }
    let mut x1 = tape.add(x, a)?;
    if let Some(r) = dev.attn_residual {
        x1 = tape.add_group(x1, r, layout.tokens)?;
    }

    let h2 = normed_input(tape, store, &block.norm2, x1, dev.mlp, dev.site, layout)?;
    let m = block.fc1.forward(tape, store, h2)?;
    let m = tape.gelu(m);
    let mut m = block.fc2.forward(tape, store, m)?;
    if let Some(ad) = hooks.adapter_mlp {
        m = crate::peft::adapter_forward(tape, store, m, ad)?;
    }
    let mut x2 = tape.add(x1, m)?;
    if let Some(r) = dev.mlp_residual {
        x2 = tape.add_group(x2, r, layout.tokens)?;
    }
    Ok(x2)
}

#[derive(Clone, Debug)]
pub struct VisionTransformer {
    pub cfg: ViTConfig,
    pub prefix: String,
    pub patch_embed: Linear,
    /// CLS token for the backbone; the domain token for the offset encoder.
    pub cls: ParamId,
    pub pos: Option<ParamId>,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

pub struct BackboneOutput {
    /// `[B, D]` normalized first token of each image.
    pub f_g: Var,
    /// Output of every block, `[B*T, D]`.
    pub taps: Vec<Var>,
}

impl VisionTransformer {
    /// Registers all weights under `prefix`; `token_name` names the leading
    /// learnable token (`cls_token`, `domain_token`).
    pub fn new<T: Real>(
        cfg: ViTConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        token_name: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = Linear::new(
            store,
            &format!("{prefix}.patch_embed"),
            cfg.patch_dim(),
            cfg.dim,
            true,
            LinearInit::TruncNormal(0.02),
            rng,
        )?;
        let cls = store.add(format!("{prefix}.{token_name}"), trunc_normal(&[1, cfg.dim], 0.02, rng))?;
        let pos = match cfg.pos_mode {
            PosMode::LearnedAbsolute => Some(store.add(
                format!("{prefix}.pos_embed"),
                trunc_normal(&[cfg.num_patches(), cfg.dim], 0.02, rng),
            )?),
            PosMode::Rope => None,
        };
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), cfg.dim, cfg.ln_eps)?;
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
            patch_embed,
            cls,
            pos,
            blocks,
            norm,
        })
    }

    /// Patchifies a batch of `[C, H, W]` images into one `[B*N, P²C]` matrix.
    pub fn batch_patches<T: Real>(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let cfg = &self.cfg;
        let mut data = Vec::with_capacity(images.len() * cfg.num_patches() * cfg.patch_dim());
        for img in images {
            if img.shape() != [cfg.channels, cfg.image_h, cfg.image_w] {
                return Err(Error::Input(format!(
                    "image shape {:?} does not match config [{}, {}, {}]",
                    img.shape(),
                    cfg.channels,
                    cfg.image_h,
                    cfg.image_w
                )));
            }
            data.extend_from_slice(patchify(img, cfg.patch)?.data());
        }
        Tensor::new(vec![images.len() * cfg.num_patches(), cfg.patch_dim()], data)
    }

    /// Embeds and assembles `[CLS; extra; patches]` for every image.
    fn embed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        images: &[&Tensor<T>],
        extra: Option<Var>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let b = images.len();
        if b == 0 {
            return Err(Error::Input("empty image batch".into()));
        }
        match (cfg.extra_tokens, extra) {
            (0, None) => {}
            (0, Some(_)) => return Err(Error::Input("extra tokens supplied but config has none".into())),
            (n, Some(e)) => {
                if tape.value(e).rows() != b * n || tape.value(e).last_dim() != cfg.dim {
                    return Err(Error::Input(format!(
                        "extra tokens {:?} do not match batch {b} x {n} x {}",
                        tape.shape(e),
                        cfg.dim
                    )));
                }
            }
            (n, None) => return Err(Error::Input(format!("config expects {n} extra token(s) per image"))),
        }
        let patches = tape.constant(self.batch_patches(images)?);
        let mut emb = self.patch_embed.forward(tape, store, patches)?;
        if let Some(pos) = self.pos {
            let p = tape.param(store, pos);
            emb = tape.add_tiled(emb, p)?;
        }
        let cls = tape.param(store, self.cls);
        let n = cfg.num_patches();
        let mut parts = Vec::with_capacity(b * 3);
        for i in 0..b {
            parts.push(cls);
            if let Some(e) = extra {
                parts.push(tape.slice_rows(e, i * cfg.extra_tokens, cfg.extra_tokens)?);
            }
            parts.push(tape.slice_rows(emb, i * n, n)?);
        }
        tape.concat_rows(&parts)
    }

    /// Runs every block, asking `hooks` for the modifications of block `ℓ`.
    pub fn forward<'h, T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        images: &[&Tensor<T>],
        extra: Option<Var>,
        mut hooks: impl FnMut(&mut Tape<T>, usize) -> Result<BlockHooks<'h>>,
    ) -> Result<BackboneOutput> {
        let cfg = &self.cfg;
        let mut x = self.embed(tape, store, images, extra)?;
        let positions: Vec<T> = cfg.token_positions();
        let layout = SeqLayout {
            batch: images.len(),
            tokens: cfg.seq_len(),
            rope: (cfg.pos_mode == PosMode::Rope).then_some((positions.as_slice(), T::lit(cfg.rope_base))),
        };
        let mut taps = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let h = hooks(tape, l)?;
            x = block_forward(tape, store, block, x, &layout, &h)?;
            taps.push(x);
        }
        let first: Vec<usize> = (0..images.len()).map(|i| i * cfg.seq_len()).collect();
        let cls = tape.gather_rows(x, &first)?;
        let f_g = self.norm.forward(tape, store, cls)?;
        Ok(BackboneOutput { f_g, taps })
    }

    /// Forward with no modifications.
    pub fn forward_plain<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        images: &[&Tensor<T>],
        extra: Option<Var>,
    ) -> Result<BackboneOutput> {
        self.forward(tape, store, images, extra, |_, _| Ok(BlockHooks::default()))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.patch_embed.params();
        ids.push(self.cls);
        ids.extend(self.pos);
        for b in &self.blocks {
            ids.extend([b.norm1.gamma, b.norm1.beta, b.norm2.gamma, b.norm2.beta]);
            for lin in [&b.qkv, &b.proj, &b.fc1, &b.fc2] {
                ids.extend(lin.params());
            }
        }
        ids.extend([self.norm.gamma, self.norm.beta]);
        ids
    }
}
