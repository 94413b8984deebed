//! Domain representation injection.
//!
//! A small RoPE ViT (the offset encoder) reads the raw image and produces a
//! domain vector `f_d`. Per-block modulators map `f_d` to additive feature
//! deviations which the frozen backbone receives through [`BlockDeviation`].

use std::fmt;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::vit::{BlockDeviation, Linear, LinearInit, NormSite, PosMode, ViTConfig, VisionTransformer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetEncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Defaults to the backbone patch size.
    pub patch: Option<usize>,
}

impl Default for OffsetEncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            dim: 64,
            heads: 2,
            mlp_ratio: 4,
            patch: None,
        }
    }
}

impl OffsetEncoderConfig {
    /// The encoder's ViT geometry for images shaped like `backbone`'s input.
    pub fn vit(&self, backbone: &ViTConfig) -> ViTConfig {
        ViTConfig {
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            patch: self.patch.unwrap_or(backbone.patch),
            image_h: backbone.image_h,
            image_w: backbone.image_w,
            channels: backbone.channels,
            pos_mode: PosMode::Rope,
            extra_tokens: 0,
            rope_base: backbone.rope_base,
            ln_eps: backbone.ln_eps,
        }
    }

    /// Closed-form parameter count of one encoder block.
    pub fn block_params(&self) -> usize {
        let d = self.dim;
        let h = d * self.mlp_ratio;
        (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d) + 2 * (2 * d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    AttnOnly,
    MlpOnly,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    PostNorm,
    PreNorm,
    ResidualOnly,
    ResidualPreNorm,
    ResidualPostNorm,
}

/// Where deviations are injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InjectionPlan {
    pub target: Target,
    pub location: Location,
}

/// One injection point inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Site {
    Attn,
    Mlp,
    AttnResidual,
    MlpResidual,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::Attn => "attn",
            Site::Mlp => "mlp",
            Site::AttnResidual => "attn_residual",
            Site::MlpResidual => "mlp_residual",
        }
    }
}

impl InjectionPlan {
    pub const DEFAULT: InjectionPlan = InjectionPlan {
        target: Target::Both,
        location: Location::PostNorm,
    };

    /// The plan names of the insertion-position ablation, in table order.
    pub const ABLATION_NAMES: [&'static str; 7] = [
        "attn/post-norm",
        "mlp/post-norm",
        "both/post-norm",
        "both/pre-norm",
        "both/residual-only",
        "both/residual+pre-norm",
        "both/residual+post-norm",
    ];

    pub fn parse(s: &str) -> Result<Self> {
        let (t, l) = s
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("injection plan {s:?} is not <target>/<location>")))?;
        let target = match t {
            "attn" => Target::AttnOnly,
            "mlp" => Target::MlpOnly,
            "both" => Target::Both,
            _ => return Err(Error::Config(format!("unknown injection target {t:?}"))),
        };
        let location = match l {
            "post-norm" => Location::PostNorm,
            "pre-norm" => Location::PreNorm,
            "residual-only" => Location::ResidualOnly,
            "residual+pre-norm" => Location::ResidualPreNorm,
            "residual+post-norm" => Location::ResidualPostNorm,
            _ => return Err(Error::Config(format!("unknown injection location {l:?}"))),
        };
        Ok(Self { target, location })
    }

    pub fn norm_site(&self) -> NormSite {
        match self.location {
            Location::PreNorm | Location::ResidualPreNorm => NormSite::PreNorm,
            _ => NormSite::PostNorm,
        }
    }

    /// Sites that own a modulator in every block, in allocation order.
    pub fn sites(&self) -> Vec<Site> {
        let attn = self.target != Target::MlpOnly;
        let mlp = self.target != Target::AttnOnly;
        let normed = self.location != Location::ResidualOnly;
        let residual = matches!(
            self.location,
            Location::ResidualOnly | Location::ResidualPreNorm | Location::ResidualPostNorm
        );
        let mut s = Vec::new();
        if normed && attn {
            s.push(Site::Attn);
        }
        if normed && mlp {
            s.push(Site::Mlp);
        }
        if residual && attn {
            s.push(Site::AttnResidual);
        }
        if residual && mlp {
            s.push(Site::MlpResidual);
        }
        s
    }
}

impl Default for InjectionPlan {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for InjectionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = match self.target {
            Target::AttnOnly => "attn",
            Target::MlpOnly => "mlp",
            Target::Both => "both",
        };
        let l = match self.location {
            Location::PostNorm => "post-norm",
            Location::PreNorm => "pre-norm",
            Location::ResidualOnly => "residual-only",
            Location::ResidualPreNorm => "residual+pre-norm",
            Location::ResidualPostNorm => "residual+post-norm",
        };
        write!(f, "{t}/{l}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModulatorDesign {
    /// `W·f_d + b`
    Linear,
    /// `W₂·gelu(W₁·f_d + b₁) + b₂` with a `D_oe`-wide hidden layer.
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModulatorInit {
    Zero,
    /// Fan-in uniform everywhere.
    Random,
}

impl ModulatorDesign {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            _ => Err(Error::Config(format!("unknown modulator design {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Mlp => "mlp",
        }
    }
}

impl ModulatorInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "random" => Ok(Self::Random),
            _ => Err(Error::Config(format!("unknown modulator init {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriConfig {
    pub oe: OffsetEncoderConfig,
    pub plan: InjectionPlan,
    pub design: ModulatorDesign,
    pub init: ModulatorInit,
}

impl Default for DriConfig {
    fn default() -> Self {
        Self {
            oe: OffsetEncoderConfig::default(),
            plan: InjectionPlan::DEFAULT,
            design: ModulatorDesign::Linear,
            init: ModulatorInit::Zero,
        }
    }
}

impl DriConfig {
    /// Parameters of one modulator mapping `D_oe → D`.
    pub fn modulator_params(&self, d: usize) -> usize {
        let e = self.oe.dim;
        match self.design {
            ModulatorDesign::Linear => e * d + d,
            ModulatorDesign::Mlp => (e * e + e) + (e * d + d),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ModulatorKind {
    Linear(Linear),
    Mlp { fc1: Linear, fc2: Linear },
}

#[derive(Clone, Debug)]
pub struct Modulator {
    pub layer: usize,
    pub site: Site,
    pub kind: ModulatorKind,
}

impl Modulator {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        layer: usize,
        site: Site,
        cfg: &DriConfig,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let e = cfg.oe.dim;
        let last = match cfg.init {
            ModulatorInit::Zero => LinearInit::Zeros,
            ModulatorInit::Random => LinearInit::FanInUniform,
        };
        let kind = match cfg.design {
            ModulatorDesign::Linear => ModulatorKind::Linear(Linear::new(store, name, e, dim, true, last, rng)?),
            ModulatorDesign::Mlp => ModulatorKind::Mlp {
                fc1: Linear::new(store, &format!("{name}.fc1"), e, e, true, LinearInit::FanInUniform, rng)?,
                fc2: Linear::new(store, &format!("{name}.fc2"), e, dim, true, last, rng)?,
            },
        };
        Ok(Self { layer, site, kind })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f_d: Var) -> Result<Var> {
        match &self.kind {
            ModulatorKind::Linear(l) => l.forward(tape, store, f_d),
            ModulatorKind::Mlp { fc1, fc2 } => {
                let h = fc1.forward(tape, store, f_d)?;
                let h = tape.gelu(h);
                fc2.forward(tape, store, h)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match &self.kind {
            ModulatorKind::Linear(l) => l.params(),
            ModulatorKind::Mlp { fc1, fc2 } => {
                let mut v = fc1.params();
                v.extend(fc2.params());
                v
            }
        }
    }

    /// The map's final linear layer, `W: [D, D_oe-or-hidden]`.
    pub fn output_layer(&self) -> &Linear {
        match &self.kind {
            ModulatorKind::Linear(l) => l,
            ModulatorKind::Mlp { fc2, .. } => fc2,
        }
    }
}

/// Offset encoder plus every modulator of a plan.
#[derive(Clone, Debug)]
pub struct DriInjector {
    pub cfg: DriConfig,
    pub encoder: VisionTransformer,
    pub modulators: Vec<Modulator>,
    pub depth: usize,
}

pub const OE_PREFIX: &str = "dri.oe";
pub const MOD_PREFIX: &str = "dri.mod";

impl DriInjector {
    pub fn new<T: Real>(store: &mut ParamStore<T>, backbone: &ViTConfig, cfg: &DriConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.oe.depth == 0 {
            return Err(Error::Config("offset encoder depth must be at least 1".into()));
        }
        let encoder = VisionTransformer::new(cfg.oe.vit(backbone), store, OE_PREFIX, "domain_token", rng)?;
        let mut modulators = Vec::new();
        for layer in 0..backbone.depth {
            for site in cfg.plan.sites() {
                let name = format!("{MOD_PREFIX}.block{layer}.{}", site.name());
                modulators.push(Modulator::new(store, &name, layer, site, cfg, backbone.dim, rng)?);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            modulators,
            depth: backbone.depth,
        })
    }

    /// `f_d = Norm(z_L⁰)`, one `D_oe` row per image.
    pub fn encode_domain<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, images: &[&Tensor<T>]) -> Result<Var> {
        Ok(self.encoder.forward_plain(tape, store, images, None)?.f_g)
    }

    pub fn modulator(&self, layer: usize, site: Site) -> Option<&Modulator> {
        self.modulators.iter().find(|m| m.layer == layer && m.site == site)
    }

    /// `Δx = Mod^ℓ_site(f_d)` for every image.
    pub fn modulate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_d: Var,
        layer: usize,
        site: Site,
    ) -> Result<Var> {
        let m = self.modulator(layer, site).ok_or_else(|| {
            Error::Plan(format!(
                "plan {} has no {} modulator at block {layer}",
                self.cfg.plan,
                site.name()
            ))
        })?;
        m.forward(tape, store, f_d)
    }

    /// All deviations of block `layer` under the plan.
    pub fn deviation<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_d: Var,
        layer: usize,
    ) -> Result<BlockDeviation> {
        let mut dev = BlockDeviation {
            site: self.cfg.plan.norm_site(),
            ..BlockDeviation::none()
        };
        for site in self.cfg.plan.sites() {
            let d = Some(self.modulate(tape, store, f_d, layer, site)?);
            match site {
                Site::Attn => dev.attn = d,
                Site::Mlp => dev.mlp = d,
                Site::AttnResidual => dev.attn_residual = d,
                Site::MlpResidual => dev.mlp_residual = d,
            }
        }
        Ok(dev)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        for m in &self.modulators {
            ids.extend(m.params());
        }
        ids
    }
}

/// Itemized trainable-parameter table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamTable {
    pub rows: Vec<(String, usize)>,
}

impl ParamTable {
    pub fn push(&mut self, name: impl Into<String>, count: usize) {
        self.rows.push((name.into(), count));
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.rows.iter().find(|(n, _)| n == name).map(|&(_, c)| c)
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(|(_, c)| c).sum()
    }
}

impl fmt::Display for ParamTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, count) in &self.rows {
            writeln!(f, "{name:<24} {count:>12}")?;
        }
        write!(f, "{:<24} {:>12}", "total", self.total())
    }
}

/// Closed-form counts of the injector's trainable parameters.
pub fn injector_param_table(backbone: &ViTConfig, cfg: &DriConfig) -> ParamTable {
    let oe = cfg.oe.vit(backbone);
    let e = cfg.oe.dim;
    let mut t = ParamTable::default();
    t.push("oe.patch_embed", oe.patch_dim() * e + e);
    t.push("oe.domain_token", e);
    t.push("oe.blocks", cfg.oe.depth * cfg.oe.block_params());
    t.push("oe.norm", 2 * e);
    t.push(
        "modulators",
        cfg.plan.sites().len() * backbone.depth * cfg.modulator_params(backbone.dim),
    );
    t
}

#[cfg(test)]
mod tests;
