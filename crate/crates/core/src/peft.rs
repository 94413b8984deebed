//! Weight-space baselines: LoRA and the serial bottleneck adapter.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::vit::{Linear, LinearInit};

/// Low-rank update `ΔW = (α/r)·B·A` attached to one frozen linear layer.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// `[r, k]`
    pub a: ParamId,
    /// `[d, r]`, zero at construction.
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraAdapter {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        target: &Linear,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (k, d) = (target.in_dim, target.out_dim);
        if rank == 0 || rank > k.min(d) {
            return Err(Error::Config(format!("lora rank {rank} must be in 1..={}", k.min(d))));
        }
        let a = store.add(format!("{name}.lora_a"), trunc_normal(&[rank, k], 1.0 / (k as f64).sqrt(), rng))?;
        let b = store.add(format!("{name}.lora_b"), Tensor::zeros(&[d, rank]))?;
        Ok(Self {
            a,
            b,
            rank,
            alpha,
            d_in: k,
            d_out: d,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `r·(d + k)`
    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.a, self.b]
    }
}

/// `h = W₀x + b + (α/r)·B·A·x`; without an adapter this is the base layer.
pub fn lora_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    base: &Linear,
    adapter: Option<&LoraAdapter>,
) -> Result<Var> {
    let h = base.forward(tape, store, x)?;
    let Some(ad) = adapter else { return Ok(h) };
    if ad.d_in != base.in_dim || ad.d_out != base.out_dim {
        return Err(Error::Config(format!(
            "lora adapter {}x{} attached to a {}x{} layer",
            ad.d_out, ad.d_in, base.out_dim, base.in_dim
        )));
    }
    let a = tape.param(store, ad.a);
    let b = tape.param(store, ad.b);
    let ax = tape.linear(x, a, None)?;
    let bax = tape.linear(ax, b, None)?;
    let delta = tape.scale(bax, T::lit(ad.scaling()));
    tape.add(h, delta)
}

/// Dense `W₀ + (α/r)·B·A`.
pub fn lora_merge<T: Real>(w0: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, scaling: f64) -> Result<Tensor<T>> {
    let (d, k) = match w0.shape() {
        [d, k] => (*d, *k),
        s => return Err(Error::Dimension(format!("lora_merge expects a matrix, got {s:?}"))),
    };
    let r = a.shape()[0];
    if a.shape() != [r, k] || b.shape() != [d, r] {
        return Err(Error::Dimension(format!(
            "lora_merge: W0 {:?}, A {:?}, B {:?}",
            w0.shape(),
            a.shape(),
            b.shape()
        )));
    }
    let s = T::lit(scaling);
    let mut out = w0.data().to_vec();
    for i in 0..d {
        for j in 0..k {
            let mut acc = T::zero();
            for t in 0..r {
                acc += b.data()[i * r + t] * a.data()[t * k + j];
            }
            out[i * k + j] += s * acc;
        }
    }
    Tensor::new(vec![d, k], out)
}

/// Serial bottleneck `y = x + up(gelu(down(x)))` with `up` zeroed.
#[derive(Clone, Debug)]
pub struct BottleneckAdapter {
    pub down: Linear,
    pub up: Linear,
}

impl BottleneckAdapter {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("adapter hidden width must be positive".into()));
        }
        Ok(Self {
            down: Linear::new(store, &format!("{name}.down"), dim, hidden, true, LinearInit::FanInUniform, rng)?,
            up: Linear::new(store, &format!("{name}.up"), hidden, dim, true, LinearInit::Zeros, rng)?,
        })
    }

    /// `D·h + h + h·D + D`
    pub fn param_count(&self) -> usize {
        let (d, h) = (self.down.in_dim, self.down.out_dim);
        d * h + h + h * d + d
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.down.params();
        v.extend(self.up.params());
        v
    }
}

pub fn adapter_forward<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ad: &BottleneckAdapter) -> Result<Var> {
    let h = ad.down.forward(tape, store, x)?;
    let h = tape.gelu(h);
    let y = ad.up.forward(tape, store, h)?;
    tape.add(x, y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeftMode {
    Frozen,
    FullFt,
    Lora,
    Adapter,
    Dri,
}

impl PeftMode {
    pub fn name(self) -> &'static str {
        match self {
            PeftMode::Frozen => "frozen",
            PeftMode::FullFt => "full-ft",
            PeftMode::Lora => "lora",
            PeftMode::Adapter => "adapter",
            PeftMode::Dri => "dri",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "frozen" => PeftMode::Frozen,
            "full-ft" => PeftMode::FullFt,
            "lora" => PeftMode::Lora,
            "adapter" => PeftMode::Adapter,
            "dri" => PeftMode::Dri,
            other => return Err(Error::Config(format!("unknown peft mode {other}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub target_qkv: bool,
    pub target_proj: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            target_qkv: true,
            target_proj: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterConfig {
    pub hidden: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { hidden: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeftConfig {
    pub mode: PeftMode,
    pub lora: LoraConfig,
    pub adapter: AdapterConfig,
    pub dri: crate::dri::DriConfig,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            mode: PeftMode::Dri,
            lora: LoraConfig::default(),
            adapter: AdapterConfig::default(),
            dri: crate::dri::DriConfig::default(),
        }
    }
}
