//! Full Re-ID model: backbone, optional ship-size token, PEFT attachments and
//! the BNNeck head, plus trainable-set management.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::dri::{injector_param_table, DriInjector, ParamTable};
use crate::error::{Error, Result};
use crate::head::{total_loss, BnneckHead, HeadConfig, HeadOutput, LossReport, SstEncoder};
use crate::init::child_rng;
use crate::param::ParamStore;
use crate::peft::{BottleneckAdapter, LoraAdapter, PeftConfig, PeftMode};
use crate::tensor::{Real, Tensor};
use crate::vit::{BlockHooks, PosMode, ViTConfig, VisionTransformer};

pub const BACKBONE_PREFIX: &str = "backbone";
pub const HEAD_PREFIX: &str = "head";
pub const LORA_PREFIX: &str = "lora";
pub const ADAPTER_PREFIX: &str = "adapter";

#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct ModelConfig {
    pub backbone: ViTConfig,
    pub head: HeadConfig,
    pub peft: PeftConfig,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let want = usize::from(self.head.sst);
        if self.backbone.extra_tokens != want {
            return Err(Error::Config(format!(
                "backbone.extra_tokens = {} but head.sst = {}",
                self.backbone.extra_tokens, self.head.sst
            )));
        }
        if self.peft.mode == PeftMode::Dri {
            self.peft.dri.oe.vit(&self.backbone).validate()?;
        }
        Ok(())
    }
}

/// One image's inputs to the model.
pub struct Sample<'a, T> {
    pub image: &'a Tensor<T>,
    pub meta: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct ReidModel {
    pub cfg: ModelConfig,
    pub backbone: VisionTransformer,
    pub sst: Option<SstEncoder>,
    pub head: BnneckHead,
    /// Per block: adapters on the fused qkv and on the output projection.
    pub lora: Vec<[Option<LoraAdapter>; 2]>,
    /// Per block: adapters after the attention and the MLP sub-layers.
    pub adapters: Vec<[BottleneckAdapter; 2]>,
    pub dri: Option<DriInjector>,
}

impl ReidModel {
    /// Builds every component from `seed` and configures the trainable set.
    /// Each component draws from its own stream, so the backbone weights do
    /// not depend on the PEFT mode.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let bcfg = &cfg.backbone;
        let backbone = VisionTransformer::new(
            bcfg.clone(),
            store,
            BACKBONE_PREFIX,
            "cls_token",
            &mut child_rng(seed, BACKBONE_PREFIX),
        )?;
        let sst = if cfg.head.sst {
            Some(SstEncoder::new(store, HEAD_PREFIX, bcfg.dim, &mut child_rng(seed, "sst"))?)
        } else {
            None
        };
        let head = BnneckHead::new(store, HEAD_PREFIX, bcfg.dim, cfg.head, &mut child_rng(seed, HEAD_PREFIX))?;

        let mut lora = Vec::new();
        let mut adapters = Vec::new();
        let mut dri = None;
        match cfg.peft.mode {
            PeftMode::Lora => {
                let lc = cfg.peft.lora;
                let mut rng = child_rng(seed, LORA_PREFIX);
                for (i, b) in backbone.blocks.iter().enumerate() {
                    let qkv = lc
                        .target_qkv
                        .then(|| LoraAdapter::new(store, &format!("{LORA_PREFIX}.block{i}.qkv"), &b.qkv, lc.rank, lc.alpha, &mut rng))
                        .transpose()?;
                    let proj = lc
                        .target_proj
                        .then(|| LoraAdapter::new(store, &format!("{LORA_PREFIX}.block{i}.proj"), &b.proj, lc.rank, lc.alpha, &mut rng))
                        .transpose()?;
                    lora.push([qkv, proj]);
                }
            }
            PeftMode::Adapter => {
                let h = cfg.peft.adapter.hidden;
                let mut rng = child_rng(seed, ADAPTER_PREFIX);
                for i in 0..bcfg.depth {
                    adapters.push([
                        BottleneckAdapter::new(store, &format!("{ADAPTER_PREFIX}.block{i}.attn"), bcfg.dim, h, &mut rng)?,
                        BottleneckAdapter::new(store, &format!("{ADAPTER_PREFIX}.block{i}.mlp"), bcfg.dim, h, &mut rng)?,
                    ]);
                }
            }
            PeftMode::Dri => {
                dri = Some(DriInjector::new(store, bcfg, &cfg.peft.dri, &mut child_rng(seed, "dri"))?);
            }
            PeftMode::Frozen | PeftMode::FullFt => {}
        }
        let model = Self {
            cfg: cfg.clone(),
            backbone,
            sst,
            head,
            lora,
            adapters,
            dri,
        };
        model.apply_mode(store, cfg.peft.mode)?;
        Ok(model)
    }

    /// Sets trainable flags for `mode` and returns the enumerated trainable
    /// table. The head is always trainable.
    pub fn apply_mode<T: Real>(&self, store: &mut ParamStore<T>, mode: PeftMode) -> Result<ParamTable> {
        let attached = match mode {
            PeftMode::Lora => !self.lora.is_empty(),
            PeftMode::Adapter => !self.adapters.is_empty(),
            PeftMode::Dri => self.dri.is_some(),
            PeftMode::Frozen | PeftMode::FullFt => true,
        };
        if !attached {
            return Err(Error::Config(format!(
                "mode {} conflicts with a model built for {}",
                mode.name(),
                self.cfg.peft.mode.name()
            )));
        }
        store.freeze_all();
        store.set_trainable_prefix(HEAD_PREFIX, true);
        match mode {
            PeftMode::Frozen => {}
            PeftMode::FullFt => store.set_trainable_prefix(BACKBONE_PREFIX, true),
            PeftMode::Lora => store.set_trainable_prefix(LORA_PREFIX, true),
            PeftMode::Adapter => store.set_trainable_prefix(ADAPTER_PREFIX, true),
            PeftMode::Dri => store.set_trainable_prefix("dri", true),
        }
        Ok(enumerate_trainable(store))
    }

    /// Global feature `f_g` for a batch, with the active PEFT attachments.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &[Sample<'_, T>]) -> Result<Var> {
        self.embed_inner(tape, store, batch, true)
    }

    /// Global feature of the bare backbone (and SST), ignoring attachments.
    pub fn embed_frozen<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &[Sample<'_, T>]) -> Result<Var> {
        self.embed_inner(tape, store, batch, false)
    }

    fn embed_inner<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &[Sample<'_, T>],
        attached: bool,
    ) -> Result<Var> {
        let images: Vec<&Tensor<T>> = batch.iter().map(|s| s.image).collect();
        let extra = match &self.sst {
            Some(sst) => {
                let meta = batch
                    .iter()
                    .map(|s| s.meta.ok_or_else(|| Error::Input("ship-size token enabled but sample has no size metadata".into())))
                    .collect::<Result<Vec<_>>>()?;
                Some(sst.forward(tape, store, &meta)?)
            }
            None => None,
        };
        let mode = if attached { self.cfg.peft.mode } else { PeftMode::Frozen };
        let out = match mode {
            PeftMode::Dri => {
                let dri = self.dri.as_ref().expect("dri mode has an injector");
                let f_d = dri.encode_domain(tape, store, &images)?;
                self.backbone.forward(tape, store, &images, extra, |tape, l| {
                    Ok(BlockHooks {
                        deviation: dri.deviation(tape, store, f_d, l)?,
                        ..BlockHooks::default()
                    })
                })?
            }
            PeftMode::Lora => self.backbone.forward(tape, store, &images, extra, |_, l| {
                Ok(BlockHooks {
                    lora_qkv: self.lora[l][0].as_ref(),
                    lora_proj: self.lora[l][1].as_ref(),
                    ..BlockHooks::default()
                })
            })?,
            PeftMode::Adapter => self.backbone.forward(tape, store, &images, extra, |_, l| {
                Ok(BlockHooks {
                    adapter_attn: Some(&self.adapters[l][0]),
                    adapter_mlp: Some(&self.adapters[l][1]),
                    ..BlockHooks::default()
                })
            })?,
            PeftMode::Frozen | PeftMode::FullFt => self.backbone.forward_plain(tape, store, &images, extra)?,
        };
        Ok(out.f_g)
    }

    /// Training forward: embeddings, BNNeck in batch mode and the total loss.
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &[Sample<'_, T>],
        labels: &[usize],
    ) -> Result<(Var, LossReport, HeadOutput)> {
        self.loss_with(tape, store, batch, labels, true)
    }

    /// As [`Self::loss`], optionally bypassing the PEFT attachments.
    pub fn loss_with<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &[Sample<'_, T>],
        labels: &[usize],
        attached: bool,
    ) -> Result<(Var, LossReport, HeadOutput)> {
        let f_g = self.embed_inner(tape, store, batch, attached)?;
        let out = self.head.forward(tape, store, f_g, true)?;
        let (loss, report) = total_loss(tape, &out, labels, self.cfg.head.margin)?;
        Ok((loss, report, out))
    }

    /// Inference embeddings `[N, D]`, computed in independent chunks.
    pub fn embed_all<T: Real>(&self, store: &ParamStore<T>, samples: &[Sample<'_, T>], chunk: usize) -> Result<Tensor<T>>
    where
        T: Send + Sync,
    {
        let d = self.cfg.backbone.dim;
        if samples.is_empty() {
            return Err(Error::Input("no samples to embed".into()));
        }
        let parts = samples
            .par_chunks(chunk.max(1))
            .map(|c| {
                let mut tape = Tape::inference();
                let f = self.embed(&mut tape, store, c)?;
                Ok(tape.value(f).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![samples.len(), d], parts.concat())
    }
}

/// Component row of a parameter name.
fn component(name: &str) -> &'static str {
    const ROWS: [(&str, &str); 11] = [
        ("backbone.", "backbone"),
        ("dri.oe.patch_embed.", "oe.patch_embed"),
        ("dri.oe.domain_token", "oe.domain_token"),
        ("dri.oe.block", "oe.blocks"),
        ("dri.oe.norm.", "oe.norm"),
        ("dri.mod.", "modulators"),
        ("head.classifier.", "head.classifier"),
        ("head.bnneck.", "head.bnneck"),
        ("head.sst.", "head.sst"),
        ("lora.", "lora"),
        ("adapter.", "adapter"),
    ];
    ROWS.iter().find(|(p, _)| name.starts_with(p)).map_or("other", |&(_, r)| r)
}

/// Trainable elements grouped by component, in the canonical row order.
pub fn enumerate_trainable<T: Real>(store: &ParamStore<T>) -> ParamTable {
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for (_, p) in store.weights().filter(|(_, p)| p.trainable()) {
        *counts.entry(component(&p.name)).or_default() += p.tensor.numel();
    }
    canonical(counts)
}

const ROW_ORDER: [&str; 12] = [
    "backbone",
    "oe.patch_embed",
    "oe.domain_token",
    "oe.blocks",
    "oe.norm",
    "modulators",
    "lora",
    "adapter",
    "head.sst",
    "head.bnneck",
    "head.classifier",
    "other",
];

fn canonical(counts: BTreeMap<&str, usize>) -> ParamTable {
    let mut t = ParamTable::default();
    for row in ROW_ORDER {
        if let Some(&c) = counts.get(row) {
            if c > 0 {
                t.push(row, c);
            }
        }
    }
    t
}

/// Closed-form parameter count of a whole backbone.
pub fn backbone_params(cfg: &ViTConfig) -> usize {
    let d = cfg.dim;
    let h = d * cfg.mlp_ratio;
    let block = (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d) + 4 * d;
    let pos = if cfg.pos_mode == PosMode::LearnedAbsolute { cfg.num_patches() * d } else { 0 };
    (cfg.patch_dim() * d + d) + d + pos + cfg.depth * block + 2 * d
}

/// Closed-form itemized trainable counts for a configuration; no weights are
/// allocated.
pub fn trainable_param_count(cfg: &ModelConfig) -> ParamTable {
    let b = &cfg.backbone;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    match cfg.peft.mode {
        PeftMode::Frozen => {}
        PeftMode::FullFt => {
            counts.insert("backbone", backbone_params(b));
        }
        PeftMode::Lora => {
            let lc = cfg.peft.lora;
            let d = b.dim;
            let per_block = usize::from(lc.target_qkv) * lc.rank * (d + 3 * d) + usize::from(lc.target_proj) * lc.rank * (d + d);
            counts.insert("lora", b.depth * per_block);
        }
        PeftMode::Adapter => {
            let (d, h) = (b.dim, cfg.peft.adapter.hidden);
            counts.insert("adapter", b.depth * 2 * (d * h + h + h * d + d));
        }
        PeftMode::Dri => {
            let t = injector_param_table(b, &cfg.peft.dri);
            for (name, c) in &t.rows {
                let key = ROW_ORDER.iter().find(|r| *r == name).expect("known row");
                counts.insert(key, *c);
            }
        }
    }
    let (cls, bn, sst) = cfg.head.param_counts(b.dim);
    counts.insert("head.classifier", cls);
    counts.insert("head.bnneck", bn);
    counts.insert("head.sst", sst);
    canonical(counts)
}
