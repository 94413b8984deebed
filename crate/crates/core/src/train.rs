//! Training recipe: single-modality full fine-tuning as a stand-in for
//! foundation-model pre-training, then PEFT fine-tuning on every modality
//! with P×K batches, and protocol evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::Rng;

use crate::autograd::Tape;
use crate::config::RunConfig;
use crate::data::augment::augment;
use crate::data::{synthesize, AugmentFlags, Dataset, IdentityIndex, PkSampler, Split, SyntheticConfig};
use crate::dri::ParamTable;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EmbeddingSet, MetricsReport, RetrievalProtocol};
use crate::init::child_rng;
use crate::model::{trainable_param_count, ReidModel, Sample, BACKBONE_PREFIX, HEAD_PREFIX};
use crate::optim::{SgdState, WarmupConstant};
use crate::param::ParamStore;
use crate::peft::PeftMode;
use crate::tensor::Tensor;

/// Inference batch size for embedding extraction.
pub const EMBED_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    pub triplet: f64,
    pub id: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct EvalPoint {
    /// Fine-tuning epochs completed before this evaluation.
    pub epoch: usize,
    pub reports: Vec<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub mode: PeftMode,
    pub plan: String,
    pub epochs: Vec<EpochLog>,
    pub evals: Vec<EvalPoint>,
    /// Live enumeration of the trainable set during fine-tuning.
    pub params: ParamTable,
    pub closed_form: ParamTable,
    pub backbone_checksum_before: u64,
    pub backbone_checksum_after: u64,
    pub schedule: String,
    pub seconds: f64,
}

impl RunReport {
    pub fn final_eval(&self) -> &EvalPoint {
        self.evals.last().expect("every run evaluates at least once")
    }

    pub fn initial_eval(&self) -> &EvalPoint {
        self.evals.first().expect("every run evaluates at least once")
    }

    /// Mean mAP over the cross-modal protocols of an evaluation point.
    pub fn cross_modal_map(point: &EvalPoint) -> Option<f64> {
        let maps: Vec<f64> = point
            .reports
            .iter()
            .filter(|r| is_cross_modal(&r.protocol))
            .map(|r| r.map)
            .collect();
        (!maps.is_empty()).then(|| maps.iter().sum::<f64>() / maps.len() as f64)
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode = {}", self.mode.name())?;
        if self.mode == PeftMode::Dri {
            writeln!(f, "plan = {}", self.plan)?;
        }
        writeln!(f, "schedule = {}", self.schedule)?;
        writeln!(f, "seconds = {:.1}", self.seconds)?;
        writeln!(f, "backbone_checksum_before = {:016x}", self.backbone_checksum_before)?;
        writeln!(f, "backbone_checksum_after = {:016x}", self.backbone_checksum_after)?;
        writeln!(f, "\n[losses]")?;
        for e in &self.epochs {
            let stage = match e.stage {
                Stage::Pretrain => "pretrain",
                Stage::Finetune => "finetune",
            };
            writeln!(
                f,
                "{stage} epoch {:3}  loss {:.4}  triplet {:.4}  id {:.4}  lr {:.5}",
                e.epoch, e.loss, e.triplet, e.id, e.lr
            )?;
        }
        for p in &self.evals {
            writeln!(f, "\n[eval epoch {}]", p.epoch)?;
            for r in &p.reports {
                writeln!(f, "{r}")?;
            }
            if let Some(m) = Self::cross_modal_map(p) {
                writeln!(f, "cross-modal mAP {m:.2}")?;
            }
        }
        writeln!(f, "\n[trainable parameters]\n{}", self.params)
    }
}

/// True for `A->B` protocols with `A != B`.
pub fn is_cross_modal(protocol: &str) -> bool {
    RetrievalProtocol::parse(protocol)
        .map(|p| matches!((&p.query_modality, &p.gallery_modality), (Some(q), Some(g)) if q != g))
        .unwrap_or(false)
}

/// Dense classifier labels for the training identities.
pub fn label_map(data: &Dataset<f32>) -> BTreeMap<i64, usize> {
    let ids: std::collections::BTreeSet<i64> = data.manifest.split(Split::Train).map(|r| r.id).collect();
    ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

struct Loop<'a> {
    model: &'a ReidModel,
    data: &'a Dataset<f32>,
    labels: &'a BTreeMap<i64, usize>,
    flags: AugmentFlags,
    attached: bool,
}

impl Loop<'_> {
    fn epoch(
        &self,
        store: &mut ParamStore<f32>,
        sampler: &mut PkSampler<crate::init::DriRng>,
        pool: &[usize],
        opt: &mut SgdState<f32>,
        sched: &WarmupConstant,
        step: &mut usize,
        aug_rng: &mut crate::init::DriRng,
    ) -> Result<(f64, f64, f64, f64)> {
        let (mut loss, mut tri, mut id, mut lr) = (0.0, 0.0, 0.0, 0.0);
        let batches = sampler.epoch()?;
        for batch in &batches {
            let recs: Vec<usize> = batch.iter().map(|&i| pool[i]).collect();
            let images: Vec<Tensor<f32>> = recs
                .iter()
                .map(|&r| augment(&self.data.images[r], aug_rng, self.flags))
                .collect();
            let samples: Vec<Sample<'_, f32>> = recs
                .iter()
                .zip(&images)
                .map(|(&r, image)| Sample {
                    image,
                    meta: self.data.manifest.records[r].meta(),
                })
                .collect();
            let labels: Vec<usize> = recs.iter().map(|&r| self.labels[&self.data.manifest.records[r].id]).collect();
            let mut tape = Tape::new();
            let (l, rep, out) = self.model.loss_with(&mut tape, store, &samples, &labels, self.attached)?;
            if !rep.total.is_finite() {
                return Err(Error::Numeric(format!("loss became {} at step {}", rep.total, *step)));
            }
            store.zero_grad();
            tape.backward_into(l, store)?;
            let rate = sched.lr(*step);
            opt.step_with_lr(store, rate);
            if let Some(stats) = &out.stats {
                self.model.head.update_running(store, stats);
            }
            *step += 1;
            loss += rep.total;
            tri += rep.triplet;
            id += rep.id;
            lr = rate;
        }
        let n = batches.len() as f64;
        Ok((loss / n, tri / n, id / n, lr))
    }
}

fn sampler(data: &Dataset<f32>, pool: &[usize], cfg: &RunConfig, k: usize, label: &str) -> Result<PkSampler<crate::init::DriRng>> {
    let recs: Vec<_> = pool.iter().map(|&i| &data.manifest.records[i]).collect();
    PkSampler::new(IdentityIndex::new(&recs), cfg.train.p, k, child_rng(cfg.seed, label))
}

/// Backbone and head after single-modality full fine-tuning, with its log.
pub struct Pretrained {
    pub store: ParamStore<f32>,
    pub log: Vec<EpochLog>,
    /// Whether the head was trained on the fine-tuning identities.
    pub head_matches: bool,
}

/// Pre-training modalities: one name, or `all` for every modality with
/// each (identity, modality) pair as its own class.
pub const ALL_MODALITIES: &str = "all";

/// Synthetic corpus of `train.pretrain_ids` identities, disjoint in seed
/// from the fine-tuning data.
pub fn pretrain_corpus(cfg: &RunConfig) -> Result<Dataset<f32>> {
    let base = &cfg.dataset.synthetic;
    let modality = &cfg.train.pretrain_modality;
    let modalities: Vec<_> = base
        .modalities
        .iter()
        .filter(|m| modality == ALL_MODALITIES || &m.name == modality)
        .cloned()
        .collect();
    if modalities.is_empty() {
        return Err(Error::Config(format!("no synthetic modality named {modality:?} to pre-train on")));
    }
    let b = &cfg.model.backbone;
    let corpus = SyntheticConfig {
        num_ids: cfg.train.pretrain_ids + 1,
        test_ids: 1,
        distractor_ids: 0,
        height: b.image_h,
        width: b.image_w,
        channels: b.channels,
        seed: child_rng(cfg.seed, "pretrain-corpus").gen(),
        modalities,
        ..base.clone()
    };
    Dataset::from_synthetic(&synthesize(&corpus)?, b.channels)
}

/// Training records of the pre-training modality, relabelled so that every
/// class is single-modality.
fn pretrain_view(cfg: &RunConfig, src: &Dataset<f32>) -> Dataset<f32> {
    let modality = &cfg.train.pretrain_modality;
    let mods: Vec<String> = src.manifest.modalities().into_iter().map(String::from).collect();
    let keep: Vec<usize> = src
        .indices(Split::Train)
        .into_iter()
        .filter(|&i| modality == ALL_MODALITIES || &src.manifest.records[i].modality == modality)
        .collect();
    let mut manifest = crate::data::Manifest { records: Vec::with_capacity(keep.len()) };
    let mut images = Vec::with_capacity(keep.len());
    for i in keep {
        let mut r = src.manifest.records[i].clone();
        let m = mods.iter().position(|x| *x == r.modality).expect("listed modality") as i64;
        r.id = r.id * mods.len() as i64 + m;
        manifest.records.push(r);
        images.push(src.images[i].clone());
    }
    Dataset {
        root: src.root.clone(),
        manifest,
        images,
    }
}

pub fn pretrain(cfg: &RunConfig, data: &Dataset<f32>) -> Result<Pretrained> {
    let corpus = if cfg.train.pretrain_ids > 0 {
        Some(pretrain_corpus(cfg)?)
    } else {
        None
    };
    let view = pretrain_view(cfg, corpus.as_ref().unwrap_or(data));
    let src = &view;
    let labels = label_map(src);
    let mut mcfg = cfg.model.clone();
    mcfg.peft.mode = PeftMode::FullFt;
    mcfg.head.num_ids = labels.len().max(1);
    let mut store = ParamStore::new();
    let model = ReidModel::new(&mut store, &mcfg, cfg.seed)?;
    let pool: Vec<usize> = (0..src.manifest.records.len()).collect();
    if pool.is_empty() && cfg.train.pretrain_epochs > 0 {
        let modality = &cfg.train.pretrain_modality;
        return Err(Error::Data(format!("no training images of modality {modality:?} to pre-train on")));
    }
    let mut log = Vec::new();
    if cfg.train.pretrain_epochs > 0 {
        let mut s = sampler(src, &pool, cfg, cfg.train.pretrain_k, "pretrain-sampler")?;
        let steps = cfg.train.pretrain_epochs * s.batches_per_epoch();
        let sched = WarmupConstant::new(cfg.train.pretrain_lr, steps, cfg.train.warmup);
        let mut opt = SgdState::new(cfg.train.pretrain_lr, cfg.train.momentum, cfg.train.weight_decay);
        let mut aug_rng = child_rng(cfg.seed, "pretrain-augment");
        let lp = Loop {
            model: &model,
            data: src,
            labels: &labels,
            flags: cfg.dataset.profile.augment(),
            attached: false,
        };
        let mut step = 0;
        for epoch in 1..=cfg.train.pretrain_epochs {
            let (loss, triplet, id, lr) = lp.epoch(&mut store, &mut s, &pool, &mut opt, &sched, &mut step, &mut aug_rng)?;
            log.push(EpochLog {
                stage: Stage::Pretrain,
                epoch,
                loss,
                triplet,
                id,
                lr,
            });
        }
    }
    Ok(Pretrained {
        store,
        log,
        head_matches: corpus.is_none() && view.manifest.modalities().len() == 1,
    })
}

/// Copies every tensor under `prefix` from `src` into `dst` by name.
pub fn copy_prefix(src: &ParamStore<f32>, dst: &mut ParamStore<f32>, prefix: &str) -> Result<()> {
    for (_, p) in src.iter().filter(|(_, p)| p.name.starts_with(prefix)) {
        let id = dst
            .id(&p.name)
            .ok_or_else(|| Error::Contract(format!("{} missing from the target model", p.name)))?;
        let t = dst.tensor_mut(id);
        if t.shape() != p.tensor.shape() {
            return Err(Error::Dimension(format!("{}: {:?} vs {:?}", p.name, t.shape(), p.tensor.shape())));
        }
        t.data_mut().copy_from_slice(p.tensor.data());
    }
    Ok(())
}

/// `f_g` embeddings of the given records as an evaluation set keyed by path.
pub fn embed_records(model: &ReidModel, store: &ParamStore<f32>, data: &Dataset<f32>, idx: &[usize]) -> Result<EmbeddingSet> {
    let samples: Vec<Sample<'_, f32>> = idx
        .iter()
        .map(|&i| Sample {
            image: &data.images[i],
            meta: data.manifest.records[i].meta(),
        })
        .collect();
    let f = model.embed_all(store, &samples, EMBED_CHUNK)?.cast::<f64>();
    let recs: Vec<_> = idx.iter().map(|&i| &data.manifest.records[i]).collect();
    EmbeddingSet::new(
        f,
        recs.iter().map(|r| r.id).collect(),
        recs.iter().map(|r| r.modality.clone()).collect(),
        recs.iter().map(|r| r.path.clone()).collect(),
    )
}

pub fn evaluate_model(
    model: &ReidModel,
    store: &ParamStore<f32>,
    data: &Dataset<f32>,
    protocols: &[String],
) -> Result<Vec<MetricsReport>> {
    let q = embed_records(model, store, data, &data.indices(Split::Query))?;
    let g = embed_records(model, store, data, &data.indices(Split::Gallery))?;
    protocols
        .iter()
        .map(|p| evaluate(&q, &g, &RetrievalProtocol::parse(p)?))
        .collect()
}

pub struct Run {
    pub model: ReidModel,
    pub store: ParamStore<f32>,
    pub report: RunReport,
}

/// Fine-tunes `cfg.model.peft.mode` on top of `pretrained` (when given) and
/// evaluates before the first step, every `eval_every` epochs and at the end.
pub fn finetune(cfg: &RunConfig, data: &Dataset<f32>, pretrained: Option<&Pretrained>) -> Result<Run> {
    let start = Instant::now();
    let mut store = ParamStore::new();
    let model = ReidModel::new(&mut store, &cfg.model, cfg.seed)?;
    if let Some(p) = pretrained {
        copy_prefix(&p.store, &mut store, &format!("{BACKBONE_PREFIX}."))?;
        if p.head_matches {
            copy_prefix(&p.store, &mut store, &format!("{HEAD_PREFIX}."))?;
        }
    }
    let mode = cfg.model.peft.mode;
    let params = model.apply_mode(&mut store, mode)?;
    let checksum_before = store.checksum_prefix(BACKBONE_PREFIX);
    let labels = label_map(data);
    let pool = data.indices(Split::Train);
    let mut s = sampler(data, &pool, cfg, cfg.train.k, "finetune-sampler")?;
    let steps = cfg.train.epochs * s.batches_per_epoch();
    let sched = WarmupConstant::new(cfg.train.lr, steps, cfg.train.warmup);
    let mut opt = SgdState::new(cfg.train.lr, cfg.train.momentum, cfg.train.weight_decay);
    let mut aug_rng = child_rng(cfg.seed, "finetune-augment");
    let mut epochs = pretrained.map(|p| p.log.clone()).unwrap_or_default();
    let mut evals = vec![EvalPoint {
        epoch: 0,
        reports: evaluate_model(&model, &store, data, &cfg.eval.protocols)?,
    }];
    let lp = Loop {
        model: &model,
        data,
        labels: &labels,
        flags: cfg.dataset.profile.augment(),
        attached: true,
    };
    let mut step = 0;
    for epoch in 1..=cfg.train.epochs {
        let (loss, triplet, id, lr) = lp.epoch(&mut store, &mut s, &pool, &mut opt, &sched, &mut step, &mut aug_rng)?;
        epochs.push(EpochLog {
            stage: Stage::Finetune,
            epoch,
            loss,
            triplet,
            id,
            lr,
        });
        let periodic = cfg.train.eval_every > 0 && epoch % cfg.train.eval_every == 0;
        if periodic || epoch == cfg.train.epochs {
            evals.push(EvalPoint {
                epoch,
                reports: evaluate_model(&model, &store, data, &cfg.eval.protocols)?,
            });
        }
    }
    let report = RunReport {
        mode,
        plan: cfg.model.peft.dri.plan.to_string(),
        epochs,
        evals,
        params,
        closed_form: trainable_param_count(&cfg.model),
        backbone_checksum_before: checksum_before,
        backbone_checksum_after: store.checksum_prefix(BACKBONE_PREFIX),
        schedule: format!(
            "sgd lr {} momentum {} wd {}, linear warmup over {} of {} steps then constant",
            cfg.train.lr, cfg.train.momentum, cfg.train.weight_decay, sched.warmup_steps, steps
        ),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(Run { model, store, report })
}

/// Pre-training followed by fine-tuning.
pub fn train(cfg: &RunConfig, data: &Dataset<f32>) -> Result<Run> {
    cfg.validate()?;
    let pre = if cfg.train.pretrain_epochs > 0 {
        Some(pretrain(cfg, data)?)
    } else {
        None
    };
    finetune(cfg, data, pre.as_ref())
}
