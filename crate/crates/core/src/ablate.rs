//! Ablation grids: variants of one base configuration sharing the seed,
//! dataset and pre-trained backbone.

use std::fmt;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::dri::{InjectionPlan, ModulatorDesign, ModulatorInit};
use crate::error::{Error, Result};
use crate::model::enumerate_trainable;
use crate::peft::PeftMode;
use crate::train::{finetune, is_cross_modal, pretrain, Pretrained, RunReport};

pub const GRIDS: [&str; 4] = ["injection-sites", "oe-shape", "modulator-design", "peft-compare"];

#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub cfg: RunConfig,
}

/// Variants of `base` in the row order of the corresponding results table.
pub fn grid(name: &str, base: &RunConfig) -> Result<Vec<Variant>> {
    let mut dri = base.clone();
    dri.model.peft.mode = PeftMode::Dri;
    let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = dri.clone();
        f(&mut cfg);
        cfg.sync();
        Variant { label, cfg }
    };
    let variants = match name {
        "injection-sites" => InjectionPlan::ABLATION_NAMES
            .iter()
            .map(|&p| {
                let plan = InjectionPlan::parse(p).expect("listed plan");
                with(p.to_string(), &|c| c.model.peft.dri.plan = plan)
            })
            .collect(),
        "oe-shape" => [(2, 64), (1, 64), (4, 64), (6, 64), (2, 32), (2, 96), (2, 128)]
            .iter()
            .map(|&(depth, dim)| {
                with(format!("depth {depth} dim {dim}"), &|c| {
                    c.model.peft.dri.oe.depth = depth;
                    c.model.peft.dri.oe.dim = dim;
                })
            })
            .collect(),
        "modulator-design" => [
            (ModulatorDesign::Linear, ModulatorInit::Random),
            (ModulatorDesign::Mlp, ModulatorInit::Random),
            (ModulatorDesign::Mlp, ModulatorInit::Zero),
            (ModulatorDesign::Linear, ModulatorInit::Zero),
        ]
        .iter()
        .map(|&(design, init)| {
            with(format!("{}/{}", design.name(), init.name()), &|c| {
                c.model.peft.dri.design = design;
                c.model.peft.dri.init = init;
            })
        })
        .collect(),
        "peft-compare" => [PeftMode::FullFt, PeftMode::Frozen, PeftMode::Lora, PeftMode::Adapter, PeftMode::Dri]
            .iter()
            .map(|&mode| with(mode.name().to_string(), &|c| c.model.peft.mode = mode))
            .collect(),
        _ => {
            return Err(Error::Config(format!(
                "unknown ablation grid {name:?}, expected one of {}",
                GRIDS.join(", ")
            )))
        }
    };
    Ok(variants)
}

#[derive(Clone, Debug)]
pub struct GridRow {
    pub label: String,
    pub report: RunReport,
}

impl GridRow {
    pub fn cross_modal_map(&self) -> f64 {
        RunReport::cross_modal_map(self.report.final_eval()).unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug)]
pub struct GridTable {
    pub name: String,
    pub baseline: Option<f64>,
    pub rows: Vec<GridRow>,
}

impl GridTable {
    pub fn row(&self, label: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

impl fmt::Display for GridTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "grid {}", self.name)?;
        if let Some(b) = self.baseline {
            writeln!(f, "starting point cross-modal mAP {b:.2}")?;
        }
        writeln!(
            f,
            "{:<26} {:>12} {:>8} {:>8} {:>8} {:>8}",
            "variant", "trainable", "xm-mAP", "R1", "R5", "R10"
        )?;
        for row in &self.rows {
            let point = row.report.final_eval();
            let cross: Vec<_> = point.reports.iter().filter(|r| is_cross_modal(&r.protocol)).collect();
            let mean = |k: usize| {
                cross.iter().filter_map(|r| r.rank(k)).sum::<f64>() / cross.len().max(1) as f64
            };
            writeln!(
                f,
                "{:<26} {:>12} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                row.label,
                row.report.params.total(),
                row.cross_modal_map(),
                mean(1),
                mean(5),
                mean(10)
            )?;
        }
        Ok(())
    }
}

/// Runs every variant of `name` on `data`, pre-training once for all of
/// them. `baseline` is the cross-modal mAP of the shared starting point
/// before any fine-tuning.
pub fn run_grid(name: &str, base: &RunConfig, data: &Dataset<f32>) -> Result<GridTable> {
    grid(name, base)?;
    let pre: Option<Pretrained> = if base.train.pretrain_epochs > 0 {
        Some(pretrain(base, data)?)
    } else {
        None
    };
    run_grid_from(name, base, data, pre.as_ref())
}

/// [`run_grid`] on top of an existing pre-trained backbone.
pub fn run_grid_from(name: &str, base: &RunConfig, data: &Dataset<f32>, pre: Option<&Pretrained>) -> Result<GridTable> {
    let variants = grid(name, base)?;
    let mut rows = Vec::with_capacity(variants.len());
    let mut baseline = None;
    for v in variants {
        v.cfg.validate()?;
        let run = finetune(&v.cfg, data, pre)?;
        let live = enumerate_trainable(&run.store);
        if live != run.report.closed_form {
            return Err(Error::Contract(format!(
                "{}: enumerated parameters {live:?} differ from the closed form {:?}",
                v.label, run.report.closed_form
            )));
        }
        if baseline.is_none() {
            baseline = RunReport::cross_modal_map(run.report.initial_eval());
        }
        rows.push(GridRow {
            label: v.label,
            report: run.report,
        });
    }
    Ok(GridTable {
        name: name.to_string(),
        baseline,
        rows,
    })
}
