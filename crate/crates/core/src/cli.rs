//! Command-line surface behind the `dri` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::ablate::run_grid;
use crate::checkpoint::{Container, Entry, EntryKind};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, synthesize, Dataset, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::model::{trainable_param_count, ReidModel};
use crate::param::ParamStore;
use crate::train::{embed_records, evaluate_model, train, RunReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.dri";
pub const REPORT_FILE: &str = "report.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.dri";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
/// Environment variable sizing the worker pool.
pub const THREADS_VAR: &str = "DRI_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dri", version, about = "Domain representation injection for frozen ViTs, toy scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Run configuration (`key = value` lines); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic dataset described by the config to --out.
    GenData(Common),
    /// Pre-trains, fine-tunes and writes a checkpoint and report to --out.
    Train(Common),
    /// Evaluates a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; the checkpoint's dataset config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Protocols such as `all` or `opt->sar`; the checkpoint's list when omitted.
        #[arg(long = "protocol")]
        protocols: Vec<String>,
    },
    /// Prints the trainable parameter table of the configured model.
    Params(Common),
    /// Runs an ablation grid and writes its comparison table to --out.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// injection-sites, oe-shape, modulator-design or peft-compare.
        #[arg(long)]
        grid: String,
    },
    /// Writes query and gallery embeddings of a checkpoint to --out.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Config file, then `--set` overrides, then `--seed`.
pub fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut text = match &c.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    for s in &c.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let _ = writeln!(text, "{} = {}", k.trim(), v.trim());
    }
    if let Some(seed) = c.seed {
        let _ = writeln!(text, "seed = {seed}");
    }
    RunConfig::parse_str(&text)
}

/// The configured dataset: decoded from `root` when set, otherwise
/// synthesized in memory.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset<f32>> {
    let channels = cfg.model.backbone.channels;
    match &cfg.dataset.root {
        Some(root) => Dataset::open(root, channels),
        None => Dataset::from_synthetic(&synthesize(&cfg.dataset.synthetic)?, channels),
    }
}

/// Model and weights restored from a checkpoint written by `train`.
pub fn restore(path: &Path) -> Result<(RunConfig, ReidModel, ParamStore<f32>)> {
    let c = Container::load(path)?;
    let cfg = c
        .config
        .clone()
        .ok_or_else(|| Error::State(format!("{} carries no run config", path.display())))?;
    let mut store = ParamStore::new();
    let model = ReidModel::new(&mut store, &cfg.model, cfg.seed)?;
    c.load_into(&mut store)?;
    Ok((cfg, model, store))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn data_override(cfg: &mut RunConfig, data: &Option<PathBuf>) {
    if let Some(d) = data {
        cfg.dataset.root = Some(d.clone());
    }
}

/// Table-I style row: mAP, R1, R5, R10 per protocol plus trainable parameters.
pub fn table_row(reports: &[crate::eval::MetricsReport], trainable: usize) -> String {
    let mut s = format!("{:<10} {:>7} {:>7} {:>7} {:>7}\n", "protocol", "mAP", "R1", "R5", "R10");
    for r in reports {
        let k = |n| r.rank(n).unwrap_or(f64::NAN);
        let _ = writeln!(s, "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.2}", r.protocol, r.map, k(1), k(5), k(10));
    }
    let _ = writeln!(s, "trainable params {trainable} ({:.2}M)", trainable as f64 / 1e6);
    s
}

/// Runs one command, returning what it prints on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = resolve_config(&c)?;
            ensure_dir(&c.out)?;
            let manifest = generate_synthetic(&cfg.dataset.synthetic, &c.out)?;
            let path = c.out.join(MANIFEST_FILE);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let mut s = format!("wrote {} images to {}\n", manifest.records.len(), c.out.display());
            for split in [Split::Train, Split::Query, Split::Gallery] {
                let recs: Vec<_> = manifest.split(split).collect();
                let ids: std::collections::BTreeSet<i64> = recs.iter().map(|r| r.id).collect();
                let _ = writeln!(s, "{:<8} {:>5} rows {:>4} ids", split.name(), recs.len(), ids.len());
            }
            let _ = writeln!(s, "modalities {}", manifest.modalities().into_iter().collect::<Vec<_>>().join(", "));
            let _ = writeln!(s, "manifest sha256 {}", sha256_hex(&bytes));
            Ok(s)
        }
        Command::Train(c) => {
            let cfg = resolve_config(&c)?;
            let data = load_dataset(&cfg)?;
            let run = train(&cfg, &data)?;
            ensure_dir(&c.out)?;
            let mut ckpt = Container::from_store(&run.store, Some(&cfg));
            ckpt.meta.push(("mode".into(), cfg.model.peft.mode.name().into()));
            ckpt.save(&c.out.join(CHECKPOINT_FILE))?;
            let text = format!("{cfg}\n{}", run.report);
            write(&c.out.join(REPORT_FILE), &text)?;
            Ok(summary(&run.report))
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            protocols,
        } => {
            let (mut cfg, model, store) = restore(&checkpoint)?;
            data_override(&mut cfg, &data);
            let protocols = if protocols.is_empty() { cfg.eval.protocols.clone() } else { protocols };
            let data = load_dataset(&cfg)?;
            let reports = evaluate_model(&model, &store, &data, &protocols)?;
            let mut s = table_row(&reports, store.trainable_count());
            if common.out != Path::new(".") {
                ensure_dir(&common.out)?;
                write(&common.out.join(REPORT_FILE), &s)?;
            }
            for r in &reports {
                let _ = writeln!(s, "{r}");
            }
            Ok(s)
        }
        Command::Params(c) => {
            let cfg = resolve_config(&c)?;
            let t = trainable_param_count(&cfg.model);
            Ok(format!("mode {}\n{t}", cfg.model.peft.mode.name()))
        }
        Command::Ablate { common, grid } => {
            let cfg = resolve_config(&common)?;
            let data = load_dataset(&cfg)?;
            let table = run_grid(&grid, &cfg, &data)?;
            ensure_dir(&common.out)?;
            let text = table.to_string();
            write(&common.out.join(format!("ablate-{grid}.txt")), &text)?;
            Ok(text)
        }
        Command::ExportEmbeddings {
            common,
            checkpoint,
            data,
        } => {
            let (mut cfg, model, store) = restore(&checkpoint)?;
            data_override(&mut cfg, &data);
            let data = load_dataset(&cfg)?;
            let idx: Vec<usize> = data
                .indices(Split::Query)
                .into_iter()
                .chain(data.indices(Split::Gallery))
                .collect();
            let set = embed_records(&model, &store, &data, &idx)?;
            let mut c = Container {
                config: Some(cfg),
                ..Container::default()
            };
            c.entries.push(Entry {
                name: "features".into(),
                kind: EntryKind::Data,
                trainable: false,
                tensor: set.features.cast::<f32>(),
            });
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Data(format!("writing embeddings sidecar: {e}"));
            w.write_record(["path", "id", "modality", "split"]).map_err(csv_err)?;
            for &i in &idx {
                let r = &data.manifest.records[i];
                w.write_record([r.path.as_str(), &r.id.to_string(), r.modality.as_str(), r.split.name()])
                    .map_err(csv_err)?;
            }
            let sidecar = w.into_inner().map_err(|e| Error::Data(format!("writing embeddings sidecar: {e}")))?;
            ensure_dir(&common.out)?;
            c.meta.push(("sidecar".into(), EMBEDDINGS_CSV.into()));
            c.save(&common.out.join(EMBEDDINGS_FILE))?;
            let path = common.out.join(EMBEDDINGS_CSV);
            fs::write(&path, sidecar).map_err(|e| Error::io(&path, e))?;
            Ok(format!("wrote {} embeddings of width {} to {}\n", set.len(), set.dim(), common.out.display()))
        }
    }
}

fn summary(r: &RunReport) -> String {
    let mut s = String::new();
    let first = RunReport::cross_modal_map(r.initial_eval()).unwrap_or(f64::NAN);
    let last = RunReport::cross_modal_map(r.final_eval()).unwrap_or(f64::NAN);
    let _ = writeln!(s, "mode {} trained in {:.1}s", r.mode.name(), r.seconds);
    let _ = writeln!(s, "cross-modal mAP {first:.2} -> {last:.2}");
    s.push_str(&table_row(&r.final_eval().reports, r.params.total()));
    s
}

/// Sizes the global rayon pool from `DRI_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_VAR} must be a thread count, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}
