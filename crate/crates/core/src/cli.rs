//! Command-line front end: `train`, `ablate`, `inspect` and `synth`.
//!
//! Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{load_dataset, synth_with_seed, write_dataset, MtsDataset, Split, SynthSpec};
use crate::error::{GtnError, Result};
use crate::interpret;
use crate::model::{Gtn, ModelConfig, Reduction, Variant};
use crate::train::{train_with, Report, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(err: &GtnError) -> i32 {
    match err {
        GtnError::Config(_) | GtnError::Param(_) => EXIT_USAGE,
        GtnError::NonFinite(_) | GtnError::DegenerateSoftmax { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Every setting of a run. Written back in full as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub variant: Variant,
    /// Defaults to the variant's mask when absent.
    pub use_causal_mask_step: Option<bool>,
    pub use_causal_mask_channel: Option<bool>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub d_tower: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub reduction: Reduction,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_interval: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub min_lr: f64,
    pub adagrad_eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1, 2, Variant::Gated);
        let t = TrainConfig::default();
        RunConfig {
            dataset: None,
            out: PathBuf::from("runs/gtn"),
            seed: t.seed,
            variant: m.variant,
            use_causal_mask_step: None,
            use_causal_mask_channel: None,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            d_tower: m.d_tower,
            dropout: m.dropout_p,
            ln_eps: m.ln_eps,
            reduction: m.reduction,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            eval_interval: t.eval_interval,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            plateau_threshold: t.plateau_threshold,
            min_lr: t.min_lr,
            adagrad_eps: t.adagrad_eps,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GtnError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| GtnError::Config(format!("{}: {e}", path.display())))
    }

    /// Fills the mask flags from the variant where unset.
    pub fn resolved(&self) -> RunConfig {
        let (s, c) = self.variant.default_masks();
        RunConfig {
            use_causal_mask_step: Some(self.use_causal_mask_step.unwrap_or(s)),
            use_causal_mask_channel: Some(self.use_causal_mask_channel.unwrap_or(c)),
            ..self.clone()
        }
    }

    pub fn with_variant(&self, variant: Variant) -> RunConfig {
        RunConfig {
            variant,
            use_causal_mask_step: None,
            use_causal_mask_channel: None,
            ..self.clone()
        }
        .resolved()
    }

    pub fn model_config(&self, ds: &MtsDataset) -> ModelConfig {
        let r = self.resolved();
        ModelConfig {
            n_channels: ds.n_channels,
            max_len: ds.max_len,
            n_classes: ds.n_classes,
            d_model: r.d_model,
            n_heads: r.n_heads,
            n_layers: r.n_layers,
            d_ff: r.d_ff,
            d_tower: r.d_tower,
            dropout_p: r.dropout,
            ln_eps: r.ln_eps,
            variant: r.variant,
            use_causal_mask_step: r.use_causal_mask_step.unwrap(),
            use_causal_mask_channel: r.use_causal_mask_channel.unwrap(),
            reduction: r.reduction,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            eval_interval: self.eval_interval,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            plateau_threshold: self.plateau_threshold,
            min_lr: self.min_lr,
            adagrad_eps: self.adagrad_eps,
            seed: self.seed,
        }
    }

    /// Checks everything that does not need the dataset.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let mut probe = ModelConfig::new(1, 1, 2, self.variant);
        let r = self.resolved();
        probe.d_model = r.d_model;
        probe.n_heads = r.n_heads;
        probe.n_layers = r.n_layers;
        probe.d_ff = r.d_ff;
        probe.d_tower = r.d_tower;
        probe.dropout_p = r.dropout;
        probe.ln_eps = r.ln_eps;
        probe.use_causal_mask_step = r.use_causal_mask_step.unwrap();
        probe.use_causal_mask_channel = r.use_causal_mask_channel.unwrap();
        probe.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.resolved()).expect("config serializes") + "\n"
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gtn",
    version,
    about = "Two-tower gated transformer for multivariate time-series classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one variant and report test accuracy at the best-train-loss epoch.
    Train(RunArgs),
    /// Train all six ablation variants with one seed and tabulate test accuracy.
    Ablate(RunArgs),
    /// Export attention maps, distance matrices, gate weights and embeddings.
    Inspect(InspectArgs),
    /// Write a synthetic dataset in the dataset directory format.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Dataset directory; repeat for `ablate` to tabulate several datasets.
    #[arg(long, required = true)]
    pub dataset: Vec<PathBuf>,
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub sample_id: usize,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "synthetic")]
    pub name: String,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 20)]
    pub min_len: usize,
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 100)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
}

impl RunArgs {
    /// Config file (if any) overlaid with explicit flags. Uses the first
    /// `--dataset`.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        cfg.dataset = self.dataset.first().cloned().or(cfg.dataset);
        if let Some(v) = self.variant {
            if v != cfg.variant {
                cfg.use_causal_mask_step = None;
                cfg.use_causal_mask_channel = None;
            }
            cfg.variant = v;
        }
        macro_rules! overlay {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$target = v; })*
            };
        }
        overlay!(seed => seed, out => out, epochs => epochs, lr => lr,
                 dropout => dropout, batch_size => batch_size, eval_interval => eval_interval);
        cfg.validate()?;
        Ok(cfg.resolved())
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| GtnError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| GtnError::io(path, e))
}

fn load(cfg: &RunConfig) -> Result<MtsDataset> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| GtnError::Config("no dataset given".into()))?;
    load_dataset(path)
}

/// Trains one configuration into `cfg.out`, leaving `config.json`,
/// `log.csv`, `best.ckpt` and `report.json`.
pub fn run_train(cfg: &RunConfig, ds: &MtsDataset, quiet: bool) -> Result<Report> {
    let cfg = cfg.resolved();
    let out = &cfg.out;
    create_dir(out)?;
    write(&out.join("config.json"), cfg.to_json())?;

    let mut model = Gtn::new(cfg.model_config(ds), cfg.seed)?;
    let tag = format!("{}/{}", ds.name, cfg.variant);
    let outcome = train_with(
        &mut model,
        ds,
        &cfg.train_config(),
        Some(&out.join("best.ckpt")),
        |e| {
            if !quiet {
                let acc = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{:.4}", a));
                eprintln!(
                    "[{tag}] epoch {:>4} loss {:.6} train_acc {} test_acc {} lr {:e}",
                    e.epoch,
                    e.train_loss,
                    acc(e.train_acc),
                    acc(e.test_acc),
                    e.lr
                );
            }
        },
    )?;
    write(&out.join("log.csv"), outcome.log.to_csv())?;
    let report = serde_json::to_string_pretty(&outcome.report).expect("report serializes") + "\n";
    write(&out.join("report.json"), report)?;
    Ok(outcome.report)
}

pub fn cmd_train(args: &RunArgs) -> Result<Report> {
    let cfg = args.run_config()?;
    let ds = load(&cfg)?;
    let report = run_train(&cfg, &ds, args.quiet)?;
    println!(
        "{} {}: test accuracy {:.4} at epoch {} (best train loss {:.6})",
        ds.name, report.variant, report.test_accuracy, report.epoch, report.train_loss
    );
    Ok(report)
}

/// One row of the ablation table: test accuracy per variant, `None` where
/// the run failed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub dataset: String,
    pub cells: Vec<(Variant, std::result::Result<Report, String>)>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("dataset");
    for v in Variant::ALL {
        out.push(',');
        out.push_str(v.name());
    }
    out.push('\n');
    for row in rows {
        out.push_str(&row.dataset);
        for (_, cell) in &row.cells {
            out.push(',');
            if let Ok(r) = cell {
                out.push_str(&format!("{:?}", r.test_accuracy));
            }
        }
        out.push('\n');
    }
    out
}

/// Runs every variant on every dataset into `out/<dataset>/<variant>/` and
/// writes `out/ablation.csv`. Variants train concurrently; each has its own
/// state, so results equal individual `train` runs with the same seed.
pub fn run_ablate(base: &RunConfig, datasets: &[PathBuf], quiet: bool) -> Result<Vec<AblationRow>> {
    create_dir(&base.out)?;
    write(&base.out.join("config.json"), base.to_json())?;
    let mut rows = Vec::new();
    for path in datasets {
        let ds = load_dataset(path)?;
        let cells = std::thread::scope(|scope| {
            let handles: Vec<_> = Variant::ALL
                .into_iter()
                .map(|v| {
                    let mut cfg = base.with_variant(v);
                    cfg.dataset = Some(path.clone());
                    cfg.out = base.out.join(&ds.name).join(v.slug());
                    let ds = &ds;
                    (v, scope.spawn(move || run_train(&cfg, ds, quiet)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(v, h)| {
                    let res = match h.join() {
                        Ok(r) => r.map_err(|e| e.to_string()),
                        Err(_) => Err("worker panicked".to_string()),
                    };
                    (v, res)
                })
                .collect::<Vec<_>>()
        });
        for (v, cell) in &cells {
            if let Err(e) = cell {
                eprintln!("[{}/{v}] failed: {e}", ds.name);
                let dir = base.out.join(&ds.name).join(v.slug());
                create_dir(&dir)?;
                write(&dir.join("error.txt"), format!("{e}\n"))?;
            }
        }
        rows.push(AblationRow {
            dataset: ds.name.clone(),
            cells,
        });
    }
    write(&base.out.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

pub fn cmd_ablate(args: &RunArgs) -> Result<Vec<AblationRow>> {
    let cfg = args.run_config()?;
    let rows = run_ablate(&cfg, &args.dataset, args.quiet)?;
    print!("{}", ablation_csv(&rows));
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectSummary {
    pub sample_id: usize,
    pub split: Split,
    pub files: Vec<String>,
    pub gate_mean: Option<(f64, f64)>,
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<InspectSummary> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.into_model()?;
    let ds = load_dataset(&args.dataset)?;
    let cfg = &model.config;
    if cfg.n_channels != ds.n_channels || cfg.n_classes != ds.n_classes || cfg.max_len < ds.max_len
    {
        return Err(GtnError::Config(format!(
            "checkpoint expects {} channels / {} classes / max_len {}, dataset {} has {} / {} / {}",
            cfg.n_channels,
            cfg.n_classes,
            cfg.max_len,
            ds.name,
            ds.n_channels,
            ds.n_classes,
            ds.max_len
        )));
    }
    let samples = ds.split(args.split);
    let sample = samples.get(args.sample_id).ok_or_else(|| {
        GtnError::Config(format!(
            "sample id {} out of range; valid ids for the {} split are 0..={}",
            args.sample_id,
            args.split.name(),
            samples.len().saturating_sub(1)
        ))
    })?;

    create_dir(&args.out)?;
    let sample_dir = args.out.join(format!("sample_{}", args.sample_id));
    let manifest =
        interpret::export_attention(&model, sample, args.sample_id, args.split, &sample_dir)?;
    let mut files: Vec<String> = manifest
        .matrices
        .iter()
        .map(|m| format!("sample_{}/{}", args.sample_id, m.file))
        .collect();
    files.push(format!("sample_{}/manifest.json", args.sample_id));

    let mut gate_mean = None;
    if cfg.variant == Variant::Gated {
        let stats = interpret::gate_stats(&model, samples)?;
        write(&args.out.join("gate_stats.csv"), stats.to_csv())?;
        let json = serde_json::to_string_pretty(&stats).expect("gate stats serialize") + "\n";
        write(&args.out.join("gate_stats.json"), json)?;
        files.push("gate_stats.csv".into());
        files.push("gate_stats.json".into());
        gate_mean = Some(stats.mean);
    }

    let export = interpret::write_embeddings(&model, samples, &args.out)?;
    if export.embeddings.is_some() {
        files.push("embeddings.csv".into());
    }
    files.push("features.csv".into());

    for f in &files {
        println!("{}", args.out.join(f).display());
    }
    Ok(InspectSummary {
        sample_id: args.sample_id,
        split: args.split,
        files,
        gate_mean,
    })
}

pub fn cmd_synth(args: &SynthArgs) -> Result<MtsDataset> {
    let spec = SynthSpec {
        name: args.name.clone(),
        n_classes: args.classes,
        n_channels: args.channels,
        min_len: args.min_len,
        max_len: args.max_len,
        noise: args.noise,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
    };
    let ds = synth_with_seed(&spec, args.seed)?;
    write_dataset(&ds, &args.out)?;
    println!(
        "wrote {} ({} train / {} test) to {}",
        ds.name,
        ds.train.len(),
        ds.test.len(),
        args.out.display()
    );
    Ok(ds)
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Ablate(a) => cmd_ablate(a).map(drop),
        Command::Inspect(a) => cmd_inspect(a).map(drop),
        Command::Synth(a) => cmd_synth(a).map(drop),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
