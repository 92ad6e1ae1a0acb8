use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use tadmask_core::config::{Preset, RunConfig};
use tadmask_core::data::{generate_synthetic, load_dataset, LoadedDataset};
use tadmask_core::decode::{read_detections, write_detections, Detections};
use tadmask_core::eval::{error_propagation_experiment, ground_truth, map_report};
use tadmask_core::model::TadModel;
use tadmask_core::params::ParamStore;
use tadmask_core::pipeline::{run_finetune, run_pretrain, PreparedSplit};
use tadmask_core::train::detect_all;

const CONFIG_FILE: &str = "config.toml";
const PRETRAIN_CKPT: &str = "pretrain.ckpt";
const FINETUNE_CKPT: &str = "finetune.ckpt";
const DETECTIONS_FILE: &str = "detections.json";

#[derive(Parser)]
#[command(name = "tadmask", version, about = "Proposal-free temporal action detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; overrides `--preset`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "toy")]
    preset: Preset,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fraction of training videos that keep their labels.
    #[arg(long, global = true)]
    labels_fraction: Option<f64>,
    /// Run directory (default `runs/<preset>-seed<N>`).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Dataset directory (default `<run-dir>/data`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset and its split manifest.
    GenData,
    /// Self-supervised pre-training on all training videos.
    Pretrain,
    /// Semi-supervised fine-tuning.
    Finetune {
        /// Start from random weights instead of the pre-training checkpoint.
        #[arg(long)]
        from_scratch: bool,
        /// Train on labeled videos only.
        #[arg(long)]
        no_pseudo: bool,
    },
    /// Detect actions on the test split.
    Infer,
    /// Score detections against the test annotations.
    Eval {
        /// Detection file (default `<run-dir>/detections.json`).
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Score the ground truth itself (sanity check).
        #[arg(long)]
        oracle: bool,
    },
    /// Compare ground-truth and predicted masks for the parallel decoder and
    /// the sequential crop-classifier skeleton.
    ErrorProp,
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    data: PathBuf,
}

impl Run {
    fn resolve(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::preset(c.preset),
        };
        if let Some(seed) = c.seed {
            cfg.seed = seed;
        }
        if let Some(f) = c.labels_fraction {
            cfg.data.label_fraction = f;
        }
        cfg.validate()?;
        let dir = c
            .run_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.preset, cfg.seed)));
        let data = c.data.clone().unwrap_or_else(|| dir.join("data"));
        fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        cfg.save(&dir.join(CONFIG_FILE))?;
        Ok(Self { cfg, dir, data })
    }

    fn dataset(&self) -> Result<LoadedDataset> {
        let mut ds = load_dataset(&self.data).with_context(|| format!("loading dataset from {}", self.data.display()))?;
        if (ds.manifest.fraction - self.cfg.data.label_fraction).abs() > 1e-12 {
            info!("re-drawing labeled subset at fraction {}", self.cfg.data.label_fraction);
            ds.manifest = ds.manifest.with_fraction(self.cfg.data.label_fraction, self.cfg.seed)?;
        }
        Ok(ds)
    }

    fn split(&self, ds: &LoadedDataset) -> Result<PreparedSplit> {
        Ok(PreparedSplit::new(&ds.annotations, &ds.features, &ds.manifest, &self.cfg)?)
    }

    fn checkpoint(&self, name: &str, hint: &str) -> Result<ParamStore> {
        let path = self.dir.join(name);
        if !path.exists() {
            bail!("checkpoint not found at {} ({hint})", path.display());
        }
        Ok(ParamStore::load(&path)?)
    }

    fn model(&self) -> Result<TadModel> {
        let params = self.checkpoint(FINETUNE_CKPT, "run `finetune` first")?;
        Ok(TadModel::from_params(self.cfg.model.clone(), params)?)
    }
}

fn json_lines<T: serde::Serialize>(path: &Path) -> Result<impl FnMut(&T)> {
    let mut file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(move |row: &T| {
        let line = serde_json::to_string(row).expect("metrics serialize");
        if let Err(e) = writeln!(file, "{line}") {
            log::warn!("metrics log write failed: {e}");
        }
        println!("{line}");
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let run = Run::resolve(&cli.common)?;
    let cfg = &run.cfg;
    match cli.command {
        Command::GenData => {
            let ds = generate_synthetic(&cfg.data, cfg.seed, &run.data)?;
            println!(
                "wrote {} videos ({} labeled, {} unlabeled, {} test) to {}",
                ds.annotations.records.len(),
                ds.manifest.labeled.len(),
                ds.manifest.unlabeled.len(),
                ds.manifest.test.len(),
                run.data.display()
            );
        }
        Command::Pretrain => {
            let ds = run.dataset()?;
            let split = run.split(&ds)?;
            let log = json_lines(&run.dir.join("pretrain_log.jsonl"))?;
            let (model, _) = run_pretrain(cfg, &split, cfg.seed, log)?;
            let path = run.dir.join(PRETRAIN_CKPT);
            model.params().save(&path)?;
            println!("saved {}", path.display());
        }
        Command::Finetune { from_scratch, no_pseudo } => {
            let pretrained = if from_scratch {
                None
            } else {
                Some(run.checkpoint(PRETRAIN_CKPT, "run `pretrain` first or pass --from-scratch")?)
            };
            let ds = run.dataset()?;
            let split = run.split(&ds)?;
            let log = json_lines(&run.dir.join("metrics.jsonl"))?;
            let (model, _) = run_finetune(cfg, &split, pretrained.as_ref(), !no_pseudo, cfg.seed, log)?;
            let path = run.dir.join(FINETUNE_CKPT);
            model.params().save(&path)?;
            println!("saved {}", path.display());
        }
        Command::Infer => {
            let model = run.model()?;
            let ds = run.dataset()?;
            let split = run.split(&ds)?;
            let dets = detect_all(&model, &split.test, &cfg.decode)?;
            let path = run.dir.join(DETECTIONS_FILE);
            write_detections(&path, &dets, &ds.annotations.labels)?;
            println!("wrote detections for {} videos to {}", dets.len(), path.display());
        }
        Command::Eval { detections, oracle } => {
            let ds = run.dataset()?;
            let test = ds.split().test;
            let gt = ground_truth(&test);
            let dets: Detections = if oracle {
                gt.clone()
            } else {
                let path = detections.unwrap_or_else(|| run.dir.join(DETECTIONS_FILE));
                if !path.exists() {
                    bail!("detections not found at {} (run `infer` first)", path.display());
                }
                read_detections(&path, &ds.annotations.labels)?
            };
            let report = map_report(&dets, &gt, &cfg.eval);
            fs::write(run.dir.join("report.json"), report.to_json())?;
            print!("{}", report.to_table());
        }
        Command::ErrorProp => {
            let model = run.model()?;
            let ds = run.dataset()?;
            let split = run.split(&ds)?;
            let report = error_propagation_experiment(&model, &split.labeled, &split.test, &cfg.decode, &cfg.eval)?;
            fs::write(run.dir.join("error_prop.json"), serde_json::to_string_pretty(&report)?)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}
