//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::Checkpoint;
use crate::cloud::PointCloud;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{read_dimg, read_ply, write_ply};
use crate::rng::{derive_seed, Rng};
use crate::synth::{backproject, build_dataset, fuse_views, DatasetManifest, Split};
use crate::trainer::{
    ablation_sweep, block_variants, evaluate, evaluate_predictions, format_ablation, load_split, pooling_variants,
    table1_variants, train, Gan, TrainRun, Variant,
};

#[derive(Debug, Parser)]
#[command(name = "deeppoint", version, about = "Point-cloud reconstruction from fused multi-view depth")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Master seed for data generation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (defaults come from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// F-score threshold in cm.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 1-, 2-, 5- and 7-block generators.
    Blocks,
    /// Block sweep plus the skip-connection variants.
    Table1,
    /// Mix, max and average discriminator pooling.
    Pooling,
    /// Block sweep followed by the pooling sweep.
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(#[command(flatten)] Common),
    /// Train generator and discriminator on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reconstruct one cloud from a coarse `.ply` or a set of `.dimg` views.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ground-truth `.ply`; metrics are printed when given.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train and evaluate a set of model variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        preset: Preset,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(tau) = common.tau {
        cfg.evaluation.tau_cm = tau;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `dir`, refusing to reuse a nonempty one unless `force` (which
/// clears it) or `keep` is set.
fn prepare_out(dir: &Path, force: bool, keep: bool) -> Result<()> {
    let nonempty = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if nonempty && !keep {
        if !force {
            return Err(Error::InvalidInput(format!(
                "output directory {} already exists; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_label(cfg: &RunConfig) -> String {
    format!("{}-Block", cfg.model.generator.blocks.len())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => cmd_synth(&common),
        Command::Train { common, resume } => cmd_train(&common, resume),
        Command::Eval { common, checkpoint } => cmd_eval(&common, checkpoint),
        Command::Infer {
            common,
            checkpoint,
            truth,
            inputs,
        } => cmd_infer(&common, checkpoint, truth, &inputs),
        Command::Ablate { common, preset } => cmd_ablate(&common, preset),
    }
}

fn cmd_synth(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(out) = &common.out {
        cfg.dataset.dir = out.clone();
    }
    let dir = cfg.dataset.dir.clone();
    prepare_out(&dir, common.force, false)?;
    let dcfg = cfg.dataset_config();
    let manifest = build_dataset(&dcfg, &dir)?;
    cfg.write_resolved(&dir)?;
    println!(
        "{} samples ({} models × {}), split {}/{}",
        manifest.entries.len(),
        dcfg.models,
        dcfg.per_model,
        manifest.count(Split::Train),
        manifest.count(Split::Test)
    );
    for (model, n) in manifest.per_model().iter().enumerate() {
        println!("  model {model}: {n}");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<(Vec<crate::trainer::TrainPair>, Vec<crate::trainer::TrainPair>)> {
    let root = &cfg.dataset.dir;
    let manifest = DatasetManifest::load(root)?;
    Ok((load_split(root, &manifest, Split::Train)?, load_split(root, &manifest, Split::Test)?))
}

fn cmd_train(common: &Common, resume: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(out) = &common.out {
        cfg.training.out_dir = out.clone();
    }
    let dir = cfg.training.out_dir.clone();
    prepare_out(&dir, common.force, resume)?;
    cfg.write_resolved(&dir)?;
    let (train_set, test_set) = load_dataset(&cfg)?;
    let tcfg = cfg.train_config();
    let out = train(
        &tcfg,
        &train_set,
        &test_set,
        &TrainRun {
            out: Some(&dir),
            resume,
            verbose: true,
        },
    )?;
    println!("trained {} epochs, {} steps", out.state.epoch, out.state.step);
    if let Some(report) = out.report {
        write_text(&dir.join("test_metrics.csv"), &report.to_csv())?;
        print!("{}", report.to_text(&run_label(&cfg)));
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(out) = &common.out {
        cfg.evaluation.out_dir = out.clone();
    }
    if let Some(ck) = checkpoint {
        cfg.evaluation.checkpoint = ck;
    }
    let tcfg = cfg.train_config();
    let gan = Gan::from_checkpoint(&tcfg.generator, &tcfg.discriminator, &Checkpoint::load(&cfg.checkpoint_path())?)?;
    let (_, test_set) = load_dataset(&cfg)?;
    let report = evaluate(&gan, &test_set, cfg.evaluation.tau_cm)?;
    let dir = cfg.evaluation.out_dir.clone();
    prepare_out(&dir, common.force, false)?;
    cfg.write_resolved(&dir)?;
    let text = report.to_text(&run_label(&cfg));
    write_text(&dir.join("metrics.csv"), &report.to_csv())?;
    write_text(&dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn is_ext(path: &Path, ext: &str) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn cmd_infer(common: &Common, checkpoint: Option<PathBuf>, truth: Option<PathBuf>, inputs: &[PathBuf]) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(ck) = checkpoint {
        cfg.evaluation.checkpoint = ck;
    }
    let n = cfg.dataset.points;
    let mut rng = Rng::new(derive_seed(cfg.training.seed, 0x1AFE));
    let coarse = match inputs {
        [ply] if is_ext(ply, "ply") => fuse_views(&[read_ply(ply)?], n, &mut rng)?,
        views if views.iter().all(|p| is_ext(p, "dimg")) => {
            let mut clouds = Vec::with_capacity(views.len());
            for path in views {
                match backproject(&read_dimg(path)?) {
                    Ok(c) => clouds.push(c),
                    Err(Error::EmptyView) => {}
                    Err(e) => return Err(e),
                }
            }
            fuse_views(&clouds, n, &mut rng)?
        }
        _ => {
            return Err(Error::InvalidInput(
                "inputs must be a single .ply cloud or one or more .dimg views".into(),
            ))
        }
    };
    let tcfg = cfg.train_config();
    let gan = Gan::from_checkpoint(&tcfg.generator, &tcfg.discriminator, &Checkpoint::load(&cfg.checkpoint_path())?)?;
    let pred = gan.reconstruct(&coarse)?;

    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("infer"));
    prepare_out(&dir, common.force, false)?;
    cfg.write_resolved(&dir)?;
    let pred_path = dir.join("pred.ply");
    write_ply(&pred_path, &pred)?;
    write_ply(&dir.join("coarse.ply"), &coarse)?;
    println!("wrote {} ({} points)", pred_path.display(), pred.len());
    if let Some(truth) = truth {
        let truth_cloud: PointCloud = read_ply(&truth)?;
        let report = evaluate_predictions(&[("pred".to_string(), pred, truth_cloud)], cfg.evaluation.tau_cm)?;
        let m = &report.samples[0];
        println!("{}", report.conventions());
        println!("cd_cm={:.4} emd_cm={:.4} fscore={:.4}", m.cd_cm, m.emd_cm, m.fscore);
    }
    Ok(())
}

fn ablation_variants(cfg: &RunConfig, preset: Preset) -> Vec<Variant> {
    let disc = &cfg.model.discriminator;
    let one_block = crate::model::GeneratorConfig::with_blocks(1).expect("preset");
    match preset {
        Preset::Blocks => block_variants(disc),
        Preset::Table1 => table1_variants(disc),
        Preset::Pooling => pooling_variants(&one_block, disc),
        Preset::All => {
            let mut v = block_variants(disc);
            v.extend(pooling_variants(&one_block, disc));
            v
        }
    }
}

fn cmd_ablate(common: &Common, preset: Preset) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("ablation"));
    let (train_set, test_set) = load_dataset(&cfg)?;
    prepare_out(&dir, common.force, false)?;
    cfg.write_resolved(&dir)?;
    let rows = ablation_sweep(&cfg.train_config(), &ablation_variants(&cfg, preset), &train_set, &test_set)?;
    let table = format_ablation(&rows);
    write_text(&dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}
