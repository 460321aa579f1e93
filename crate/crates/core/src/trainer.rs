//! Adversarial training, evaluation and ablation sweeps.
//!
//! Each step updates the discriminator once on real pairs (coarse, truth) and
//! fake pairs (coarse, generated), then the generator once on
//!
//! ```text
//! L_G = (s_fake − 1)² + λ_cf·CD(P̂, P_true) + λ_emd·EMD(P̂, P_true)
//! ```
//!
//! with least-squares discriminator loss ½[(s_real − 1)² + s_fake²]. Losses
//! are computed in the coarse cloud's normalized frame and averaged over the
//! batch; CD and EMD enter the tape as off-tape scalars whose gradients are
//! taken with the nearest-neighbor and matching assignments held fixed.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::cloud::{normalize, Normalization, Point, PointCloud};
use crate::error::{Error, Result};
use crate::io::read_ply;
use crate::metrics::{
    chamfer, chamfer_with_grad, emd, emd_grad, fscore, LossWeights, MetricsReport, SampleMetrics, DEFAULT_TAU_CM,
};
use crate::model::{
    cloud_to_tensor, discriminator_forward, generator_forward, init_model, predict, tensor_to_cloud,
    DiscriminatorConfig, GeneratorConfig, Pooling,
};
use crate::rng::{derive_seed, Rng};
use crate::synth::{generate_sample, DatasetConfig, DatasetManifest, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// First epoch of the linear decay to zero.
    pub decay_start_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm ceiling per network.
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub seed: u64,
    /// Write a numbered checkpoint every this many epochs; 0 keeps only the latest.
    pub checkpoint_every: usize,
    /// Evaluate on the test split every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
    pub tau_cm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            base_lr: 2e-4,
            decay_start_epoch: 100,
            beta1: 0.5,
            beta2: 0.999,
            clip_norm: 10.0,
            weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            tau_cm: DEFAULT_TAU_CM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if self.decay_start_epoch > self.epochs {
            return Err(Error::InvalidConfig("decay_start_epoch must not exceed epochs".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.clip_norm > 0.0) || !(self.tau_cm > 0.0) {
            return Err(Error::InvalidConfig("base_lr must be >= 0; clip_norm and tau_cm must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must be in [0, 1)".into()));
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Constant `base_lr` before `decay_start_epoch`, then linear decay that
/// would reach zero at epoch `epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidInput(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    if epoch < cfg.decay_start_epoch {
        return Ok(cfg.base_lr);
    }
    let span = (cfg.epochs - cfg.decay_start_epoch) as f64;
    Ok(cfg.base_lr * (cfg.epochs - epoch) as f64 / span)
}

/// A coarse/true pair in the coarse cloud's normalized frame.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub id: String,
    pub input: PointCloud,
    pub target: PointCloud,
    pub norm: Normalization,
    /// Ground truth in cm, for evaluation.
    pub truth_cm: PointCloud,
}

impl TrainPair {
    pub fn new(id: impl Into<String>, p_r: &PointCloud, p_true: &PointCloud) -> Result<Self> {
        if p_r.len() != p_true.len() {
            return Err(Error::SizeMismatch {
                left: p_r.len(),
                right: p_true.len(),
            });
        }
        let (input, norm) = normalize(p_r)?;
        Ok(Self {
            id: id.into(),
            input,
            target: norm.apply(p_true)?,
            norm,
            truth_cm: p_true.clone(),
        })
    }
}

/// Reads one split of a dataset written by [`crate::synth::build_dataset`].
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<TrainPair>> {
    manifest
        .split(split)
        .map(|e| TrainPair::new(&e.id, &read_ply(&root.join(&e.p_r))?, &read_ply(&root.join(&e.p_true))?))
        .collect()
}

/// Generates a dataset in memory and splits it like [`crate::synth::build_dataset`].
pub fn synthetic_pairs(cfg: &DatasetConfig) -> Result<(Vec<TrainPair>, Vec<TrainPair>)> {
    cfg.validate()?;
    let ids: Vec<(usize, usize)> = (0..cfg.models).flat_map(|m| (0..cfg.per_model).map(move |i| (m, i))).collect();
    let pairs = ids
        .par_iter()
        .map(|&(m, i)| {
            let s = generate_sample(cfg, m, i)?;
            Ok((cfg.split_of(m, i), TrainPair::new(s.id, &s.p_r, &s.p_true)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, test): (Vec<_>, Vec<_>) = pairs.into_iter().partition(|(split, _)| *split == Split::Train);
    Ok((train.into_iter().map(|p| p.1).collect(), test.into_iter().map(|p| p.1).collect()))
}

/// Generator and discriminator with their configs.
#[derive(Debug, Clone, PartialEq)]
pub struct Gan {
    pub gen_cfg: GeneratorConfig,
    pub disc_cfg: DiscriminatorConfig,
    pub gen: ParamStore,
    pub disc: ParamStore,
}

const GEN_PREFIX: &str = "generator";
const DISC_PREFIX: &str = "discriminator";

impl Gan {
    pub fn new(gen_cfg: &GeneratorConfig, disc_cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        let (gen, disc) = init_model(gen_cfg, disc_cfg, &mut Rng::new(seed))?;
        Ok(Self {
            gen_cfg: gen_cfg.clone(),
            disc_cfg: disc_cfg.clone(),
            gen,
            disc,
        })
    }

    pub fn checkpoint(&self, with_moments: bool) -> Checkpoint {
        Checkpoint::from_stores(&[(GEN_PREFIX, &self.gen), (DISC_PREFIX, &self.disc)], with_moments)
    }

    /// Builds the networks for the given configs and loads `ck` into them.
    pub fn from_checkpoint(gen_cfg: &GeneratorConfig, disc_cfg: &DiscriminatorConfig, ck: &Checkpoint) -> Result<Self> {
        let mut gan = Self::new(gen_cfg, disc_cfg, 0)?;
        ck.restore_into(GEN_PREFIX, &mut gan.gen)?;
        ck.restore_into(DISC_PREFIX, &mut gan.disc)?;
        Ok(gan)
    }

    /// Prediction in cm for a coarse cloud in cm.
    pub fn reconstruct(&self, p_r: &PointCloud) -> Result<PointCloud> {
        let (input, norm) = normalize(p_r)?;
        norm.invert(&predict(&self.gen_cfg, &self.gen, &input)?)
    }
}

/// Generator objective components for one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub adv: f64,
    pub cd: f64,
    pub emd: f64,
}

fn points_to_tensor(points: &[Point]) -> Tensor {
    let data = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Tensor::new(points.len(), 3, data).expect("n×3 layout")
}

/// Least-squares discriminator loss on `tape` for one conditioning cloud.
pub fn discriminator_objective(
    tape: &mut Tape,
    cond: Var,
    real: Var,
    fake: Var,
    cfg: &DiscriminatorConfig,
    store: &ParamStore,
) -> Result<Var> {
    let s_real = discriminator_forward(tape, cond, real, cfg, store)?;
    let s_fake = discriminator_forward(tape, cond, fake, cfg, store)?;
    let r = tape.add_scalar(s_real, -1.0)?;
    let r = tape.square(r)?;
    let f = tape.square(s_fake)?;
    let total = tape.add(r, f)?;
    tape.scale(total, 0.5)
}

/// Generator objective on `tape` for generated points `pred` (n×3)
/// conditioned on `cond`.
pub fn generator_objective(
    tape: &mut Tape,
    cond: Var,
    pred: Var,
    target: &PointCloud,
    cfg: &DiscriminatorConfig,
    disc: &ParamStore,
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    let s_fake = discriminator_forward(tape, cond, pred, cfg, disc)?;
    let adv = tape.add_scalar(s_fake, -1.0)?;
    let adv = tape.square(adv)?;

    let pred_cloud = tensor_to_cloud(tape.value(pred))?;
    let (cd, cd_grad) = chamfer_with_grad(&pred_cloud, target);
    let matching = emd(&pred_cloud, target)?;
    let emd_grad = emd_grad(&pred_cloud, target, &matching)?;
    let cd_var = tape.external(pred, cd, points_to_tensor(&cd_grad))?;
    let emd_var = tape.external(pred, matching.cost, points_to_tensor(&emd_grad))?;

    let cd_w = tape.scale(cd_var, weights.chamfer)?;
    let emd_w = tape.scale(emd_var, weights.emd)?;
    let rec = tape.add(cd_w, emd_w)?;
    let total = tape.add(adv, rec)?;
    let parts = LossParts {
        adv: tape.value(adv).item()?,
        cd,
        emd: matching.cost,
    };
    Ok((total, parts))
}

/// Batch-mean losses of one step, plus clipping events.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub d: f64,
    pub g_adv: f64,
    pub cd: f64,
    pub emd: f64,
    /// Pre-clip gradient norms when clipping fired.
    pub clipped_d: Option<f64>,
    pub clipped_g: Option<f64>,
}

impl StepLosses {
    pub fn g_total(&self, w: &LossWeights) -> f64 {
        crate::metrics::generator_total_loss(self.g_adv, self.cd, self.emd, w)
    }
}

/// One discriminator update followed by one generator update.
pub fn train_step(gan: &mut Gan, batch: &[&TrainPair], cfg: &TrainConfig, lr: f64) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let adam = cfg.adam(lr);

    // Generator forward passes, kept on their tapes for the generator update.
    let mut g_tapes = Vec::with_capacity(batch.len());
    for pair in batch {
        let mut tape = Tape::new();
        let x = tape.constant(cloud_to_tensor(&pair.input))?;
        let y = generator_forward(&mut tape, x, &gan.gen_cfg, &gan.gen)?;
        g_tapes.push((tape, x, y));
    }

    let mut out = StepLosses::default();
    gan.disc.zero_grad();
    for (pair, (g_tape, _, y)) in batch.iter().zip(&g_tapes) {
        let mut tape = Tape::new();
        let cond = tape.constant(cloud_to_tensor(&pair.input))?;
        let real = tape.constant(cloud_to_tensor(&pair.target))?;
        let fake = tape.constant(g_tape.value(*y).clone())?;
        let loss = discriminator_objective(&mut tape, cond, real, fake, &gan.disc_cfg, &gan.disc)?;
        let loss = tape.scale(loss, inv_b)?;
        out.d += tape.value(loss).item()?;
        gan.disc.accumulate(&tape.backward(loss)?);
    }
    out.clipped_d = gan.disc.clip_grad_norm(cfg.clip_norm);
    gan.disc.adam_step(&adam);

    gan.gen.zero_grad();
    for (pair, (mut tape, x, y)) in batch.iter().zip(g_tapes) {
        let (loss, parts) =
            generator_objective(&mut tape, x, y, &pair.target, &gan.disc_cfg, &gan.disc, &cfg.weights)?;
        let loss = tape.scale(loss, inv_b)?;
        out.g_adv += parts.adv * inv_b;
        out.cd += parts.cd * inv_b;
        out.emd += parts.emd * inv_b;
        // Discriminator entries on this tape belong to another store and are dropped.
        gan.gen.accumulate(&tape.backward(loss)?);
    }
    out.clipped_g = gan.gen.clip_grad_norm(cfg.clip_norm);
    gan.gen.adam_step(&adam);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub losses: StepLosses,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub cd_cm: f64,
    pub emd_cm: f64,
    pub fscore: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

pub const LOG_HEADER: &str = "epoch\tstep\tlr\tl_d\tl_g_adv\tcd\temd\twall_ms";

impl StepRecord {
    pub fn to_line(&self) -> String {
        let l = &self.losses;
        let mut s = format!(
            "{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{}",
            self.epoch, self.step, self.lr, l.d, l.g_adv, l.cd, l.emd, self.wall_ms
        );
        for (net, norm) in [("discriminator", l.clipped_d), ("generator", l.clipped_g)] {
            if let Some(n) = norm {
                let _ = write!(s, "\n# clip step={} net={net} norm={n:e}", self.step);
            }
        }
        s
    }
}

impl EvalRecord {
    pub fn to_line(&self) -> String {
        format!(
            "# eval epoch={} cd_cm={:e} emd_cm={:e} fscore={:e}",
            self.epoch, self.cd_cm, self.emd_cm, self.fscore
        )
    }
}

pub const CHECKPOINT_FILE: &str = "model.dpck";
pub const STATE_FILE: &str = "model.state";
pub const LOG_FILE: &str = "train_log.tsv";

/// Progress markers stored next to a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn to_text(&self) -> String {
        format!("epoch {}\nstep {}\n", self.epoch, self.step)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut epoch = None;
        let mut step = None;
        for (i, line) in text.lines().enumerate() {
            let bad = || Error::Parse {
                line: i + 1,
                msg: format!("bad state line '{line}'"),
            };
            match line.split_once(' ') {
                Some(("epoch", v)) => epoch = Some(v.trim().parse().map_err(|_| bad())?),
                Some(("step", v)) => step = Some(v.trim().parse().map_err(|_| bad())?),
                _ if line.trim().is_empty() => {}
                _ => return Err(bad()),
            }
        }
        match (epoch, step) {
            (Some(epoch), Some(step)) => Ok(Self { epoch, step }),
            _ => Err(Error::Parse {
                line: 0,
                msg: "state file needs 'epoch' and 'step'".into(),
            }),
        }
    }
}

fn save_state(dir: &Path, name: &str, gan: &Gan, state: TrainState) -> Result<()> {
    let ck = dir.join(name);
    gan.checkpoint(true).save(&ck)?;
    let st = ck.with_extension("state");
    fs::write(&st, state.to_text()).map_err(|e| Error::io(&st, e))
}

/// Loads `dir/model.dpck` and its state sidecar.
pub fn load_latest(dir: &Path, cfg: &TrainConfig) -> Result<(Gan, TrainState)> {
    let ck = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    let gan = Gan::from_checkpoint(&cfg.generator, &cfg.discriminator, &ck)?;
    let st = dir.join(STATE_FILE);
    let text = fs::read_to_string(&st).map_err(|e| Error::io(&st, e))?;
    Ok((gan, TrainState::parse(&text)?))
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

/// Sample order for one epoch, derived from the seed alone so that a resumed
/// run sees the same batches.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(derive_seed(seed, 0x5EED_0000 + epoch as u64)).shuffle(&mut order);
    order
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub gan: Gan,
    pub log: TrainLog,
    pub state: TrainState,
    /// Final test-split report, if a test split was given.
    pub report: Option<MetricsReport>,
}

/// Options that do not change the trained weights.
#[derive(Debug, Clone, Default)]
pub struct TrainRun<'a> {
    /// Directory for checkpoints and the step log.
    pub out: Option<&'a Path>,
    /// Continue from `out/model.dpck`.
    pub resume: bool,
    /// Print one summary line per epoch to stderr.
    pub verbose: bool,
}

/// Full training loop: per-epoch shuffling, learning-rate schedule,
/// checkpoints, and a final evaluation on `test`.
pub fn train(cfg: &TrainConfig, train_set: &[TrainPair], test_set: &[TrainPair], run: &TrainRun<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let (mut gan, mut state) = match (run.resume, run.out) {
        (true, Some(dir)) => load_latest(dir, cfg)?,
        (true, None) => return Err(Error::InvalidInput("resume needs an output directory".into())),
        (false, _) => (Gan::new(&cfg.generator, &cfg.discriminator, cfg.seed)?, TrainState { epoch: 0, step: 0 }),
    };
    let mut log_file = match run.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let fresh = !run.resume || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut emit = |line: &str| -> Result<()> {
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    };

    let mut log = TrainLog::default();
    let per_epoch = steps_per_epoch(train_set.len(), cfg.batch_size);
    for epoch in state.epoch..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let mut epoch_cd = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &train_set[i]).collect();
            let losses = match train_step(&mut gan, &batch, cfg, lr) {
                Ok(l) => l,
                Err(e) => {
                    let ids: Vec<&str> = batch.iter().map(|p| p.id.as_str()).collect();
                    emit(&format!("# error step={} batch={} {e}", state.step + 1, ids.join(",")))?;
                    return Err(e);
                }
            };
            state.step += 1;
            epoch_cd += losses.cd / per_epoch as f64;
            let rec = StepRecord {
                epoch,
                step: state.step,
                lr,
                losses,
                wall_ms: started.elapsed().as_millis(),
            };
            emit(&rec.to_line())?;
            log.steps.push(rec);
        }
        state.epoch = epoch + 1;
        if run.verbose {
            eprintln!("epoch {:>4}/{} lr {lr:.2e} train cd {epoch_cd:.5}", epoch + 1, cfg.epochs);
        }
        let last = state.epoch == cfg.epochs;
        if cfg.eval_every > 0 && state.epoch % cfg.eval_every == 0 && !last && !test_set.is_empty() {
            let r = evaluate(&gan, test_set, cfg.tau_cm)?;
            let ev = EvalRecord {
                epoch: state.epoch,
                cd_cm: r.cd().avg,
                emd_cm: r.emd().avg,
                fscore: r.fscore().avg,
            };
            emit(&ev.to_line())?;
            log.evals.push(ev);
        }
        if let Some(dir) = run.out {
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                save_state(dir, &format!("epoch_{:04}.dpck", state.epoch), &gan, state)?;
            }
            save_state(dir, CHECKPOINT_FILE, &gan, state)?;
        }
    }

    let report = if test_set.is_empty() {
        None
    } else {
        let r = evaluate(&gan, test_set, cfg.tau_cm)?;
        let ev = EvalRecord {
            epoch: state.epoch,
            cd_cm: r.cd().avg,
            emd_cm: r.emd().avg,
            fscore: r.fscore().avg,
        };
        emit(&ev.to_line())?;
        log.evals.push(ev);
        Some(r)
    };
    Ok(TrainOutcome {
        gan,
        log,
        state,
        report,
    })
}

/// CD, EMD and F-score in cm for each `(id, prediction, truth)`.
pub fn evaluate_predictions(items: &[(String, PointCloud, PointCloud)], tau_cm: f64) -> Result<MetricsReport> {
    let samples = items
        .par_iter()
        .map(|(id, pred, truth)| {
            Ok(SampleMetrics {
                id: id.clone(),
                cd_cm: chamfer(pred, truth),
                emd_cm: emd(pred, truth)?.cost,
                fscore: fscore(pred, truth, tau_cm)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(tau_cm, samples))
}

/// Metrics of the generator's denormalized predictions on `pairs`.
pub fn evaluate(gan: &Gan, pairs: &[TrainPair], tau_cm: f64) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("evaluation split is empty".into()));
    }
    let items = pairs
        .par_iter()
        .map(|p| {
            let pred = p.norm.invert(&predict(&gan.gen_cfg, &gan.gen, &p.input)?)?;
            Ok((p.id.clone(), pred, p.truth_cm.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&items, tau_cm)
}

/// Loads a checkpoint file for the configured networks and evaluates it.
pub fn evaluate_checkpoint(path: &Path, cfg: &TrainConfig, pairs: &[TrainPair], tau_cm: f64) -> Result<MetricsReport> {
    let gan = Gan::from_checkpoint(&cfg.generator, &cfg.discriminator, &Checkpoint::load(path)?)?;
    evaluate(&gan, pairs, tau_cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

fn variant(label: &str, generator: GeneratorConfig, discriminator: &DiscriminatorConfig) -> Variant {
    Variant {
        label: label.to_string(),
        generator,
        discriminator: discriminator.clone(),
    }
}

/// 1-, 2-, 5- and 7-block generators.
pub fn block_variants(disc: &DiscriminatorConfig) -> Vec<Variant> {
    [1, 2, 5, 7]
        .iter()
        .map(|&n| variant(&format!("{n}-Block"), GeneratorConfig::with_blocks(n).expect("preset"), disc))
        .collect()
}

/// The block sweep plus the in-block skip ablation and the 7-block model
/// with three cross-block skips.
pub fn table1_variants(disc: &DiscriminatorConfig) -> Vec<Variant> {
    let mut no_sc = GeneratorConfig::with_blocks(1).expect("preset");
    no_sc.xyz_skip = false;
    let mut rows = vec![variant("1-Block, w/o sc", no_sc, disc)];
    rows.extend(block_variants(disc));
    rows.push(variant("7-Block + 3sc", GeneratorConfig::seven_with_skips(), disc));
    rows
}

/// Mix, max and average pooling in the discriminator, same generator.
pub fn pooling_variants(gen: &GeneratorConfig, disc: &DiscriminatorConfig) -> Vec<Variant> {
    [Pooling::Mix, Pooling::Max, Pooling::Avg]
        .iter()
        .map(|&pooling| Variant {
            label: pooling.label().to_string(),
            generator: gen.clone(),
            discriminator: DiscriminatorConfig {
                pooling,
                ..disc.clone()
            },
        })
        .collect()
}

/// Published CD / EMD / F-score (avg, std each; F-score ×100) for the
/// matching real-radar configurations. Context only.
pub fn reference_row(label: &str) -> Option<[f64; 6]> {
    Some(match label {
        "1-Block, w/o sc" => [10.10, 4.49, 5.01, 4.24, 8.40, 3.40],
        "1-Block" => [9.75, 4.00, 4.56, 3.96, 8.47, 3.44],
        "2-Block" => [9.40, 4.70, 4.83, 4.84, 9.40, 4.22],
        "5-Block" => [7.79, 4.37, 4.40, 4.49, 13.10, 5.97],
        "7-Block" => [7.68, 4.15, 4.53, 4.19, 13.23, 6.34],
        "7-Block + 3sc" => [9.13, 4.55, 4.66, 3.88, 10.70, 4.90],
        "Mix Pooling" => [9.75, 4.00, 4.56, 3.96, 8.47, 3.44],
        "Max Pooling" => [10.52, 4.80, 4.79, 4.33, 7.29, 2.71],
        "Average Pooling" => [10.28, 4.11, 4.60, 4.11, 7.71, 3.18],
        _ => return None,
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub report: MetricsReport,
}

/// Trains every variant from the same seed and data and evaluates each on
/// `test`. Variants run in parallel; each one trains single-threaded.
pub fn ablation_sweep(
    base: &TrainConfig,
    variants: &[Variant],
    train_set: &[TrainPair],
    test_set: &[TrainPair],
) -> Result<Vec<AblationRow>> {
    if test_set.is_empty() {
        return Err(Error::InvalidInput("ablation needs a test split".into()));
    }
    variants
        .par_iter()
        .map(|v| {
            let cfg = TrainConfig {
                generator: v.generator.clone(),
                discriminator: v.discriminator.clone(),
                ..base.clone()
            };
            let out = train(&cfg, train_set, test_set, &TrainRun::default())?;
            Ok(AblationRow {
                label: v.label.clone(),
                report: out.report.expect("test split is nonempty"),
            })
        })
        .collect()
}

/// Table with one row per variant, followed by the published reference
/// values for the same labels.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    if let Some(first) = rows.first() {
        let _ = writeln!(s, "{}", first.report.conventions());
    }
    let _ = writeln!(s, "{}", MetricsReport::table_header());
    for r in rows {
        let _ = writeln!(s, "{}", r.report.table_row(&r.label));
    }
    let refs: Vec<_> = rows.iter().filter_map(|r| reference_row(&r.label).map(|v| (&r.label, v))).collect();
    if !refs.is_empty() {
        let _ = writeln!(s, "# reference values (real radar data, not comparable in absolute terms):");
        for (label, v) in refs {
            let _ = writeln!(
                s,
                "# {label:<16} | {:>8.2} {:>7.2} | {:>8.2} {:>7.2} | {:>8.2} {:>7.2}",
                v[0], v[1], v[2], v[3], v[4], v[5]
            );
        }
    }
    s
}

/// Untrained-model metrics, the baseline for training gains.
pub fn evaluate_untrained(cfg: &TrainConfig, pairs: &[TrainPair]) -> Result<MetricsReport> {
    evaluate(&Gan::new(&cfg.generator, &cfg.discriminator, cfg.seed)?, pairs, cfg.tau_cm)
}

/// Where [`train`] writes its outputs under a run directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            decay_start_epoch: 1,
            generator: GeneratorConfig {
                blocks: vec![vec![8], vec![8]],
                skips: vec![],
                xyz_skip: true,
                head: vec![8],
            },
            discriminator: DiscriminatorConfig {
                mlp: vec![8, 8],
                pooling: Pooling::Mix,
                fc_hidden: 8,
            },
            ..TrainConfig::default()
        }
    }

    fn random_pair(id: &str, n: usize, rng: &mut Rng) -> TrainPair {
        let mut cloud = || {
            PointCloud::new((0..n).map(|_| Point::new(rng.normal(), rng.normal(), rng.normal()) * 50.0).collect())
                .unwrap()
        };
        let p_r = cloud();
        let p_true = cloud();
        TrainPair::new(id, &p_r, &p_true).unwrap()
    }

    #[test]
    fn lr_schedule_anchors() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 2e-4);
        assert_eq!(lr_at(99, &cfg).unwrap(), 2e-4);
        assert_eq!(lr_at(100, &cfg).unwrap(), 2e-4);
        assert_eq!(lr_at(150, &cfg).unwrap(), 1e-4);
        assert!((lr_at(199, &cfg).unwrap() - 2e-6).abs() < 1e-18);
        assert!(lr_at(200, &cfg).is_err());
    }

    #[test]
    fn step_count_per_epoch() {
        assert_eq!(steps_per_epoch(4, 4), 1);
        assert_eq!(steps_per_epoch(5, 4), 2);
        let mut rng = Rng::new(0);
        let data: Vec<TrainPair> = (0..4).map(|i| random_pair(&format!("s{i}"), 16, &mut rng)).collect();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            decay_start_epoch: 1,
            ..tiny_cfg()
        };
        let out = train(&cfg, &data, &[], &TrainRun::default()).unwrap();
        assert_eq!(out.log.steps.len(), 1);
        assert_eq!(out.state, TrainState { epoch: 1, step: 1 });
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = tiny_cfg();
        let mut gan = Gan::new(&cfg.generator, &cfg.discriminator, 1).unwrap();
        let before = (gan.gen.value_bits(), gan.disc.value_bits());
        let pair = random_pair("a", 16, &mut Rng::new(1));
        let l = train_step(&mut gan, &[&pair], &cfg, 0.0).unwrap();
        assert_eq!((gan.gen.value_bits(), gan.disc.value_bits()), before);
        assert!(l.d.is_finite() && l.cd > 0.0 && l.emd > 0.0);
    }

    #[test]
    fn each_update_touches_only_its_network() {
        let cfg = tiny_cfg();
        let mut gan = Gan::new(&cfg.generator, &cfg.discriminator, 2).unwrap();
        let pair = random_pair("a", 16, &mut Rng::new(2));

        // The discriminator half of a step must not move the generator.
        let g0 = gan.gen.value_bits();
        let d0 = gan.disc.value_bits();
        let mut tape = Tape::new();
        let x = tape.constant(cloud_to_tensor(&pair.input)).unwrap();
        let y = generator_forward(&mut tape, x, &gan.gen_cfg, &gan.gen).unwrap();
        let real = tape.constant(cloud_to_tensor(&pair.target)).unwrap();
        let loss = discriminator_objective(&mut tape, x, real, y, &gan.disc_cfg, &gan.disc).unwrap();
        let grads = tape.backward(loss).unwrap();
        gan.disc.accumulate(&grads);
        gan.disc.adam_step(&cfg.adam(1e-3));
        assert_eq!(gan.gen.value_bits(), g0);
        assert_ne!(gan.disc.value_bits(), d0);

        // And the generator half must not move the discriminator.
        let d1 = gan.disc.value_bits();
        let mut tape = Tape::new();
        let x = tape.constant(cloud_to_tensor(&pair.input)).unwrap();
        let y = generator_forward(&mut tape, x, &gan.gen_cfg, &gan.gen).unwrap();
        let (loss, _) =
            generator_objective(&mut tape, x, y, &pair.target, &gan.disc_cfg, &gan.disc, &cfg.weights).unwrap();
        gan.gen.accumulate(&tape.backward(loss).unwrap());
        gan.gen.adam_step(&cfg.adam(1e-3));
        assert_eq!(gan.disc.value_bits(), d1);
        assert_ne!(gan.gen.value_bits(), g0);
    }

    #[test]
    fn training_is_bit_reproducible_and_checkpointed() {
        let mut rng = Rng::new(3);
        let data: Vec<TrainPair> = (0..5).map(|i| random_pair(&format!("s{i}"), 16, &mut rng)).collect();
        let cfg = TrainConfig {
            epochs: 3,
            ..tiny_cfg()
        };
        let a = train(&cfg, &data, &[], &TrainRun::default()).unwrap();
        let b = train(&cfg, &data, &[], &TrainRun::default()).unwrap();
        assert_eq!(a.gan.checkpoint(true).encode(), b.gan.checkpoint(true).encode());
        assert_eq!(a.state.step, 9);

        let dir = tempfile::tempdir().unwrap();
        let run = TrainRun {
            out: Some(dir.path()),
            ..TrainRun::default()
        };
        let saved = train(&cfg, &data, &[], &run).unwrap();
        assert_eq!(saved.gan.checkpoint(true).encode(), a.gan.checkpoint(true).encode());
        let (loaded, st) = load_latest(dir.path(), &cfg).unwrap();
        assert_eq!(st, TrainState { epoch: 3, step: 9 });
        assert_eq!(loaded.checkpoint(true), saved.gan.checkpoint(true));
    }

    #[test]
    fn resume_continues_step_numbering() {
        let mut rng = Rng::new(4);
        let data: Vec<TrainPair> = (0..3).map(|i| random_pair(&format!("s{i}"), 16, &mut rng)).collect();
        let cfg = TrainConfig {
            epochs: 4,
            decay_start_epoch: 2,
            ..tiny_cfg()
        };
        let straight = train(&cfg, &data, &[], &TrainRun::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let run = TrainRun {
            out: Some(dir.path()),
            ..TrainRun::default()
        };
        // Interrupt after two epochs by writing the state a two-epoch prefix would leave.
        let mut gan = Gan::new(&cfg.generator, &cfg.discriminator, cfg.seed).unwrap();
        let mut step = 0;
        for epoch in 0..2 {
            let order = epoch_order(cfg.seed, epoch, data.len());
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &data[i]).collect();
                train_step(&mut gan, &batch, &cfg, lr_at(epoch, &cfg).unwrap()).unwrap();
                step += 1;
            }
        }
        save_state(dir.path(), CHECKPOINT_FILE, &gan, TrainState { epoch: 2, step }).unwrap();
        let resumed = train(&cfg, &data, &[], &TrainRun { resume: true, ..run }).unwrap();
        assert_eq!(resumed.log.steps.first().unwrap().step, step + 1);
        assert_eq!(resumed.state.step, straight.state.step);
        assert_eq!(resumed.gan.checkpoint(true).encode(), straight.gan.checkpoint(true).encode());
    }

    #[test]
    fn ground_truth_predictions_score_perfectly() {
        let mut rng = Rng::new(5);
        let items: Vec<(String, PointCloud, PointCloud)> = (0..3)
            .map(|i| {
                let p = random_pair(&format!("s{i}"), 32, &mut rng);
                (p.id, p.truth_cm.clone(), p.truth_cm)
            })
            .collect();
        let r = evaluate_predictions(&items, 1.0).unwrap();
        assert_eq!(r.cd().avg, 0.0);
        assert_eq!(r.emd().avg, 0.0);
        assert_eq!(r.fscore().avg, 1.0);
    }

    #[test]
    fn evaluation_is_deterministic_and_self_consistent() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(6);
        let data: Vec<TrainPair> = (0..3).map(|i| random_pair(&format!("s{i}"), 24, &mut rng)).collect();
        let gan = Gan::new(&cfg.generator, &cfg.discriminator, 0).unwrap();
        let a = evaluate(&gan, &data, 1.0).unwrap();
        let b = evaluate(&gan, &data, 1.0).unwrap();
        assert_eq!(a, b);
        let mean = a.samples.iter().map(|s| s.cd_cm).sum::<f64>() / 3.0;
        assert_eq!(a.cd().avg, mean);
        assert!(a.samples.iter().all(|s| s.cd_cm.is_finite() && s.emd_cm.is_finite()));
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let cfg = tiny_cfg();
        let gan = Gan::new(&cfg.generator, &cfg.discriminator, 0).unwrap();
        let other = TrainConfig {
            generator: GeneratorConfig::with_blocks(1).unwrap(),
            ..cfg.clone()
        };
        let err = Gan::from_checkpoint(&other.generator, &other.discriminator, &gan.checkpoint(false));
        assert!(matches!(err, Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn state_text_round_trips() {
        let s = TrainState { epoch: 7, step: 123 };
        assert_eq!(TrainState::parse(&s.to_text()).unwrap(), s);
        assert!(TrainState::parse("epoch x\n").is_err());
    }

    #[test]
    fn variant_sets_have_expected_rows() {
        let d = DiscriminatorConfig::default();
        assert_eq!(block_variants(&d).len(), 4);
        let t1 = table1_variants(&d);
        assert_eq!(t1.len(), 6);
        assert!(!t1[0].generator.xyz_skip);
        assert_eq!(t1[5].generator.skips, vec![(1, 7), (2, 6), (3, 5)]);
        let pools = pooling_variants(&GeneratorConfig::with_blocks(1).unwrap(), &d);
        let labels: Vec<&str> = pools.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(labels, ["Mix Pooling", "Max Pooling", "Average Pooling"]);
        assert!(t1.iter().chain(&pools).all(|v| reference_row(&v.label).is_some()));
    }
}
