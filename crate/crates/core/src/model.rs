//! DeepPoint-block generator and two-stream discriminator.
//!
//! A DeepPoint block maps an n×d feature matrix to n×2(m+3):
//!
//! ```text
//! h  = shared_mlp(F_in)            n×m
//! f  = [h | xyz]                   n×(m+3)   point features
//! g  = maxpool(f)                  1×(m+3)   global feature
//! F' = [f | broadcast(g, n)]       n×2(m+3)
//! ```
//!
//! `xyz` is always the original input cloud. The generator chains blocks,
//! optionally concatenating earlier blocks' point features onto later
//! blocks' inputs, and projects to 3 coordinates with a small linear-output
//! MLP. Weights are stored as `in×out` so a layer computes `x·W + b`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{shared_mlp, Activation, Layer, ParamStore, Tape, Tensor, Var, LEAKY_SLOPE};
use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::rng::Rng;

const HIDDEN: Activation = Activation::LeakyRelu(LEAKY_SLOPE);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Shared-MLP layer widths of each block; the last entry is the block's m.
    pub blocks: Vec<Vec<usize>>,
    /// Cross-block skips as 1-based `(source, destination)` block pairs.
    pub skips: Vec<(usize, usize)>,
    /// Concatenate the input coordinates inside each block. Disabling this
    /// gives the "w/o sc" ablation.
    pub xyz_skip: bool,
    /// Hidden widths of the final projection to 3 coordinates.
    pub head: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::with_blocks(5).expect("5-block preset")
    }
}

impl GeneratorConfig {
    /// Width presets for the 1-, 2-, 5- and 7-block generators.
    pub fn with_blocks(count: usize) -> Result<Self> {
        let widths: &[usize] = match count {
            1 => &[128],
            2 => &[128, 256],
            5 => &[64, 128, 256, 128, 64],
            7 => &[64, 128, 256, 512, 256, 128, 64],
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "no width preset for {count} blocks (use 1, 2, 5 or 7, or list widths explicitly)"
                )))
            }
        };
        Ok(Self {
            blocks: widths.iter().map(|&w| vec![w]).collect(),
            skips: Vec::new(),
            xyz_skip: true,
            head: vec![64],
        })
    }

    /// The 7-block generator with skips (1,7), (2,6), (3,5).
    pub fn seven_with_skips() -> Self {
        Self {
            skips: vec![(1, 7), (2, 6), (3, 5)],
            ..Self::with_blocks(7).expect("7-block preset")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("generator needs at least one block".into()));
        }
        if self.blocks.iter().any(|b| b.is_empty() || b.contains(&0)) || self.head.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive and every block needs a layer".into()));
        }
        let nb = self.blocks.len();
        for &(s, d) in &self.skips {
            if s == 0 || d > nb || s >= d {
                return Err(Error::InvalidConfig(format!(
                    "skip ({s},{d}) must satisfy 1 <= source < destination <= {nb}"
                )));
            }
        }
        Ok(())
    }

    /// Width of block `b`'s point features f (0-based).
    pub fn point_feature_width(&self, b: usize) -> usize {
        self.blocks[b].last().copied().unwrap_or(0) + if self.xyz_skip { 3 } else { 0 }
    }

    /// Input width of block `b` (0-based), including skip concatenations.
    pub fn block_input_width(&self, b: usize) -> usize {
        let base = if b == 0 { 3 } else { 2 * self.point_feature_width(b - 1) };
        base + self
            .skips
            .iter()
            .filter(|&&(_, d)| d == b + 1)
            .map(|&(s, _)| self.point_feature_width(s - 1))
            .sum::<usize>()
    }

    pub fn output_width(&self) -> usize {
        2 * self.point_feature_width(self.blocks.len() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Avg,
    /// Max and average pooled features concatenated.
    Mix,
}

impl Pooling {
    pub fn label(self) -> &'static str {
        match self {
            Pooling::Max => "Max Pooling",
            Pooling::Avg => "Average Pooling",
            Pooling::Mix => "Mix Pooling",
        }
    }

    pub fn width_factor(self) -> usize {
        match self {
            Pooling::Mix => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Shared per-point MLP widths, applied to both streams with the same weights.
    pub mlp: Vec<usize>,
    pub pooling: Pooling,
    /// Width of the hidden fully connected layer.
    pub fc_hidden: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            mlp: vec![64, 128, 256],
            pooling: Pooling::Mix,
            fc_hidden: 256,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mlp.is_empty() || self.mlp.contains(&0) || self.fc_hidden == 0 {
            return Err(Error::InvalidConfig("discriminator widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of one stream's pooled global feature.
    pub fn global_width(&self) -> usize {
        self.mlp.last().copied().unwrap_or(0) * self.pooling.width_factor()
    }
}

fn add_layer(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
    store.insert_glorot(format!("{prefix}.w"), fan_in, fan_out, rng)?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(1, fan_out))
}

fn block_prefix(b: usize, layer: usize) -> String {
    format!("block{}.mlp{layer}", b + 1)
}

pub fn init_generator(cfg: &GeneratorConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (b, widths) in cfg.blocks.iter().enumerate() {
        let mut fan_in = cfg.block_input_width(b);
        for (l, &w) in widths.iter().enumerate() {
            add_layer(&mut store, &block_prefix(b, l), fan_in, w, rng)?;
            fan_in = w;
        }
    }
    let mut fan_in = cfg.output_width();
    for (l, &w) in cfg.head.iter().chain(std::iter::once(&3)).enumerate() {
        add_layer(&mut store, &format!("head{l}"), fan_in, w, rng)?;
        fan_in = w;
    }
    Ok(store)
}

pub fn init_discriminator(cfg: &DiscriminatorConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut fan_in = 3;
    for (l, &w) in cfg.mlp.iter().enumerate() {
        add_layer(&mut store, &format!("mlp{l}"), fan_in, w, rng)?;
        fan_in = w;
    }
    add_layer(&mut store, "fc0", 2 * cfg.global_width(), cfg.fc_hidden, rng)?;
    add_layer(&mut store, "fc1", cfg.fc_hidden, 1, rng)?;
    Ok(store)
}

/// Generator and discriminator parameters for one experiment.
pub fn init_model(
    gen: &GeneratorConfig,
    disc: &DiscriminatorConfig,
    rng: &mut Rng,
) -> Result<(ParamStore, ParamStore)> {
    let g = init_generator(gen, &mut rng.child(1))?;
    let d = init_discriminator(disc, &mut rng.child(2))?;
    Ok((g, d))
}

fn layers(tape: &mut Tape, store: &ParamStore, prefixes: impl Iterator<Item = String>) -> Result<Vec<Layer>> {
    prefixes.map(|p| tape.layer(store, &p)).collect()
}

/// Point features f and block output F' of one DeepPoint block.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub features: Var,
    pub output: Var,
}

/// One DeepPoint block whose shared MLP is `mlp` (every layer activated).
pub fn deeppoint_block(tape: &mut Tape, input: Var, xyz: Var, mlp: &[Layer], xyz_skip: bool) -> Result<BlockOutput> {
    let (n, _) = tape.shape(input);
    if tape.shape(xyz) != (n, 3) {
        return Err(Error::shape(format!("block xyz {:?} for {n} input rows", tape.shape(xyz))));
    }
    let h = shared_mlp(tape, input, mlp, HIDDEN, HIDDEN)?;
    let f = if xyz_skip { tape.concat_cols(h, xyz)? } else { h };
    let g = tape.max_pool_points(f)?;
    let gb = tape.broadcast_rows(g, n)?;
    let output = tape.concat_cols(f, gb)?;
    Ok(BlockOutput { features: f, output })
}

/// Records the generator on `tape` for an n×3 input, returning the n×3 output.
pub fn generator_forward(tape: &mut Tape, xyz: Var, cfg: &GeneratorConfig, store: &ParamStore) -> Result<Var> {
    if tape.shape(xyz).1 != 3 {
        return Err(Error::shape(format!("generator input {:?}, expected n×3", tape.shape(xyz))));
    }
    let mut features: Vec<Var> = Vec::with_capacity(cfg.blocks.len());
    let mut x = xyz;
    for (b, widths) in cfg.blocks.iter().enumerate() {
        for &(s, _) in cfg.skips.iter().filter(|&&(_, d)| d == b + 1) {
            x = tape.concat_cols(x, features[s - 1])?;
        }
        let mlp = layers(tape, store, (0..widths.len()).map(|l| block_prefix(b, l)))?;
        let out = deeppoint_block(tape, x, xyz, &mlp, cfg.xyz_skip)?;
        features.push(out.features);
        x = out.output;
    }
    let head = layers(tape, store, (0..=cfg.head.len()).map(|l| format!("head{l}")))?;
    shared_mlp(tape, x, &head, HIDDEN, Activation::Linear)
}

fn pool(tape: &mut Tape, x: Var, mode: Pooling) -> Result<Var> {
    match mode {
        Pooling::Max => tape.max_pool_points(x),
        Pooling::Avg => tape.mean_pool_points(x),
        Pooling::Mix => {
            let m = tape.max_pool_points(x)?;
            let a = tape.mean_pool_points(x)?;
            tape.concat_cols(m, a)
        }
    }
}

/// Records the discriminator score (1×1, unbounded) of a candidate cloud
/// conditioned on the coarse cloud. Both are n×3 in the same frame.
pub fn discriminator_forward(
    tape: &mut Tape,
    cond: Var,
    cand: Var,
    cfg: &DiscriminatorConfig,
    store: &ParamStore,
) -> Result<Var> {
    if tape.shape(cond).1 != 3 || tape.shape(cand).1 != 3 {
        return Err(Error::shape("discriminator streams must be n×3"));
    }
    let mlp = layers(tape, store, (0..cfg.mlp.len()).map(|l| format!("mlp{l}")))?;
    let mut pooled = Vec::with_capacity(2);
    for stream in [cond, cand] {
        let h = shared_mlp(tape, stream, &mlp, HIDDEN, HIDDEN)?;
        pooled.push(pool(tape, h, cfg.pooling)?);
    }
    let joint = tape.concat_cols(pooled[0], pooled[1])?;
    let fc0 = tape.layer(store, "fc0")?;
    let fc1 = tape.layer(store, "fc1")?;
    let h = tape.affine(joint, fc0, HIDDEN)?;
    tape.affine(h, fc1, Activation::Linear)
}

pub fn cloud_to_tensor(cloud: &PointCloud) -> Tensor {
    Tensor::new(cloud.len(), 3, cloud.to_flat()).expect("n×3 layout")
}

pub fn tensor_to_cloud(t: &Tensor) -> Result<PointCloud> {
    if t.cols() != 3 {
        return Err(Error::shape(format!("expected n×3 tensor, got {:?}", t.shape())));
    }
    PointCloud::from_flat(t.data())
}

/// Generator output for a normalized cloud, off any training tape.
pub fn predict(cfg: &GeneratorConfig, store: &ParamStore, input: &PointCloud) -> Result<PointCloud> {
    let mut tape = Tape::new();
    let x = tape.constant(cloud_to_tensor(input))?;
    let y = generator_forward(&mut tape, x, cfg, store)?;
    tensor_to_cloud(tape.value(y))
}

pub fn score(cfg: &DiscriminatorConfig, store: &ParamStore, cond: &PointCloud, cand: &PointCloud) -> Result<f64> {
    let mut tape = Tape::new();
    let c = tape.constant(cloud_to_tensor(cond))?;
    let x = tape.constant(cloud_to_tensor(cand))?;
    let s = discriminator_forward(&mut tape, c, x, cfg, store)?;
    tape.value(s).item()
}

/// Points as rows, in order; convenient for tests and tools.
pub fn rows(t: &Tensor) -> Vec<Point> {
    (0..t.rows()).map(|r| Point::from_row_slice(t.row(r))).collect()
}
