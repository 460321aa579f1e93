//! Helpers shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use deeppoint::autodiff::{ParamStore, Tape, Tensor, Var};
use deeppoint::cloud::{Point, PointCloud};
use deeppoint::metrics::LossWeights;
use deeppoint::model::{
    cloud_to_tensor, generator_forward, init_model, DiscriminatorConfig, GeneratorConfig, Pooling,
};
use deeppoint::rng::Rng;
use deeppoint::trainer::generator_objective;

pub fn random_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap()
}

/// Entries in ±[0.05, 1], away from activation kinks.
pub fn kink_free_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.range(0.05, 1.0);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

pub fn random_cloud(n: usize, scale: f64, rng: &mut Rng) -> PointCloud {
    PointCloud::new((0..n).map(|_| Point::new(rng.normal(), rng.normal(), rng.normal()) * scale).collect()).unwrap()
}

fn store_of(inputs: &[Tensor]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, t) in inputs.iter().enumerate() {
        s.insert(format!("x{i}"), t.clone()).unwrap();
    }
    s
}

pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

fn eval_build(store: &ParamStore, n: usize, f: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = (0..n).map(|i| tape.param(store, &format!("x{i}")).unwrap()).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item().unwrap()
}

/// Largest relative error between tape gradients and central differences.
/// The denominator is floored at 1e-3 so zero gradients compare absolutely.
pub fn grad_check(inputs: &[Tensor], eps: f64, f: &Build<'_>) -> f64 {
    let n = inputs.len();
    let mut store = store_of(inputs);
    let mut tape = Tape::new();
    let vars: Vec<Var> = (0..n).map(|i| tape.param(&store, &format!("x{i}")).unwrap()).collect();
    let out = f(&mut tape, &vars);
    store.accumulate(&tape.backward(out).unwrap());

    let mut worst: f64 = 0.0;
    for i in 0..n {
        for k in 0..inputs[i].len() {
            let mut plus = store_of(inputs);
            plus.params_mut()[i].value.data_mut()[k] += eps;
            let mut minus = store_of(inputs);
            minus.params_mut()[i].value.data_mut()[k] -= eps;
            let numeric = (eval_build(&plus, n, f) - eval_build(&minus, n, f)) / (2.0 * eps);
            let analytic = store.params()[i].grad.data()[k];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

/// Smooth scalar readout `sum((x·R)²)` with a fixed random `R`.
pub fn readout(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let d = tape.shape(x).1;
    let r = tape.constant(random_tensor(d, 2, &mut Rng::new(seed))).unwrap();
    let y = tape.matmul(x, r).unwrap();
    let y = tape.square(y).unwrap();
    tape.sum(y).unwrap()
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        blocks: vec![vec![6], vec![5, 4]],
        skips: vec![(1, 2)],
        xyz_skip: true,
        head: vec![5],
    }
}

pub fn tiny_discriminator() -> DiscriminatorConfig {
    DiscriminatorConfig {
        mlp: vec![6, 5],
        pooling: Pooling::Mix,
        fc_hidden: 4,
    }
}

fn objective_value(
    gen_cfg: &GeneratorConfig,
    gen: &ParamStore,
    disc_cfg: &DiscriminatorConfig,
    disc: &ParamStore,
    input: &PointCloud,
    target: &PointCloud,
) -> (f64, deeppoint::autodiff::Gradients) {
    let mut tape = Tape::new();
    let x = tape.constant(cloud_to_tensor(input)).unwrap();
    let y = generator_forward(&mut tape, x, gen_cfg, gen).unwrap();
    let (loss, _) = generator_objective(&mut tape, x, y, target, disc_cfg, disc, &LossWeights::default()).unwrap();
    let v = tape.value(loss).item().unwrap();
    (v, tape.backward(loss).unwrap())
}

/// Central-difference check of the full generator objective (adversarial
/// term plus weighted Chamfer and EMD) against the tape, over every
/// generator parameter. Returns the largest relative error.
pub fn generator_objective_grad_error(n: usize, seed: u64) -> f64 {
    let gen_cfg = tiny_generator();
    let disc_cfg = tiny_discriminator();
    let mut rng = Rng::new(seed);
    let (mut gen, disc) = init_model(&gen_cfg, &disc_cfg, &mut rng).unwrap();
    let input = random_cloud(n, 0.5, &mut rng);
    let target = random_cloud(n, 0.5, &mut rng);

    let (_, grads) = objective_value(&gen_cfg, &gen, &disc_cfg, &disc, &input, &target);
    gen.accumulate(&grads);

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for p in 0..gen.params().len() {
        for k in 0..gen.params()[p].value.len() {
            let mut plus = gen.clone();
            plus.params_mut()[p].value.data_mut()[k] += eps;
            let mut minus = gen.clone();
            minus.params_mut()[p].value.data_mut()[k] -= eps;
            let fp = objective_value(&gen_cfg, &plus, &disc_cfg, &disc, &input, &target).0;
            let fm = objective_value(&gen_cfg, &minus, &disc_cfg, &disc, &input, &target).0;
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = gen.params()[p].grad.data()[k];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

/// Chamfer distance by exhaustive nearest-neighbor search.
pub fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let one_way = |s: &PointCloud, t: &PointCloud| {
        s.points()
            .iter()
            .map(|p| {
                let d2 = t.points().iter().map(|q| {
                    let (dx, dy, dz) = (p.x - q.x, p.y - q.y, p.z - q.z);
                    dx * dx + dy * dy + dz * dz
                });
                d2.fold(f64::INFINITY, f64::min).sqrt()
            })
            .sum::<f64>()
            / s.len() as f64
    };
    one_way(a, b) + one_way(b, a)
}

/// Minimal mean matched distance, enumerating all n! bijections.
pub fn brute_emd(a: &PointCloud, b: &PointCloud) -> f64 {
    fn search(i: usize, a: &[Point], b: &[Point], used: &mut [bool], acc: f64, best: &mut f64) {
        if i == a.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                search(i + 1, a, b, used, acc + (a[i] - b[j]).norm(), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    search(0, a.points(), b.points(), &mut vec![false; b.len()], 0.0, &mut best);
    best / a.len() as f64
}
