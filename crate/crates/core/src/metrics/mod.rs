//! Reconstruction losses and evaluation metrics.
//!
//! Chamfer distance here is the symmetric mean of *unsquared* Euclidean
//! nearest-neighbor distances:
//!
//! ```text
//! CD(S1, S2) = mean_{x∈S1} min_{y∈S2} |x - y| + mean_{y∈S2} min_{x∈S1} |y - x|
//! ```
//!
//! Many implementations square the distances; this one does not.

mod emd;
mod kdtree;
mod report;

pub use emd::{
    emd, emd_approx, emd_exact, emd_grad, matching_cost, EpsilonSchedule, Matching, EXACT_MAX_POINTS,
    EXACT_SOLVER_CUTOFF,
};
pub use kdtree::KdTree;
pub use report::{MetricsReport, SampleMetrics, Summary};

use serde::{Deserialize, Serialize};

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

/// Default F-score threshold, in cm.
pub const DEFAULT_TAU_CM: f64 = 1.0;

/// For each point of `from`, index and squared distance of its nearest
/// neighbor in `tree`.
fn nearest_all(from: &[Point], tree: &KdTree<'_>) -> Vec<(usize, f64)> {
    from.iter()
        .map(|p| tree.nearest(p).expect("tree over a nonempty cloud"))
        .collect()
}

fn mean_sqrt(pairs: &[(usize, f64)]) -> f64 {
    let total: f64 = pairs.iter().map(|&(_, d2)| d2.sqrt()).sum();
    total / pairs.len() as f64
}

/// Symmetric Chamfer distance. Clouds may differ in size.
pub fn chamfer(s1: &PointCloud, s2: &PointCloud) -> f64 {
    let t1 = KdTree::new(s1.points());
    let t2 = KdTree::new(s2.points());
    mean_sqrt(&nearest_all(s1.points(), &t2)) + mean_sqrt(&nearest_all(s2.points(), &t1))
}

/// Chamfer distance and its gradient with respect to `pred`, with the
/// nearest-neighbor assignments held fixed (lowest index on ties).
pub fn chamfer_with_grad(pred: &PointCloud, reference: &PointCloud) -> (f64, Vec<Point>) {
    let (p, q) = (pred.points(), reference.points());
    let tp = KdTree::new(p);
    let tq = KdTree::new(q);
    let fwd = nearest_all(p, &tq);
    let bwd = nearest_all(q, &tp);
    let value = mean_sqrt(&fwd) + mean_sqrt(&bwd);

    let inv_p = 1.0 / p.len() as f64;
    let inv_q = 1.0 / q.len() as f64;
    let mut grad = vec![Point::zeros(); p.len()];
    for (i, &(j, d2)) in fwd.iter().enumerate() {
        if d2 > 0.0 {
            grad[i] += (p[i] - q[j]) * (inv_p / d2.sqrt());
        }
    }
    for (j, &(i, d2)) in bwd.iter().enumerate() {
        if d2 > 0.0 {
            grad[i] += (p[i] - q[j]) * (inv_q / d2.sqrt());
        }
    }
    (value, grad)
}

pub fn chamfer_grad(pred: &PointCloud, reference: &PointCloud) -> Vec<Point> {
    chamfer_with_grad(pred, reference).1
}

/// Threshold F-score: harmonic mean of the fraction of predicted points
/// within `tau` of the reference (precision) and the fraction of reference
/// points within `tau` of the prediction (recall). Zero when both are zero.
pub fn fscore(pred: &PointCloud, reference: &PointCloud, tau: f64) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidInput(format!("F-score threshold must be positive, got {tau}")));
    }
    let tp = KdTree::new(pred.points());
    let tr = KdTree::new(reference.points());
    let within = |from: &[Point], tree: &KdTree<'_>| {
        let hits = nearest_all(from, tree).iter().filter(|&&(_, d2)| d2.sqrt() <= tau).count();
        hits as f64 / from.len() as f64
    };
    let precision = within(pred.points(), &tr);
    let recall = within(reference.points(), &tp);
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Weights of the reconstruction terms in the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub chamfer: f64,
    pub emd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            chamfer: 100.0,
            emd: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.chamfer < 0.0 || self.emd < 0.0 || !self.chamfer.is_finite() || !self.emd.is_finite() {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Least-squares GAN losses with targets 1 (real) and 0 (fake):
/// discriminator `½[(s_real − 1)² + s_fake²]`, generator `(s_fake − 1)²`.
pub fn gan_losses(score_real: f64, score_fake: f64) -> (f64, f64) {
    let d = 0.5 * ((score_real - 1.0).powi(2) + score_fake.powi(2));
    let g = (score_fake - 1.0).powi(2);
    (d, g)
}

/// Adversarial term plus weighted Chamfer and EMD terms.
pub fn generator_total_loss(adv: f64, cd: f64, emd: f64, w: &LossWeights) -> f64 {
    adv + w.chamfer * cd + w.emd * emd
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use nalgebra::Rotation3;

    fn cloud(xyz: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_xyz(xyz).unwrap()
    }

    fn random_cloud(n: usize, rng: &mut Rng) -> PointCloud {
        PointCloud::new((0..n).map(|_| Point::new(rng.normal(), rng.normal(), rng.normal())).collect()).unwrap()
    }

    /// Linear-scan Chamfer with the same tie rule and summation order.
    fn brute_chamfer(s1: &PointCloud, s2: &PointCloud) -> f64 {
        let one_way = |a: &[Point], b: &[Point]| {
            let mut total = 0.0;
            for p in a {
                let mut best = f64::INFINITY;
                for q in b {
                    let d = (p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y) + (p.z - q.z) * (p.z - q.z);
                    if d < best {
                        best = d;
                    }
                }
                total += best.sqrt();
            }
            total / a.len() as f64
        };
        one_way(s1.points(), s2.points()) + one_way(s2.points(), s1.points())
    }

    #[test]
    fn chamfer_examples() {
        let s1 = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let s2 = cloud(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(chamfer(&s1, &s1), 0.0);
        assert!((chamfer(&s1, &s2) - 1.0).abs() < 1e-12);
        assert_eq!(chamfer(&s1, &s2), chamfer(&s2, &s1));
    }

    #[test]
    fn chamfer_equals_brute_force_bitwise() {
        let mut rng = Rng::new(0);
        for _ in 0..50 {
            let a = random_cloud(1 + rng.index(120), &mut rng);
            let b = random_cloud(1 + rng.index(120), &mut rng);
            assert_eq!(chamfer(&a, &b).to_bits(), brute_chamfer(&a, &b).to_bits());
        }
    }

    #[test]
    fn chamfer_grad_examples() {
        let s = cloud(&[[0.0, 1.0, 2.0], [3.0, 1.0, 0.0]]);
        assert!(chamfer_grad(&s, &s).iter().all(|g| *g == Point::zeros()));
        // One point each: both directions contribute (p - q)/|p - q|.
        let p = cloud(&[[3.0, 0.0, 4.0]]);
        let q = cloud(&[[0.0, 0.0, 0.0]]);
        let g = chamfer_grad(&p, &q);
        assert!((g[0] - Point::new(0.6, 0.0, 0.8) * 2.0).norm() < 1e-15);
    }

    #[test]
    fn chamfer_grad_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let p = random_cloud(32, &mut rng);
        let q = random_cloud(32, &mut rng);
        let g = chamfer_grad(&p, &q);
        let eps = 1e-5;
        for i in 0..32 {
            for k in 0..3 {
                let at = |delta: f64| {
                    let mut pts = p.points().to_vec();
                    pts[i][k] += delta;
                    chamfer(&PointCloud::new(pts).unwrap(), &q)
                };
                let num = (at(eps) - at(-eps)) / (2.0 * eps);
                let rel = (num - g[i][k]).abs() / num.abs().max(g[i][k].abs()).max(1e-3);
                assert!(rel < 1e-6, "point {i} axis {k}: rel {rel}");
            }
        }
    }

    #[test]
    fn fscore_examples() {
        let s = cloud(&[[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]]);
        assert_eq!(fscore(&s, &s, 0.01).unwrap(), 1.0);
        let far = cloud(&[[100.0, 0.0, 0.0]]);
        assert_eq!(fscore(&s, &far, 1.0).unwrap(), 0.0);
        let pred = cloud(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let reference = cloud(&[[0.0, 0.0, 0.0]]);
        assert!((fscore(&pred, &reference, 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(fscore(&s, &s, 0.0).is_err());
        assert!(fscore(&s, &s, -1.0).is_err());
    }

    #[test]
    fn metrics_invariant_under_rotation_and_permutation() {
        let mut rng = Rng::new(2);
        for _ in 0..10 {
            let a = random_cloud(40, &mut rng);
            let b = random_cloud(40, &mut rng);
            let r = Rotation3::from_euler_angles(rng.range(0.0, 6.3), rng.range(0.0, 6.3), rng.range(0.0, 6.3));
            let ra = a.map(|p| r * p).unwrap();
            let rb = b.map(|p| r * p).unwrap();
            let (cd, cdr) = (chamfer(&a, &b), chamfer(&ra, &rb));
            assert!((cd - cdr).abs() <= 1e-9 * cd);
            let (e, er) = (emd_exact(&a, &b).unwrap().cost, emd_exact(&ra, &rb).unwrap().cost);
            assert!((e - er).abs() <= 1e-9 * e);

            let mut order: Vec<usize> = (0..40).collect();
            rng.shuffle(&mut order);
            let pb = b.permuted(&order);
            assert!((chamfer(&a, &pb) - cd).abs() <= 1e-12 * cd);
            assert!((emd_exact(&a, &pb).unwrap().cost - e).abs() <= 1e-12 * e);
            // EMD dominates the one-sided nearest-neighbor term.
            let one_sided: f64 = a
                .points()
                .iter()
                .map(|p| b.points().iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / 40.0;
            assert!(e >= one_sided - 1e-12);
        }
    }

    #[test]
    fn gan_loss_examples() {
        assert_eq!(gan_losses(1.0, 0.0).0, 0.0);
        assert_eq!(gan_losses(0.3, 1.0).1, 0.0);
        let (d, g) = gan_losses(0.5, 0.5);
        assert!((d - 0.25).abs() < 1e-15 && (g - 0.25).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(generator_total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert!((generator_total_loss(0.25, 0.01, 0.02, &w) - 1.27).abs() < 1e-12);
        let no_emd = LossWeights { emd: 0.0, ..w };
        assert_eq!(generator_total_loss(0.25, 0.01, 5.0, &no_emd), 0.25 + 100.0 * 0.01);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::rng::Rng;

        proptest! {
            #[test]
            fn fscore_monotone_in_tau(seed in 0u64..1000, t1 in 0.01f64..3.0, dt in 0.0f64..3.0) {
                let mut rng = Rng::new(seed);
                let a = random_cloud(30, &mut rng);
                let b = random_cloud(25, &mut rng);
                prop_assert!(fscore(&a, &b, t1).unwrap() <= fscore(&a, &b, t1 + dt).unwrap());
            }
        }
    }
}
