//! Earth Mover's Distance between equal-size clouds: the minimum over
//! bijections of the mean matched Euclidean distance.
//!
//! [`emd_exact`] solves the assignment with the Hungarian algorithm in
//! O(n³). [`emd_approx`] runs a forward auction with ε-scaling and is used
//! for larger clouds.

use crate::cloud::{dist2, Point, PointCloud};
use crate::error::{Error, Result};

/// Largest n accepted by [`emd_exact`].
pub const EXACT_MAX_POINTS: usize = 2048;

/// Above this size [`emd`] switches from the exact to the auction solver.
pub const EXACT_SOLVER_CUTOFF: usize = 256;

/// A bijection from the points of one cloud onto another, with its mean
/// matched distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `assignment[i]` is the index in the second cloud matched to point i
    /// of the first.
    pub assignment: Vec<usize>,
    pub cost: f64,
}

impl Matching {
    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.assignment.len()];
        for &j in &self.assignment {
            if j >= seen.len() || seen[j] {
                return false;
            }
            seen[j] = true;
        }
        true
    }
}

/// Mean distance of `assignment` between the clouds.
pub fn matching_cost(s1: &[Point], s2: &[Point], assignment: &[usize]) -> f64 {
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| dist2(&s1[i], &s2[j]).sqrt())
        .sum();
    total / assignment.len() as f64
}

fn check_sizes(s1: &PointCloud, s2: &PointCloud) -> Result<usize> {
    if s1.len() != s2.len() {
        return Err(Error::SizeMismatch {
            left: s1.len(),
            right: s2.len(),
        });
    }
    Ok(s1.len())
}

fn cost_matrix(s1: &[Point], s2: &[Point]) -> Vec<f64> {
    let n = s1.len();
    let mut c = Vec::with_capacity(n * n);
    for p in s1 {
        for q in s2 {
            c.push(dist2(p, q).sqrt());
        }
    }
    c
}

/// Optimal assignment by the Hungarian algorithm (shortest augmenting paths
/// with row and column potentials).
pub fn emd_exact(s1: &PointCloud, s2: &PointCloud) -> Result<Matching> {
    let n = check_sizes(s1, s2)?;
    if n > EXACT_MAX_POINTS {
        return Err(Error::TooLarge {
            n,
            max: EXACT_MAX_POINTS,
        });
    }
    let cost = cost_matrix(s1.points(), s2.points());
    let assignment = hungarian(&cost, n);
    Ok(Matching {
        cost: matching_cost(s1.points(), s2.points(), &assignment),
        assignment,
    })
}

/// Min-cost perfect assignment on a dense row-major n×n matrix. Returns the
/// column assigned to each row.
pub(crate) fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// ε-scaling parameters for [`emd_approx`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    /// First ε is the largest pairwise cost divided by this.
    pub initial_divisor: f64,
    /// ε is divided by this after every phase.
    pub factor: f64,
    /// Phases stop once ε falls below this.
    pub floor: f64,
    /// Phases also stop once the certified gap `n·ε` is at most this
    /// fraction of the current total cost.
    pub rel_gap: f64,
    /// Bid budget per phase, as a multiple of n².
    pub max_bids_factor: usize,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            initial_divisor: 8.0,
            factor: 4.0,
            floor: 1e-9,
            rel_gap: 1e-3,
            max_bids_factor: 64,
        }
    }
}

/// Approximate assignment by a Gauss-Seidel forward auction with ε-scaling.
/// A completed phase at ε is within `n·ε` of the optimal total cost.
pub fn emd_approx(s1: &PointCloud, s2: &PointCloud, schedule: &EpsilonSchedule) -> Result<Matching> {
    let n = check_sizes(s1, s2)?;
    let cost = cost_matrix(s1.points(), s2.points());
    let max_cost = cost.iter().copied().fold(0.0, f64::max);
    let finish = |assignment: Vec<usize>| Matching {
        cost: matching_cost(s1.points(), s2.points(), &assignment),
        assignment,
    };
    if max_cost == 0.0 {
        return Ok(finish((0..n).collect()));
    }

    let mut prices = vec![0.0f64; n];
    let mut best: Option<Vec<usize>> = None;
    let mut eps = max_cost / schedule.initial_divisor;
    let budget = schedule.max_bids_factor.saturating_mul(n * n).max(1);
    loop {
        match auction_phase(&cost, n, &mut prices, eps, budget) {
            Some(assignment) => {
                let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
                best = Some(assignment);
                if n as f64 * eps <= schedule.rel_gap * total {
                    break;
                }
            }
            None => {
                let best = best.unwrap_or_else(|| greedy_assignment(&cost, n));
                return Err(Error::ApproxFailure {
                    best: Box::new(finish(best)),
                });
            }
        }
        eps /= schedule.factor;
        if eps < schedule.floor {
            break;
        }
    }
    Ok(finish(best.expect("at least one phase completed")))
}

/// One auction phase from the given prices. Returns `None` if the bid
/// budget runs out before every person is assigned.
fn auction_phase(cost: &[f64], n: usize, prices: &mut [f64], eps: f64, budget: usize) -> Option<Vec<usize>> {
    const NONE: usize = usize::MAX;
    let mut person_of = vec![NONE; n];
    let mut object_of = vec![NONE; n];
    // Unassigned persons, processed lowest index first.
    let mut queue: std::collections::VecDeque<usize> = (0..n).collect();
    let mut bids = 0usize;
    while let Some(i) = queue.pop_front() {
        bids += 1;
        if bids > budget {
            return None;
        }
        let row = &cost[i * n..(i + 1) * n];
        // Value of object j to person i is -cost - price.
        let mut best_j = NONE;
        let mut best_v = f64::NEG_INFINITY;
        let mut second_v = f64::NEG_INFINITY;
        for j in 0..n {
            let v = -row[j] - prices[j];
            if v > best_v {
                second_v = best_v;
                best_v = v;
                best_j = j;
            } else if v > second_v {
                second_v = v;
            }
        }
        let increment = if second_v.is_finite() { best_v - second_v + eps } else { eps };
        prices[best_j] += increment;
        let prev = person_of[best_j];
        if prev != NONE {
            object_of[prev] = NONE;
            queue.push_back(prev);
        }
        person_of[best_j] = i;
        object_of[i] = best_j;
    }
    Some(object_of)
}

fn greedy_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let mut taken = vec![false; n];
    (0..n)
        .map(|i| {
            let j = (0..n)
                .filter(|&j| !taken[j])
                .min_by(|&a, &b| cost[i * n + a].total_cmp(&cost[i * n + b]))
                .expect("a free column remains");
            taken[j] = true;
            j
        })
        .collect()
}

/// Exact solver up to [`EXACT_SOLVER_CUTOFF`] points, auction above.
pub fn emd(s1: &PointCloud, s2: &PointCloud) -> Result<Matching> {
    if s1.len() <= EXACT_SOLVER_CUTOFF {
        emd_exact(s1, s2)
    } else {
        match emd_approx(s1, s2, &EpsilonSchedule::default()) {
            Err(Error::ApproxFailure { best }) => Ok(*best),
            other => other,
        }
    }
}

/// Gradient of the mean matched distance with respect to `pred`, holding
/// the matching fixed. Coincident pairs contribute zero.
pub fn emd_grad(pred: &PointCloud, reference: &PointCloud, matching: &Matching) -> Result<Vec<Point>> {
    let n = check_sizes(pred, reference)?;
    if matching.assignment.len() != n || !matching.is_bijection() {
        return Err(Error::InvalidInput("matching is not a bijection of the right size".into()));
    }
    let inv_n = 1.0 / n as f64;
    Ok(pred
        .points()
        .iter()
        .zip(&matching.assignment)
        .map(|(p, &j)| {
            let d = p - reference.points()[j];
            let len = d.norm();
            if len > 0.0 {
                d * (inv_n / len)
            } else {
                Point::zeros()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn cloud(xyz: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_xyz(xyz).unwrap()
    }

    fn random_cloud(n: usize, rng: &mut Rng) -> PointCloud {
        PointCloud::new((0..n).map(|_| Point::new(rng.uniform(), rng.uniform(), rng.uniform())).collect()).unwrap()
    }

    /// Minimum mean cost over every permutation (Heap's algorithm).
    fn brute_force(s1: &PointCloud, s2: &PointCloud) -> f64 {
        let n = s1.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut c = vec![0usize; n];
        let mut best = matching_cost(s1.points(), s2.points(), &perm);
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                best = best.min(matching_cost(s1.points(), s2.points(), &perm));
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        best
    }

    #[test]
    fn identical_clouds_cost_zero() {
        let mut rng = Rng::new(0);
        let a = random_cloud(10, &mut rng);
        let order = [3, 1, 4, 0, 9, 2, 6, 5, 8, 7];
        let b = a.permuted(&order);
        let m = emd_exact(&a, &b).unwrap();
        assert_eq!(m.cost, 0.0);
        for (i, &j) in m.assignment.iter().enumerate() {
            assert_eq!(a.points()[i], b.points()[j]);
        }
        assert_eq!(emd_approx(&a, &b, &EpsilonSchedule::default()).unwrap().cost, 0.0);
    }

    #[test]
    fn two_point_example() {
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]]);
        let m = emd_exact(&a, &b).unwrap();
        assert_eq!(m.assignment, vec![0, 1]);
        assert!((m.cost - 1.0).abs() < 1e-12);
        let crossed = matching_cost(a.points(), b.points(), &[1, 0]);
        assert!((crossed - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_matches_enumeration() {
        let mut rng = Rng::new(1);
        for n in 1..=7 {
            for _ in 0..5 {
                let a = random_cloud(n, &mut rng);
                let b = random_cloud(n, &mut rng);
                let m = emd_exact(&a, &b).unwrap();
                assert!(m.is_bijection());
                assert!((m.cost - brute_force(&a, &b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn approx_close_to_exact() {
        let mut rng = Rng::new(2);
        for _ in 0..10 {
            let a = random_cloud(64, &mut rng);
            let b = random_cloud(64, &mut rng);
            let exact = emd_exact(&a, &b).unwrap();
            let approx = emd_approx(&a, &b, &EpsilonSchedule::default()).unwrap();
            assert!(approx.is_bijection());
            assert!(approx.cost <= exact.cost * 1.02 + 1e-12, "{} vs {}", approx.cost, exact.cost);
            assert!(approx.cost >= exact.cost - 1e-12);
        }
    }

    #[test]
    fn translation_costs_offset_norm() {
        let mut rng = Rng::new(3);
        let a = random_cloud(100, &mut rng);
        let t = Point::new(0.05, -0.02, 0.03);
        let b = a.map(|p| p + t).unwrap();
        let approx = emd_approx(&a, &b, &EpsilonSchedule::default()).unwrap();
        assert!((approx.cost - t.norm()).abs() <= 0.01 * t.norm());
    }

    #[test]
    fn size_guards() {
        let a = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[0.0; 3]]);
        assert!(matches!(emd_exact(&a, &b), Err(Error::SizeMismatch { left: 2, right: 1 })));
        assert!(matches!(
            emd_approx(&a, &b, &EpsilonSchedule::default()),
            Err(Error::SizeMismatch { .. })
        ));
        let big = PointCloud::new(vec![Point::zeros(); EXACT_MAX_POINTS + 1]).unwrap();
        assert!(matches!(emd_exact(&big, &big), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn exhausted_budget_reports_best_bijection() {
        let mut rng = Rng::new(4);
        let a = random_cloud(30, &mut rng);
        let b = random_cloud(30, &mut rng);
        let tight = EpsilonSchedule { max_bids_factor: 0, ..Default::default() };
        match emd_approx(&a, &b, &tight) {
            Err(Error::ApproxFailure { best }) => assert!(best.is_bijection()),
            other => panic!("expected ApproxFailure, got {other:?}"),
        }
    }

    #[test]
    fn grad_examples() {
        let a = cloud(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let ident = Matching { assignment: vec![0, 1], cost: 0.0 };
        assert!(emd_grad(&a, &a, &ident).unwrap().iter().all(|g| *g == Point::zeros()));

        let p = cloud(&[[1.0, 2.0, 2.0]]);
        let q = cloud(&[[0.0, 0.0, 0.0]]);
        let m = emd_exact(&p, &q).unwrap();
        let g = emd_grad(&p, &q, &m).unwrap();
        assert!((g[0] - Point::new(1.0, 2.0, 2.0) / 3.0).norm() < 1e-15);
    }

    #[test]
    fn grad_matches_finite_differences_with_frozen_matching() {
        let mut rng = Rng::new(5);
        let p = random_cloud(16, &mut rng);
        let q = random_cloud(16, &mut rng);
        let m = emd_exact(&p, &q).unwrap();
        let g = emd_grad(&p, &q, &m).unwrap();
        let eps = 1e-5;
        for i in 0..16 {
            for k in 0..3 {
                let shifted = |delta: f64| {
                    let mut pts = p.points().to_vec();
                    pts[i][k] += delta;
                    let moved = PointCloud::new(pts).unwrap();
                    // Matching must stay optimal in this neighborhood.
                    let re = emd_exact(&moved, &q).unwrap();
                    assert_eq!(re.assignment, m.assignment);
                    re.cost
                };
                let num = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
                let rel = (num - g[i][k]).abs() / num.abs().max(g[i][k].abs()).max(1e-3);
                assert!(rel < 1e-6, "rel {rel}");
            }
        }
    }
}
