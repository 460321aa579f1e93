//! Point clouds, bounding boxes, camera viewpoints and the resampling and
//! normalization utilities shared by every stage.
//!
//! All coordinates are centimeters in the world frame unless a cloud has been
//! passed through [`normalize`].

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Point = Vector3<f64>;

/// Standard deviation of the jitter applied to duplicated points when
/// upsampling, in cm.
pub const UPSAMPLE_JITTER_CM: f64 = 0.5;

/// An ordered, nonempty list of finite 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn from_xyz(xyz: &[[f64; 3]]) -> Result<Self> {
        Self::new(xyz.iter().map(|p| Point::new(p[0], p[1], p[2])).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let sum = self.points.iter().fold(Point::zeros(), |acc, p| acc + p);
        sum / self.points.len() as f64
    }

    /// Row-major n×3 coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(3) {
            return Err(Error::shape(format!(
                "flat coordinate buffer of length {} is not n×3",
                values.len()
            )));
        }
        Self::new(
            values
                .chunks_exact(3)
                .map(|c| Point::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    pub fn map(&self, f: impl Fn(&Point) -> Point) -> Result<Self> {
        Self::new(self.points.iter().map(f).collect())
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            points: order.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }

    pub fn inflate(&self, by: f64) -> Aabb {
        let d = Point::repeat(by);
        Aabb {
            min: self.min - d,
            max: self.max + d,
        }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn extent(&self) -> Point {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }
}

pub fn bounding_box(cloud: &PointCloud) -> Aabb {
    let first = cloud.points[0];
    cloud.points[1..].iter().fold(
        Aabb {
            min: first,
            max: first,
        },
        |b, p| Aabb {
            min: b.min.inf(p),
            max: b.max.sup(p),
        },
    )
}

/// Bounding box of a raw slice; errors on an empty slice.
pub fn bounding_box_of(points: &[Point]) -> Result<Aabb> {
    let (first, rest) = points
        .split_first()
        .ok_or_else(|| Error::InvalidInput("bounding box of an empty point set".into()))?;
    Ok(rest.iter().fold(
        Aabb {
            min: *first,
            max: *first,
        },
        |b, p| Aabb {
            min: b.min.inf(p),
            max: b.max.sup(p),
        },
    ))
}

/// The transform applied by [`normalize`]: `normalized = (p - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub center: Point,
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        cloud.map(|p| (p - self.center) / self.scale)
    }

    pub fn invert(&self, cloud: &PointCloud) -> Result<PointCloud> {
        cloud.map(|p| p * self.scale + self.center)
    }
}

/// Centers a cloud on its bounding-box center and divides by half the box
/// diagonal, so the result lies inside [-1, 1]^3.
pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, Normalization)> {
    let b = bounding_box(cloud);
    let scale = 0.5 * b.diagonal();
    if scale <= 0.0 {
        return Err(Error::DegenerateCloud);
    }
    let norm = Normalization {
        center: (b.min + b.max) * 0.5,
        scale,
    };
    Ok((norm.apply(cloud)?, norm))
}

pub fn denormalize(cloud: &PointCloud, norm: &Normalization) -> Result<PointCloud> {
    norm.invert(cloud)
}

#[inline]
pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest-point sampling of `m` indices starting from `start`.
/// Ties go to the lowest index.
pub fn farthest_point_indices(points: &[Point], m: usize, start: usize) -> Vec<usize> {
    let n = points.len();
    let m = m.min(n);
    let mut chosen = Vec::with_capacity(m);
    if m == 0 {
        return chosen;
    }
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..m {
        chosen.push(current);
        min_d2[current] = f64::NEG_INFINITY;
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if min_d2[i] == f64::NEG_INFINITY {
                continue;
            }
            let d2 = dist2(p, &c);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    chosen
}

/// How farthest-point sampling picks its first point.
#[derive(Debug, Clone, Copy)]
pub enum FpsStart {
    /// A fixed index into the input.
    Index(usize),
    /// The point farthest from the centroid (lowest index on ties). This is
    /// independent of input order for tie-free clouds.
    FarthestFromCentroid,
}

/// Resamples to exactly `m` points. Downsampling keeps a farthest-point
/// subset; upsampling keeps every point and fills the deficit with jittered
/// copies of randomly chosen points.
pub fn resample_with(cloud: &PointCloud, m: usize, start: FpsStart, rng: &mut Rng) -> Result<PointCloud> {
    if m == 0 {
        return Err(Error::InvalidInput("resample target must be at least 1".into()));
    }
    let pts = cloud.points();
    let n = pts.len();
    if m <= n {
        let start = match start {
            FpsStart::Index(i) => {
                if i >= n {
                    return Err(Error::InvalidInput(format!("FPS start {i} out of range for {n} points")));
                }
                i
            }
            FpsStart::FarthestFromCentroid => farthest_from(pts, &cloud.centroid()),
        };
        let idx = farthest_point_indices(pts, m, start);
        return PointCloud::new(idx.into_iter().map(|i| pts[i]).collect());
    }
    let mut out = pts.to_vec();
    out.reserve(m - n);
    for _ in n..m {
        let src = pts[rng.index(n)];
        let jitter = Point::new(rng.normal(), rng.normal(), rng.normal()) * UPSAMPLE_JITTER_CM;
        out.push(src + jitter);
    }
    PointCloud::new(out)
}

/// [`resample_with`] using a random FPS start drawn from `rng`.
pub fn resample(cloud: &PointCloud, m: usize, rng: &mut Rng) -> Result<PointCloud> {
    let start = rng.index(cloud.len());
    resample_with(cloud, m, FpsStart::Index(start), rng)
}

fn farthest_from(points: &[Point], c: &Point) -> usize {
    let mut best = 0;
    let mut best_d2 = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d2 = dist2(p, c);
        if d2 > best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    best
}

/// Camera pose and pinhole intrinsics. The rotation maps camera-frame
/// vectors to world frame; the camera looks down its +z axis with +x right
/// and +y down in the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Viewpoint {
    pub position: Point,
    pub rotation: Matrix3<f64>,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
    pub max_range: f64,
}

pub const ROTATION_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_RANGE_CM: f64 = 2000.0;

impl Viewpoint {
    pub fn new(
        position: Point,
        rotation: Matrix3<f64>,
        focal: f64,
        (cx, cy): (f64, f64),
        (height, width): (usize, usize),
    ) -> Result<Self> {
        let vp = Self {
            position,
            rotation,
            focal,
            cx,
            cy,
            height,
            width,
            max_range: DEFAULT_MAX_RANGE_CM,
        };
        vp.validate()?;
        Ok(vp)
    }

    /// A camera at `position` aimed at `target`, with image rows pointing
    /// toward world -z where possible. Principal point at the image center.
    pub fn look_at(position: Point, target: Point, focal: f64, size: usize) -> Result<Self> {
        let forward = (target - position)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("camera target coincides with position".into()))?;
        let world_down = Point::new(0.0, 0.0, -1.0);
        let right = world_down
            .cross(&forward)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("camera looks straight up or down".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        let c = size as f64 / 2.0;
        Self::new(position, rotation, focal, (c, c), (size, size))
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(ortho <= ROTATION_TOL) || !((r.determinant() - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::InvalidInput("viewpoint rotation is not a proper rotation".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidInput(format!(
                "image size {}x{} below 8x8",
                self.height, self.width
            )));
        }
        if !(self.focal > 0.0) || !self.max_range.is_finite() || self.max_range <= 0.0 {
            return Err(Error::InvalidInput("focal length and max range must be positive".into()));
        }
        if !self.position.iter().chain([self.cx, self.cy].iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("viewpoint has non-finite fields".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Point) -> Point {
        self.rotation.transpose() * (p - self.position)
    }

    pub fn camera_to_world(&self, p: &Point) -> Point {
        self.rotation * p + self.position
    }

    /// Continuous pixel coordinates (u, v) and depth of a camera-frame point.
    pub fn project(&self, cam: &Point) -> (f64, f64, f64) {
        let u = self.focal * cam.x / cam.z + self.cx;
        let v = self.focal * cam.y / cam.z + self.cy;
        (u, v, cam.z)
    }

    /// Camera-frame point for pixel (col, row) at the given depth.
    pub fn unproject(&self, col: usize, row: usize, depth: f64) -> Point {
        Point::new(
            (col as f64 - self.cx) * depth / self.focal,
            (row as f64 - self.cy) * depth / self.focal,
            depth,
        )
    }
}

/// Re-orthonormalizes a nearly orthonormal matrix (Gram-Schmidt on columns),
/// used after reading reduced-precision rotations from disk.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = m.column(0).normalize();
    let c1 = (m.column(1) - c0 * c0.dot(&m.column(1))).normalize();
    let c2 = c0.cross(&c1);
    Matrix3::from_columns(&[c0, c1, c2])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(xyz: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_xyz(xyz).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut r = Rng::new(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Point::new(r.range(-50.0, 50.0), r.range(-50.0, 50.0), r.range(-50.0, 50.0)))
                .collect(),
        )
        .unwrap()
    }

    fn as_sorted(c: &PointCloud) -> Vec<[u64; 3]> {
        let mut v: Vec<[u64; 3]> = c
            .points()
            .iter()
            .map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
            .collect();
        v.sort();
        v
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::InvalidInput(_))));
        assert!(PointCloud::from_xyz(&[[0.0, f64::NAN, 0.0]]).is_err());
        assert!(bounding_box_of(&[]).is_err());
    }

    #[test]
    fn resample_same_size_is_identity_set() {
        let c = random_cloud(4, 1);
        let out = resample(&c, 4, &mut Rng::new(3)).unwrap();
        assert_eq!(as_sorted(&out), as_sorted(&c));
    }

    #[test]
    fn fps_picks_far_point() {
        let c = cloud(&[[0.0, 0.0, 0.0], [100.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let out = resample_with(&c, 2, FpsStart::Index(0), &mut Rng::new(0)).unwrap();
        assert_eq!(out, cloud(&[[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]]));
    }

    #[test]
    fn fps_matches_brute_force_over_every_start() {
        // Brute force: at each step scan all unchosen points for the largest
        // distance to the chosen set, recomputed from scratch.
        let c = random_cloud(12, 9);
        let pts = c.points();
        for start in 0..pts.len() {
            let mut chosen = vec![start];
            while chosen.len() < 5 {
                let mut best = (f64::NEG_INFINITY, 0);
                for i in 0..pts.len() {
                    if chosen.contains(&i) {
                        continue;
                    }
                    let d = chosen.iter().map(|&j| (pts[i] - pts[j]).norm()).fold(f64::INFINITY, f64::min);
                    if d > best.0 {
                        best = (d, i);
                    }
                }
                chosen.push(best.1);
            }
            assert_eq!(farthest_point_indices(pts, 5, start), chosen);
        }
    }

    #[test]
    fn upsample_jitter_stays_close() {
        let c = cloud(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let mut within = 0usize;
        let mut total = 0usize;
        for seed in 0..1000 {
            let out = resample(&c, 3, &mut Rng::new(seed)).unwrap();
            assert_eq!(out.len(), 3);
            assert_eq!(&out.points()[..2], c.points());
            let extra = out.points()[2];
            let nearest = c.points().iter().min_by(|a, b| {
                (*a - extra).norm().partial_cmp(&(*b - extra).norm()).unwrap()
            });
            let d = extra - nearest.unwrap();
            for k in 0..3 {
                total += 1;
                if d[k].abs() <= 3.0 * UPSAMPLE_JITTER_CM {
                    within += 1;
                }
            }
        }
        // 3-sigma band holds with probability 0.9973 per coordinate.
        let frac = within as f64 / total as f64;
        assert!(frac > 0.99, "fraction within 3 sigma: {frac}");
    }

    #[test]
    fn resample_rejects_zero_target() {
        let c = random_cloud(3, 0);
        assert!(resample(&c, 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn normalize_examples() {
        let (out, n) = normalize(&cloud(&[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])).unwrap();
        assert_eq!(n.scale, 1.0);
        assert_eq!(n.center, Point::zeros());
        assert_eq!(out, cloud(&[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]));

        let (_, n) = normalize(&cloud(&[[0.0, 0.0, 0.0], [445.0, 175.0, 158.0]])).unwrap();
        let expected = 0.5 * (445.0f64 * 445.0 + 175.0 * 175.0 + 158.0 * 158.0).sqrt();
        assert!((n.scale - expected).abs() < 1e-12);
        assert!((n.scale - 252.0).abs() < 0.25);

        let same = PointCloud::new(vec![Point::new(3.0, 4.0, 5.0); 8]).unwrap();
        assert!(matches!(normalize(&same), Err(Error::DegenerateCloud)));
    }

    #[test]
    fn bounding_box_examples() {
        let b = bounding_box(&cloud(&[[0.0, 0.0, 0.0]]));
        assert_eq!(b.min, Point::zeros());
        assert_eq!(b.max, Point::zeros());
        let b = bounding_box(&cloud(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 5.0]]));
        assert_eq!(b.min, Point::new(-1.0, 0.0, 3.0));
        assert_eq!(b.max, Point::new(1.0, 2.0, 5.0));
    }

    #[test]
    fn look_at_is_valid_rotation() {
        let v = Viewpoint::look_at(Point::new(600.0, 0.0, 150.0), Point::new(0.0, 0.0, 80.0), 44.0, 64).unwrap();
        v.validate().unwrap();
        let axis = v.world_to_camera(&Point::new(0.0, 0.0, 80.0));
        assert!(axis.x.abs() < 1e-9 && axis.y.abs() < 1e-9 && axis.z > 0.0);
        // world up maps to image up (negative camera y)
        let up = v.rotation.transpose() * Point::new(0.0, 0.0, 1.0);
        assert!(up.y < 0.0);
    }

    #[test]
    fn invalid_viewpoints_rejected() {
        let bad = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Viewpoint::new(Point::zeros(), bad, 10.0, (4.0, 4.0), (8, 8)).is_err());
        let id = Matrix3::identity();
        assert!(Viewpoint::new(Point::zeros(), id, 10.0, (4.0, 4.0), (7, 8)).is_err());
        assert!(Viewpoint::new(Point::zeros(), id, 0.0, (4.0, 4.0), (8, 8)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::rng::Rng;

        fn arb_cloud(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
            prop::collection::vec(prop::array::uniform3(-500.0f64..500.0), 2..max)
        }

        proptest! {
            #[test]
            fn normalize_round_trips(xyz in arb_cloud(40)) {
                let c = PointCloud::from_xyz(&xyz).unwrap();
                if let Ok((out, n)) = normalize(&c) {
                    let b = bounding_box(&out);
                    prop_assert!(b.min.iter().all(|v| *v >= -1.0 - 1e-12));
                    prop_assert!(b.max.iter().all(|v| *v <= 1.0 + 1e-12));
                    let back = denormalize(&out, &n).unwrap();
                    for (p, q) in back.points().iter().zip(c.points()) {
                        prop_assert!((p - q).amax() <= 1e-9);
                    }
                }
            }

            #[test]
            fn downsample_box_is_contained(xyz in arb_cloud(40), m in 1usize..40, seed in 0u64..1000) {
                let c = PointCloud::from_xyz(&xyz).unwrap();
                let m = m.min(c.len());
                let out = resample(&c, m, &mut Rng::new(seed)).unwrap();
                prop_assert_eq!(out.len(), m);
                prop_assert!(bounding_box(&c).contains_box(&bounding_box(&out)));
            }

            #[test]
            fn fps_is_permutation_invariant(seed in 0u64..500, m in 1usize..20) {
                let c = random_cloud(20, seed);
                let mut order: Vec<usize> = (0..20).collect();
                Rng::new(seed + 1).shuffle(&mut order);
                let permuted = c.permuted(&order);
                let start = 3;
                let new_start = order.iter().position(|&i| i == start).unwrap();
                let a = resample_with(&c, m, FpsStart::Index(start), &mut Rng::new(0)).unwrap();
                let b = resample_with(&permuted, m, FpsStart::Index(new_start), &mut Rng::new(0)).unwrap();
                prop_assert_eq!(as_sorted(&a), as_sorted(&b));
            }

            #[test]
            fn box_is_monotone_under_union(xyz in arb_cloud(20), p in prop::array::uniform3(-900.0f64..900.0)) {
                let c = PointCloud::from_xyz(&xyz).unwrap();
                let mut more = xyz.clone();
                more.push(p);
                let bigger = PointCloud::from_xyz(&more).unwrap();
                prop_assert!(bounding_box(&bigger).contains_box(&bounding_box(&c)));
            }
        }
    }
}
