//! Synthetic car dataset: procedural scenes, depth rendering, Stage-1 style
//! corruption, back-projection and multi-view fusion.
//!
//! World frame is z-up with the car's length along x before posing. Cars are
//! unions of boxes and y-axis cylinders; surfaces hidden inside another
//! primitive are never sampled.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Rotation3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{resample_with, FpsStart, Point, PointCloud, Viewpoint, DEFAULT_MAX_RANGE_CM};
use crate::error::{Error, Result};
use crate::io::{write_dimg, write_ply};
use crate::rng::{derive_seed, Rng};

/// Average full extent of the cars (length, width, height), cm.
pub const NOMINAL_EXTENT_CM: [f64; 3] = [445.0, 175.0, 158.0];
pub const NUM_FAMILIES: usize = 8;
/// Per-instance multiplicative jitter bound on each full extent.
pub const INSTANCE_JITTER: f64 = 0.15;
/// Marks a pixel with no return.
pub const NO_RETURN: f64 = -1.0;

const CABIN_OVERLAP_CM: f64 = 1.0;
const INSIDE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Axis-aligned box.
    Box { center: Point, half: Point },
    /// Cylinder with its axis along y.
    Cylinder { center: Point, radius: f64, half_width: f64 },
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Box { half: h, .. } => 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z),
            Primitive::Cylinder { radius, half_width, .. } => 2.0 * PI * radius * (radius + 2.0 * half_width),
        }
    }

    /// A uniformly distributed point on the surface.
    pub fn sample(&self, rng: &mut Rng) -> Point {
        match *self {
            Primitive::Box { center, half: h } => {
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let pick = rng.uniform() * (areas[0] + areas[1] + areas[2]);
                let axis = if pick < areas[0] {
                    0
                } else if pick < areas[0] + areas[1] {
                    1
                } else {
                    2
                };
                let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                let mut local = Point::zeros();
                for k in 0..3 {
                    local[k] = if k == axis { sign * h[k] } else { rng.range(-h[k], h[k]) };
                }
                center + local
            }
            Primitive::Cylinder {
                center,
                radius,
                half_width,
            } => {
                let lateral = 2.0 * half_width;
                let theta = rng.range(0.0, 2.0 * PI);
                if rng.uniform() * (lateral + radius) < lateral {
                    let y = rng.range(-half_width, half_width);
                    center + Point::new(radius * theta.cos(), y, radius * theta.sin())
                } else {
                    let r = radius * rng.uniform().sqrt();
                    let y = if rng.bernoulli(0.5) { half_width } else { -half_width };
                    center + Point::new(r * theta.cos(), y, r * theta.sin())
                }
            }
        }
    }

    /// Signed distance to the surface, negative inside.
    pub fn signed_distance(&self, p: &Point) -> f64 {
        match *self {
            Primitive::Box { center, half } => {
                let q = (p - center).abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Primitive::Cylinder {
                center,
                radius,
                half_width,
            } => {
                let d = p - center;
                let a = (d.x * d.x + d.z * d.z).sqrt() - radius;
                let b = d.y.abs() - half_width;
                let outside = (a.max(0.0).powi(2) + b.max(0.0).powi(2)).sqrt();
                outside + a.max(b).min(0.0)
            }
        }
    }

    fn strictly_contains(&self, p: &Point) -> bool {
        self.signed_distance(p) < -INSIDE_TOL
    }
}

/// Area-weighted sampling over the union of primitives, rejecting points
/// that fall inside a different primitive. Returns points with the index of
/// the primitive each came from.
pub fn sample_primitives(prims: &[Primitive], n: usize, rng: &mut Rng) -> Result<Vec<(Point, usize)>> {
    if prims.is_empty() {
        return Err(Error::InvalidInput("no primitives to sample".into()));
    }
    let areas: Vec<f64> = prims.iter().map(Primitive::area).collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("primitives have zero surface area".into()));
    }
    let mut out = Vec::with_capacity(n);
    let budget = 1000 * n.max(1);
    for _ in 0..budget {
        if out.len() == n {
            break;
        }
        let mut pick = rng.uniform() * total;
        let mut i = 0;
        while i + 1 < prims.len() && pick >= areas[i] {
            pick -= areas[i];
            i += 1;
        }
        let p = prims[i].sample(rng);
        let hidden = prims.iter().enumerate().any(|(j, q)| j != i && q.strictly_contains(&p));
        if !hidden {
            out.push((p, i));
        }
    }
    if out.len() < n {
        return Err(Error::InvalidInput("primitive union has no exposed surface".into()));
    }
    Ok(out)
}

/// Proportions of one car family. Extent factors scale the nominal extent.
#[derive(Debug, Clone, Copy)]
struct Family {
    extent: [f64; 3],
    body_frac: f64,
    cabin_len: f64,
    cabin_offset: f64,
    cabin_width: f64,
    wheelbase: f64,
}

// sedan, hatchback, SUV, pickup, coupe, wagon, van, compact
const FAMILIES: [Family; NUM_FAMILIES] = [
    Family { extent: [1.00, 1.00, 0.97], body_frac: 0.50, cabin_len: 0.48, cabin_offset: -0.04, cabin_width: 0.90, wheelbase: 0.60 },
    Family { extent: [0.96, 0.99, 1.00], body_frac: 0.50, cabin_len: 0.52, cabin_offset: -0.10, cabin_width: 0.90, wheelbase: 0.62 },
    Family { extent: [1.02, 1.03, 1.04], body_frac: 0.55, cabin_len: 0.62, cabin_offset: -0.08, cabin_width: 0.92, wheelbase: 0.60 },
    Family { extent: [1.04, 1.02, 1.03], body_frac: 0.55, cabin_len: 0.30, cabin_offset: 0.05, cabin_width: 0.92, wheelbase: 0.64 },
    Family { extent: [0.98, 1.00, 0.96], body_frac: 0.50, cabin_len: 0.40, cabin_offset: -0.02, cabin_width: 0.86, wheelbase: 0.58 },
    Family { extent: [1.03, 0.98, 1.00], body_frac: 0.50, cabin_len: 0.64, cabin_offset: -0.10, cabin_width: 0.90, wheelbase: 0.60 },
    Family { extent: [0.99, 1.02, 1.04], body_frac: 0.45, cabin_len: 0.75, cabin_offset: -0.06, cabin_width: 0.94, wheelbase: 0.62 },
    Family { extent: [0.97, 0.96, 0.98], body_frac: 0.50, cabin_len: 0.50, cabin_offset: -0.05, cabin_width: 0.90, wheelbase: 0.64 },
];

/// A posed car: box body on a ground clearance, box cabin on top, four
/// wheels. All lengths in cm.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub family: usize,
    /// Body length, width, height.
    pub body: Point,
    pub clearance: f64,
    /// Cabin length, width, height.
    pub cabin: Point,
    /// Cabin center offset along the length axis from the body center.
    pub cabin_offset: f64,
    pub wheel_radius: f64,
    pub wheel_width: f64,
    pub wheelbase: f64,
    /// Rotation about the vertical axis, radians.
    pub yaw: f64,
    pub translation: Point,
}

impl SceneSpec {
    /// Full length, width and height of the unposed car.
    pub fn extent(&self) -> Point {
        Point::new(
            self.body.x,
            self.body.y,
            self.clearance + self.body.z + self.cabin.z - CABIN_OVERLAP_CM,
        )
    }

    /// Primitives in the unposed frame: ground at z = 0, centered in x and y.
    pub fn primitives(&self) -> Vec<Primitive> {
        let body_half = self.body / 2.0;
        let body_center = Point::new(0.0, 0.0, self.clearance + body_half.z);
        let cabin_half = self.cabin / 2.0;
        let cabin_center = Point::new(
            self.cabin_offset,
            0.0,
            self.clearance + self.body.z - CABIN_OVERLAP_CM + cabin_half.z,
        );
        let mut prims = vec![
            Primitive::Box {
                center: body_center,
                half: body_half,
            },
            Primitive::Box {
                center: cabin_center,
                half: cabin_half,
            },
        ];
        let wy = body_half.y - self.wheel_width / 2.0;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                prims.push(Primitive::Cylinder {
                    center: Point::new(sx * self.wheelbase / 2.0, sy * wy, self.wheel_radius),
                    radius: self.wheel_radius,
                    half_width: self.wheel_width / 2.0,
                });
            }
        }
        prims
    }

    pub fn pose(&self, p: &Point) -> Point {
        Rotation3::from_axis_angle(&Point::z_axis(), self.yaw) * p + self.translation
    }

    pub fn with_pose(&self, yaw: f64, translation: Point) -> SceneSpec {
        SceneSpec {
            yaw,
            translation,
            ..self.clone()
        }
    }
}

/// Draws a car of the given family.
pub fn make_scene(family: usize, rng: &mut Rng) -> Result<SceneSpec> {
    let fam = FAMILIES
        .get(family)
        .ok_or_else(|| Error::InvalidInput(format!("unknown shape family {family} (expected 0..{NUM_FAMILIES})")))?;
    let mut full = [0.0; 3];
    for k in 0..3 {
        full[k] = NOMINAL_EXTENT_CM[k] * fam.extent[k] * (1.0 + rng.range(-INSTANCE_JITTER, INSTANCE_JITTER));
    }
    let [length, width, height] = full;
    let clearance = 0.12 * height;
    let body_h = fam.body_frac * (height - clearance);
    let cabin_h = height - clearance - body_h + CABIN_OVERLAP_CM;
    let yaw = rng.range(0.0, 2.0 * PI);
    let translation = Point::new(rng.range(-20.0, 20.0), rng.range(-20.0, 20.0), 0.0);
    Ok(SceneSpec {
        family,
        body: Point::new(length, width, body_h),
        clearance,
        cabin: Point::new(fam.cabin_len * length, fam.cabin_width * width, cabin_h),
        cabin_offset: fam.cabin_offset * length,
        wheel_radius: 0.2 * height,
        wheel_width: 0.13 * width,
        wheelbase: fam.wheelbase * length,
        yaw,
        translation,
    })
}

/// `n` points uniformly distributed over the exposed car surface, posed.
pub fn sample_surface(scene: &SceneSpec, n: usize, rng: &mut Rng) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidInput("surface sample count must be at least 1".into()));
    }
    let pts = sample_primitives(&scene.primitives(), n, rng)?;
    PointCloud::new(pts.into_iter().map(|(p, _)| scene.pose(&p)).collect())
}

/// A depth image (camera-frame z, cm) with its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    view: Viewpoint,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn new(view: Viewpoint, data: Vec<f64>) -> Result<Self> {
        if data.len() != view.height * view.width {
            return Err(Error::shape(format!(
                "depth grid has {} cells for a {}x{} image",
                data.len(),
                view.height,
                view.width
            )));
        }
        if data.iter().any(|&d| d != NO_RETURN && !(d > 0.0 && d <= view.max_range)) {
            return Err(Error::InvalidInput("depth values must be in (0, max_range] or the no-return marker".into()));
        }
        Ok(Self { view, data })
    }

    pub fn empty(view: Viewpoint) -> Self {
        let data = vec![NO_RETURN; view.height * view.width];
        Self { view, data }
    }

    pub fn view(&self) -> &Viewpoint {
        &self.view
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let d = self.data[row * self.view.width + col];
        (d != NO_RETURN).then_some(d)
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d != NO_RETURN).count()
    }
}

/// Pixel (col, row) a camera-frame point falls into, if inside the image.
pub fn pixel_of(view: &Viewpoint, cam: &Point) -> Option<(usize, usize)> {
    if !(cam.z > 0.0) {
        return None;
    }
    let (u, v, _) = view.project(cam);
    let (col, row) = (u.round(), v.round());
    let inside = col >= 0.0 && row >= 0.0 && col < view.width as f64 && row < view.height as f64;
    inside.then_some((col as usize, row as usize))
}

/// Z-buffer point splatting: every point lands in the pixel nearest its
/// projection and each pixel keeps the nearest depth.
pub fn render_depth(cloud: &PointCloud, view: &Viewpoint) -> DepthImage {
    let mut img = DepthImage::empty(view.clone());
    for p in cloud.points() {
        let cam = view.world_to_camera(p);
        if cam.z > view.max_range {
            continue;
        }
        if let Some((col, row)) = pixel_of(view, &cam) {
            let cell = &mut img.data[row * view.width + col];
            if *cell == NO_RETURN || cam.z < *cell {
                *cell = cam.z;
            }
        }
    }
    img
}

/// Per-pixel corruption of a depth image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    /// Probability that a valid pixel loses its return.
    pub dropout: f64,
    /// Probability that an empty pixel gains a spurious return.
    pub ghost: f64,
    /// Ghost depths are uniform over the image's depth span widened by this, cm.
    pub ghost_offset_cm: f64,
    /// Gaussian depth noise, cm.
    pub noise_sigma_cm: f64,
    /// Depth quantization step, cm. Zero disables quantization.
    pub quant_step_cm: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            dropout: 0.3,
            ghost: 0.02,
            ghost_offset_cm: 50.0,
            noise_sigma_cm: 3.0,
            quant_step_cm: 1.0,
        }
    }
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self {
            dropout: 0.0,
            ghost: 0.0,
            ghost_offset_cm: 0.0,
            noise_sigma_cm: 0.0,
            quant_step_cm: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !prob(self.dropout) || !prob(self.ghost) {
            return Err(Error::InvalidConfig("corruption probabilities must be in [0, 1]".into()));
        }
        if !nonneg(self.ghost_offset_cm) || !nonneg(self.noise_sigma_cm) || !nonneg(self.quant_step_cm) {
            return Err(Error::InvalidConfig("corruption offsets, noise and step must be non-negative".into()));
        }
        Ok(())
    }
}

/// Dropout on valid pixels, ghost returns on empty ones, then Gaussian noise
/// and quantization on every surviving return. Pixels are visited in
/// row-major order.
pub fn corrupt_depth(img: &DepthImage, spec: &CorruptionSpec, rng: &mut Rng) -> Result<DepthImage> {
    spec.validate()?;
    let max_range = img.view.max_range;
    let span = img
        .data
        .iter()
        .filter(|&&d| d != NO_RETURN)
        .fold(None, |acc: Option<(f64, f64)>, &d| match acc {
            None => Some((d, d)),
            Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
        });
    let mut out = img.clone();
    for cell in out.data.iter_mut() {
        let u = rng.uniform();
        let mut d = *cell;
        if d != NO_RETURN {
            if u < spec.dropout {
                d = NO_RETURN;
            }
        } else if let Some((lo, hi)) = span {
            if u < spec.ghost {
                d = rng.range(lo - spec.ghost_offset_cm, hi + spec.ghost_offset_cm);
            }
        }
        if d != NO_RETURN {
            if spec.noise_sigma_cm > 0.0 {
                d += spec.noise_sigma_cm * rng.normal();
            }
            if spec.quant_step_cm > 0.0 {
                d = (d / spec.quant_step_cm).round() * spec.quant_step_cm;
            }
            if !(d > 0.0 && d <= max_range) {
                d = NO_RETURN;
            }
        }
        *cell = d;
    }
    Ok(out)
}

/// World-frame points for every valid pixel, in row-major pixel order.
pub fn backproject(img: &DepthImage) -> Result<PointCloud> {
    let v = &img.view;
    let mut pts = Vec::with_capacity(img.valid_count());
    for row in 0..v.height {
        for col in 0..v.width {
            if let Some(d) = img.get(row, col) {
                pts.push(v.camera_to_world(&v.unproject(col, row, d)));
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::EmptyView);
    }
    PointCloud::new(pts)
}

/// Union of the per-view clouds resampled to exactly `n` points.
///
/// A larger union is reduced to a uniform random subset drawn from the
/// points in sorted order, which keeps ghost returns at their share of the
/// union (farthest-point selection would pick them first). A smaller union
/// is padded with jittered copies. Either way the result does not depend on
/// the order of the views.
pub fn fuse_views(clouds: &[PointCloud], n: usize, rng: &mut Rng) -> Result<PointCloud> {
    let mut all: Vec<Point> = clouds.iter().flat_map(|c| c.points().iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::EmptyView);
    }
    if all.len() > n {
        all.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z)));
        let mut idx: Vec<usize> = (0..all.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(n);
        idx.sort_unstable();
        all = idx.into_iter().map(|i| all[i]).collect();
    }
    resample_with(&PointCloud::new(all)?, n, FpsStart::FarthestFromCentroid, rng)
}

/// Ring of cameras around the car.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub count: usize,
    pub elevation_deg: f64,
    pub range_cm: f64,
    pub image_size: usize,
    pub focal_px: f64,
    /// Height of the aim point above the ground, cm.
    pub target_height_cm: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            count: 4,
            elevation_deg: 15.0,
            range_cm: 600.0,
            image_size: 64,
            focal_px: 44.0,
            target_height_cm: 79.0,
        }
    }
}

impl ViewConfig {
    /// Cameras at equal azimuth steps starting on the +x axis.
    pub fn viewpoints(&self) -> Result<Vec<Viewpoint>> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("at least one view is required".into()));
        }
        if !(self.range_cm > 0.0) || self.range_cm >= DEFAULT_MAX_RANGE_CM {
            return Err(Error::InvalidConfig(format!(
                "camera range must be in (0, {DEFAULT_MAX_RANGE_CM}) cm"
            )));
        }
        let target = Point::new(0.0, 0.0, self.target_height_cm);
        let el = self.elevation_deg.to_radians();
        (0..self.count)
            .map(|i| {
                let az = 2.0 * PI * i as f64 / self.count as f64;
                let dir = Point::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                Viewpoint::look_at(target + dir * self.range_cm, target, self.focal_px, self.image_size)
                    .map_err(|e| Error::InvalidConfig(e.to_string()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Dataset size, geometry and corruption settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Number of car models (shape families), at most 8.
    pub models: usize,
    pub per_model: usize,
    pub train: usize,
    /// Test samples, spread evenly over models.
    pub test: usize,
    /// Points per cloud.
    pub points: usize,
    /// Dense surface samples used for rendering.
    pub render_points: usize,
    pub seed: u64,
    pub views: ViewConfig,
    pub corruption: CorruptionSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            models: 8,
            per_model: 200,
            train: 1520,
            test: 80,
            points: 1024,
            render_points: 16384,
            seed: 0,
            views: ViewConfig::default(),
            corruption: CorruptionSpec::default(),
        }
    }
}

impl DatasetConfig {
    /// Eight training and eight test cars, one of each per model, at 256 points.
    pub fn toy() -> Self {
        Self {
            per_model: 2,
            train: 8,
            test: 8,
            points: 256,
            ..Self::default()
        }
    }

    pub fn total(&self) -> usize {
        self.models * self.per_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.models == 0 || self.models > NUM_FAMILIES {
            return Err(Error::InvalidConfig(format!("models must be in 1..={NUM_FAMILIES}")));
        }
        if self.per_model == 0 || self.points == 0 || self.render_points == 0 {
            return Err(Error::InvalidConfig("per_model, points and render_points must be positive".into()));
        }
        if self.train + self.test != self.total() {
            return Err(Error::InvalidConfig(format!(
                "split {}/{} does not add up to {} samples ({} models x {})",
                self.train,
                self.test,
                self.total(),
                self.models,
                self.per_model
            )));
        }
        if self.test_count(0) > self.per_model {
            return Err(Error::InvalidConfig("more test samples per model than samples per model".into()));
        }
        self.corruption.validate()?;
        self.views.viewpoints()?;
        Ok(())
    }

    /// Test samples drawn from `model`: an even share, with the remainder
    /// going to the lowest model ids.
    pub fn test_count(&self, model: usize) -> usize {
        self.test / self.models + usize::from(model < self.test % self.models)
    }

    /// The last `test_count(model)` samples of each model are held out.
    pub fn split_of(&self, model: usize, index: usize) -> Split {
        if index >= self.per_model - self.test_count(model) {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn sample_seed(&self, model: usize, index: usize) -> u64 {
        derive_seed(self.seed, ((model as u64) << 32) | index as u64)
    }
}

pub fn sample_id(model: usize, index: usize) -> String {
    format!("m{model}_s{index:04}")
}

/// One generated training pair with its intermediate views.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub model: usize,
    pub seed: u64,
    pub scene: SceneSpec,
    /// Fused coarse cloud.
    pub p_r: PointCloud,
    /// Ground-truth surface cloud.
    pub p_true: PointCloud,
    pub views: Vec<DepthImage>,
}

pub fn generate_sample(cfg: &DatasetConfig, model: usize, index: usize) -> Result<Sample> {
    let seed = cfg.sample_seed(model, index);
    let root = Rng::new(seed);
    let scene = make_scene(model, &mut root.child(1))?;
    let p_true = sample_surface(&scene, cfg.points, &mut root.child(2))?;
    let dense = sample_surface(&scene, cfg.render_points, &mut root.child(3))?;
    let mut views = Vec::with_capacity(cfg.views.count);
    let mut partial = Vec::with_capacity(cfg.views.count);
    for (i, vp) in cfg.views.viewpoints()?.iter().enumerate() {
        let clean = render_depth(&dense, vp);
        let noisy = corrupt_depth(&clean, &cfg.corruption, &mut root.child(10 + i as u64))?;
        match backproject(&noisy) {
            Ok(c) => partial.push(c),
            Err(Error::EmptyView) => {}
            Err(e) => return Err(e),
        }
        views.push(noisy);
    }
    let p_r = fuse_views(&partial, cfg.points, &mut root.child(4))?;
    Ok(Sample {
        id: sample_id(model, index),
        model,
        seed,
        scene,
        p_r,
        p_true,
        views,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub model: usize,
    pub seed: u64,
    pub split: Split,
    /// Paths relative to the dataset root.
    pub p_r: PathBuf,
    pub p_true: PathBuf,
    pub views: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# id model seed split p_r p_true views";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            let views: Vec<String> = e.views.iter().map(|p| p.display().to_string()).collect();
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {}",
                e.id,
                e.model,
                e.seed,
                e.split.as_str(),
                e.p_r.display(),
                e.p_true.display(),
                views.join(",")
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                msg: format!("manifest: {m}"),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            let split = match f[3] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(bad(&format!("unknown split '{other}'"))),
            };
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                model: f[1].parse().map_err(|_| bad("bad model id"))?,
                seed: f[2].parse().map_err(|_| bad("bad seed"))?,
                split,
                p_r: f[4].into(),
                p_true: f[5].into(),
                views: f[6].split(',').filter(|s| !s.is_empty()).map(PathBuf::from).collect(),
            });
        }
        Ok(Self { entries })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    /// Samples per model, indexed by model id.
    pub fn per_model(&self) -> Vec<usize> {
        let mut counts = Vec::new();
        for e in &self.entries {
            if counts.len() <= e.model {
                counts.resize(e.model + 1, 0);
            }
            counts[e.model] += 1;
        }
        counts
    }
}

/// Generates every sample and writes it under `out`, one directory per
/// sample, plus `manifest.txt`. Samples are generated in parallel; output
/// bytes depend only on the config.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let jobs: Vec<(usize, usize)> = (0..cfg.models)
        .flat_map(|m| (0..cfg.per_model).map(move |i| (m, i)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(model, index)| {
            let s = generate_sample(cfg, model, index)?;
            let dir = PathBuf::from(&s.id);
            let abs = out.join(&dir);
            fs::create_dir_all(&abs).map_err(|e| Error::io(&abs, e))?;
            write_ply(&abs.join("p_r.ply"), &s.p_r)?;
            write_ply(&abs.join("p_true.ply"), &s.p_true)?;
            let mut views = Vec::with_capacity(s.views.len());
            for (i, img) in s.views.iter().enumerate() {
                let name = format!("view_{i}.dimg");
                write_dimg(&abs.join(&name), img)?;
                views.push(dir.join(name));
            }
            Ok(ManifestEntry {
                id: s.id,
                model,
                seed: s.seed,
                split: cfg.split_of(model, index),
                p_r: dir.join("p_r.ply"),
                p_true: dir.join("p_true.ply"),
                views,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { entries };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
