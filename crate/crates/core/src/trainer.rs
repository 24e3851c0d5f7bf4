//! Losses, optimizers, initialization, adaptive primitive control and the
//! training loop.

use std::collections::BinaryHeap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Unit, UnitQuaternion};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{self, GradientBuffers, ViewKey};
use crate::image_buf::Image;
use crate::metrics;
use crate::raster;
use crate::scene::{Camera, Dataset, Triangle, TriangleSoup, Vec3};
use crate::shading::{ShadingNet, PARAM_COUNT};
use crate::texture::{Feature, TextureGridSet, CHANNELS};

pub use crate::metrics::ssim;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Texture level of the coarse phase (vertex-like features).
pub const COARSE_LEVEL: u32 = 3;
pub const FINE_MIN: u32 = 2;
pub const FINE_MAX: u32 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },
    #[error("need at least {needed} points to place {needed} triangles, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("unknown config keys: {0}")]
    UnknownKeys(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config {path}: {source}")]
    Config { path: PathBuf, source: Box<dyn std::error::Error + Send + Sync> },
}

/// How the initial soup is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Triangles around farthest-point-sampled points of a point cloud.
    Points,
    /// Random small triangles in a box, with transparent-triangle resampling.
    RandomBbox,
}

/// Which per-pixel loss weights the opacity score term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreWeight {
    Combined,
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory with `transforms_*.json` and images.
    pub data: PathBuf,
    pub train_cameras: String,
    /// Held-out cameras; empty to disable.
    pub test_cameras: String,
    /// Output directory for the scene file, metrics and report.
    pub out: PathBuf,
    pub iterations: usize,
    pub views_per_step: usize,
    pub lambda: f64,
    pub lr_features: f64,
    pub lr_net: f64,
    pub lr_vertices: f64,
    pub lr_decay: f64,
    pub coarse_end: usize,
    pub adaptive_period: usize,
    /// Adaptive control runs only before this iteration; 0 means never stop.
    pub adaptive_until: usize,
    pub split_fraction: f64,
    pub split_views: usize,
    pub budget: usize,
    pub background: [f64; 3],
    pub seed: u64,
    pub init: InitMode,
    /// Point cloud for `init = "points"`.
    pub points: PathBuf,
    /// Initial triangle count; 0 means `budget`.
    pub init_count: usize,
    pub init_radius: f64,
    /// Box for `init = "random_bbox"`; camera-centre box when absent.
    pub bbox_min: Option<[f64; 3]>,
    pub bbox_max: Option<[f64; 3]>,
    pub score_weight: ScoreWeight,
    pub boundary_gradients: bool,
    /// Held-out evaluation cadence in iterations.
    pub eval_every: usize,
    /// Near plane; derived from the cameras when absent.
    pub near: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("."),
            train_cameras: "transforms_train.json".into(),
            test_cameras: "transforms_test.json".into(),
            out: PathBuf::from("out"),
            iterations: 10_000,
            views_per_step: 4,
            lambda: 0.8,
            lr_features: 5e-2,
            lr_net: 1e-2,
            lr_vertices: 1e-3,
            lr_decay: 100.0,
            coarse_end: 5000,
            adaptive_period: 100,
            adaptive_until: 0,
            split_fraction: 0.2,
            split_views: 20,
            budget: 15_000,
            background: [1.0; 3],
            seed: 0,
            init: InitMode::Points,
            points: PathBuf::from("points.ply"),
            init_count: 0,
            init_radius: 0.01,
            bbox_min: None,
            bbox_max: None,
            score_weight: ScoreWeight::Combined,
            boundary_gradients: true,
            eval_every: 500,
            near: None,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "data",
    "train_cameras",
    "test_cameras",
    "out",
    "iterations",
    "views_per_step",
    "lambda",
    "lr_features",
    "lr_net",
    "lr_vertices",
    "lr_decay",
    "coarse_end",
    "adaptive_period",
    "adaptive_until",
    "split_fraction",
    "split_views",
    "budget",
    "background",
    "seed",
    "init",
    "points",
    "init_count",
    "init_radius",
    "bbox_min",
    "bbox_max",
    "score_weight",
    "boundary_gradients",
    "eval_every",
    "near",
];

impl TrainConfig {
    /// Parses TOML text; every unknown key is reported by name.
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| TrainError::Invalid(e.to_string()))?;
        let unknown: Vec<&str> = table.keys().map(String::as_str).filter(|k| !CONFIG_KEYS.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(TrainError::UnknownKeys(unknown.join(", ")));
        }
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Config { path: path.into(), source: Box::new(e) })?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data, &mut cfg.out, &mut cfg.points] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Invalid(m.into()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.views_per_step == 0 || self.adaptive_period == 0 || self.split_views == 0 || self.budget == 0 {
            return bad("views_per_step, adaptive_period, split_views and budget must be positive");
        }
        let lrs = [self.lr_features, self.lr_net, self.lr_vertices, self.lr_decay, self.split_fraction, self.init_radius];
        if lrs.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("learning rates, lr_decay, split_fraction and init_radius must be positive");
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background must lie in [0, 1]^3");
        }
        Ok(())
    }
}

/// `lr0 * 100^(-iter / total)`.
pub fn lr_at(iter: usize, lr0: f64, total: usize) -> f64 {
    lr_with_decay(iter, lr0, total, 100.0)
}

pub fn lr_with_decay(iter: usize, lr0: f64, total: usize, decay: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * decay.powf(-(iter as f64) / total as f64)
}

/// One bias-corrected Adam step; `t` counts steps starting at 1.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64) {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
    }
}

/// Adam on 3-vectors with one second moment per vector, tracking the
/// squared gradient norm. Updates commute with rotations.
pub fn vectoradam_step(verts: &mut [Vec3], grads: &[Vec3], m: &mut [Vec3], v: &mut [f64], lr: f64, t: u64) {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..verts.len() {
        let g = grads[i];
        m[i] = m[i] * BETA1 + g * (1.0 - BETA1);
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g.norm_squared();
        verts[i] -= (m[i] / c1) * (lr / ((v[i] / c2).sqrt() + ADAM_EPS));
    }
}

/// Scalar loss, its L1 and SSIM parts, and the per-pixel loss map whose
/// mean is the scalar loss.
#[derive(Debug, Clone)]
pub struct PhotometricLoss {
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub map: Vec<f64>,
    pub l1_map: Vec<f64>,
}

pub fn photometric_loss(pred: &Image, gt: &Image, lambda: f64) -> PhotometricLoss {
    assert!(pred.same_shape(gt));
    let l1_map: Vec<f64> =
        pred.data.iter().zip(&gt.data).map(|(p, g)| (0..3).map(|c| (p[c] - g[c]).abs()).sum::<f64>() / 3.0).collect();
    let (s, ssim_map) = if lambda < 1.0 { ssim(pred, gt) } else { (1.0, vec![1.0; pred.len()]) };
    let map: Vec<f64> = l1_map.iter().zip(&ssim_map).map(|(l, s)| lambda * l + (1.0 - lambda) * (1.0 - s)).collect();
    let n = pred.len().max(1) as f64;
    let l1 = l1_map.iter().sum::<f64>() / n;
    PhotometricLoss { loss: lambda * l1 + (1.0 - lambda) * (1.0 - s), l1, ssim: s, map, l1_map }
}

/// Gradient of [`photometric_loss`]'s scalar with respect to `pred`.
pub fn photometric_loss_backward(pred: &Image, gt: &Image, lambda: f64) -> Vec<[f64; 3]> {
    let n = pred.len().max(1) as f64;
    let l1_scale = lambda / (3.0 * n);
    let mut out: Vec<[f64; 3]> = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| std::array::from_fn(|c| l1_scale * (p[c] - g[c]).signum() * ((p[c] - g[c]) != 0.0) as u8 as f64))
        .collect();
    if lambda < 1.0 {
        let d_map = vec![-(1.0 - lambda) / n; pred.len()];
        let gs = metrics::ssim_backward(pred, gt, &d_map);
        for (o, g) in out.iter_mut().zip(gs) {
            for c in 0..3 {
                o[c] += g[c];
            }
        }
    }
    out
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Greedy farthest-point sampling starting at `start`.
pub fn fps_from(points: &[Vec3], k: usize, start: usize) -> Vec<usize> {
    let k = k.min(points.len());
    if k == 0 {
        return Vec::new();
    }
    let mut chosen = vec![start];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[start]).norm_squared()).collect();
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..dist.len() {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        let pb = points[best];
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - pb).norm_squared());
        }
    }
    chosen
}

/// Farthest-point sampling from a seeded random start.
pub fn fps(points: &[Vec3], k: usize, seed: u64) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let start = rng_for(seed, 1).random_range(0..points.len());
    fps_from(points, k, start)
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Equilateral triangle with the given circumradius and a uniformly random
/// orientation.
pub fn random_equilateral(center: Vec3, radius: f64, rng: &mut impl Rng) -> Triangle {
    let normal = random_unit(rng);
    let helper = if normal.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u0 = normal.cross(&helper).normalize();
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let u = UnitQuaternion::from_axis_angle(&Unit::new_unchecked(normal), angle) * u0;
    let w = normal.cross(&u);
    let v = |k: f64| {
        let a = k * std::f64::consts::TAU / 3.0;
        center + (u * a.cos() + w * a.sin()) * radius
    };
    Triangle::new(v(0.0), v(1.0), v(2.0))
}

fn mean_nn_distance(points: &[Vec3]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let d = crate::par::map_range(points.len(), |i| {
        points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| (q - points[i]).norm())
            .fold(f64::INFINITY, f64::min)
    });
    d.iter().sum::<f64>() / d.len() as f64
}

fn coarse_texture() -> TextureGridSet {
    TextureGridSet::zeros(COARSE_LEVEL, COARSE_LEVEL)
}

/// Places `target` equilateral triangles around points: two thirds chosen
/// by farthest-point sampling, the rest uniformly among the remainder.
pub fn init_triangles(points: &[Vec3], target: usize, seed: u64) -> Result<TriangleSoup, TrainError> {
    if points.len() < target {
        return Err(TrainError::TooFewPoints { needed: target, got: points.len() });
    }
    let n_fps = (2 * target).div_ceil(3);
    let mut seeds = fps(points, n_fps, seed);
    let mut rng = rng_for(seed, 2);
    let mut taken = vec![false; points.len()];
    seeds.iter().for_each(|&i| taken[i] = true);
    let rest: Vec<usize> = (0..points.len()).filter(|&i| !taken[i]).collect();
    seeds.extend(sample(&mut rng, rest.len(), target - n_fps).into_iter().map(|k| rest[k]));
    let centers: Vec<Vec3> = seeds.iter().map(|&i| points[i]).collect();
    let radius = 0.25 * mean_nn_distance(&centers);
    let mut soup = TriangleSoup::new();
    for c in centers {
        soup.push(random_equilateral(c, radius, &mut rng), coarse_texture());
    }
    Ok(soup)
}

/// `count` random equilateral triangles with centres uniform in the box.
pub fn init_random_bbox(bbox: (Vec3, Vec3), count: usize, radius: f64, seed: u64) -> TriangleSoup {
    let (lo, hi) = bbox;
    let mut rng = rng_for(seed, 3);
    let mut soup = TriangleSoup::new();
    for _ in 0..count {
        let c = Vec3::from_fn(|k, _| if hi[k] > lo[k] { rng.random_range(lo[k]..hi[k]) } else { lo[k] });
        soup.push(random_equilateral(c, radius, &mut rng), coarse_texture());
    }
    soup
}

/// Where a triangle of a restructured soup came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Kept(usize),
    Child(usize),
}

/// Longest projected edge of `tri` over `views`: `(length, edge)`; edge
/// `k` joins vertices `k` and `(k + 1) % 3`.
fn longest_projected_edge(tri: &Triangle, views: &[Camera]) -> (f64, usize) {
    let mut best = (0.0, 0);
    for cam in views {
        let p = tri.v.map(|v| cam.project(&v));
        if p.iter().any(|q| q.clipped) {
            continue;
        }
        for k in 0..3 {
            let (a, b) = (p[k], p[(k + 1) % 3]);
            let len = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt() / cam.height as f64;
            if len > best.0 {
                best = (len, k);
            }
        }
    }
    best
}

/// Splits a triangle at the midpoint of edge `k`. Each child's finest
/// level samples the parent's pre-activation field; coarser levels are zero.
pub fn split_triangle(tri: &Triangle, tex: &TextureGridSet, k: usize) -> [(Triangle, TextureGridSet); 2] {
    let (i, j, o) = (k, (k + 1) % 3, (k + 2) % 3);
    let mid = (tri.v[i] + tri.v[j]) * 0.5;
    // parent barycentric weights (w0, w1, w2) of each child vertex
    let unit = |a: usize| {
        let mut w = [0.0; 3];
        w[a] = 1.0;
        w
    };
    let mut wm = [0.0; 3];
    wm[i] = 0.5;
    wm[j] = 0.5;
    let children = [([unit(i), wm, unit(o)], [tri.v[i], mid, tri.v[o]]), ([wm, unit(j), unit(o)], [mid, tri.v[j], tri.v[o]])];
    children.map(|(w, v)| {
        let field = |c: [f64; 2]| {
            let c0 = 1.0 - c[0] - c[1];
            let b1 = c0 * w[0][1] + c[0] * w[1][1] + c[1] * w[2][1];
            let b2 = c0 * w[0][2] + c[0] * w[1][2] + c[1] * w[2][2];
            tex.raw_at([b1, b2])
        };
        let child_tex = TextureGridSet::from_finest_fn(tex.r_min(), tex.r_max(), field);
        (Triangle::new(v[0], v[1], v[2]), child_tex)
    })
}

/// Splits every triangle whose longest projected edge exceeds
/// `threshold_fraction` of the image height in any view. The first child
/// takes the parent's slot, the second is appended.
pub fn split_long_edges(soup: &TriangleSoup, views: &[Camera], threshold_fraction: f64) -> (TriangleSoup, Vec<Origin>) {
    let longest = crate::par::map_slice(&soup.triangles, |t| longest_projected_edge(t, views));
    let mut out = TriangleSoup::new();
    let mut origins = Vec::new();
    let mut appended = Vec::new();
    for (t, (tri, tex)) in soup.triangles.iter().zip(&soup.textures).enumerate() {
        let (len, k) = longest[t];
        if len > threshold_fraction {
            let [a, b] = split_triangle(tri, tex, k);
            out.push(a.0, a.1);
            origins.push(Origin::Child(t));
            appended.push((b, t));
        } else {
            out.push(*tri, tex.clone());
            origins.push(Origin::Kept(t));
        }
    }
    for ((tri, tex), t) in appended {
        out.push(tri, tex);
        origins.push(Origin::Child(t));
    }
    (out, origins)
}

/// Number of pixels where each triangle is the deterministic winner.
pub fn coverage(soup: &TriangleSoup, views: &[Camera]) -> Vec<u64> {
    let mut cov = vec![0u64; soup.len()];
    for cam in views {
        let frags = raster::rasterize(soup, cam);
        for f in raster::winners_deterministic(soup, &frags).into_iter().flatten() {
            cov[f.tri as usize] += 1;
        }
    }
    cov
}

/// Removes the lowest-coverage triangles until at most `budget` remain.
/// Among equal coverage, later triangles go first.
pub fn prune_to_budget(soup: &TriangleSoup, coverage: &[u64], budget: usize) -> (TriangleSoup, Vec<Origin>) {
    let n = soup.len();
    if n <= budget {
        return (soup.clone(), (0..n).map(Origin::Kept).collect());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| coverage[a].cmp(&coverage[b]).then(b.cmp(&a)));
    let mut drop = vec![false; n];
    order[..n - budget].iter().for_each(|&i| drop[i] = true);
    keep_where(soup, |i| !drop[i])
}

fn keep_where(soup: &TriangleSoup, keep: impl Fn(usize) -> bool) -> (TriangleSoup, Vec<Origin>) {
    let mut out = TriangleSoup::new();
    let mut origins = Vec::new();
    for i in (0..soup.len()).filter(|&i| keep(i)) {
        out.push(soup.triangles[i], soup.textures[i].clone());
        origins.push(Origin::Kept(i));
    }
    (out, origins)
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

/// Drops never-visible triangles, then splits the globally longest
/// projected edge until exactly `budget` triangles remain. A soup that
/// would become empty keeps its triangles.
pub fn resample_random_init(
    soup: &TriangleSoup,
    coverage: &[u64],
    budget: usize,
    views: &[Camera],
) -> (TriangleSoup, Vec<Origin>) {
    let (kept, mut origins) = if coverage.iter().any(|&c| c > 0) {
        keep_where(soup, |i| coverage[i] > 0)
    } else {
        keep_where(soup, |_| true)
    };
    if kept.len() > budget {
        let cov: Vec<u64> = origins.iter().map(|o| if let Origin::Kept(i) = o { coverage[*i] } else { 0 }).collect();
        let (pruned, o2) = prune_to_budget(&kept, &cov, budget);
        let remapped = o2.iter().map(|o| if let Origin::Kept(i) = o { origins[*i] } else { *o }).collect();
        return (pruned, remapped);
    }
    let mut tris: Vec<Option<(Triangle, TextureGridSet)>> =
        kept.triangles.into_iter().zip(kept.textures).map(Some).collect();
    let mut heap: BinaryHeap<HeapItem> = BinaryHeap::new();
    for (i, t) in tris.iter().enumerate() {
        heap.push(HeapItem(longest_projected_edge(&t.as_ref().unwrap().0, views).0, i));
    }
    let mut live = tris.len();
    while live < budget {
        let Some(HeapItem(_, i)) = heap.pop() else { break };
        let (tri, tex) = tris[i].take().unwrap();
        let (_, k) = longest_projected_edge(&tri, views);
        let root = match origins[i] {
            Origin::Kept(r) | Origin::Child(r) => r,
        };
        for child in split_triangle(&tri, &tex, k) {
            heap.push(HeapItem(longest_projected_edge(&child.0, views).0, tris.len()));
            tris.push(Some(child));
            origins.push(Origin::Child(root));
        }
        live += 1;
    }
    let mut out = TriangleSoup::new();
    let mut out_origins = Vec::new();
    for (t, o) in tris.into_iter().zip(origins) {
        if let Some((tri, tex)) = t {
            out.push(tri, tex);
            out_origins.push(o);
        }
    }
    (out, out_origins)
}

/// Adam moments of one triangle's texture levels.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureMoments {
    pub m: Vec<Vec<Feature>>,
    pub v: Vec<Vec<Feature>>,
    pub steps: u64,
}

impl TextureMoments {
    pub fn zeros_for(tex: &TextureGridSet) -> Self {
        let z: Vec<Vec<Feature>> = tex.levels().iter().map(|l| vec![[0.0; CHANNELS]; l.values.len()]).collect();
        Self { m: z.clone(), v: z, steps: 0 }
    }
}

/// VectorAdam moments of one triangle's vertices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexMoments {
    pub m: [Vec3; 3],
    pub v: [f64; 3],
    pub steps: u64,
}

impl Default for VertexMoments {
    fn default() -> Self {
        Self { m: [Vec3::zeros(); 3], v: [0.0; 3], steps: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub fine_phase: bool,
    pub textures: Vec<TextureMoments>,
    pub vertices: Vec<VertexMoments>,
    pub net_m: Vec<f64>,
    pub net_v: Vec<f64>,
    pub net_steps: u64,
    /// Deterministic coverage from the last adaptive-control pass.
    pub coverage: Vec<u64>,
}

impl TrainState {
    pub fn new(soup: &TriangleSoup) -> Self {
        Self {
            iteration: 0,
            fine_phase: soup.textures.iter().any(|t| t.r_min() != t.r_max()),
            textures: soup.textures.iter().map(TextureMoments::zeros_for).collect(),
            vertices: vec![VertexMoments::default(); soup.len()],
            net_m: vec![0.0; PARAM_COUNT],
            net_v: vec![0.0; PARAM_COUNT],
            net_steps: 0,
            coverage: vec![0; soup.len()],
        }
    }

    /// Rebuilds per-triangle moments after a structural change: kept
    /// triangles keep theirs, new children start from zero.
    pub fn remap(&mut self, soup: &TriangleSoup, origins: &[Origin]) {
        self.textures = origins
            .iter()
            .zip(&soup.textures)
            .map(|(o, t)| match o {
                Origin::Kept(i) => self.textures[*i].clone(),
                Origin::Child(_) => TextureMoments::zeros_for(t),
            })
            .collect();
        self.vertices = origins
            .iter()
            .map(|o| match o {
                Origin::Kept(i) => self.vertices[*i],
                Origin::Child(_) => VertexMoments::default(),
            })
            .collect();
        self.coverage = origins.iter().map(|o| if let Origin::Kept(i) = o { self.coverage[*i] } else { 0 }).collect();
    }

    /// Whether every moment array matches the soup's parameter shapes.
    pub fn is_consistent_with(&self, soup: &TriangleSoup) -> bool {
        self.textures.len() == soup.len()
            && self.vertices.len() == soup.len()
            && self.textures.iter().zip(&soup.textures).all(|(m, t)| {
                m.m.len() == t.levels().len()
                    && m.v.len() == t.levels().len()
                    && m.m.iter().zip(t.levels()).all(|(a, l)| a.len() == l.values.len())
                    && m.v.iter().zip(t.levels()).all(|(a, l)| a.len() == l.values.len())
            })
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    /// `NaN` when no held-out evaluation ran at this iteration.
    pub psnr_holdout: f64,
    pub n_triangles: usize,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "iter,loss,l1,ssim,psnr_holdout,n_triangles,wall_seconds";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let psnr = if self.psnr_holdout.is_nan() { String::new() } else { format!("{}", self.psnr_holdout) };
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.iter, self.loss, self.l1, self.ssim, psnr, self.n_triangles, self.wall_seconds
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Mean held-out PSNR and SSIM of deterministic renders.
pub fn evaluate(soup: &TriangleSoup, net: &ShadingNet, data: &Dataset) -> (f64, f64) {
    if data.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for (cam, gt) in data.cameras.iter().zip(&data.images) {
        let out = raster::render_deterministic(soup, cam, net, data.background);
        p += metrics::psnr(&out.rgb, gt);
        s += metrics::ssim(&out.rgb, gt).0;
    }
    (p / data.len() as f64, s / data.len() as f64)
}

/// Trainable model.
#[derive(Debug, Clone)]
pub struct Model {
    pub soup: TriangleSoup,
    pub net: ShadingNet,
}

impl Model {
    /// Initial model: `soup` plus an Xavier-initialized shading net.
    pub fn new(soup: TriangleSoup, seed: u64) -> Self {
        Self { soup, net: ShadingNet::xavier(&mut rng_for(seed, 4)) }
    }
}

/// Loss and gradients of one view; `grads` receives the sum.
pub fn view_gradients(
    model: &Model,
    camera: &Camera,
    gt: &Image,
    background: [f64; 3],
    key: ViewKey,
    cfg: &TrainConfig,
    grads: &mut GradientBuffers,
) -> PhotometricLoss {
    let frags = raster::rasterize(&model.soup, camera);
    let mut buffers = grad::render_stochastic(&model.soup, camera, &model.net, background, &frags, key);
    let loss = photometric_loss(&buffers.rgb, gt, cfg.lambda);
    let d_rgb = photometric_loss_backward(&buffers.rgb, gt, cfg.lambda);
    buffers.loss_map = loss.map.clone();
    let n = camera.pixel_count().max(1) as f64;
    let weight: Vec<f64> = match cfg.score_weight {
        ScoreWeight::Combined => loss.map.iter().map(|l| l / n).collect(),
        ScoreWeight::L1 => loss.l1_map.iter().map(|l| l / n).collect(),
    };
    grad::backprop_color(&model.soup, &model.net, &buffers, &d_rgb, grads);
    grad::backprop_score(&model.soup, &frags, &buffers, &weight, grads);
    if cfg.boundary_gradients {
        grad::boundary_gradients(&model.soup, camera, &frags, &buffers, &d_rgb, grads);
    }
    loss
}

/// Applies one optimizer step with the given learning rates.
pub fn apply_step(model: &mut Model, state: &mut TrainState, grads: &GradientBuffers, lrs: [f64; 3]) {
    let [lr_f, lr_n, lr_v] = lrs;
    let soup = &mut model.soup;
    let mut work: Vec<(&mut TextureGridSet, &mut TextureMoments, &Vec<Feature>)> =
        soup.textures.iter_mut().zip(state.textures.iter_mut()).zip(&grads.features).map(|((t, m), g)| (t, m, g)).collect();
    crate::par::for_each_mut(&mut work, |_, (tex, mom, g)| {
        let per_level = tex.scatter_to_levels(g);
        mom.steps += 1;
        let t = mom.steps;
        for (k, lg) in per_level.iter().enumerate() {
            let params = tex.levels_mut()[k].values.as_flattened_mut();
            adam_step(params, lg.as_flattened(), mom.m[k].as_flattened_mut(), mom.v[k].as_flattened_mut(), lr_f, t);
        }
        tex.accumulate_levels();
    });
    state.net_steps += 1;
    adam_step(&mut model.net.params, &grads.net.params, &mut state.net_m, &mut state.net_v, lr_n, state.net_steps);
    for ((tri, mom), g) in soup.triangles.iter_mut().zip(state.vertices.iter_mut()).zip(&grads.vertices) {
        mom.steps += 1;
        vectoradam_step(&mut tri.v, g, &mut mom.m, &mut mom.v, lr_v, mom.steps);
    }
}

fn sample_views(n: usize, k: usize, seed: u64, iteration: usize, stream: u64) -> Vec<usize> {
    let mut rng = rng_for(seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), stream);
    let mut v = sample(&mut rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}

/// Switches every texture to the fine level range and resets their moments.
pub fn enter_fine_phase(model: &mut Model, state: &mut TrainState) {
    for tex in &mut model.soup.textures {
        *tex = tex.transition_coarse_to_fine(FINE_MIN, FINE_MAX);
    }
    state.textures = model.soup.textures.iter().map(TextureMoments::zeros_for).collect();
    state.fine_phase = true;
}

/// Periodic split and prune (or resample) on a fresh random view subset.
pub fn adaptive_control(model: &mut Model, state: &mut TrainState, data: &Dataset, cfg: &TrainConfig, iteration: usize) {
    let idx = sample_views(data.len(), cfg.split_views, cfg.seed, iteration, 6);
    let views: Vec<Camera> = idx.iter().map(|&i| data.cameras[i]).collect();
    let (split, origins) = split_long_edges(&model.soup, &views, cfg.split_fraction);
    state.remap(&split, &origins);
    model.soup = split;
    let cov = coverage(&model.soup, &views);
    let (next, origins) = match cfg.init {
        InitMode::Points => prune_to_budget(&model.soup, &cov, cfg.budget),
        InitMode::RandomBbox => resample_random_init(&model.soup, &cov, cfg.budget, &views),
    };
    state.coverage = cov;
    state.remap(&next, &origins);
    model.soup = next;
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub state: TrainState,
    pub log: Vec<MetricsRow>,
}

/// Runs `cfg.iterations` optimization steps from `model`.
pub fn train(model: Model, data: &Dataset, holdout: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    train_with(model, data, holdout, cfg, |_| {})
}

/// [`train`] with a callback receiving every metrics row as it is produced.
pub fn train_with(
    mut model: Model,
    data: &Dataset,
    holdout: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let mut state = TrainState::new(&model.soup);
    let mut log = Vec::new();
    let start = Instant::now();
    let total = cfg.iterations;
    for it in 0..total {
        state.iteration = it;
        if it >= cfg.coarse_end && !state.fine_phase {
            enter_fine_phase(&mut model, &mut state);
        }
        let views = sample_views(data.len(), cfg.views_per_step, cfg.seed, it, 5);
        let mut grads = GradientBuffers::zeros(&model.soup);
        let (mut loss, mut l1, mut ss) = (0.0, 0.0, 0.0);
        for &v in &views {
            let key = ViewKey { seed: cfg.seed, iteration: it as u64, view: v as u64 };
            let pl = view_gradients(&model, &data.cameras[v], &data.images[v], data.background, key, cfg, &mut grads);
            loss += pl.loss;
            l1 += pl.l1;
            ss += pl.ssim;
        }
        let nv = views.len().max(1) as f64;
        grads.scale(1.0 / nv);
        let (loss, l1, ss) = (loss / nv, l1 / nv, ss / nv);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { what: "loss", iteration: it });
        }
        if !grads.is_finite() {
            return Err(TrainError::NonFinite { what: "gradient", iteration: it });
        }
        let lrs = [cfg.lr_features, cfg.lr_net, cfg.lr_vertices].map(|lr| lr_with_decay(it, lr, total, cfg.lr_decay));
        apply_step(&mut model, &mut state, &grads, lrs);
        if !model.net.is_finite() || !model.soup.triangles.iter().all(|t| t.is_finite()) {
            return Err(TrainError::NonFinite { what: "parameter", iteration: it });
        }
        let done = it + 1;
        let adaptive_open = cfg.adaptive_until == 0 || done < cfg.adaptive_until;
        if done % cfg.adaptive_period == 0 && done < total && adaptive_open {
            adaptive_control(&mut model, &mut state, data, cfg, done);
        }
        let eval_now = holdout.is_some_and(|h| !h.is_empty()) && (done % cfg.eval_every.max(1) == 0 || done == total);
        let psnr = if eval_now { evaluate(&model.soup, &model.net, holdout.unwrap()).0 } else { f64::NAN };
        let row = MetricsRow {
            iter: done,
            loss,
            l1,
            ssim: ss,
            psnr_holdout: psnr,
            n_triangles: model.soup.len(),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_row(&row);
        log.push(row);
    }
    state.iteration = total;
    Ok(TrainOutput { model, state, log })
}
