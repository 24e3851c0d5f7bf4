//! Command implementations, scene persistence and synthetic datasets.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;
use crate::raster;
use crate::scene::{self, Camera, CameraFile, Dataset, Triangle, TriangleSoup, Vec3};
use crate::shading::{ShadingNet, PARAM_COUNT, PARAM_SHAPES};
use crate::texture::{self, grid_point_count, Encoding, Lattice, TextureGridSet, CHANNELS};
use crate::trainer::{self, InitMode, Model, TrainConfig};

pub const SCENE_MAGIC: &[u8; 8] = b"TRISOUP\0";
pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneFileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: not a scene file")]
    Magic { path: String },
    #[error("{path}: scene file version {found}, expected {expected}")]
    Version { path: String, found: u32, expected: u32 },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

#[derive(Serialize, Deserialize)]
struct SceneHeader {
    version: u32,
    n_triangles: usize,
    /// Per triangle `[r_min, r_max]`.
    levels: Vec<[u32; 2]>,
    /// Per triangle `"logit"` or `"direct"`.
    encodings: Vec<String>,
    channels: usize,
    net_shapes: Vec<[usize; 2]>,
}

/// Trained scene: geometry, pre-activation lattices, shading net and
/// background colour. Reals are stored as little-endian `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub soup: TriangleSoup,
    pub net: ShadingNet,
    pub background: [f64; 3],
}

impl SceneFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = SceneHeader {
            version: SCENE_VERSION,
            n_triangles: self.soup.len(),
            levels: self.soup.textures.iter().map(|t| [t.r_min(), t.r_max()]).collect(),
            encodings: self
                .soup
                .textures
                .iter()
                .map(|t| match t.encoding() {
                    Encoding::Logit => "logit".to_string(),
                    Encoding::Direct => "direct".to_string(),
                })
                .collect(),
            channels: CHANNELS,
            net_shapes: PARAM_SHAPES.iter().map(|&(a, b)| [a, b]).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(SCENE_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        for t in &self.soup.triangles {
            t.v.iter().flat_map(|v| v.iter()).for_each(|&c| put(c));
        }
        for tex in &self.soup.textures {
            for lat in tex.levels() {
                lat.values.iter().flatten().for_each(|&c| put(c));
            }
        }
        self.net.params.iter().for_each(|&c| put(c));
        self.background.iter().for_each(|&c| put(c));
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, SceneFileError> {
        let p = || path.display().to_string();
        let fmt = |reason: &str| SceneFileError::Format { path: p(), reason: reason.to_string() };
        if bytes.len() < 16 || &bytes[..8] != SCENE_MAGIC {
            return Err(SceneFileError::Magic { path: p() });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hbytes = bytes.get(16..16 + hlen).ok_or_else(|| fmt("truncated header"))?;
        let value: serde_json::Value = serde_json::from_slice(hbytes).map_err(|e| fmt(&e.to_string()))?;
        let found = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| fmt("missing version"))? as u32;
        if found != SCENE_VERSION {
            return Err(SceneFileError::Version { path: p(), found, expected: SCENE_VERSION });
        }
        let header: SceneHeader = serde_json::from_value(value).map_err(|e| fmt(&e.to_string()))?;
        let n = header.n_triangles;
        if header.levels.len() != n || header.encodings.len() != n || header.channels != CHANNELS {
            return Err(fmt("inconsistent header sizes"));
        }
        if header.net_shapes != PARAM_SHAPES.iter().map(|&(a, b)| [a, b]).collect::<Vec<_>>() {
            return Err(fmt("unsupported shading net shape"));
        }
        let texels: usize = header.levels.iter().map(|&[a, b]| (a..=b).map(grid_point_count).sum::<usize>()).sum();
        let reals = 9 * n + texels * CHANNELS + PARAM_COUNT + 3;
        let body = &bytes[16 + hlen..];
        if body.len() != reals * 8 {
            return Err(fmt(&format!("payload holds {} bytes, expected {}", body.len(), reals * 8)));
        }
        let mut vals = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut next = || vals.next().expect("payload size checked");
        let triangles: Vec<Triangle> = (0..n)
            .map(|_| {
                let mut v = [Vec3::zeros(); 3];
                for vk in &mut v {
                    *vk = Vec3::new(next(), next(), next());
                }
                Triangle { v }
            })
            .collect();
        let mut textures = Vec::with_capacity(n);
        for (&[r0, r1], enc) in header.levels.iter().zip(&header.encodings) {
            if r0 > r1 || r1 > 12 {
                return Err(fmt("invalid level range"));
            }
            let encoding = match enc.as_str() {
                "logit" => Encoding::Logit,
                "direct" => Encoding::Direct,
                _ => return Err(fmt("unknown encoding")),
            };
            let levels = (r0..=r1)
                .map(|r| Lattice {
                    level: r,
                    values: (0..grid_point_count(r)).map(|_| std::array::from_fn(|_| next())).collect(),
                })
                .collect();
            textures.push(TextureGridSet::from_levels(levels, encoding));
        }
        let net = ShadingNet::from_params((0..PARAM_COUNT).map(|_| next()).collect()).expect("parameter count checked");
        let background = [next(), next(), next()];
        Ok(Self { soup: TriangleSoup { triangles, textures }, net, background })
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneFileError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| SceneFileError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, SceneFileError> {
        let bytes = std::fs::read(path).map_err(|source| SceneFileError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes, path)
    }
}

/// Parameters of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub triangles: usize,
    pub views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub background: [f64; 3],
    pub camera_distance: f64,
    pub camera_angle_x: f64,
    /// Half extent of the cube holding triangle centres.
    pub extent: f64,
    /// Circumradius range of ground-truth triangles.
    pub min_size: f64,
    pub max_size: f64,
    /// Probability that a coarse opacity node is transparent.
    pub hole_probability: f64,
    /// Surface samples written to `points.ply`.
    pub points: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            triangles: 30,
            views: 20,
            test_views: 4,
            width: 64,
            height: 64,
            seed: 0,
            background: [1.0; 3],
            camera_distance: 4.0,
            camera_angle_x: 0.7,
            extent: 0.6,
            min_size: 0.25,
            max_size: 0.6,
            hole_probability: 0.2,
            points: 2000,
        }
    }
}

impl SyntheticSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Random ground-truth soup with coarse colour and opacity patterns.
pub fn synthetic_soup(spec: &SyntheticSpec) -> TriangleSoup {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut soup = TriangleSoup::new();
    for _ in 0..spec.triangles {
        let e = spec.extent;
        let c = Vec3::new(rng.random_range(-e..e), rng.random_range(-e..e), rng.random_range(-e..e));
        let r = rng.random_range(spec.min_size..spec.max_size);
        let base = trainer::random_equilateral(c, r, &mut rng);
        // jitter vertices so triangles are not all equilateral
        let v = base.v.map(|v| v + Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)) * r);
        let color: Vec<[f64; 3]> = (0..grid_point_count(1)).map(|_| std::array::from_fn(|_| rng.random_range(-2.5..2.5))).collect();
        let alpha: Vec<f64> =
            (0..grid_point_count(2)).map(|_| if rng.random_bool(spec.hole_probability) { -8.0 } else { 8.0 }).collect();
        let coarse = Lattice { level: 1, values: color.iter().map(|c| [c[0], c[1], c[2], 0.0, 0.0, 0.0, 0.0, 0.0]).collect() };
        let tex = TextureGridSet::from_finest_fn(2, 2, |b| {
            let mut f = coarse.interpolate(b);
            // opaque skip path: A = sigmoid(8)
            f[3] = 8.0;
            f
        });
        let mut levels = tex.levels().to_vec();
        for (val, a) in levels[0].values.iter_mut().zip(&alpha) {
            val[texture::ALPHA_CHANNEL] = *a;
        }
        soup.push(Triangle::new(v[0], v[1], v[2]), TextureGridSet::from_levels(levels, Encoding::Logit));
    }
    soup
}

/// Cameras on a sphere around the origin: a Fibonacci lattice for the
/// training views and random positions for the held-out ones.
pub fn synthetic_cameras(spec: &SyntheticSpec) -> (Vec<Camera>, Vec<Camera>) {
    let fx = 0.5 * spec.width as f64 / (0.5 * spec.camera_angle_x).tan();
    let look = |dir: Vec3| {
        let up = if dir.z.abs() > 0.95 { Vec3::y() } else { Vec3::z() };
        Camera::look_at(dir * spec.camera_distance, Vec3::zeros(), up, fx, spec.width, spec.height)
    };
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let n = spec.views.max(1) as f64;
    let train = (0..spec.views)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            look(Vec3::new(r * t.cos(), r * t.sin(), z))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let test = (0..spec.test_views)
        .map(|_| {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            look(if v.norm() < 1e-3 { Vec3::x() } else { v.normalize() })
        })
        .collect();
    (train, test)
}

fn sample_surface_points(soup: &TriangleSoup, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9017);
    let areas: Vec<f64> = soup.triangles.iter().map(|t| t.area()).collect();
    let total: f64 = areas.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut k = 0;
            while k + 1 < areas.len() && pick >= areas[k] {
                pick -= areas[k];
                k += 1;
            }
            let (mut a, mut b): (f64, f64) = (rng.random(), rng.random());
            if a + b > 1.0 {
                a = 1.0 - a;
                b = 1.0 - b;
            }
            soup.triangles[k].point_at([a, b])
        })
        .collect()
}

/// Round-trips cameras through the JSON representation so that renders
/// made now match renders made from the written file.
fn through_json(cameras: &[Camera], names: &[String]) -> (CameraFile, Vec<Camera>) {
    let file = CameraFile::from_cameras(cameras, names);
    let file: CameraFile = serde_json::from_str(&serde_json::to_string(&file).expect("serialize")).expect("parse");
    let cams = file.cameras(cameras[0].width, cameras[0].height);
    (file, cams)
}

/// Renders every camera of a split and writes its PNGs and camera file.
fn write_split(out: &Path, split: &str, cameras: &[Camera], scene: &SceneFile) -> Result<()> {
    if cameras.is_empty() {
        return Ok(());
    }
    std::fs::create_dir_all(out.join(split))?;
    let names: Vec<String> = (0..cameras.len()).map(|i| format!("./{split}/r_{i:03}")).collect();
    let (file, cams) = through_json(cameras, &names);
    file.write(&out.join(format!("transforms_{split}.json")))?;
    for (cam, name) in cams.iter().zip(&names) {
        let img = raster::render_deterministic(&scene.soup, cam, &scene.net, scene.background).rgb;
        img.save_png(&out.join(format!("{name}.png")))?;
    }
    Ok(())
}

/// Writes a synthetic dataset: `transforms_{train,test}.json`, PNGs under
/// `train/` and `test/`, the ground-truth scene `gt.scene` and `points.ply`.
pub fn make_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let scene = SceneFile { soup: synthetic_soup(spec), net: ShadingNet::zeros(), background: spec.background };
    let (train, test) = synthetic_cameras(spec);
    write_split(out, "train", &train, &scene)?;
    write_split(out, "test", &test, &scene)?;
    scene.save(&out.join("gt.scene"))?;
    scene::write_ply_points(&out.join("points.ply"), &sample_surface_points(&scene.soup, spec.points, spec.seed))?;
    Ok(())
}

/// Loads `transforms_<split>.json` and its frames from `dir`.
pub fn load_split(dir: &Path, camera_file: &str, background: [f64; 3], near: Option<f64>) -> Result<Dataset> {
    let path = dir.join(camera_file);
    let mut data = scene::load_dataset(&path, dir, background).with_context(|| format!("loading dataset {}", path.display()))?;
    if let Some(n) = near {
        data.set_near(n);
    }
    Ok(data)
}

/// Builds the initial soup for a training run.
pub fn initial_soup(cfg: &TrainConfig, data: &Dataset) -> Result<TriangleSoup> {
    let count = if cfg.init_count == 0 { cfg.budget } else { cfg.init_count };
    match cfg.init {
        InitMode::Points => {
            let pts = scene::read_ply_points(&cfg.points)?;
            Ok(trainer::init_triangles(&pts, count, cfg.seed)?)
        }
        InitMode::RandomBbox => {
            let bbox = match (cfg.bbox_min, cfg.bbox_max) {
                (Some(lo), Some(hi)) => (Vec3::from(lo), Vec3::from(hi)),
                _ if cfg.points.exists() => scene::bounds_of(scene::read_ply_points(&cfg.points)?)
                    .context("point cloud is empty")?,
                _ => {
                    // fall back to the region the cameras look at
                    let (lo, hi) = scene::bounds_of(data.cameras.iter().map(|c| c.center())).context("no cameras")?;
                    let mid = (lo + hi) * 0.5;
                    let half = (hi - lo) * 0.25;
                    (mid - half, mid + half)
                }
            };
            Ok(trainer::init_random_bbox(bbox, count, cfg.init_radius, cfg.seed))
        }
    }
}

/// Final held-out report of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub psnr: f64,
    pub ssim: f64,
    pub n_triangles: usize,
    pub iterations: usize,
    pub wall_seconds: f64,
}

/// Trains from a config; writes `scene.bin`, `metrics.csv` and
/// `report.json` into the configured output directory.
pub fn cmd_train(config: &Path, seed: Option<u64>) -> Result<TrainReport> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    run_training(&cfg)
}

pub fn run_training(cfg: &TrainConfig) -> Result<TrainReport> {
    let data = load_split(&cfg.data, &cfg.train_cameras, cfg.background, cfg.near)?;
    let holdout = if !cfg.test_cameras.is_empty() && cfg.data.join(&cfg.test_cameras).exists() {
        Some(load_split(&cfg.data, &cfg.test_cameras, cfg.background, cfg.near)?)
    } else {
        None
    };
    let soup = initial_soup(cfg, &data)?;
    let model = Model::new(soup, cfg.seed);
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let csv_path = cfg.out.join("metrics.csv");
    let mut csv = std::io::BufWriter::new(
        std::fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?,
    );
    writeln!(csv, "{}", trainer::METRICS_HEADER)?;
    let mut io_err = None;
    let out = trainer::train_with(model, &data, holdout.as_ref(), cfg, |row| {
        if let Err(e) = writeln!(csv, "{}", row.to_csv()) {
            io_err.get_or_insert(e);
        }
        if !row.psnr_holdout.is_nan() {
            log::info!("iter {} loss {:.5} psnr {:.2} triangles {}", row.iter, row.loss, row.psnr_holdout, row.n_triangles);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing metrics");
    }
    csv.flush()?;
    let scene = SceneFile { soup: out.model.soup, net: out.model.net, background: cfg.background };
    scene.save(&cfg.out.join("scene.bin"))?;
    let (psnr, ssim) = match &holdout {
        Some(h) => trainer::evaluate(&scene.soup, &scene.net, h),
        None => trainer::evaluate(&scene.soup, &scene.net, &data),
    };
    let report = TrainReport {
        psnr,
        ssim,
        n_triangles: scene.soup.len(),
        iterations: cfg.iterations,
        wall_seconds: out.log.last().map_or(0.0, |r| r.wall_seconds),
    };
    std::fs::write(cfg.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Deterministic renders of every camera in `cameras`, written as
/// `<out>/r_000.png` and so on.
pub fn cmd_render(scene_path: &Path, cameras: &Path, out: &Path, size: Option<(usize, usize)>) -> Result<Vec<PathBuf>> {
    let scene = SceneFile::load(scene_path)?;
    let file = CameraFile::read(cameras)?;
    let (w, h) = match (size, file.w, file.h) {
        (Some(s), _, _) => s,
        (None, Some(w), Some(h)) => (w, h),
        _ => bail!("{} has no image size; pass --width and --height", cameras.display()),
    };
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (i, cam) in file.cameras(w, h).iter().enumerate() {
        let img = raster::render_deterministic(&scene.soup, cam, &scene.net, scene.background).rgb;
        let path = out.join(format!("r_{i:03}.png"));
        img.save_png(&path)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
}

impl std::fmt::Display for EvalTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:>6} {:>10} {:>8} {:>8}", "view", "psnr", "ssim", "mae")?;
        for r in &self.rows {
            writeln!(f, "{:>6} {:>10.4} {:>8.5} {:>8.5}", r.view, r.psnr, r.ssim, r.mae)?;
        }
        let m = &self.mean;
        write!(f, "{:>6} {:>10.4} {:>8.5} {:>8.5}", "mean", m.psnr, m.ssim, m.mae)
    }
}

/// Compares deterministic renders against a dataset's images.
pub fn evaluate_scene(scene: &SceneFile, data: &Dataset) -> Result<EvalTable> {
    let mut rows = Vec::new();
    for (i, (cam, gt)) in data.cameras.iter().zip(&data.images).enumerate() {
        let img = raster::render_deterministic(&scene.soup, cam, &scene.net, scene.background).rgb;
        if !img.same_shape(gt) {
            bail!("view {i}: resolution mismatch");
        }
        rows.push(EvalRow { view: i, psnr: metrics::psnr(&img, gt), ssim: metrics::ssim(&img, gt).0, mae: metrics::mae(&img, gt) });
    }
    let n = rows.len().max(1) as f64;
    let mean = EvalRow {
        view: rows.len(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
    };
    Ok(EvalTable { rows, mean })
}

/// Evaluates a scene on `transforms_<split>.json` of a dataset directory.
pub fn cmd_eval(scene_path: &Path, data_dir: &Path, split: &str) -> Result<EvalTable> {
    let scene = SceneFile::load(scene_path)?;
    let data = load_split(data_dir, &format!("transforms_{split}.json"), scene.background, None)?;
    evaluate_scene(&scene, &data)
}

/// Triangle geometry as `f32` little-endian, 9 values per triangle.
pub fn geometry_bytes(soup: &TriangleSoup) -> Vec<u8> {
    soup.triangles.iter().flat_map(|t| t.v.iter().flat_map(|v| v.iter().flat_map(|&c| (c as f32).to_le_bytes()))).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackMeta {
    pub n_triangles: usize,
    pub level: u32,
    pub texels_per_triangle: usize,
    pub atlas_width: usize,
    pub atlas_height: usize,
    pub background: [f64; 3],
}

/// Packs a trained scene for deployment: `atlas_a.png`, `atlas_b.png`,
/// `layout.json`, `geometry.bin`, `net.json` and `meta.json`.
pub fn cmd_pack(scene_path: &Path, out: &Path) -> Result<PackMeta> {
    let scene = SceneFile::load(scene_path)?;
    std::fs::create_dir_all(out)?;
    let packed = texture::quantize_pack_atlas(&scene.soup)?;
    packed.save(out)?;
    std::fs::write(out.join("geometry.bin"), geometry_bytes(&scene.soup))?;
    std::fs::write(out.join("net.json"), serde_json::to_string(&scene.net.params)?)?;
    let meta = PackMeta {
        n_triangles: scene.soup.len(),
        level: packed.level,
        texels_per_triangle: grid_point_count(packed.level),
        atlas_width: packed.width,
        atlas_height: packed.height,
        background: scene.background,
    };
    std::fs::write(out.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Scene with every texture replaced by its finalized single level.
pub fn finalized(scene: &SceneFile) -> SceneFile {
    let mut s = scene.clone();
    s.soup.textures = s.soup.textures.iter().map(|t| t.finalize()).collect();
    s
}

/// Scene rebuilt from a packed directory.
pub fn unpack_scene(scene: &SceneFile, dir: &Path) -> Result<SceneFile> {
    let packed = texture::PackedAtlas::load(dir)?;
    let mut s = scene.clone();
    s.soup.textures = texture::unpack_atlas(&packed);
    if s.soup.textures.len() != s.soup.triangles.len() {
        bail!("packed atlas holds {} triangles, scene has {}", s.soup.textures.len(), s.soup.triangles.len());
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_file_round_trip_is_bit_exact() {
        let mut soup = synthetic_soup(&SyntheticSpec { triangles: 3, ..Default::default() });
        soup.textures[1] = soup.textures[1].transition_coarse_to_fine(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = SceneFile { soup, net: ShadingNet::xavier(&mut rng), background: [0.1, 0.2, 1.0 / 3.0] };
        let bytes = scene.to_bytes();
        let back = SceneFile::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, scene);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn scene_file_rejects_other_versions() {
        let scene = SceneFile { soup: TriangleSoup::new(), net: ShadingNet::zeros(), background: [1.0; 3] };
        let bytes = scene.to_bytes();
        let text = String::from_utf8_lossy(&bytes).replace("\"version\":1", "\"version\":7");
        let err = SceneFile::from_bytes(text.as_bytes(), Path::new("s.bin")).unwrap_err();
        assert!(matches!(err, SceneFileError::Version { found: 7, .. }), "{err}");
        assert!(matches!(SceneFile::from_bytes(b"nonsense-bytes-here", Path::new("s")), Err(SceneFileError::Magic { .. })));
    }

    #[test]
    fn geometry_is_nine_f32_per_triangle() {
        let soup = synthetic_soup(&SyntheticSpec { triangles: 7, ..Default::default() });
        assert_eq!(geometry_bytes(&soup).len(), 36 * 7);
    }
}
