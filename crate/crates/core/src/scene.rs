//! Geometric data model: triangles, cameras, datasets, projection.

use std::path::{Path, PathBuf};

use nalgebra::{Isometry3, Matrix3, Matrix4, Point3, Rotation3, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_buf::{Image, ImageError};
use crate::texture::TextureGridSet;

pub type Vec3 = nalgebra::Vector3<f64>;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed camera file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("frame image {path} does not exist")]
    MissingFrame { path: String },
    #[error("resolution mismatch in {path}: expected {expected_w}x{expected_h}, found {w}x{h}")]
    Resolution { path: String, expected_w: usize, expected_h: usize, w: usize, h: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("malformed PLY file {path}: {reason}")]
    Ply { path: String, reason: String },
    #[error("camera file {path} has no frames")]
    NoFrames { path: String },
}

/// One triangle of the soup. Its texture lives at the same index in
/// [`TriangleSoup::textures`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub v: [Vec3; 3],
}

impl Triangle {
    pub fn new(v1: Vec3, v2: Vec3, v3: Vec3) -> Self {
        Self { v: [v1, v2, v3] }
    }

    /// Point at barycentric `b = (b1, b2)`: `(1-b1-b2) v1 + b1 v2 + b2 v3`.
    pub fn point_at(&self, b: [f64; 2]) -> Vec3 {
        self.v[0] * (1.0 - b[0] - b[1]) + self.v[1] * b[0] + self.v[2] * b[1]
    }

    pub fn area(&self) -> f64 {
        0.5 * (self.v[1] - self.v[0]).cross(&(self.v[2] - self.v[0])).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }
}

/// Unstructured triangle set; `textures[i]` belongs to `triangles[i]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleSoup {
    pub triangles: Vec<Triangle>,
    pub textures: Vec<TextureGridSet>,
}

impl TriangleSoup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        debug_assert_eq!(self.triangles.len(), self.textures.len());
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn push(&mut self, tri: Triangle, tex: TextureGridSet) {
        self.triangles.push(tri);
        self.textures.push(tex);
    }

    /// Active texture level range, taken from the first triangle.
    pub fn levels(&self) -> Option<(u32, u32)> {
        self.textures.first().map(|t| (t.r_min(), t.r_max()))
    }

    pub fn refresh_textures(&mut self) {
        crate::par::for_each_mut(&mut self.textures, |_, t| t.accumulate_levels());
    }

    /// Axis-aligned bounds of all vertices.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        bounds_of(self.triangles.iter().flat_map(|t| t.v.iter().copied()))
    }
}

pub fn bounds_of(points: impl IntoIterator<Item = Vec3>) -> Option<(Vec3, Vec3)> {
    let mut it = points.into_iter();
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p))))
}

/// Pinhole camera. Camera space is right-handed with `+x` right, `+y`
/// down and `+z` forward; depth is the camera-space `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub world_to_camera: Isometry3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

/// Result of [`Camera::project`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    /// Set when `depth <= near`; `x`/`y` are meaningless then.
    pub clipped: bool,
}

impl Camera {
    pub fn new(world_to_camera: Isometry3<f64>, fx: f64, fy: f64, width: usize, height: usize) -> Self {
        Self {
            world_to_camera,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: 1e-4,
        }
    }

    /// Camera at `eye` looking at `target`; `up` is a world-space hint.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fx: f64, width: usize, height: usize) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vec3::new(1.0, 0.0, 0.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rot = Rotation3::from_matrix_unchecked(rot);
        let t = -(rot * eye);
        let iso = Isometry3::from_parts(Translation3::from(t), UnitQuaternion::from_rotation_matrix(&rot));
        Self::new(iso, fx, fx, width, height)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.world_to_camera.transform_point(&Point3::from(*p)).coords
    }

    /// Camera centre in world space.
    pub fn center(&self) -> Vec3 {
        self.world_to_camera.inverse_transform_point(&Point3::origin()).coords
    }

    pub fn project(&self, p: &Vec3) -> Projected {
        let c = self.to_camera(p);
        self.project_camera_space(&c)
    }

    pub fn project_camera_space(&self, c: &Vec3) -> Projected {
        let d = c.z;
        if d <= self.near {
            return Projected { x: f64::NAN, y: f64::NAN, depth: d, clipped: true };
        }
        Projected { x: self.fx * c.x / d + self.cx, y: self.fy * c.y / d + self.cy, depth: d, clipped: false }
    }

    /// Inverse of [`Camera::project`] at the given depth.
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> Vec3 {
        let c = Point3::new((x - self.cx) / self.fx * depth, (y - self.cy) / self.fy * depth, depth);
        self.world_to_camera.inverse_transform_point(&c).coords
    }

    /// Unit world-space direction of the ray through screen point `(x, y)`.
    pub fn ray_dir(&self, x: f64, y: f64) -> Vec3 {
        let c = Vec3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        self.world_to_camera.inverse_transform_vector(&c).normalize()
    }

    /// Ray direction through the centre of pixel `(px, py)`.
    pub fn pixel_dir(&self, px: usize, py: usize) -> Vec3 {
        self.ray_dir(px as f64 + 0.5, py as f64 + 0.5)
    }

    /// Camera-to-world matrix in the OpenGL axis convention
    /// (`+y` up, looking down `-z`).
    pub fn to_gl_transform(&self) -> Matrix4<f64> {
        let flip = Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, 1.0));
        self.world_to_camera.inverse().to_homogeneous() * flip
    }

    pub fn from_gl_transform(c2w: &Matrix4<f64>, fx: f64, fy: f64, width: usize, height: usize) -> Self {
        let flip = Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, 1.0));
        let c2w_cv = c2w * flip;
        let r: Matrix3<f64> = c2w_cv.fixed_view::<3, 3>(0, 0).into_owned();
        // re-orthonormalize; the file stores limited precision
        let rot = Rotation3::from_matrix(&r);
        let t = Vec3::new(c2w_cv[(0, 3)], c2w_cv[(1, 3)], c2w_cv[(2, 3)]);
        let inv_rot = rot.inverse();
        let iso = Isometry3::from_parts(
            Translation3::from(-(inv_rot * t)),
            UnitQuaternion::from_rotation_matrix(&inv_rot),
        );
        Self::new(iso, fx, fy, width, height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Posed images sharing one background colour.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub background: [f64; 3],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn set_near(&mut self, near: f64) {
        for c in &mut self.cameras {
            c.near = near;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraFile {
    pub camera_angle_x: f64,
    /// Optional image size, used when rendering without images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    pub frames: Vec<CameraFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraFrame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

impl CameraFile {
    pub fn read(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| SceneError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|source| SceneError::Json { path: path.display().to_string(), source })
    }

    pub fn write(&self, path: &Path) -> Result<(), SceneError> {
        let text = serde_json::to_string_pretty(self).expect("camera file serializes");
        std::fs::write(path, text).map_err(|source| SceneError::Io { path: path.display().to_string(), source })
    }

    pub fn from_cameras(cameras: &[Camera], file_paths: &[String]) -> Self {
        let cam = &cameras[0];
        let camera_angle_x = 2.0 * (0.5 * cam.width as f64 / cam.fx).atan();
        let frames = cameras
            .iter()
            .zip(file_paths)
            .map(|(c, f)| {
                let m = c.to_gl_transform();
                CameraFrame {
                    file_path: f.clone(),
                    transform_matrix: std::array::from_fn(|r| std::array::from_fn(|col| m[(r, col)])),
                }
            })
            .collect();
        Self { camera_angle_x, w: Some(cam.width), h: Some(cam.height), frames }
    }

    /// Cameras for an image size, with the default near plane.
    pub fn cameras(&self, width: usize, height: usize) -> Vec<Camera> {
        let fx = 0.5 * width as f64 / (0.5 * self.camera_angle_x).tan();
        let mut cams: Vec<Camera> = self
            .frames
            .iter()
            .map(|f| {
                let m = Matrix4::from_fn(|r, c| f.transform_matrix[r][c]);
                Camera::from_gl_transform(&m, fx, fx, width, height)
            })
            .collect();
        let near = default_near(&cams);
        for c in &mut cams {
            c.near = near;
        }
        cams
    }
}

/// `1e-4` times the diagonal of the camera-centre bounding box.
pub fn default_near(cameras: &[Camera]) -> f64 {
    match bounds_of(cameras.iter().map(|c| c.center())) {
        Some((lo, hi)) if (hi - lo).norm() > 0.0 => 1e-4 * (hi - lo).norm(),
        _ => 1e-4,
    }
}

fn frame_image_path(image_dir: &Path, file_path: &str) -> PathBuf {
    let p = image_dir.join(file_path);
    if p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

/// Loads a NeRF-synthetic style camera file plus its PNG frames.
pub fn load_dataset(camera_file: &Path, image_dir: &Path, background: [f64; 3]) -> Result<Dataset, SceneError> {
    let file = CameraFile::read(camera_file)?;
    if file.frames.is_empty() {
        return Err(SceneError::NoFrames { path: camera_file.display().to_string() });
    }
    let mut images = Vec::with_capacity(file.frames.len());
    for frame in &file.frames {
        let path = frame_image_path(image_dir, &frame.file_path);
        if !path.exists() {
            return Err(SceneError::MissingFrame { path: path.display().to_string() });
        }
        let img = Image::load_png(&path, background)?;
        if let Some(first) = images.first() {
            let first: &Image = first;
            if !first.same_shape(&img) {
                return Err(SceneError::Resolution {
                    path: path.display().to_string(),
                    expected_w: first.width,
                    expected_h: first.height,
                    w: img.width,
                    h: img.height,
                });
            }
        }
        images.push(img);
    }
    let cameras = file.cameras(images[0].width, images[0].height);
    Ok(Dataset { cameras, images, background })
}

/// Reads vertex positions from an ASCII PLY file with `x`, `y`, `z` properties.
pub fn read_ply_points(path: &Path) -> Result<Vec<Vec3>, SceneError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| SceneError::Io { path: path.display().to_string(), source })?;
    parse_ply_points(&text).map_err(|reason| SceneError::Ply { path: path.display().to_string(), reason })
}

pub fn parse_ply_points(text: &str) -> Result<Vec<Vec3>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing 'ply' magic".into());
    }
    let mut n_vertices = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = lines.next().ok_or("unterminated header")?.trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err("only ascii PLY is supported".into());
                }
            }
            Some("element") => {
                let name = tok.next().ok_or("element without name")?;
                in_vertex = name == "vertex";
                if in_vertex {
                    let n = tok.next().ok_or("vertex element without count")?;
                    n_vertices = Some(n.parse::<usize>().map_err(|e| e.to_string())?);
                }
            }
            Some("property") if in_vertex => {
                let name = tok.last().ok_or("property without name")?;
                props.push(name.to_string());
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let n = n_vertices.ok_or("no vertex element")?;
    let col = |name: &str| props.iter().position(|p| p == name).ok_or(format!("missing property {name}"));
    let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let line = lines.next().ok_or("fewer vertex rows than declared")?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        if vals.len() < props.len() {
            return Err(format!("short vertex row: {line}"));
        }
        out.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
    }
    Ok(out)
}

pub fn write_ply_points(path: &Path, points: &[Vec3]) -> std::io::Result<()> {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    );
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    std::fs::write(path, s)
}
