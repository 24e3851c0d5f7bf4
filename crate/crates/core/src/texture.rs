//! Atlas-free per-triangle textures on barycentric subdivision lattices.
//!
//! Level `R` stores one 8-channel feature at every lattice point
//! `(i / 2^R, j / 2^R)` with `i + j <= 2^R`, where `i` runs along the
//! `b1` axis and `j` along `b2`. Channels 0..7 are colour features and
//! channel 7 is opacity. During training the effective texture is the sum
//! of all active levels resampled onto the finest lattice, passed through a
//! sigmoid. After training only the finest, activated lattice is kept.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::TriangleSoup;
use crate::sigmoid;

pub const CHANNELS: usize = 8;
pub const COLOR_CHANNELS: usize = 7;
pub const ALPHA_CHANNEL: usize = 7;

pub type Feature = [f64; CHANNELS];

pub const ATLAS_SIZE: usize = 4096;

/// Number of lattice points at level `r`: `(2^r + 1)(2^r + 2) / 2`.
pub const fn grid_point_count(r: u32) -> usize {
    let n = 1usize << r;
    (n + 1) * (n + 2) / 2
}

/// Maximum number of triangles whose level-`r` lattices fit in one
/// `4096 x 4096` atlas.
pub const fn atlas_capacity(r: u32) -> usize {
    ATLAS_SIZE * ATLAS_SIZE / grid_point_count(r)
}

/// Flat index of lattice point `(i, j)` at level `r`. Rows run over `j`.
#[inline]
pub fn lattice_index(r: u32, i: usize, j: usize) -> usize {
    let n = 1usize << r;
    debug_assert!(i + j <= n);
    j * (n + 1) - j * (j.saturating_sub(1)) / 2 + i
}

/// All `(i, j)` of level `r` in flat-index order.
pub fn lattice_points(r: u32) -> Vec<(usize, usize)> {
    let n = 1usize << r;
    (0..=n).flat_map(|j| (0..=n - j).map(move |i| (i, j))).collect()
}

/// Barycentric coordinates `(b1, b2)` of lattice point `(i, j)`.
#[inline]
pub fn lattice_coord(r: u32, i: usize, j: usize) -> [f64; 2] {
    let n = (1u64 << r) as f64;
    [i as f64 / n, j as f64 / n]
}

/// Three lattice points and weights whose blend gives the value at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub idx: [usize; 3],
    pub w: [f64; 3],
    /// Whether the containing micro-triangle is the down-oriented one.
    pub upper: bool,
}

impl Stencil {
    /// `d w_k / d (b1, b2)` inside the containing micro-triangle.
    pub fn weight_jacobian(&self, r: u32) -> [[f64; 2]; 3] {
        let n = (1u64 << r) as f64;
        if self.upper {
            [[n, n], [-n, 0.0], [0.0, -n]]
        } else {
            [[-n, -n], [n, 0.0], [0.0, n]]
        }
    }
}

/// Locates the micro-triangle of the level-`r` subdivision containing `b`.
pub fn stencil(r: u32, b: [f64; 2]) -> Stencil {
    let n = 1usize << r;
    let nf = n as f64;
    let b1 = b[0].clamp(0.0, 1.0);
    let b2 = b[1].clamp(0.0, 1.0 - b1);
    let u = b1 * nf;
    let v = b2 * nf;
    let mut i0 = (u.floor() as usize).min(n - 1);
    let mut j0 = (v.floor() as usize).min(n - 1);
    if i0 + j0 > n - 1 {
        // on the hypotenuse at a lattice node; step into a valid cell
        if i0 > 0 {
            i0 = n - 1 - j0;
        } else {
            j0 = n - 1 - i0;
        }
    }
    let fu = u - i0 as f64;
    let fv = v - j0 as f64;
    // the last diagonal row has no upper cell; rounding can push fu + fv past 1 there
    if fu + fv <= 1.0 || i0 + j0 + 1 == n {
        Stencil {
            idx: [lattice_index(r, i0, j0), lattice_index(r, i0 + 1, j0), lattice_index(r, i0, j0 + 1)],
            w: [1.0 - fu - fv, fu, fv],
            upper: false,
        }
    } else {
        Stencil {
            idx: [lattice_index(r, i0 + 1, j0 + 1), lattice_index(r, i0, j0 + 1), lattice_index(r, i0 + 1, j0)],
            w: [fu + fv - 1.0, 1.0 - fu, 1.0 - fv],
            upper: true,
        }
    }
}

#[inline]
pub fn blend(values: &[Feature], s: &Stencil) -> Feature {
    let (a, b, c) = (&values[s.idx[0]], &values[s.idx[1]], &values[s.idx[2]]);
    std::array::from_fn(|k| s.w[0] * a[k] + s.w[1] * b[k] + s.w[2] * c[k])
}

#[inline]
pub fn blend_channel(values: &[Feature], s: &Stencil, ch: usize) -> f64 {
    s.w[0] * values[s.idx[0]][ch] + s.w[1] * values[s.idx[1]][ch] + s.w[2] * values[s.idx[2]][ch]
}

/// One resolution level of a triangle texture.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub level: u32,
    pub values: Vec<Feature>,
}

impl Lattice {
    pub fn zeros(level: u32) -> Self {
        Self { level, values: vec![[0.0; CHANNELS]; grid_point_count(level)] }
    }

    pub fn constant(level: u32, f: Feature) -> Self {
        Self { level, values: vec![f; grid_point_count(level)] }
    }

    /// Samples `field` at every lattice point.
    pub fn from_fn(level: u32, mut field: impl FnMut([f64; 2]) -> Feature) -> Self {
        let values = lattice_points(level).into_iter().map(|(i, j)| field(lattice_coord(level, i, j))).collect();
        Self { level, values }
    }

    #[inline]
    pub fn interpolate(&self, b: [f64; 2]) -> Feature {
        blend(&self.values, &stencil(self.level, b))
    }
}

/// How stored values map to texture samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    /// Trainable pre-activation features; samples are `sigmoid(interp(.))`.
    Logit,
    /// Finalized activated texels in `[0, 1]`; samples are `interp(.)`.
    Direct,
}

/// Texture sample: seven colour features and opacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexSample {
    pub color: [f64; COLOR_CHANNELS],
    pub alpha: f64,
}

/// Multi-resolution texture of one triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureGridSet {
    r_min: u32,
    r_max: u32,
    encoding: Encoding,
    /// `levels[k]` has level `r_min + k`.
    levels: Vec<Lattice>,
    /// Sum of all levels on the `r_max` lattice (pre-activation).
    effective: Vec<Feature>,
}

impl TextureGridSet {
    /// All-zero features on levels `r_min..=r_max`.
    pub fn zeros(r_min: u32, r_max: u32) -> Self {
        assert!(r_min <= r_max && r_max <= 12, "invalid level range {r_min}..={r_max}");
        let levels = (r_min..=r_max).map(Lattice::zeros).collect();
        Self { r_min, r_max, encoding: Encoding::Logit, levels, effective: vec![[0.0; CHANNELS]; grid_point_count(r_max)] }
    }

    pub fn from_levels(levels: Vec<Lattice>, encoding: Encoding) -> Self {
        assert!(!levels.is_empty());
        let r_min = levels[0].level;
        let r_max = levels[levels.len() - 1].level;
        for (k, l) in levels.iter().enumerate() {
            assert_eq!(l.level, r_min + k as u32, "levels must be contiguous");
            assert_eq!(l.values.len(), grid_point_count(l.level));
        }
        let mut t = Self { r_min, r_max, encoding, levels, effective: Vec::new() };
        t.accumulate_levels();
        t
    }

    pub fn r_min(&self) -> u32 {
        self.r_min
    }

    pub fn r_max(&self) -> u32 {
        self.r_max
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn levels(&self) -> &[Lattice] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Lattice] {
        &mut self.levels
    }

    pub fn level(&self, r: u32) -> Option<&Lattice> {
        r.checked_sub(self.r_min).and_then(|k| self.levels.get(k as usize))
    }

    pub fn level_mut(&mut self, r: u32) -> Option<&mut Lattice> {
        r.checked_sub(self.r_min).and_then(move |k| self.levels.get_mut(k as usize))
    }

    /// Cached pre-activation lattice at `r_max`.
    pub fn effective(&self) -> &[Feature] {
        &self.effective
    }

    /// Recomputes the effective finest lattice from all levels.
    pub fn accumulate_levels(&mut self) {
        let r_max = self.r_max;
        let points = lattice_points(r_max);
        let mut eff = self.levels.last().expect("at least one level").values.clone();
        for lat in &self.levels[..self.levels.len() - 1] {
            for (e, &(i, j)) in eff.iter_mut().zip(&points) {
                let v = lat.interpolate(lattice_coord(r_max, i, j));
                for k in 0..CHANNELS {
                    e[k] += v[k];
                }
            }
        }
        self.effective = eff;
    }

    /// Transpose of [`accumulate_levels`](Self::accumulate_levels):
    /// distributes gradients on the effective lattice onto every level.
    pub fn scatter_to_levels(&self, grad_effective: &[Feature]) -> Vec<Vec<Feature>> {
        let r_max = self.r_max;
        let points = lattice_points(r_max);
        self.levels
            .iter()
            .map(|lat| {
                if lat.level == r_max {
                    return grad_effective.to_vec();
                }
                let mut g = vec![[0.0; CHANNELS]; lat.values.len()];
                for (ge, &(i, j)) in grad_effective.iter().zip(&points) {
                    if ge.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let s = stencil(lat.level, lattice_coord(r_max, i, j));
                    for (&idx, &w) in s.idx.iter().zip(&s.w) {
                        for k in 0..CHANNELS {
                            g[idx][k] += w * ge[k];
                        }
                    }
                }
                g
            })
            .collect()
    }

    /// Stencil into the effective lattice at `b`.
    #[inline]
    pub fn stencil_at(&self, b: [f64; 2]) -> Stencil {
        stencil(self.r_max, b)
    }

    /// Effective stored value at `b` before activation.
    #[inline]
    pub fn raw_at(&self, b: [f64; 2]) -> Feature {
        blend(&self.effective, &self.stencil_at(b))
    }

    #[inline]
    fn activate(&self, x: f64) -> f64 {
        match self.encoding {
            Encoding::Logit => sigmoid(x),
            Encoding::Direct => x.clamp(0.0, 1.0),
        }
    }

    /// Opacity at `b`.
    #[inline]
    pub fn alpha_at(&self, b: [f64; 2]) -> f64 {
        let s = self.stencil_at(b);
        self.activate(blend_channel(&self.effective, &s, ALPHA_CHANNEL))
    }

    /// Activated 8-channel feature at `b`.
    #[inline]
    pub fn feature_at(&self, b: [f64; 2]) -> Feature {
        let raw = self.raw_at(b);
        raw.map(|x| self.activate(x))
    }

    pub fn evaluate(&self, b: [f64; 2]) -> TexSample {
        let f = self.feature_at(b);
        TexSample { color: std::array::from_fn(|k| f[k]), alpha: f[ALPHA_CHANNEL] }
    }

    /// Replaces a single trained coarse level with levels `new_min..=new_max`:
    /// the colour field is resampled into `new_min`, every finer level's
    /// colour starts at zero and opacity is reset to zero on all levels.
    pub fn transition_coarse_to_fine(&self, new_min: u32, new_max: u32) -> Self {
        assert_eq!(self.encoding, Encoding::Logit);
        let levels = (new_min..=new_max)
            .map(|r| {
                if r == new_min {
                    let mut lat = Lattice::from_fn(r, |b| self.raw_at(b));
                    for v in &mut lat.values {
                        v[ALPHA_CHANNEL] = 0.0;
                    }
                    lat
                } else {
                    Lattice::zeros(r)
                }
            })
            .collect();
        Self::from_levels(levels, Encoding::Logit)
    }

    /// Texture with the same levels whose finest level reproduces
    /// `field` at its lattice points and coarser levels are zero.
    pub fn from_finest_fn(r_min: u32, r_max: u32, mut field: impl FnMut([f64; 2]) -> Feature) -> Self {
        let levels = (r_min..=r_max)
            .map(|r| if r == r_max { Lattice::from_fn(r, &mut field) } else { Lattice::zeros(r) })
            .collect();
        Self::from_levels(levels, Encoding::Logit)
    }

    /// Single-level activated texture for deployment.
    pub fn finalize(&self) -> Self {
        let values = match self.encoding {
            Encoding::Logit => self.effective.iter().map(|f| f.map(sigmoid)).collect(),
            Encoding::Direct => self.effective.clone(),
        };
        Self::from_levels(vec![Lattice { level: self.r_max, values }], Encoding::Direct)
    }
}

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("{n} triangles exceed the atlas capacity of {capacity} triangles ({texels} texels each in a {ATLAS_SIZE}x{ATLAS_SIZE} atlas)")]
    Capacity { n: usize, capacity: usize, texels: usize },
    #[error("triangle textures disagree on finest level")]
    MixedLevels,
    #[error("atlas I/O on {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Two RGBA8 atlases (channels 0..4 and 4..8) and the texel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedAtlas {
    pub level: u32,
    pub width: usize,
    pub height: usize,
    pub atlas_a: Vec<u8>,
    pub atlas_b: Vec<u8>,
    /// `layout[t][k]` is the atlas pixel of lattice point `k` of triangle `t`.
    pub layout: Vec<Vec<[u32; 2]>>,
}

/// Nearest 8-bit level with ties rounded down, so that a texel at exactly
/// the visibility threshold stays hidden after decoding.
pub fn quantize_alpha(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 - 0.5).ceil() as u8
}

/// Quantizes every finalized texel as `round(v * 255)` and packs the
/// triangles' lattices consecutively in row-major atlas order.
pub fn quantize_pack_atlas(soup: &TriangleSoup) -> Result<PackedAtlas, AtlasError> {
    let level = soup.levels().map(|(_, r)| r).unwrap_or(5);
    if soup.textures.iter().any(|t| t.r_max() != level) {
        return Err(AtlasError::MixedLevels);
    }
    let texels = grid_point_count(level);
    let capacity = atlas_capacity(level);
    let n = soup.len();
    if n > capacity {
        return Err(AtlasError::Capacity { n, capacity, texels });
    }
    let total = n * texels;
    let width = ATLAS_SIZE;
    let height = total.div_ceil(width).max(1);
    let mut atlas_a = vec![0u8; width * height * 4];
    let mut atlas_b = vec![0u8; width * height * 4];
    let mut layout = Vec::with_capacity(n);
    for (t, tex) in soup.textures.iter().enumerate() {
        let fin = tex.finalize();
        let mut tri_layout = Vec::with_capacity(texels);
        for (k, v) in fin.effective().iter().enumerate() {
            let lin = t * texels + k;
            let (x, y) = (lin % width, lin / width);
            let o = (y * width + x) * 4;
            for c in 0..4 {
                atlas_a[o + c] = crate::image_buf::quantize_u8(v[c]);
                atlas_b[o + c] = crate::image_buf::quantize_u8(v[c + 4]);
            }
            atlas_b[o + 3] = quantize_alpha(v[ALPHA_CHANNEL]);
            tri_layout.push([x as u32, y as u32]);
        }
        layout.push(tri_layout);
    }
    Ok(PackedAtlas { level, width, height, atlas_a, atlas_b, layout })
}

/// Dequantized single-level [`Encoding::Direct`] textures, one per triangle.
pub fn unpack_atlas(packed: &PackedAtlas) -> Vec<TextureGridSet> {
    packed
        .layout
        .iter()
        .map(|tri| {
            let values = tri
                .iter()
                .map(|&[x, y]| {
                    let o = (y as usize * packed.width + x as usize) * 4;
                    std::array::from_fn(|c| {
                        let byte = if c < 4 { packed.atlas_a[o + c] } else { packed.atlas_b[o + c - 4] };
                        byte as f64 / 255.0
                    })
                })
                .collect();
            TextureGridSet::from_levels(vec![Lattice { level: packed.level, values }], Encoding::Direct)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct LayoutFile {
    level: u32,
    width: usize,
    height: usize,
    triangles: std::collections::BTreeMap<String, Vec<[u32; 2]>>,
}

impl PackedAtlas {
    /// Writes `atlas_a.png`, `atlas_b.png` and `layout.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), AtlasError> {
        let io = |path: &Path, reason: String| AtlasError::Io { path: path.display().to_string(), reason };
        for (name, data) in [("atlas_a.png", &self.atlas_a), ("atlas_b.png", &self.atlas_b)] {
            let path = dir.join(name);
            image::RgbaImage::from_raw(self.width as u32, self.height as u32, data.clone())
                .expect("atlas dimensions")
                .save(&path)
                .map_err(|e| io(&path, e.to_string()))?;
        }
        let layout = LayoutFile {
            level: self.level,
            width: self.width,
            height: self.height,
            triangles: self.layout.iter().enumerate().map(|(t, l)| (t.to_string(), l.clone())).collect(),
        };
        let path = dir.join("layout.json");
        let text = serde_json::to_string(&layout).map_err(|e| io(&path, e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| io(&path, e.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Self, AtlasError> {
        let io = |path: &Path, reason: String| AtlasError::Io { path: path.display().to_string(), reason };
        let path = dir.join("layout.json");
        let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e.to_string()))?;
        let file: LayoutFile = serde_json::from_str(&text).map_err(|e| io(&path, e.to_string()))?;
        let mut layout = vec![Vec::new(); file.triangles.len()];
        for (k, v) in file.triangles {
            let t: usize = k.parse().map_err(|_| io(&path, format!("bad triangle id {k}")))?;
            *layout.get_mut(t).ok_or_else(|| io(&path, format!("triangle id {t} out of range")))? = v;
        }
        let read = |name: &str| -> Result<Vec<u8>, AtlasError> {
            let p = dir.join(name);
            let img = image::open(&p).map_err(|e| io(&p, e.to_string()))?.to_rgba8();
            Ok(img.into_raw())
        };
        Ok(Self {
            level: file.level,
            width: file.width,
            height: file.height,
            atlas_a: read("atlas_a.png")?,
            atlas_b: read("atlas_b.png")?,
            layout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Triangle, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_b(rng: &mut ChaCha8Rng) -> [f64; 2] {
        let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        [u, v]
    }

    fn random_lattice(level: u32, rng: &mut ChaCha8Rng) -> Lattice {
        Lattice::from_fn(level, |_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
    }

    #[test]
    fn point_counts() {
        assert_eq!(grid_point_count(5), 561);
        assert_eq!(grid_point_count(0), 3);
        assert_eq!(grid_point_count(2), 15);
        assert_eq!(grid_point_count(3), 45);
        for r in 1..=8u32 {
            let n = 1usize << r;
            assert_eq!((n / 2 + 1) * (n + 1), grid_point_count(r));
        }
        assert_eq!(atlas_capacity(5), 29_905);
    }

    #[test]
    fn lattice_index_is_dense_and_ordered() {
        for r in 0..6 {
            let pts = lattice_points(r);
            assert_eq!(pts.len(), grid_point_count(r));
            for (k, &(i, j)) in pts.iter().enumerate() {
                assert_eq!(lattice_index(r, i, j), k);
            }
        }
    }

    #[test]
    fn interpolation_exact_at_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for r in 0..6 {
            let lat = random_lattice(r, &mut rng);
            for (k, (i, j)) in lattice_points(r).into_iter().enumerate() {
                assert_eq!(lat.interpolate(lattice_coord(r, i, j)), lat.values[k]);
            }
        }
    }

    #[test]
    fn constant_field_is_reproduced() {
        let c = [0.3, -1.0, 2.0, 0.0, 4.0, 5.5, -0.25, 1.0];
        let lat = Lattice::constant(4, c);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let v = lat.interpolate(random_b(&mut rng));
            for k in 0..CHANNELS {
                assert!((v[k] - c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn centroid_of_micro_triangle_is_corner_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = random_lattice(3, &mut rng);
        let n = 8.0;
        // up-oriented cell at (2,1) and down-oriented cell at (2,1)
        let up = [(2.0 + 1.0 / 3.0) / n, (1.0 + 1.0 / 3.0) / n];
        let down = [(2.0 + 2.0 / 3.0) / n, (1.0 + 2.0 / 3.0) / n];
        let corners_up = [(2, 1), (3, 1), (2, 2)];
        let corners_down = [(3, 2), (2, 2), (3, 1)];
        for (b, corners) in [(up, corners_up), (down, corners_down)] {
            let v = lat.interpolate(b);
            for k in 0..CHANNELS {
                let mean: f64 = corners.iter().map(|&(i, j)| lat.values[lattice_index(3, i, j)][k]).sum::<f64>() / 3.0;
                assert!((v[k] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn micro_edge_is_linear_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lat = random_lattice(3, &mut rng);
        let (a, b) = (lattice_index(3, 1, 2), lattice_index(3, 2, 1));
        for t in [0.1, 0.37, 0.5, 0.9] {
            let p = [(1.0 + t) / 8.0, (2.0 - t) / 8.0];
            let v = lat.interpolate(p);
            for k in 0..CHANNELS {
                let expect = (1.0 - t) * lat.values[a][k] + t * lat.values[b][k];
                assert!((v[k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stencil_handles_corners_and_hypotenuse() {
        for r in 0..5 {
            for b in [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.5, 0.5], [0.25, 0.75], [1.2, -0.1]] {
                let s = stencil(r, b);
                assert!(s.w.iter().all(|&w| (-1e-12..=1.0 + 1e-12).contains(&w)));
                assert!((s.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(s.idx.iter().all(|&i| i < grid_point_count(r)));
            }
        }
    }

    #[test]
    fn single_level_accumulation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lat = random_lattice(4, &mut rng);
        let t = TextureGridSet::from_levels(vec![lat.clone()], Encoding::Logit);
        assert_eq!(t.effective(), &lat.values[..]);
    }

    #[test]
    fn constant_levels_add() {
        let c1 = [1.0; CHANNELS];
        let c2 = [0.5, -0.5, 0.25, 0.0, 1.0, 2.0, 3.0, -1.0];
        let t = TextureGridSet::from_levels(vec![Lattice::constant(2, c1), Lattice::constant(3, c2)], Encoding::Logit);
        for e in t.effective() {
            for k in 0..CHANNELS {
                assert!((e[k] - (c1[k] + c2[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_footprint_matches_direct_interpolation() {
        // oracle: evaluate the level-2 lattice directly at each level-5 coordinate
        let mut delta = Lattice::zeros(2);
        let hot = lattice_index(2, 1, 1);
        delta.values[hot][0] = 1.0;
        let levels = vec![delta.clone(), Lattice::zeros(3), Lattice::zeros(4), Lattice::zeros(5)];
        let t = TextureGridSet::from_levels(levels, Encoding::Logit);
        let mut nonzero = 0;
        for (k, (i, j)) in lattice_points(5).into_iter().enumerate() {
            let (u, v) = (i as f64 / 8.0, j as f64 / 8.0);
            // closed-form hat function centred at (1,1) on the level-2 grid
            let (du, dv) = (u - 1.0, v - 1.0);
            let hat = if du >= 0.0 && dv >= 0.0 || du <= 0.0 && dv <= 0.0 {
                (1.0 - (du.abs() + dv.abs())).max(0.0)
            } else {
                (1.0 - du.abs().max(dv.abs())).max(0.0)
            };
            let direct = delta.interpolate(lattice_coord(5, i, j))[0];
            assert!((t.effective()[k][0] - direct).abs() < 1e-12);
            assert!((direct - hat).abs() < 1e-12, "({i},{j}) direct {direct} hat {hat}");
            if direct > 0.0 {
                nonzero += 1;
            }
        }
        // six level-2 cells around an interior node, each covering 8x8 fine cells
        assert!(nonzero > 0);
    }

    #[test]
    fn accumulation_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<Lattice> = (2..=5).map(|r| random_lattice(r, &mut rng)).collect();
        let b: Vec<Lattice> = (2..=5).map(|r| random_lattice(r, &mut rng)).collect();
        let (alpha, beta) = (0.7, -1.3);
        let comb: Vec<Lattice> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| Lattice {
                level: x.level,
                values: x.values.iter().zip(&y.values).map(|(p, q)| std::array::from_fn(|k| alpha * p[k] + beta * q[k])).collect(),
            })
            .collect();
        let ta = TextureGridSet::from_levels(a, Encoding::Logit);
        let tb = TextureGridSet::from_levels(b, Encoding::Logit);
        let tc = TextureGridSet::from_levels(comb, Encoding::Logit);
        for ((x, y), z) in ta.effective().iter().zip(tb.effective()).zip(tc.effective()) {
            for k in 0..CHANNELS {
                assert!((alpha * x[k] + beta * y[k] - z[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn evaluate_matches_direct_multilevel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let levels: Vec<Lattice> = (2..=5).map(|r| random_lattice(r, &mut rng)).collect();
        let t = TextureGridSet::from_levels(levels.clone(), Encoding::Logit);
        for _ in 0..100 {
            let b = random_b(&mut rng);
            let s = t.evaluate(b);
            let mut direct = [0.0; CHANNELS];
            for l in &levels {
                let v = l.interpolate(b);
                for k in 0..CHANNELS {
                    direct[k] += v[k];
                }
            }
            for k in 0..COLOR_CHANNELS {
                assert!((s.color[k] - sigmoid(direct[k])).abs() < 1e-12);
            }
            assert!((s.alpha - sigmoid(direct[ALPHA_CHANNEL])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_texture_evaluates_to_half() {
        let t = TextureGridSet::zeros(2, 5);
        let s = t.evaluate([0.2, 0.3]);
        assert!(s.color.iter().all(|&c| c == 0.5));
        assert_eq!(s.alpha, 0.5);
        let mut hot = Lattice::zeros(3);
        for v in &mut hot.values {
            v[ALPHA_CHANNEL] = 10.0;
        }
        let t = TextureGridSet::from_levels(vec![hot], Encoding::Logit);
        assert!((t.alpha_at([0.1, 0.1]) - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn texture_gradient_matches_finite_differences() {
        // d evaluate / d (single lattice feature) through accumulation,
        // interpolation and sigmoid, against central differences
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let levels: Vec<Lattice> = (2..=5).map(|r| random_lattice(r, &mut rng)).collect();
        let t = TextureGridSet::from_levels(levels, Encoding::Logit);
        let h = 1e-4;
        let mut checked = 0;
        for _ in 0..50 {
            let b = random_b(&mut rng);
            let ch = rng.random_range(0..CHANNELS);
            // analytic: upstream 1 on channel ch
            let s = t.stencil_at(b);
            let raw = t.raw_at(b);
            let sg = sigmoid(raw[ch]);
            let mut ge = vec![[0.0; CHANNELS]; t.effective().len()];
            for (&i, &w) in s.idx.iter().zip(&s.w) {
                ge[i][ch] += w * sg * (1.0 - sg);
            }
            let per_level = t.scatter_to_levels(&ge);
            // pick one lattice entry with non-zero analytic gradient per level
            for (li, g) in per_level.iter().enumerate() {
                let Some(idx) = g.iter().position(|v| v[ch].abs() > 1e-3) else { continue };
                let eval = |delta: f64| {
                    let mut tt = t.clone();
                    tt.levels_mut()[li].values[idx][ch] += delta;
                    tt.accumulate_levels();
                    tt.feature_at(b)[ch]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g[idx][ch];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "fd {fd} an {an}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn coarse_to_fine_keeps_constant_color_and_resets_alpha() {
        let c = [0.4, -0.3, 1.2, 0.8, 0.0, 2.0, -1.0, 10.0];
        let coarse = TextureGridSet::from_levels(vec![Lattice::constant(3, c)], Encoding::Logit);
        let fine = coarse.transition_coarse_to_fine(2, 5);
        assert_eq!((fine.r_min(), fine.r_max()), (2, 5));
        for v in &fine.level(2).unwrap().values {
            assert_eq!(&v[..COLOR_CHANNELS], &c[..COLOR_CHANNELS]);
        }
        for r in 3..=5 {
            assert!(fine.level(r).unwrap().values.iter().all(|v| v.iter().all(|&x| x == 0.0)));
        }
        for e in fine.effective() {
            for k in 0..COLOR_CHANNELS {
                assert!((e[k] - c[k]).abs() < 1e-12);
            }
            assert_eq!(e[ALPHA_CHANNEL], 0.0);
        }
    }

    #[test]
    fn coarse_to_fine_reproduces_field_at_level2_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coarse = TextureGridSet::from_levels(vec![random_lattice(3, &mut rng)], Encoding::Logit);
        let fine = coarse.transition_coarse_to_fine(2, 5);
        for (i, j) in lattice_points(2) {
            let b = lattice_coord(2, i, j);
            let before = coarse.raw_at(b);
            let after = fine.raw_at(b);
            for k in 0..COLOR_CHANNELS {
                assert!((before[k] - after[k]).abs() < 1e-6);
            }
            assert_eq!(fine.alpha_at(b), 0.5);
        }
    }

    fn soup_with(n: usize, level: u32, seed: u64) -> TriangleSoup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut soup = TriangleSoup::new();
        for _ in 0..n {
            let tri = Triangle::new(Vec3::zeros(), Vec3::x(), Vec3::y());
            let lat = random_lattice(level, &mut rng);
            soup.push(tri, TextureGridSet::from_levels(vec![lat], Encoding::Logit));
        }
        soup
    }

    #[test]
    fn atlas_round_trip_within_half_step() {
        let soup = soup_with(3, 5, 10);
        let packed = quantize_pack_atlas(&soup).unwrap();
        assert_eq!(packed.layout[0].len(), 561);
        let unpacked = unpack_atlas(&packed);
        for (orig, back) in soup.textures.iter().zip(&unpacked) {
            let fin = orig.finalize();
            for (a, b) in fin.effective().iter().zip(back.effective()) {
                for k in 0..CHANNELS {
                    assert!((a[k] - b[k]).abs() <= 1.0 / 510.0 + 1e-7);
                }
            }
        }
    }

    #[test]
    fn atlas_endpoint_values() {
        let mut soup = TriangleSoup::new();
        let direct = Lattice::constant(5, [1.0, 0.5, 0.0, 1.0, 0.5, 0.5, 0.0, 0.5]);
        soup.push(
            Triangle::new(Vec3::zeros(), Vec3::x(), Vec3::y()),
            TextureGridSet::from_levels(vec![direct], Encoding::Direct),
        );
        let packed = quantize_pack_atlas(&soup).unwrap();
        assert_eq!(&packed.atlas_a[..4], &[255, 128, 0, 255]);
        // opacity ties round toward hidden
        assert_eq!(&packed.atlas_b[..4], &[128, 128, 0, 127]);
        let back = unpack_atlas(&packed);
        assert_eq!(back[0].effective()[0][0], 1.0);
        assert_eq!(back[0].effective()[0][1], 128.0 / 255.0);
    }

    #[test]
    fn alpha_quantization_keeps_threshold_side() {
        assert_eq!(quantize_alpha(0.5), 127);
        assert_eq!(quantize_alpha(0.5 + 1e-9), 128);
        assert_eq!(quantize_alpha(0.0), 0);
        assert_eq!(quantize_alpha(1.0), 255);
        for k in 0..=1000 {
            let v = k as f64 / 1000.0;
            let q = quantize_alpha(v) as f64 / 255.0;
            assert!((q - v).abs() <= 1.0 / 510.0 + 1e-12);
            assert_eq!(q > 0.5, v > 0.5, "{v}");
        }
    }

    #[test]
    fn stencil_on_rounded_hypotenuse() {
        // b1 + b2 lands one ulp above 1 after rounding
        let b1 = 0.1 + 0.2;
        let s = stencil(5, [b1, 1.0 - b1 + 1e-16]);
        assert!(!s.upper);
        assert!(s.idx.iter().all(|&i| i < grid_point_count(5)));
        assert!((s.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn atlas_capacity_error() {
        let mut soup = TriangleSoup::new();
        let tex = TextureGridSet::zeros(5, 5);
        let tri = Triangle::new(Vec3::zeros(), Vec3::x(), Vec3::y());
        soup.triangles = vec![tri; 29_906];
        soup.textures = vec![tex; 29_906];
        match quantize_pack_atlas(&soup) {
            Err(AtlasError::Capacity { capacity, .. }) => assert_eq!(capacity, 29_905),
            other => panic!("expected capacity error, got {:?}", other.map(|p| p.height)),
        }
        soup.triangles.pop();
        soup.textures.pop();
        let packed = quantize_pack_atlas(&soup).unwrap();
        assert!(packed.height <= ATLAS_SIZE);
    }
}
