//! Neural deferred shading: a shared 16-16-16-3 MLP on (colour feature,
//! SH-encoded view direction), blended with the feature's own RGBA.

use rand::Rng;

use crate::scene::Vec3;
use crate::sigmoid;

pub const FEATURE_DIM: usize = 7;
pub const SH_DIM: usize = 9;
pub const IN_DIM: usize = FEATURE_DIM + SH_DIM;
pub const HIDDEN: usize = 16;
pub const OUT_DIM: usize = 3;

const W1: usize = 0;
const B1: usize = W1 + HIDDEN * IN_DIM;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + OUT_DIM * HIDDEN;
pub const PARAM_COUNT: usize = B3 + OUT_DIM;

/// `(rows, cols)` of each parameter block in storage order; biases have
/// one column.
pub const PARAM_SHAPES: [(usize, usize); 6] =
    [(HIDDEN, IN_DIM), (HIDDEN, 1), (HIDDEN, HIDDEN), (HIDDEN, 1), (OUT_DIM, HIDDEN), (OUT_DIM, 1)];

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2_XY: f64 = 1.092_548_430_592_079_2;
const SH_C2_ZZ: f64 = 0.315_391_565_252_520_05;
const SH_C2_XX_YY: f64 = 0.546_274_215_296_039_6;

/// Real spherical harmonics up to degree 2, ordered
/// `[Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22]`.
pub fn sh_encode(dir: &Vec3) -> [f64; SH_DIM] {
    let n = dir.norm();
    let d = if n > 0.0 { dir / n } else { Vec3::z() };
    let (x, y, z) = (d.x, d.y, d.z);
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2_XY * x * y,
        SH_C2_XY * y * z,
        SH_C2_ZZ * (3.0 * z * z - 1.0),
        SH_C2_XY * x * z,
        SH_C2_XX_YY * (x * x - y * y),
    ]
}

/// Weights of the shared shading MLP, stored flat in the order of
/// [`PARAM_SHAPES`]. The same type doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadingNet {
    pub params: Vec<f64>,
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ShadeTrace {
    input: [f64; IN_DIM],
    h1: [f64; HIDDEN],
    h2: [f64; HIDDEN],
    mlp: [f64; OUT_DIM],
    pub rgb: [f64; 3],
}

impl Default for ShadingNet {
    fn default() -> Self {
        Self::zeros()
    }
}

impl ShadingNet {
    pub fn zeros() -> Self {
        Self { params: vec![0.0; PARAM_COUNT] }
    }

    /// Xavier-uniform weights (gain 1) and zero biases.
    pub fn xavier<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut net = Self::zeros();
        for (off, fan_out, fan_in) in [(W1, HIDDEN, IN_DIM), (W2, HIDDEN, HIDDEN), (W3, OUT_DIM, HIDDEN)] {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut net.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-limit..limit);
            }
        }
        net
    }

    pub fn from_params(params: Vec<f64>) -> Option<Self> {
        (params.len() == PARAM_COUNT).then_some(Self { params })
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn add_assign(&mut self, other: &ShadingNet) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.params.iter_mut().for_each(|p| *p *= s);
    }

    fn dense<const I: usize, const O: usize>(&self, w: usize, b: usize, x: &[f64; I]) -> [f64; O] {
        std::array::from_fn(|o| {
            let row = &self.params[w + o * I..w + (o + 1) * I];
            self.params[b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
    }

    pub fn forward(&self, feature: &[f64; FEATURE_DIM], dir: &Vec3) -> ShadeTrace {
        let sh = sh_encode(dir);
        let mut input = [0.0; IN_DIM];
        input[..FEATURE_DIM].copy_from_slice(feature);
        input[FEATURE_DIM..].copy_from_slice(&sh);
        let h1: [f64; HIDDEN] = self.dense::<IN_DIM, HIDDEN>(W1, B1, &input).map(|v| v.max(0.0));
        let h2: [f64; HIDDEN] = self.dense::<HIDDEN, HIDDEN>(W2, B2, &h1).map(|v| v.max(0.0));
        let mlp: [f64; OUT_DIM] = self.dense::<HIDDEN, OUT_DIM>(W3, B3, &h2).map(sigmoid);
        let a = feature[3];
        let rgb = std::array::from_fn(|c| a * feature[c] + (1.0 - a) * mlp[c]);
        ShadeTrace { input, h1, h2, mlp, rgb }
    }

    /// Final colour for an activated feature seen along `dir`.
    pub fn shade(&self, feature: &[f64; FEATURE_DIM], dir: &Vec3) -> [f64; 3] {
        self.forward(feature, dir).rgb
    }

    /// Reverse-mode pass. Returns `dL/dfeature` and adds `dL/dparams`
    /// into `grad`.
    pub fn backward(&self, trace: &ShadeTrace, d_rgb: &[f64; 3], grad: &mut ShadingNet) -> [f64; FEATURE_DIM] {
        let feat = &trace.input[..FEATURE_DIM];
        let a = feat[3];
        let mut d_feat = [0.0; FEATURE_DIM];
        let mut d_a = 0.0;
        let mut d_z3 = [0.0; OUT_DIM];
        for c in 0..3 {
            d_a += d_rgb[c] * (feat[c] - trace.mlp[c]);
            d_feat[c] += a * d_rgb[c];
            let m = trace.mlp[c];
            d_z3[c] = (1.0 - a) * d_rgb[c] * m * (1.0 - m);
        }
        d_feat[3] += d_a;
        if d_z3.iter().all(|&v| v == 0.0) {
            return d_feat;
        }
        let g = &mut grad.params;
        let p = &self.params;
        let mut d_h2 = [0.0; HIDDEN];
        for o in 0..OUT_DIM {
            g[B3 + o] += d_z3[o];
            for i in 0..HIDDEN {
                g[W3 + o * HIDDEN + i] += d_z3[o] * trace.h2[i];
                d_h2[i] += p[W3 + o * HIDDEN + i] * d_z3[o];
            }
        }
        let mut d_h1 = [0.0; HIDDEN];
        for o in 0..HIDDEN {
            if trace.h2[o] <= 0.0 {
                continue;
            }
            let dz = d_h2[o];
            g[B2 + o] += dz;
            for i in 0..HIDDEN {
                g[W2 + o * HIDDEN + i] += dz * trace.h1[i];
                d_h1[i] += p[W2 + o * HIDDEN + i] * dz;
            }
        }
        let mut d_in = [0.0; IN_DIM];
        for o in 0..HIDDEN {
            if trace.h1[o] <= 0.0 {
                continue;
            }
            let dz = d_h1[o];
            g[B1 + o] += dz;
            for i in 0..IN_DIM {
                g[W1 + o * IN_DIM + i] += dz * trace.input[i];
                d_in[i] += p[W1 + o * IN_DIM + i] * dz;
            }
        }
        for k in 0..FEATURE_DIM {
            d_feat[k] += d_in[k];
        }
        d_feat
    }
}
