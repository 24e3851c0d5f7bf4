//! Stochastic opacity masking and every gradient path of training.
//!
//! One training view runs in three passes over image-sized buffers:
//! a stochastic forward pass that picks one winner per pixel, a per-pixel
//! pass producing colour and score gradients for texture features and the
//! shading net, and a pair pass producing vertex gradients at visibility
//! boundaries. Per-row partial results are merged in row order so the
//! output does not depend on the worker count.

use nalgebra::Matrix3;

use crate::dual::Dual;
use crate::image_buf::Image;
use crate::raster::{Fragment, PixelFragmentBuffer, ScreenTriangle};
use crate::rng::{CounterRng, PixelKey};
use crate::scene::{Camera, Triangle, TriangleSoup, Vec3};
use crate::shading::ShadingNet;
use crate::texture::{Encoding, Feature, Stencil, TextureGridSet, ALPHA_CHANNEL, CHANNELS, COLOR_CHANNELS};

/// Opacities are kept this far from 0 and 1 inside score terms.
pub const ALPHA_EPS: f64 = 1e-6;

/// Picks the nearest fragment whose opacity beats a fresh uniform
/// threshold. One threshold is drawn per fragment in list order, so the
/// draw for a fragment does not depend on the others' opacities.
pub fn sample_stochastic(
    fragments: &[Fragment],
    mut alpha_at: impl FnMut(&Fragment) -> f64,
    rng: &mut CounterRng,
) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, f) in fragments.iter().enumerate() {
        let tau = rng.uniform();
        if best.is_some_and(|b| !f.is_before(&fragments[b])) {
            continue;
        }
        if alpha_at(f) > tau {
            best = Some(i);
        }
    }
    best
}

/// Probability that `target` (an index into depth-sorted `alphas`, or
/// `None` for background) is the visible outcome.
pub fn selection_probability(alphas: &[f64], target: Option<usize>) -> f64 {
    match target {
        Some(k) => alphas[k] * alphas[..k].iter().map(|a| 1.0 - a).product::<f64>(),
        None => alphas.iter().map(|a| 1.0 - a).product(),
    }
}

/// Score-function factor `d log p(winner) / d alpha` for each fragment.
/// Background behaves like a fragment at infinite depth.
pub fn score_terms(fragments: &[Fragment], alphas: &[f64], winner: Option<usize>) -> Vec<f64> {
    fragments
        .iter()
        .zip(alphas)
        .enumerate()
        .map(|(i, (f, &a))| score_term(f, a, i, fragments, winner))
        .collect()
}

#[inline]
fn score_term(f: &Fragment, alpha: f64, i: usize, fragments: &[Fragment], winner: Option<usize>) -> f64 {
    let a = alpha.clamp(ALPHA_EPS, 1.0 - ALPHA_EPS);
    match winner {
        Some(w) if w == i => 1.0 / a,
        Some(w) if f.is_before(&fragments[w]) => -1.0 / (1.0 - a),
        Some(_) => 0.0,
        None => -1.0 / (1.0 - a),
    }
}

/// Per-fragment opacity gradients `pixel_loss * score`.
pub fn score_gradients(fragments: &[Fragment], alphas: &[f64], winner: Option<usize>, pixel_loss: f64) -> Vec<f64> {
    score_terms(fragments, alphas, winner).into_iter().map(|s| pixel_loss * s).collect()
}

/// Exact expected loss over all outcomes and its derivative with respect
/// to each opacity. `alphas` and `losses` are depth sorted; `bg_loss` is
/// the loss when nothing passes.
pub fn expected_loss_and_gradient_oracle(alphas: &[f64], losses: &[f64], bg_loss: f64) -> (f64, Vec<f64>) {
    assert_eq!(alphas.len(), losses.len());
    let n = alphas.len();
    let expected = (0..n).map(|k| selection_probability(alphas, Some(k)) * losses[k]).sum::<f64>()
        + selection_probability(alphas, None) * bg_loss;
    // rest[k]: expected loss given that fragments 0..=k all let the ray through
    let mut rest = vec![bg_loss; n];
    for k in (0..n.saturating_sub(1)).rev() {
        rest[k] = alphas[k + 1] * losses[k + 1] + (1.0 - alphas[k + 1]) * rest[k + 1];
    }
    let mut trans = 1.0;
    let grad = (0..n)
        .map(|k| {
            let g = trans * (losses[k] - rest[k]);
            trans *= 1.0 - alphas[k];
            g
        })
        .collect();
    (expected, grad)
}

/// Identifies one view at one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewKey {
    pub seed: u64,
    pub iteration: u64,
    pub view: u64,
}

impl ViewKey {
    pub fn pixel_rng(&self, pixel: usize) -> CounterRng {
        PixelKey::new(self.seed, self.iteration, self.view, pixel as u64).stream()
    }
}

/// Image-sized results of one stochastic forward pass.
#[derive(Debug, Clone)]
pub struct StochasticRenderBuffers {
    pub width: usize,
    pub height: usize,
    pub winners: Vec<Option<Fragment>>,
    pub rgb: Image,
    pub dirs: Vec<Vec3>,
    /// Per-pixel scalar loss, filled in by the caller once known.
    pub loss_map: Vec<f64>,
}

pub fn render_stochastic(
    soup: &TriangleSoup,
    camera: &Camera,
    net: &ShadingNet,
    background: [f64; 3],
    frags: &PixelFragmentBuffer,
    key: ViewKey,
) -> StochasticRenderBuffers {
    let w = camera.width;
    let per_pixel = crate::par::map_range(frags.pixel_count(), |i| {
        let list = frags.pixel(i);
        let mut rng = key.pixel_rng(i);
        let dir = camera.pixel_dir(i % w, i / w);
        let win = sample_stochastic(list, |f| soup.textures[f.tri as usize].alpha_at(f.b), &mut rng).map(|k| list[k]);
        let rgb = match &win {
            Some(f) => {
                let feat = soup.textures[f.tri as usize].feature_at(f.b);
                net.shade(&color_part(&feat), &dir)
            }
            None => background,
        };
        (win, rgb, dir)
    });
    let mut winners = Vec::with_capacity(per_pixel.len());
    let mut rgb = Vec::with_capacity(per_pixel.len());
    let mut dirs = Vec::with_capacity(per_pixel.len());
    for (a, b, c) in per_pixel {
        winners.push(a);
        rgb.push(b);
        dirs.push(c);
    }
    StochasticRenderBuffers {
        width: camera.width,
        height: camera.height,
        winners,
        rgb: Image { width: camera.width, height: camera.height, data: rgb },
        dirs,
        loss_map: vec![0.0; camera.pixel_count()],
    }
}

#[inline]
fn color_part(feat: &Feature) -> [f64; COLOR_CHANNELS] {
    std::array::from_fn(|k| feat[k])
}

/// Derivative of the texture activation given its output.
#[inline]
fn activation_slope(tex: &TextureGridSet, y: f64) -> f64 {
    match tex.encoding() {
        Encoding::Logit => y * (1.0 - y),
        Encoding::Direct => 1.0,
    }
}

/// Gradients of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffers {
    /// Per triangle, on its effective (finest, pre-activation) lattice.
    pub features: Vec<Vec<Feature>>,
    pub vertices: Vec<[Vec3; 3]>,
    pub net: ShadingNet,
}

impl GradientBuffers {
    pub fn zeros(soup: &TriangleSoup) -> Self {
        Self {
            features: soup.textures.iter().map(|t| vec![[0.0; CHANNELS]; t.effective().len()]).collect(),
            vertices: vec![[Vec3::zeros(); 3]; soup.len()],
            net: ShadingNet::zeros(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientBuffers) {
        for (a, b) in self.features.iter_mut().zip(&other.features) {
            for (fa, fb) in a.iter_mut().zip(b) {
                for k in 0..CHANNELS {
                    fa[k] += fb[k];
                }
            }
        }
        for (a, b) in self.vertices.iter_mut().zip(&other.vertices) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
        self.net.add_assign(&other.net);
    }

    pub fn scale(&mut self, s: f64) {
        self.features.iter_mut().flatten().flatten().for_each(|v| *v *= s);
        self.vertices.iter_mut().flatten().for_each(|v| *v *= s);
        self.net.scale(s);
    }

    pub fn is_finite(&self) -> bool {
        self.features.iter().flatten().flatten().all(|v| v.is_finite())
            && self.vertices.iter().flatten().all(|v| v.iter().all(|c| c.is_finite()))
            && self.net.is_finite()
    }

    #[inline]
    fn scatter(&mut self, tri: u32, s: &Stencil, g: &Feature) {
        let lat = &mut self.features[tri as usize];
        for (&idx, &w) in s.idx.iter().zip(&s.w) {
            for k in 0..CHANNELS {
                lat[idx][k] += w * g[k];
            }
        }
    }
}

struct FeatureEntry {
    tri: u32,
    stencil: Stencil,
    g: Feature,
}

/// Chains `d_rgb` at every non-background pixel through the shading net,
/// the activation and the winner's interpolation stencil.
pub fn backprop_color(
    soup: &TriangleSoup,
    net: &ShadingNet,
    buffers: &StochasticRenderBuffers,
    d_rgb: &[[f64; 3]],
    grads: &mut GradientBuffers,
) {
    let w = buffers.width;
    let rows = crate::par::map_range(buffers.height, |y| {
        let mut entries = Vec::new();
        let mut net_g = ShadingNet::zeros();
        for x in 0..w {
            let i = y * w + x;
            let Some(f) = &buffers.winners[i] else { continue };
            let g = d_rgb[i];
            if g == [0.0; 3] {
                continue;
            }
            let tex = &soup.textures[f.tri as usize];
            let stencil = tex.stencil_at(f.b);
            let feat = tex.feature_at(f.b);
            let trace = net.forward(&color_part(&feat), &buffers.dirs[i]);
            let d_feat = net.backward(&trace, &g, &mut net_g);
            let mut gf = [0.0; CHANNELS];
            for k in 0..COLOR_CHANNELS {
                gf[k] = d_feat[k] * activation_slope(tex, feat[k]);
            }
            entries.push(FeatureEntry { tri: f.tri, stencil, g: gf });
        }
        (entries, net_g)
    });
    for (entries, net_g) in rows {
        for e in &entries {
            grads.scatter(e.tri, &e.stencil, &e.g);
        }
        grads.net.add_assign(&net_g);
    }
}

/// Likelihood-ratio opacity gradients: every fragment at or in front of
/// the pixel's winner receives `weight[pixel] * score`.
pub fn backprop_score(
    soup: &TriangleSoup,
    frags: &PixelFragmentBuffer,
    buffers: &StochasticRenderBuffers,
    weight: &[f64],
    grads: &mut GradientBuffers,
) {
    let w = buffers.width;
    let rows = crate::par::map_range(buffers.height, |y| {
        let mut entries = Vec::new();
        for x in 0..w {
            let i = y * w + x;
            let wt = weight[i];
            if wt == 0.0 {
                continue;
            }
            let list = frags.pixel(i);
            let winner = buffers.winners[i];
            for f in list {
                let front = match &winner {
                    Some(win) => f.tri == win.tri || f.is_before(win),
                    None => true,
                };
                if !front {
                    continue;
                }
                let tex = &soup.textures[f.tri as usize];
                let stencil = tex.stencil_at(f.b);
                let alpha = tex.alpha_at(f.b);
                let a = alpha.clamp(ALPHA_EPS, 1.0 - ALPHA_EPS);
                let s = match &winner {
                    Some(win) if win.tri == f.tri => 1.0 / a,
                    _ => -1.0 / (1.0 - a),
                };
                let mut g = [0.0; CHANNELS];
                g[ALPHA_CHANNEL] = wt * s * activation_slope(tex, alpha);
                entries.push(FeatureEntry { tri: f.tri, stencil, g });
            }
        }
        entries
    });
    for e in rows.iter().flatten() {
        grads.scatter(e.tri, &e.stencil, &e.g);
    }
}

type D9 = Dual<9>;

#[inline]
fn edge_fn<const N: usize>(a: [Dual<N>; 2], b: [Dual<N>; 2], q: [Dual<N>; 2]) -> Dual<N> {
    (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
}

/// Perspective-correct `(b1, b2)` at screen point `q`.
fn bary_dual<const N: usize>(p: [[Dual<N>; 2]; 3], d: [Dual<N>; 3], q: [Dual<N>; 2]) -> [Dual<N>; 2] {
    let area = edge_fn(p[0], p[1], p[2]);
    let inv_area = area.recip();
    let l = [edge_fn(p[1], p[2], q) * inv_area, edge_fn(p[2], p[0], q) * inv_area, edge_fn(p[0], p[1], q) * inv_area];
    let w = [l[0] / d[0], l[1] / d[1], l[2] / d[2]];
    let inv = (w[0] + w[1] + w[2]).recip();
    [w[1] * inv, w[2] * inv]
}

/// Screen positions and depths of a triangle's vertices as functions of
/// its nine world coordinates.
fn project_dual(camera: &Camera, tri: &Triangle) -> ([[D9; 2]; 3], [D9; 3]) {
    let rot: Matrix3<f64> = camera.world_to_camera.rotation.to_rotation_matrix().into_inner();
    let tr = camera.world_to_camera.translation.vector;
    let mut p = [[D9::constant(0.0); 2]; 3];
    let mut d = [D9::constant(0.0); 3];
    for k in 0..3 {
        let v: [D9; 3] = std::array::from_fn(|j| D9::var(tri.v[k][j], 3 * k + j));
        let c: [D9; 3] = std::array::from_fn(|i| v[0] * rot[(i, 0)] + v[1] * rot[(i, 1)] + v[2] * rot[(i, 2)] + tr[i]);
        let inv_z = c[2].recip();
        p[k] = [c[0] * inv_z * camera.fx + camera.cx, c[1] * inv_z * camera.fy + camera.cy];
        d[k] = c[2];
    }
    (p, d)
}

/// Alpha of `tex` as a dual function of barycentrics near `b0`, holding
/// the containing micro-triangle fixed.
fn alpha_dual<const N: usize>(tex: &TextureGridSet, b: [Dual<N>; 2]) -> Dual<N> {
    let b0 = [b[0].v, b[1].v];
    let s = tex.stencil_at(b0);
    let jac = s.weight_jacobian(tex.r_max());
    let eff = tex.effective();
    let mut raw = Dual::<N>::constant(0.0);
    for k in 0..3 {
        let wk = (b[0] - b0[0]) * jac[k][0] + (b[1] - b0[1]) * jac[k][1] + s.w[k];
        raw = raw + wk * eff[s.idx[k]][ALPHA_CHANNEL];
    }
    match tex.encoding() {
        Encoding::Logit => {
            let y = crate::sigmoid(raw.v);
            Dual { v: y, d: raw.d.map(|x| x * y * (1.0 - y)) }
        }
        Encoding::Direct => raw,
    }
}

#[inline]
fn center(i: usize, w: usize) -> [f64; 2] {
    [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5]
}

#[inline]
fn constant2<const N: usize>(q: [f64; 2]) -> [Dual<N>; 2] {
    [Dual::constant(q[0]), Dual::constant(q[1])]
}

/// Crossing parameter along the centre segment from `pn` (where `n` is
/// visible) to `po`, as a dual function of `n`'s world vertices.
fn crossing(
    soup: &TriangleSoup,
    camera: &Camera,
    screen: &ScreenTriangle,
    frags: &PixelFragmentBuffer,
    winners: &[Option<Fragment>],
    n: &Fragment,
    pn: usize,
    po: usize,
    horizontal: bool,
) -> Option<D9> {
    let w = camera.width;
    let (qn, qo) = (center(pn, w), center(po, w));
    let tri = &soup.triangles[n.tri as usize];
    if !screen.covers(qo) {
        // silhouette edge of n between the two centres
        let s = screen.area2.signum();
        let p = &screen.p;
        let mut best: Option<(f64, usize)> = None;
        for k in 0..3 {
            let (a, b) = (p[(k + 1) % 3], p[(k + 2) % 3]);
            let en = s * ((b[0] - a[0]) * (qn[1] - a[1]) - (b[1] - a[1]) * (qn[0] - a[0]));
            let eo = s * ((b[0] - a[0]) * (qo[1] - a[1]) - (b[1] - a[1]) * (qo[0] - a[0]));
            if en >= 0.0 && eo < 0.0 {
                let t = en / (en - eo);
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, k));
                }
            }
        }
        let (_, k) = best?;
        let (a, b) = (p[(k + 1) % 3], p[(k + 2) % 3]);
        let (dx, dy) = ((b[0] - a[0]).abs(), (b[1] - a[1]).abs());
        if horizontal != (dy >= dx) {
            return None;
        }
        let (pd, _) = project_dual(camera, tri);
        let (a, b) = (pd[(k + 1) % 3], pd[(k + 2) % 3]);
        let en = edge_fn(a, b, constant2(qn));
        let eo = edge_fn(a, b, constant2(qo));
        let den = en - eo;
        if den.v == 0.0 {
            return None;
        }
        return Some(en / den);
    }
    // n covers both centres: an opacity boundary on n
    let fo = frags.pixel(po).iter().find(|f| f.tri == n.tri)?;
    if let Some(m) = &winners[po] {
        if m.is_before(fo) {
            return None;
        }
    }
    let tex = &soup.textures[n.tri as usize];
    let (an, ao) = (tex.alpha_at(n.b), tex.alpha_at(fo.b));
    if !(an > 0.5 && ao <= 0.5) || an - ao <= 1e-12 {
        return None;
    }
    // orientation of the opacity boundary from the screen gradient of alpha
    let ps: [[Dual<2>; 2]; 3] = screen.p.map(constant2);
    let ds: [Dual<2>; 3] = screen.depth.map(Dual::constant);
    let qd = [Dual::<2>::var(qn[0], 0), Dual::<2>::var(qn[1], 1)];
    let ga = alpha_dual(tex, bary_dual(ps, ds, qd));
    if horizontal != (ga.d[0].abs() >= ga.d[1].abs()) {
        return None;
    }
    let (pd, dd) = project_dual(camera, tri);
    let an_d = alpha_dual(tex, bary_dual(pd, dd, constant2(qn)));
    let ao_d = alpha_dual(tex, bary_dual(pd, dd, constant2(qo)));
    Some((an_d - 0.5) / (an_d - ao_d))
}

/// Vertex gradients from all horizontally and vertically adjacent pixel
/// pairs whose winners differ. Each such pair is treated as if the nearer
/// winner covered the fraction of the centre segment up to its crossing
/// point; only the pixel containing the crossing changes colour, which
/// gives `dL/dt = g_x . (C_near - C_other)`. The forward image is unchanged.
pub fn boundary_gradients(
    soup: &TriangleSoup,
    camera: &Camera,
    frags: &PixelFragmentBuffer,
    buffers: &StochasticRenderBuffers,
    d_rgb: &[[f64; 3]],
    grads: &mut GradientBuffers,
) {
    let screen = crate::raster::setup_all(soup, camera);
    let (w, h) = (buffers.width, buffers.height);
    let winners = &buffers.winners;
    let rgb = &buffers.rgb.data;
    let rows = crate::par::map_range(h, |y| {
        let mut out: Vec<(u32, [f64; 9])> = Vec::new();
        for x in 0..w {
            let p = y * w + x;
            let mut pairs = [None, None];
            if x + 1 < w {
                pairs[0] = Some((p + 1, true));
            }
            if y + 1 < h {
                pairs[1] = Some((p + w, false));
            }
            for (q, horizontal) in pairs.into_iter().flatten() {
                let (wp, wq) = (winners[p], winners[q]);
                let (n, pn, po) = match (wp, wq) {
                    (None, None) => continue,
                    (Some(a), Some(b)) if a.tri == b.tri => continue,
                    (Some(a), None) => (a, p, q),
                    (None, Some(b)) => (b, q, p),
                    (Some(a), Some(b)) => {
                        if a.is_before(&b) {
                            (a, p, q)
                        } else {
                            (b, q, p)
                        }
                    }
                };
                let Some(st) = &screen[n.tri as usize] else { continue };
                let Some(t) = crossing(soup, camera, st, frags, winners, &n, pn, po, horizontal) else { continue };
                if !t.v.is_finite() {
                    continue;
                }
                let x_pix = if t.v < 0.5 { pn } else { po };
                let g = d_rgb[x_pix];
                let dl_dt: f64 = (0..3).map(|c| g[c] * (rgb[pn][c] - rgb[po][c])).sum();
                if dl_dt == 0.0 {
                    continue;
                }
                out.push((n.tri, t.d.map(|d| d * dl_dt)));
            }
        }
        out
    });
    for (tri, g) in rows.iter().flatten() {
        let vg = &mut grads.vertices[*tri as usize];
        for k in 0..3 {
            for j in 0..3 {
                vg[k][j] += g[3 * k + j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frag(depth: f64, tri: u32) -> Fragment {
        Fragment { b: [0.0, 0.0], depth, tri }
    }

    #[test]
    fn extreme_alphas_select_deterministically() {
        let frags = [frag(3.0, 0), frag(1.0, 1), frag(2.0, 2)];
        for s in 0..100 {
            let mut rng = CounterRng::from_seed(s);
            assert_eq!(sample_stochastic(&frags, |_| 1.0, &mut rng), Some(1));
            assert_eq!(sample_stochastic(&frags, |_| 0.0, &mut rng), None);
        }
    }

    #[test]
    fn selection_probability_examples() {
        let a = [0.5, 0.5, 1.0];
        let p: Vec<f64> = (0..3).map(|k| selection_probability(&a, Some(k))).collect();
        assert_eq!(p, vec![0.5, 0.25, 0.25]);
        assert_eq!(selection_probability(&a, None), 0.0);
        assert_eq!(selection_probability(&[1.0], Some(0)), 1.0);
    }

    #[test]
    fn score_examples() {
        let frags = [frag(1.0, 0), frag(2.0, 1), frag(3.0, 2)];
        let s = score_terms(&frags, &[0.25, 0.5, 0.9], Some(1));
        assert!((s[0] + 4.0 / 3.0).abs() < 1e-12);
        assert!((s[1] - 2.0).abs() < 1e-12);
        assert_eq!(s[2], 0.0);
        let bg = score_terms(&frags, &[0.25, 0.5, 0.9], None);
        assert!(bg.iter().all(|&v| v < 0.0));
        let g = score_gradients(&frags, &[0.25, 0.5, 0.9], Some(1), 3.0);
        assert!((g[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_examples() {
        let (e, _) = expected_loss_and_gradient_oracle(&[1.0], &[0.7], 5.0);
        assert!((e - 0.7).abs() < 1e-15);
        let (e, _) = expected_loss_and_gradient_oracle(&[0.5, 0.5], &[1.0, 0.0], 2.0);
        assert!((e - 1.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_gradient_matches_finite_differences() {
        let alphas = [0.3, 0.8, 0.55, 0.1];
        let losses = [0.2, 0.9, 0.4, 0.6];
        let (_, g) = expected_loss_and_gradient_oracle(&alphas, &losses, 0.75);
        let h = 1e-5;
        for k in 0..alphas.len() {
            let mut ap = alphas;
            let mut am = alphas;
            ap[k] += h;
            am[k] -= h;
            let fd = (expected_loss_and_gradient_oracle(&ap, &losses, 0.75).0
                - expected_loss_and_gradient_oracle(&am, &losses, 0.75).0)
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-9, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn dual_barycentrics_match_primal() {
        let cam = {
            let mut c = Camera::new(nalgebra::Isometry3::identity(), 40.0, 40.0, 32, 32);
            c.near = 1e-3;
            c
        };
        let tri = Triangle::new(Vec3::new(-1.0, -1.0, 2.0), Vec3::new(1.5, -0.5, 4.0), Vec3::new(0.0, 1.0, 3.0));
        let st = ScreenTriangle::setup(&tri, &cam).unwrap();
        let q = [15.5, 16.5];
        let (b, _) = st.interpolate(q);
        let (pd, dd) = project_dual(&cam, &tri);
        let bd = bary_dual(pd, dd, constant2(q));
        assert!((bd[0].v - b[0]).abs() < 1e-12 && (bd[1].v - b[1]).abs() < 1e-12);
        // tangent against finite differences on one coordinate
        let h = 1e-6;
        for slot in [0, 4, 8] {
            let mut tp = tri;
            let mut tm = tri;
            tp.v[slot / 3][slot % 3] += h;
            tm.v[slot / 3][slot % 3] -= h;
            let bp = ScreenTriangle::setup(&tp, &cam).unwrap().interpolate(q).0;
            let bm = ScreenTriangle::setup(&tm, &cam).unwrap().interpolate(q).0;
            for c in 0..2 {
                let fd = (bp[c] - bm[c]) / (2.0 * h);
                assert!((fd - bd[c].d[slot]).abs() < 1e-6);
            }
        }
    }
}
