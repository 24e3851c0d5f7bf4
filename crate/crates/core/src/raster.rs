//! Fragment generation and deterministic depth-tested rendering.

use crate::image_buf::Image;
use crate::scene::{Camera, Triangle, TriangleSoup};
use crate::shading::ShadingNet;

/// Pixel-centre sample of one triangle: barycentric `(b1, b2)` (weights of
/// the second and third vertex), camera-space depth and triangle index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub b: [f64; 2],
    pub depth: f64,
    pub tri: u32,
}

impl Fragment {
    /// Strict visibility order: nearer first, ties to the smaller index.
    #[inline]
    pub fn is_before(&self, other: &Fragment) -> bool {
        self.depth < other.depth || (self.depth == other.depth && self.tri < other.tri)
    }
}

/// Per-pixel fragment lists in compressed row storage.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFragmentBuffer {
    pub width: usize,
    pub height: usize,
    offsets: Vec<usize>,
    fragments: Vec<Fragment>,
}

impl PixelFragmentBuffer {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, offsets: vec![0; width * height + 1], fragments: Vec::new() }
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[Fragment] {
        &self.fragments[self.offsets[index]..self.offsets[index + 1]]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[Fragment] {
        self.pixel(y * self.width + x)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn total_fragments(&self) -> usize {
        self.fragments.len()
    }

    /// Start offset of pixel `index` in the flat fragment array.
    #[inline]
    pub fn offset(&self, index: usize) -> usize {
        self.offsets[index]
    }
}

/// Screen-space setup of a triangle that lies fully beyond the near plane.
#[derive(Debug, Clone, Copy)]
pub struct ScreenTriangle {
    pub p: [[f64; 2]; 3],
    pub depth: [f64; 3],
    /// Twice the signed screen area.
    pub area2: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Whether a (positively oriented) edge owns pixel centres lying exactly on it.
#[inline]
fn owns_edge(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy > 0.0 || (dy == 0.0 && dx < 0.0)
}

impl ScreenTriangle {
    /// `None` when any vertex is at or behind the near plane, the projection
    /// is degenerate, or no pixel centre can be covered.
    pub fn setup(tri: &Triangle, camera: &Camera) -> Option<Self> {
        let mut p = [[0.0; 2]; 3];
        let mut depth = [0.0; 3];
        for k in 0..3 {
            let pr = camera.project(&tri.v[k]);
            if pr.clipped {
                return None;
            }
            p[k] = [pr.x, pr.y];
            depth[k] = pr.depth;
        }
        let area2 = edge(p[0], p[1], p[2]);
        if area2 == 0.0 || !area2.is_finite() {
            return None;
        }
        let (w, h) = (camera.width as f64, camera.height as f64);
        let min_x = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
        let max_x = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
        let max_y = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max);
        // pixel x covers centre x + 0.5
        let x0 = (min_x - 0.5).ceil().max(0.0);
        let x1 = (max_x - 0.5).floor().min(w - 1.0);
        let y0 = (min_y - 0.5).ceil().max(0.0);
        let y1 = (max_y - 0.5).floor().min(h - 1.0);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some(Self { p, depth, area2, x0: x0 as usize, x1: x1 as usize, y0: y0 as usize, y1: y1 as usize })
    }

    /// Screen-space (affine) barycentrics `(l0, l1, l2)` at `q`, without a
    /// coverage test.
    #[inline]
    pub fn screen_barycentrics(&self, q: [f64; 2]) -> [f64; 3] {
        let p = &self.p;
        [edge(p[1], p[2], q) / self.area2, edge(p[2], p[0], q) / self.area2, edge(p[0], p[1], q) / self.area2]
    }

    /// Whether `q` is inside under the fill rule (orientation independent).
    #[inline]
    pub fn covers(&self, q: [f64; 2]) -> bool {
        let p = &self.p;
        let s = self.area2.signum();
        let edges = [(p[1], p[2]), (p[2], p[0]), (p[0], p[1])];
        edges.iter().all(|&(a, b)| {
            let e = s * edge(a, b, q);
            let (a, b) = if s > 0.0 { (a, b) } else { (b, a) };
            e > 0.0 || (e == 0.0 && owns_edge(a, b))
        })
    }

    /// Perspective-correct barycentrics `(b1, b2)` and depth at `q`.
    #[inline]
    pub fn interpolate(&self, q: [f64; 2]) -> ([f64; 2], f64) {
        let l = self.screen_barycentrics(q);
        let w = [l[0] / self.depth[0], l[1] / self.depth[1], l[2] / self.depth[2]];
        let inv = w[0] + w[1] + w[2];
        ([w[1] / inv, w[2] / inv], 1.0 / inv)
    }

    /// Fragment at pixel `(x, y)` if its centre is covered and beyond `near`.
    #[inline]
    pub fn sample(&self, x: usize, y: usize, tri: u32, near: f64) -> Option<Fragment> {
        let q = [x as f64 + 0.5, y as f64 + 0.5];
        if !self.covers(q) {
            return None;
        }
        let (b, depth) = self.interpolate(q);
        (depth > near).then_some(Fragment { b, depth, tri })
    }
}

/// Screen setup for every triangle of the soup.
pub fn setup_all(soup: &TriangleSoup, camera: &Camera) -> Vec<Option<ScreenTriangle>> {
    crate::par::map_slice(&soup.triangles, |t| ScreenTriangle::setup(t, camera))
}

/// Generates one fragment per (pixel, triangle) whose projection contains
/// the pixel centre. Fragments of a pixel are ordered by triangle index.
pub fn rasterize(soup: &TriangleSoup, camera: &Camera) -> PixelFragmentBuffer {
    let screen = setup_all(soup, camera);
    rasterize_setup(&screen, camera)
}

pub fn rasterize_setup(screen: &[Option<ScreenTriangle>], camera: &Camera) -> PixelFragmentBuffer {
    let (w, h) = (camera.width, camera.height);
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (t, st) in screen.iter().enumerate() {
        if let Some(st) = st {
            for row in &mut rows[st.y0..=st.y1] {
                row.push(t as u32);
            }
        }
    }
    let per_row: Vec<(Vec<u32>, Vec<Fragment>)> = crate::par::map_range(h, |y| {
        let mut counts = vec![0u32; w];
        let mut frags = Vec::new();
        let row = &rows[y];
        if row.is_empty() {
            return (counts, frags);
        }
        for (x, count) in counts.iter_mut().enumerate() {
            for &t in row {
                let st = screen[t as usize].as_ref().expect("binned triangles are set up");
                if x < st.x0 || x > st.x1 {
                    continue;
                }
                if let Some(f) = st.sample(x, y, t, camera.near) {
                    frags.push(f);
                    *count += 1;
                }
            }
        }
        (counts, frags)
    });
    let mut offsets = Vec::with_capacity(w * h + 1);
    offsets.push(0);
    let total: usize = per_row.iter().map(|r| r.1.len()).sum();
    let mut fragments = Vec::with_capacity(total);
    for (counts, frags) in per_row {
        for c in counts {
            let last = *offsets.last().unwrap();
            offsets.push(last + c as usize);
        }
        fragments.extend(frags);
    }
    PixelFragmentBuffer { width: w, height: h, offsets, fragments }
}

/// Index of the nearest fragment with `alpha > 0.5`, or `None` for background.
pub fn select_deterministic(fragments: &[Fragment], mut alpha_at: impl FnMut(&Fragment) -> f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, f) in fragments.iter().enumerate() {
        if best.is_some_and(|b| !f.is_before(&fragments[b])) {
            continue;
        }
        if alpha_at(f) > 0.5 {
            best = Some(i);
        }
    }
    best
}

/// Deterministic winner per pixel.
pub fn winners_deterministic(soup: &TriangleSoup, frags: &PixelFragmentBuffer) -> Vec<Option<Fragment>> {
    crate::par::map_range(frags.pixel_count(), |i| {
        let list = frags.pixel(i);
        select_deterministic(list, |f| soup.textures[f.tri as usize].alpha_at(f.b)).map(|k| list[k])
    })
}

/// Outputs of [`render_deterministic`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    /// Winning triangle per pixel, `-1` for background.
    pub tri_id: Vec<i64>,
    /// Winning depth per pixel, `+inf` for background.
    pub depth: Vec<f64>,
}

/// Shaded colour of a winning fragment seen through pixel `(px, py)`.
#[inline]
pub fn shade_fragment(soup: &TriangleSoup, net: &ShadingNet, camera: &Camera, f: &Fragment, px: usize, py: usize) -> [f64; 3] {
    let feat = soup.textures[f.tri as usize].feature_at(f.b);
    let color: [f64; 7] = std::array::from_fn(|k| feat[k]);
    net.shade(&color, &camera.pixel_dir(px, py))
}

pub fn render_deterministic(soup: &TriangleSoup, camera: &Camera, net: &ShadingNet, background: [f64; 3]) -> RenderOutput {
    let frags = rasterize(soup, camera);
    let winners = winners_deterministic(soup, &frags);
    render_winners(soup, camera, net, background, &winners)
}

/// Shades a precomputed winner image.
pub fn render_winners(
    soup: &TriangleSoup,
    camera: &Camera,
    net: &ShadingNet,
    background: [f64; 3],
    winners: &[Option<Fragment>],
) -> RenderOutput {
    let w = camera.width;
    let rgb = crate::par::map_range(winners.len(), |i| match &winners[i] {
        Some(f) => shade_fragment(soup, net, camera, f, i % w, i / w),
        None => background,
    });
    RenderOutput {
        rgb: Image { width: camera.width, height: camera.height, data: rgb },
        tri_id: winners.iter().map(|f| f.map_or(-1, |f| f.tri as i64)).collect(),
        depth: winners.iter().map(|f| f.map_or(f64::INFINITY, |f| f.depth)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Vec3;
    use crate::texture::{Encoding, Lattice, TextureGridSet, ALPHA_CHANNEL};
    use nalgebra::Isometry3;

    fn camera(w: usize, h: usize) -> Camera {
        let mut c = Camera::new(Isometry3::identity(), w as f64, w as f64, w, h);
        c.near = 1e-3;
        c
    }

    fn textured(alpha_logit: f64, color: [f64; 4]) -> TextureGridSet {
        let mut f = [0.0; 8];
        for k in 0..4 {
            f[k] = color[k];
        }
        f[ALPHA_CHANNEL] = alpha_logit;
        TextureGridSet::from_levels(vec![Lattice::constant(3, f)], Encoding::Logit)
    }

    /// Triangle covering the view at depth `z`.
    fn big_triangle(z: f64) -> Triangle {
        Triangle::new(Vec3::new(-3.0 * z, -3.0 * z, z), Vec3::new(3.0 * z, -3.0 * z, z), Vec3::new(0.0, 3.0 * z, z))
    }

    #[test]
    fn empty_soup_gives_empty_lists() {
        let buf = rasterize(&TriangleSoup::new(), &camera(8, 6));
        assert_eq!(buf.total_fragments(), 0);
        assert!((0..48).all(|i| buf.pixel(i).is_empty()));
    }

    #[test]
    fn small_triangle_covers_single_pixel() {
        // camera with f = 8, centre (4, 3); pixel (0,0) centre is at screen (0.5, 0.5)
        let cam = camera(8, 6);
        let z = 2.0;
        let to_world = |x: f64, y: f64| cam.unproject(x, y, z);
        let tri = Triangle::new(to_world(0.2, 0.2), to_world(0.9, 0.2), to_world(0.2, 0.9));
        let mut soup = TriangleSoup::new();
        soup.push(tri, TextureGridSet::zeros(3, 3));
        let buf = rasterize(&soup, &cam);
        assert_eq!(buf.at(0, 0).len(), 1);
        assert_eq!(buf.at(0, 0)[0].tri, 0);
        assert_eq!(buf.total_fragments(), 1);
        assert!((buf.at(0, 0)[0].depth - z).abs() < 1e-12);
    }

    #[test]
    fn coplanar_stack_gives_two_fragments() {
        let cam = camera(8, 6);
        let mut soup = TriangleSoup::new();
        soup.push(big_triangle(2.0), TextureGridSet::zeros(3, 3));
        soup.push(big_triangle(2.0), TextureGridSet::zeros(3, 3));
        let buf = rasterize(&soup, &cam);
        let list = buf.at(4, 3);
        assert_eq!(list.len(), 2);
        assert!((list[0].depth - list[1].depth).abs() < 1e-12);
    }

    #[test]
    fn shared_edge_is_watertight() {
        // a quad split along its diagonal covers each pixel exactly once
        let cam = camera(16, 16);
        let z = 3.0;
        let q = |x: f64, y: f64| cam.unproject(x, y, z);
        let (a, b, c, d) = (q(1.0, 1.0), q(15.0, 2.0), q(14.0, 15.0), q(2.0, 13.0));
        let mut soup = TriangleSoup::new();
        soup.push(Triangle::new(a, b, c), TextureGridSet::zeros(3, 3));
        soup.push(Triangle::new(a, d, c), TextureGridSet::zeros(3, 3));
        let buf = rasterize(&soup, &cam);
        for y in 0..16 {
            for x in 0..16 {
                assert!(buf.at(x, y).len() <= 1, "pixel ({x},{y}) covered twice");
            }
        }
        // diagonal pixels exist
        assert!((0..256).filter(|&i| buf.pixel(i).len() == 1).count() > 100);
    }

    #[test]
    fn perspective_correct_barycentrics_reconstruct_surface_point() {
        let cam = camera(32, 32);
        let tri = Triangle::new(Vec3::new(-1.0, -1.0, 2.0), Vec3::new(1.5, -0.5, 4.0), Vec3::new(0.0, 1.0, 6.0));
        let mut soup = TriangleSoup::new();
        soup.push(tri, TextureGridSet::zeros(3, 3));
        let buf = rasterize(&soup, &cam);
        let mut n = 0;
        for y in 0..32 {
            for x in 0..32 {
                for f in buf.at(x, y) {
                    let p = tri.point_at(f.b);
                    let pr = cam.project(&p);
                    assert!((pr.x - (x as f64 + 0.5)).abs() < 1e-9);
                    assert!((pr.y - (y as f64 + 0.5)).abs() < 1e-9);
                    assert!((pr.depth - f.depth).abs() < 1e-9);
                    n += 1;
                }
            }
        }
        assert!(n > 20);
    }

    #[test]
    fn two_sided_winding() {
        let cam = camera(8, 8);
        let t = big_triangle(2.0);
        let flipped = Triangle::new(t.v[0], t.v[2], t.v[1]);
        let mut soup = TriangleSoup::new();
        soup.push(flipped, TextureGridSet::zeros(3, 3));
        let buf = rasterize(&soup, &cam);
        assert_eq!(buf.total_fragments(), 64);
    }

    #[test]
    fn deterministic_selection_rules() {
        let f = |d: f64, t: u32| Fragment { b: [0.0, 0.0], depth: d, tri: t };
        let frags = [f(2.0, 0), f(1.0, 1)];
        assert_eq!(select_deterministic(&frags, |_| 1.0), Some(1));
        assert_eq!(select_deterministic(&frags, |_| 0.4), None);
        assert_eq!(select_deterministic(&frags, |_| 0.5), None);
        // equal depth: smaller triangle index wins
        let tie = [f(1.0, 5), f(1.0, 3), f(1.0, 4)];
        assert_eq!(select_deterministic(&tie, |_| 1.0), Some(1));
    }

    #[test]
    fn render_empty_and_occlusion() {
        let cam = camera(8, 8);
        let net = ShadingNet::zeros();
        let out = render_deterministic(&TriangleSoup::new(), &cam, &net, [1.0; 3]);
        assert!(out.rgb.data.iter().all(|&c| c == [1.0; 3]));
        assert!(out.tri_id.iter().all(|&t| t == -1));
        assert!(out.depth.iter().all(|&d| d == f64::INFINITY));

        let mut soup = TriangleSoup::new();
        soup.push(big_triangle(4.0), textured(10.0, [0.0; 4]));
        soup.push(big_triangle(2.0), textured(10.0, [0.0; 4]));
        let out = render_deterministic(&soup, &cam, &net, [1.0; 3]);
        assert!(out.tri_id.iter().all(|&t| t == 1));
    }

    #[test]
    fn constant_texture_renders_skip_color() {
        let cam = camera(8, 8);
        let net = ShadingNet::zeros();
        let mut soup = TriangleSoup::new();
        // logits: colour channels give (s(1), s(-1), s(0)), A = s(3)
        soup.push(big_triangle(2.0), textured(10.0, [1.0, -1.0, 0.0, 3.0]));
        let out = render_deterministic(&soup, &cam, &net, [0.0; 3]);
        let s = crate::sigmoid;
        let a = s(3.0);
        let expect = [s(1.0), s(-1.0), s(0.0)].map(|c| a * c + (1.0 - a) * 0.5);
        for px in &out.rgb.data {
            for c in 0..3 {
                assert!((px[c] - expect[c]).abs() < 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sort_free_selection_matches_sorted_scan(
                items in prop::collection::vec((0u8..6, 0.0..1.0f64, 0u32..8), 0..8),
            ) {
                let frags: Vec<Fragment> = items.iter().map(|&(d, _, t)| Fragment { b: [0.0, 0.0], depth: d as f64, tri: t }).collect();
                let alphas: Vec<f64> = items.iter().map(|x| x.1).collect();
                let idx_of = |f: &Fragment| frags.iter().position(|g| std::ptr::eq(g, f)).unwrap();
                let got = select_deterministic(&frags, |f| alphas[idx_of(f)]);
                let mut order: Vec<usize> = (0..frags.len()).collect();
                order.sort_by(|&a, &b| frags[a].depth.total_cmp(&frags[b].depth).then(frags[a].tri.cmp(&frags[b].tri)).then(a.cmp(&b)));
                let expect = order.into_iter().find(|&i| alphas[i] > 0.5);
                match (got, expect) {
                    (Some(g), Some(e)) => prop_assert!(frags[g].depth == frags[e].depth && frags[g].tri == frags[e].tri),
                    (g, e) => prop_assert_eq!(g, e),
                }
            }
        }
    }
}
