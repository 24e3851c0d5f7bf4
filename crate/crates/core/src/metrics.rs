//! Image quality metrics: PSNR, MAE and SSIM with its analytic gradient.

use crate::image_buf::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Image, b: &Image) -> f64 {
    assert!(a.same_shape(b));
    let s: f64 = a.data.iter().zip(&b.data).flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).powi(2))).sum();
    s / (3 * a.len()).max(1) as f64
}

/// Peak signal-to-noise ratio with peak 1; `+inf` when the images match.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

pub fn mae(a: &Image, b: &Image) -> f64 {
    assert!(a.same_shape(b));
    let s: f64 = a.data.iter().zip(&b.data).flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs())).sum();
    s / (3 * a.len()).max(1) as f64
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g: [f64; SSIM_WINDOW] = std::array::from_fn(|k| (-(k as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian blur with zero padding, same output size.
fn blur(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += gk * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += gk * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

struct ChannelStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn channel_stats(x: &[f64], y: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> ChannelStats {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    ChannelStats {
        mx: blur(x, w, h, g),
        my: blur(y, w, h, g),
        exx: blur(&xx, w, h, g),
        eyy: blur(&yy, w, h, g),
        exy: blur(&xy, w, h, g),
    }
}

/// Per-pixel terms `(A1, A2, B1, B2)` of `S = A1 A2 / (B1 B2)`.
#[inline]
fn terms(s: &ChannelStats, i: usize) -> (f64, f64, f64, f64) {
    let (mx, my) = (s.mx[i], s.my[i]);
    let sxx = s.exx[i] - mx * mx;
    let syy = s.eyy[i] - my * my;
    let sxy = s.exy[i] - mx * my;
    (2.0 * mx * my + SSIM_C1, 2.0 * sxy + SSIM_C2, mx * mx + my * my + SSIM_C1, sxx + syy + SSIM_C2)
}

/// SSIM averaged over channels: `(mean, per-pixel map)`.
pub fn ssim(x: &Image, y: &Image) -> (f64, Vec<f64>) {
    assert!(x.same_shape(y));
    let (w, h) = (x.width, x.height);
    let g = gaussian_window();
    let per_channel = crate::par::map_range(3, |c| {
        let st = channel_stats(&x.channel(c), &y.channel(c), w, h, &g);
        (0..w * h)
            .map(|i| {
                let (a1, a2, b1, b2) = terms(&st, i);
                a1 * a2 / (b1 * b2)
            })
            .collect::<Vec<f64>>()
    });
    let map: Vec<f64> = (0..w * h).map(|i| (per_channel[0][i] + per_channel[1][i] + per_channel[2][i]) / 3.0).collect();
    let mean = map.iter().sum::<f64>() / map.len().max(1) as f64;
    (mean, map)
}

/// Gradient with respect to `x` of `sum_p d_map[p] * map[p]`, where
/// `map` is the channel-averaged SSIM map of [`ssim`].
pub fn ssim_backward(x: &Image, y: &Image, d_map: &[f64]) -> Vec<[f64; 3]> {
    assert!(x.same_shape(y));
    let (w, h) = (x.width, x.height);
    let g = gaussian_window();
    let per_channel = crate::par::map_range(3, |c| {
        let xc = x.channel(c);
        let yc = y.channel(c);
        let st = channel_stats(&xc, &yc, w, h, &g);
        let mut dm = vec![0.0; w * h];
        let mut dxx = vec![0.0; w * h];
        let mut dxy = vec![0.0; w * h];
        for i in 0..w * h {
            let m = d_map[i] / 3.0;
            if m == 0.0 {
                continue;
            }
            let (a1, a2, b1, b2) = terms(&st, i);
            let den = b1 * b2;
            let s = a1 * a2 / den;
            let (mx, my) = (st.mx[i], st.my[i]);
            dm[i] = m * (2.0 * my * (a2 - a1) - 2.0 * mx * s * (b2 - b1)) / den;
            dxy[i] = m * 2.0 * a1 / den;
            dxx[i] = -m * s / b2;
        }
        let (bm, bxx, bxy) = (blur(&dm, w, h, &g), blur(&dxx, w, h, &g), blur(&dxy, w, h, &g));
        (0..w * h).map(|i| bm[i] + 2.0 * xc[i] * bxx[i] + yc[i] * bxy[i]).collect::<Vec<f64>>()
    });
    (0..w * h).map(|i| [per_channel[0][i], per_channel[1][i], per_channel[2][i]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = crate::rng::CounterRng::from_seed(seed);
        Image { width: w, height: h, data: (0..w * h).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect() }
    }

    #[test]
    fn psnr_and_mae_examples() {
        let a = Image::filled(4, 4, [0.0; 3]);
        let b = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
        assert_eq!(psnr(&a, &b), 0.0);
        let c = Image::filled(4, 4, [0.5; 3]);
        let d = Image::filled(4, 4, [0.75; 3]);
        assert_eq!(mae(&c, &d), 0.25);
    }

    #[test]
    fn ssim_examples() {
        let x = noise(16, 12, 1);
        let y = noise(16, 12, 2);
        let (s, map) = ssim(&x, &x);
        assert!((s - 1.0).abs() < 1e-12);
        assert!(map.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(ssim(&x, &y).0, ssim(&y, &x).0);
        let zero = Image::filled(16, 16, [0.0; 3]);
        let one = Image::filled(16, 16, [1.0; 3]);
        assert!(ssim(&zero, &one).0 < 0.01);
    }

    #[test]
    fn gaussian_window_is_normalized() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((g[5] - 0.266_011_724_0).abs() < 1e-8);
    }

    #[test]
    fn ssim_backward_matches_finite_differences() {
        let (w, h) = (13, 9);
        let x = noise(w, h, 3);
        let y = noise(w, h, 4);
        let mut rng = crate::rng::CounterRng::from_seed(5);
        let d_map: Vec<f64> = (0..w * h).map(|_| rng.uniform() - 0.5).collect();
        let f = |img: &Image| ssim(img, &y).1.iter().zip(&d_map).map(|(a, b)| a * b).sum::<f64>();
        let grad = ssim_backward(&x, &y, &d_map);
        let eps = 1e-6;
        for &(i, c) in &[(0, 0), (17, 1), (60, 2), (w * h - 1, 0), (40, 1)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data[i][c] += eps;
            xm.data[i][c] -= eps;
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!((fd - grad[i][c]).abs() <= 1e-6 * fd.abs().max(1e-3), "{i},{c}: {fd} vs {}", grad[i][c]);
        }
    }
}
