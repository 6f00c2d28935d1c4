//! Grayscale images, box-filter pyramids and pyramidal Lucas-Kanade tracking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pixel;

/// Coarsest pyramid level must be at least this wide and tall.
pub const MIN_LEVEL_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::SizeMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        if let Some(k) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel {k} has value {} outside [0, 1]",
                data[k]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    /// Samples `f(x, y)` at every pixel center, clamping to [0, 1].
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Quantizes to 8-bit luminance.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    fn downsample(&self) -> GrayImage {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            let r0 = &self.data[(2 * y) * self.width..];
            let r1 = &self.data[(2 * y + 1) * self.width..];
            for x in 0..w {
                data.push(0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]));
            }
        }
        GrayImage {
            width: w,
            height: h,
            data,
        }
    }
}

/// 8-bit interleaved RGB to luminance in [0, 1] with Rec.601 weights.
pub fn to_gray(rgb: &[u8], width: usize, height: usize) -> Result<GrayImage> {
    let expected = 3 * width * height;
    if rgb.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: rgb.len(),
        });
    }
    let data = rgb
        .chunks_exact(3)
        .map(|c| {
            let l = (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0;
            l.clamp(0.0, 1.0) as f32
        })
        .collect();
    GrayImage::new(width, height, data)
}

#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<GrayImage>,
}

impl Pyramid {
    pub fn levels(&self) -> &[GrayImage] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn base(&self) -> &GrayImage {
        &self.levels[0]
    }
}

/// Builds up to `max_levels` levels, halving with a 2×2 box filter and
/// stopping before any level would drop below 16×16.
pub fn build_pyramid(img: &GrayImage, max_levels: usize) -> Pyramid {
    let mut levels = vec![img.clone()];
    while levels.len() < max_levels.max(1) {
        let last = levels.last().unwrap();
        if last.width / 2 < MIN_LEVEL_SIZE || last.height / 2 < MIN_LEVEL_SIZE {
            break;
        }
        let next = last.downsample();
        levels.push(next);
    }
    Pyramid { levels }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackStatus {
    Converged,
    Lost,
    OutOfBounds,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedPoint {
    pub source: Pixel,
    pub target: Pixel,
    pub status: TrackStatus,
    /// Mean absolute intensity difference over the window at the solution.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KltParams {
    pub window: usize,
    pub levels: usize,
    #[serde(alias = "iters")]
    pub max_iters: usize,
    pub eps: f64,
    /// Smallest eigenvalue of the per-pixel averaged structure tensor below
    /// which a window is considered textureless.
    pub min_eigenvalue: f64,
    /// Mean absolute window residual above which a track is lost.
    pub max_residual: f64,
}

impl Default for KltParams {
    fn default() -> Self {
        Self {
            window: 21,
            levels: 3,
            max_iters: 30,
            eps: 0.01,
            min_eigenvalue: 1e-4,
            max_residual: 0.1,
        }
    }
}

impl KltParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 5 || self.window % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "klt window must be odd and >= 5, got {}",
                self.window
            )));
        }
        if self.levels == 0 || self.max_iters == 0 || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument(
                "klt levels, iterations and eps must be positive".into(),
            ));
        }
        if !(self.min_eigenvalue >= 0.0) || !(self.max_residual > 0.0) {
            return Err(Error::InvalidArgument("klt thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Central-difference gradients of one level, borders replicated.
struct Gradients {
    gx: Vec<f32>,
    gy: Vec<f32>,
}

fn gradients(img: &GrayImage) -> Gradients {
    let (w, h) = (img.width, img.height);
    let mut gx = vec![0f32; w * h];
    let mut gy = vec![0f32; w * h];
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            gx[y * w + x] = 0.5 * (img.get(xp, y) - img.get(xm, y));
            gy[y * w + x] = 0.5 * (img.get(x, yp) - img.get(x, ym));
        }
    }
    Gradients { gx, gy }
}

/// Samples a `side`×`side` window whose top-left sample sits at `(x, y)`.
/// All samples share the same bilinear weights; indices are clamped to the
/// image so windows may overhang at coarse levels.
fn sample_window(buf: &[f32], w: usize, h: usize, x: f64, y: f64, side: usize, out: &mut Vec<f32>) {
    out.clear();
    let x0 = x.floor();
    let y0 = y.floor();
    let ax = (x - x0) as f32;
    let ay = (y - y0) as f32;
    let w00 = (1.0 - ax) * (1.0 - ay);
    let w10 = ax * (1.0 - ay);
    let w01 = (1.0 - ax) * ay;
    let w11 = ax * ay;
    let x0 = x0 as i64;
    let y0 = y0 as i64;
    let clamp_x = |v: i64| v.clamp(0, w as i64 - 1) as usize;
    let clamp_y = |v: i64| v.clamp(0, h as i64 - 1) as usize;
    let interior = x0 >= 0 && y0 >= 0 && x0 + side as i64 + 1 <= w as i64 && y0 + side as i64 + 1 <= h as i64;
    for j in 0..side as i64 {
        if interior {
            let r0 = &buf[(y0 + j) as usize * w + x0 as usize..];
            let r1 = &buf[(y0 + j + 1) as usize * w + x0 as usize..];
            for i in 0..side {
                out.push(w00 * r0[i] + w10 * r0[i + 1] + w01 * r1[i] + w11 * r1[i + 1]);
            }
        } else {
            let ya = clamp_y(y0 + j);
            let yb = clamp_y(y0 + j + 1);
            for i in 0..side as i64 {
                let xa = clamp_x(x0 + i);
                let xb = clamp_x(x0 + i + 1);
                out.push(
                    w00 * buf[ya * w + xa] + w10 * buf[ya * w + xb] + w01 * buf[yb * w + xa] + w11 * buf[yb * w + xb],
                );
            }
        }
    }
}

fn window_inside(x: f64, y: f64, radius: usize, w: usize, h: usize) -> bool {
    let r = radius as f64;
    x.is_finite() && y.is_finite() && x - r >= 0.0 && y - r >= 0.0 && x + r + 1.0 <= w as f64 && y + r + 1.0 <= h as f64
}

/// Tracks `points` from `prev` to `next` with coarse-to-fine Lucas-Kanade.
///
/// Pixel centers sit at integer coordinates; a level-L coordinate maps to
/// level L+1 as `(p - 0.5) / 2` under the 2×2 box filter.
pub fn klt_track(prev: &Pyramid, next: &Pyramid, points: &[Pixel], params: &KltParams) -> Result<Vec<TrackedPoint>> {
    klt_track_guided(prev, next, points, None, params)
}

/// Like [`klt_track`], but the search for `points[i]` starts at
/// `predicted[i]` instead of at the source pixel. Useful when the motion is
/// larger than the pyramid can absorb and a coarse prediction is known.
pub fn klt_track_guided(
    prev: &Pyramid,
    next: &Pyramid,
    points: &[Pixel],
    predicted: Option<&[Pixel]>,
    params: &KltParams,
) -> Result<Vec<TrackedPoint>> {
    params.validate()?;
    if let Some(p) = predicted {
        if p.len() != points.len() {
            return Err(Error::DimensionMismatch(format!("{} points but {} predictions", points.len(), p.len())));
        }
    }
    if prev.num_levels() != next.num_levels() {
        return Err(Error::DimensionMismatch(format!(
            "pyramid level counts differ: {} vs {}",
            prev.num_levels(),
            next.num_levels()
        )));
    }
    for (a, b) in prev.levels.iter().zip(&next.levels) {
        if a.width != b.width || a.height != b.height {
            return Err(Error::DimensionMismatch(format!(
                "pyramid level sizes differ: {}x{} vs {}x{}",
                a.width, a.height, b.width, b.height
            )));
        }
    }
    let levels = params.levels.min(prev.num_levels());
    let grads: Vec<Gradients> = prev.levels[..levels].iter().map(gradients).collect();
    let tracker = Tracker {
        prev,
        next,
        grads: &grads,
        levels,
        params,
    };
    Ok(crate::par::flat_map_chunks(points, 32, |start, chunk| {
        let mut scratch = Scratch::default();
        chunk
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let guess = predicted.map_or((0.0, 0.0), |pr| (pr[start + k].u - p.u, pr[start + k].v - p.v));
                tracker.track_one(*p, guess, &mut scratch)
            })
            .collect()
    }))
}

#[derive(Default)]
struct Scratch {
    i: Vec<f32>,
    ix: Vec<f32>,
    iy: Vec<f32>,
    j: Vec<f32>,
}

struct Tracker<'a> {
    prev: &'a Pyramid,
    next: &'a Pyramid,
    grads: &'a [Gradients],
    levels: usize,
    params: &'a KltParams,
}

impl Tracker<'_> {
    fn track_one(&self, source: Pixel, guess: (f64, f64), s: &mut Scratch) -> TrackedPoint {
        let radius = self.params.window / 2;
        let side = self.params.window;
        let n = (side * side) as f64;
        let base = self.prev.base();
        let result = |target: Pixel, status, residual| TrackedPoint {
            source,
            target,
            status,
            residual,
        };
        if !window_inside(source.u, source.v, radius, base.width, base.height) {
            return result(source, TrackStatus::OutOfBounds, f64::INFINITY);
        }

        // The guess is carried in the units of the current level.
        let top = (1u64 << (self.levels - 1)) as f64;
        let (mut gx, mut gy) = (guess.0 / top, guess.1 / top);
        for level in (0..self.levels).rev() {
            let img_i = &self.prev.levels[level];
            let img_j = &self.next.levels[level];
            let (w, h) = (img_i.width, img_i.height);
            let scale = (1u64 << level) as f64;
            // Level coordinate of the source point.
            let px = (source.u + 0.5) / scale - 0.5;
            let py = (source.v + 0.5) / scale - 0.5;
            let ox = px - radius as f64;
            let oy = py - radius as f64;
            sample_window(&img_i.data, w, h, ox, oy, side, &mut s.i);
            sample_window(&self.grads[level].gx, w, h, ox, oy, side, &mut s.ix);
            sample_window(&self.grads[level].gy, w, h, ox, oy, side, &mut s.iy);

            let (mut gxx, mut gxy, mut gyy) = (0.0f64, 0.0f64, 0.0f64);
            for k in 0..s.ix.len() {
                let a = s.ix[k] as f64;
                let b = s.iy[k] as f64;
                gxx += a * a;
                gxy += a * b;
                gyy += b * b;
            }
            let det = gxx * gyy - gxy * gxy;
            let tr = gxx + gyy;
            let min_eig = 0.5 * (tr - ((gxx - gyy).powi(2) + 4.0 * gxy * gxy).sqrt()) / n;
            if min_eig < self.params.min_eigenvalue || det.abs() < f64::EPSILON {
                if level == 0 {
                    return result(source, TrackStatus::Lost, f64::INFINITY);
                }
                // Fine texture averages out at coarse levels; pass the guess down.
                gx *= 2.0;
                gy *= 2.0;
                continue;
            }

            let (mut vx, mut vy) = (0.0f64, 0.0f64);
            for _ in 0..self.params.max_iters {
                let tx = ox + gx + vx;
                let ty = oy + gy + vy;
                if !tx.is_finite() || !ty.is_finite() || tx < -(side as f64) || ty < -(side as f64) || tx > w as f64 || ty > h as f64 {
                    return result(source, TrackStatus::OutOfBounds, f64::INFINITY);
                }
                sample_window(&img_j.data, w, h, tx, ty, side, &mut s.j);
                let (mut bx, mut by) = (0.0f64, 0.0f64);
                for k in 0..s.j.len() {
                    let d = (s.i[k] - s.j[k]) as f64;
                    bx += d * s.ix[k] as f64;
                    by += d * s.iy[k] as f64;
                }
                let ex = (gyy * bx - gxy * by) / det;
                let ey = (gxx * by - gxy * bx) / det;
                vx += ex;
                vy += ey;
                if !vx.is_finite() || !vy.is_finite() {
                    return result(source, TrackStatus::Lost, f64::INFINITY);
                }
                if ex * ex + ey * ey < self.params.eps * self.params.eps {
                    break;
                }
            }
            if level > 0 {
                gx = 2.0 * (gx + vx);
                gy = 2.0 * (gy + vy);
            } else {
                gx += vx;
                gy += vy;
            }
        }

        let target = Pixel::new(source.u + gx, source.v + gy);
        if !window_inside(target.u, target.v, radius, base.width, base.height) {
            return result(target, TrackStatus::OutOfBounds, f64::INFINITY);
        }
        // Residual at full resolution.
        let nb = self.next.base();
        sample_window(&base.data, base.width, base.height, source.u - radius as f64, source.v - radius as f64, side, &mut s.i);
        sample_window(&nb.data, nb.width, nb.height, target.u - radius as f64, target.v - radius as f64, side, &mut s.j);
        let residual = s.i.iter().zip(&s.j).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / n;
        if !(residual < self.params.max_residual) {
            return result(target, TrackStatus::Lost, residual);
        }
        result(target, TrackStatus::Converged, residual)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Smooth band-limited texture; continuous, so shifted copies can be
    /// rendered exactly at sub-pixel offsets.
    pub(crate) fn texture(x: f64, y: f64) -> f32 {
        let v = 0.5
            + 0.16 * (0.31 * x + 0.17 * y).sin()
            + 0.12 * (0.23 * x - 0.29 * y + 1.0).sin()
            + 0.10 * (0.11 * x + 0.41 * y + 2.0).cos()
            + 0.08 * (0.07 * x * 0.9 - 0.05 * y).sin();
        v as f32
    }

    fn render(w: usize, h: usize, dx: f64, dy: f64) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| texture(x as f64 - dx, y as f64 - dy))
    }

    #[test]
    fn to_gray_examples() {
        let black = to_gray(&[0u8; 12], 2, 2).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
        let white = to_gray(&[255u8; 12], 2, 2).unwrap();
        assert!(white.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let red = to_gray(&[255, 0, 0], 1, 1).unwrap();
        assert!((red.get(0, 0) - 0.299).abs() < 1e-6);
        assert!(matches!(to_gray(&[0u8; 11], 2, 2), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn pyramid_examples() {
        let c = GrayImage::constant(64, 64, 0.3);
        let p = build_pyramid(&c, 3);
        assert_eq!(p.num_levels(), 3);
        for l in p.levels() {
            assert!(l.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }

        let img = render(100, 80, 0.0, 0.0);
        let p = build_pyramid(&img, 8);
        let dims: Vec<_> = p.levels().iter().map(|l| (l.width(), l.height())).collect();
        assert_eq!(dims, vec![(100, 80), (50, 40), (25, 20)]);

        let p = build_pyramid(&img, 1);
        assert_eq!(p.num_levels(), 1);
        assert_eq!(p.base(), &img);
    }

    #[test]
    fn zero_motion_converges_in_place() {
        let img = render(160, 120, 0.0, 0.0);
        let p = build_pyramid(&img, 3);
        let pts = [Pixel::new(40.0, 40.0), Pixel::new(80.5, 60.25), Pixel::new(120.0, 90.0)];
        let out = klt_track(&p, &p, &pts, &KltParams::default()).unwrap();
        for t in out {
            assert_eq!(t.status, TrackStatus::Converged);
            assert!(t.target.dist(&t.source) < 1e-3);
            assert!(t.residual < 1e-6);
        }
    }

    #[test]
    fn integer_shift_recovered() {
        let a = build_pyramid(&render(200, 160, 0.0, 0.0), 3);
        let b = build_pyramid(&render(200, 160, 3.0, 2.0), 3);
        let mut pts = Vec::new();
        for y in (30..130).step_by(20) {
            for x in (30..170).step_by(20) {
                pts.push(Pixel::new(x as f64, y as f64));
            }
        }
        let out = klt_track(&a, &b, &pts, &KltParams::default()).unwrap();
        for t in &out {
            assert_eq!(t.status, TrackStatus::Converged);
            let dx = t.target.u - t.source.u;
            let dy = t.target.v - t.source.v;
            assert!((dx - 3.0).abs() < 0.1 && (dy - 2.0).abs() < 0.1, "{dx} {dy}");
        }
    }

    #[test]
    fn textureless_window_is_lost() {
        let mut img = render(120, 120, 0.0, 0.0);
        for y in 30..90 {
            for x in 30..90 {
                img.data[y * 120 + x] = 0.5;
            }
        }
        let p = build_pyramid(&img, 1);
        let out = klt_track(&p, &p, &[Pixel::new(60.0, 60.0)], &KltParams::default()).unwrap();
        assert_eq!(out[0].status, TrackStatus::Lost);
    }

    #[test]
    fn border_points_are_out_of_bounds() {
        let p = build_pyramid(&render(100, 100, 0.0, 0.0), 3);
        let out = klt_track(&p, &p, &[Pixel::new(3.0, 50.0)], &KltParams::default()).unwrap();
        assert_eq!(out[0].status, TrackStatus::OutOfBounds);
    }

    #[test]
    fn mismatched_pyramids_rejected() {
        let a = build_pyramid(&render(100, 100, 0.0, 0.0), 3);
        let b = build_pyramid(&render(100, 100, 0.0, 0.0), 2);
        assert!(matches!(klt_track(&a, &b, &[], &KltParams::default()), Err(Error::DimensionMismatch(_))));
        let c = build_pyramid(&render(102, 100, 0.0, 0.0), 3);
        assert!(matches!(klt_track(&a, &c, &[], &KltParams::default()), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn guided_search_reaches_large_shifts() {
        let a = build_pyramid(&render(240, 160, 0.0, 0.0), 3);
        let b = build_pyramid(&render(240, 160, 45.0, -3.0), 3);
        let src = [Pixel::new(80.0, 80.0), Pixel::new(120.0, 70.0)];
        let guess: Vec<Pixel> = src.iter().map(|p| Pixel::new(p.u + 43.0, p.v - 1.5)).collect();
        let out = klt_track_guided(&a, &b, &src, Some(&guess), &KltParams::default()).unwrap();
        for (s, t) in src.iter().zip(&out) {
            assert_eq!(t.status, TrackStatus::Converged);
            assert!((t.target.u - s.u - 45.0).abs() < 0.1 && (t.target.v - s.v + 3.0).abs() < 0.1, "{t:?}");
        }
        assert!(matches!(
            klt_track_guided(&a, &b, &src, Some(&guess[..1]), &KltParams::default()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn bad_window_rejected() {
        let a = build_pyramid(&render(64, 64, 0.0, 0.0), 1);
        let params = KltParams { window: 4, ..Default::default() };
        assert!(klt_track(&a, &a, &[], &params).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn subpixel_shift_equivariance(dx in -4.0f64..4.0, dy in -4.0f64..4.0, px in 40.0f64..120.0, py in 40.0f64..90.0) {
                let a = build_pyramid(&render(160, 130, 0.0, 0.0), 3);
                let b = build_pyramid(&render(160, 130, dx, dy), 3);
                let out = klt_track(&a, &b, &[Pixel::new(px, py)], &KltParams::default()).unwrap();
                let t = out[0];
                prop_assert_eq!(t.status, TrackStatus::Converged);
                let err = ((t.target.u - px - dx).powi(2) + (t.target.v - py - dy).powi(2)).sqrt();
                prop_assert!(err < 0.1, "err {}", err);
                prop_assert!(t.residual < KltParams::default().max_residual);
            }
        }
    }
}
