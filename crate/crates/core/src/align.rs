//! Geometric alignment of two views: corner correspondences, a normalized
//! DLT homography refined by reweighted Levenberg-Marquardt, and
//! inverse-mapped bilinear warping.

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub type Point = [f64; 2];

/// A planar projective map, stored with `m[2][2] = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    /// Normalizes and checks invertibility.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if !(s.abs() > 1e-12) || !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Estimation(format!(
                "matrix cannot be normalized (H[2][2] = {s})"
            )));
        }
        let m = m / s;
        let scale = m.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if !(m.determinant().abs() > 1e-12 * scale.powi(3)) {
            return Err(Error::Estimation("singular homography".into()));
        }
        Ok(Homography { m })
    }

    /// Row-major nine numbers.
    pub fn from_rows(v: [f64; 9]) -> Result<Self> {
        Homography::from_matrix(Matrix3::from_row_slice(&v))
    }

    pub fn to_rows(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn det(&self) -> f64 {
        self.m.determinant()
    }

    pub fn apply(&self, p: Point) -> Point {
        let v = self.m * Vector3::new(p[0], p[1], 1.0);
        [v[0] / v[2], v[1] / v[2]]
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Estimation("singular homography".into()))?;
        Homography::from_matrix(inv)
    }

    /// `self` after `first`: `p -> self(first(p))`.
    pub fn compose(&self, first: &Homography) -> Result<Self> {
        Homography::from_matrix(self.m * first.m)
    }

    /// Condition number of the 3x3 matrix.
    pub fn condition_number(&self) -> f64 {
        let sv = self.m.singular_values();
        sv.max() / sv.min()
    }
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 9]>::deserialize(d)?;
        Homography::from_rows(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Residuals above this many pixels are dropped between refinement rounds.
    pub inlier_cutoff: f64,
    /// Estimation fails when the mean inlier reprojection error exceeds this.
    pub max_reprojection_error: f64,
    pub max_corners: usize,
    /// Half-size of the correlation patch.
    pub patch_radius: usize,
    /// Largest displacement searched between the views, in pixels.
    pub search_radius: f64,
    pub min_correlation: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            inlier_cutoff: 3.0,
            max_reprojection_error: 1.0,
            max_corners: 300,
            patch_radius: 5,
            search_radius: 24.0,
            min_correlation: 0.8,
        }
    }
}

/// Mean Euclidean distance between `h(src)` and `dst`.
pub fn reprojection_error(h: &Homography, src: &[Point], dst: &[Point]) -> f64 {
    if src.is_empty() {
        return 0.0;
    }
    src.iter()
        .zip(dst)
        .map(|(s, d)| {
            let p = h.apply(*s);
            ((p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / src.len() as f64
}

/// Similarity taking the centroid to the origin and the mean distance to sqrt(2).
fn normalizer(pts: &[Point]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let d = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(d > 1e-12) {
        return Err(Error::Estimation("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / d;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    let v = t * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

fn twice_area(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Checks that the normalized points are not all (nearly) on one line, and
/// for minimal sets that no three are.
fn check_configuration(pts: &[Point]) -> Result<()> {
    let tol = 1e-6;
    if pts.len() == 4 {
        for i in 0..4 {
            let rest: Vec<Point> = (0..4).filter(|&j| j != i).map(|j| pts[j]).collect();
            if twice_area(rest[0], rest[1], rest[2]).abs() < tol {
                return Err(Error::Estimation("three of four points are collinear".into()));
            }
        }
    }
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in pts {
        sxx += p[0] * p[0];
        sxy += p[0] * p[1];
        syy += p[1] * p[1];
    }
    let n = pts.len() as f64;
    let (sxx, sxy, syy) = (sxx / n, sxy / n, syy / n);
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    let minor = (sxx + syy - disc) / 2.0;
    if minor < tol {
        return Err(Error::Estimation("points are collinear".into()));
    }
    Ok(())
}

fn dlt(src: &[Point], dst: &[Point]) -> Result<Matrix3<f64>> {
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (x, y, u, v) = (s[0], s[1], d[0], d[1]);
        let r1 = SVector::<f64, 9>::from_row_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        let r2 = SVector::<f64, 9>::from_row_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
        ata += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let top = eig.eigenvalues[order[8]].abs().max(1e-300);
    if eig.eigenvalues[order[1]].abs() / top < 1e-14 {
        return Err(Error::Estimation(
            "correspondences do not determine a unique homography".into(),
        ));
    }
    let h = eig.eigenvectors.column(order[0]);
    Ok(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]))
}

fn params(m: &Matrix3<f64>) -> SVector<f64, 8> {
    SVector::<f64, 8>::from_row_slice(&[
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
    ])
}

fn from_params(p: &SVector<f64, 8>) -> Matrix3<f64> {
    Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], 1.0)
}

fn sq_cost(m: &Matrix3<f64>, src: &[Point], dst: &[Point], w: &[f64]) -> f64 {
    let mut c = 0.0;
    for ((s, d), wi) in src.iter().zip(dst).zip(w) {
        if *wi == 0.0 {
            continue;
        }
        let p = transform(m, *s);
        c += wi * ((p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2));
    }
    c
}

/// Levenberg-Marquardt on the eight free entries, weighted residuals.
fn refine(m0: Matrix3<f64>, src: &[Point], dst: &[Point], w: &[f64]) -> Matrix3<f64> {
    let mut p = params(&m0);
    let mut cost = sq_cost(&m0, src, dst, w);
    let mut lambda = 1e-3;
    for _ in 0..50 {
        let m = from_params(&p);
        let mut jtj = SMatrix::<f64, 8, 8>::zeros();
        let mut jtr = SVector::<f64, 8>::zeros();
        for ((s, d), wi) in src.iter().zip(dst).zip(w) {
            if *wi == 0.0 {
                continue;
            }
            let (x, y) = (s[0], s[1]);
            let den = m[(2, 0)] * x + m[(2, 1)] * y + 1.0;
            let u = (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / den;
            let v = (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / den;
            let ju = SVector::<f64, 8>::from_row_slice(&[
                x / den,
                y / den,
                1.0 / den,
                0.0,
                0.0,
                0.0,
                -u * x / den,
                -u * y / den,
            ]);
            let jv = SVector::<f64, 8>::from_row_slice(&[
                0.0,
                0.0,
                0.0,
                x / den,
                y / den,
                1.0 / den,
                -v * x / den,
                -v * y / den,
            ]);
            jtj += (ju * ju.transpose() + jv * jv.transpose()) * *wi;
            jtr += (ju * (u - d[0]) + jv * (v - d[1])) * *wi;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for i in 0..8 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let cand = p - step;
            let c = sq_cost(&from_params(&cand), src, dst, w);
            if c.is_finite() && c <= cost {
                let done = cost - c <= 1e-15 * cost.max(1e-300) || step.norm() < 1e-14;
                p = cand;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    from_params(&p)
}

/// Homography taking `src` onto `dst` with the default refinement settings.
pub fn estimate_homography(src: &[Point], dst: &[Point]) -> Result<Homography> {
    estimate_homography_with(src, dst, &AlignConfig::default())
}

pub fn estimate_homography_with(src: &[Point], dst: &[Point], cfg: &AlignConfig) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(Error::Estimation(format!(
            "{} source points but {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 4 {
        return Err(Error::Estimation(format!(
            "need at least 4 correspondences, got {}",
            src.len()
        )));
    }
    if !src.iter().chain(dst).all(|p| p[0].is_finite() && p[1].is_finite()) {
        return Err(Error::Estimation("non-finite coordinates".into()));
    }
    let ts = normalizer(src)?;
    let td = normalizer(dst)?;
    let ns: Vec<Point> = src.iter().map(|p| transform(&ts, *p)).collect();
    let nd: Vec<Point> = dst.iter().map(|p| transform(&td, *p)).collect();
    check_configuration(&ns)?;
    check_configuration(&nd)?;
    let hn = dlt(&ns, &nd)?;
    if !(hn[(2, 2)].abs() > 1e-10) {
        return Err(Error::Estimation("homography sends the centroid to infinity".into()));
    }
    let hn = hn / hn[(2, 2)];
    let mut w = vec![1.0; src.len()];
    let mut hn = refine(hn, &ns, &nd, &w);
    // iterative reweighting: a hard residual cutoff in pixel units
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::Estimation("degenerate destination normalization".into()))?;
    let to_pixels = |hn: &Matrix3<f64>| td_inv * hn * ts;
    for _ in 0..5 {
        let m = to_pixels(&hn);
        let new_w: Vec<f64> = src
            .iter()
            .zip(dst)
            .map(|(s, d)| {
                let p = transform(&m, *s);
                let r = ((p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2)).sqrt();
                if r <= cfg.inlier_cutoff {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        if new_w.iter().filter(|&&v| v > 0.0).count() < 4 {
            return Err(Error::Estimation(format!(
                "fewer than 4 correspondences within {} px",
                cfg.inlier_cutoff
            )));
        }
        if new_w == w {
            break;
        }
        w = new_w;
        hn = refine(hn, &ns, &nd, &w);
    }
    let h = Homography::from_matrix(to_pixels(&hn))?;
    let (is, id): (Vec<Point>, Vec<Point>) = src
        .iter()
        .zip(dst)
        .zip(&w)
        .filter(|(_, wi)| **wi > 0.0)
        .map(|((s, d), _)| (*s, *d))
        .unzip();
    let err = reprojection_error(&h, &is, &id);
    if !(err <= cfg.max_reprojection_error) {
        return Err(Error::Estimation(format!(
            "mean inlier reprojection error {err:.3} px exceeds {} px",
            cfg.max_reprojection_error
        )));
    }
    Ok(h)
}

fn gradients(lum: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: usize, x: usize| lum[y * w + x];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            gx[y * w + x] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1))
                / 8.0;
            gy[y * w + x] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1))
                / 8.0;
        }
    }
    (gx, gy)
}

/// Harris corners that are strict local maxima of the response in a 7x7
/// window, strongest first.
pub fn detect_corners(img: &Image, max_corners: usize, border: usize) -> Vec<(usize, usize)> {
    let (h, w) = (img.height(), img.width());
    if h < 2 * border + 3 || w < 2 * border + 3 {
        return Vec::new();
    }
    let lum = img.luminance();
    let (gx, gy) = gradients(&lum, h, w);
    let mut resp = vec![0.0; h * w];
    let r = 2usize;
    for y in r + 1..h - r - 1 {
        for x in r + 1..w - r - 1 {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    let (ix, iy) = (gx[yy * w + xx], gy[yy * w + xx]);
                    a += ix * ix;
                    b += ix * iy;
                    c += iy * iy;
                }
            }
            resp[y * w + x] = a * c - b * b - 0.04 * (a + c) * (a + c);
        }
    }
    let max = resp.iter().cloned().fold(0.0, f64::max);
    if !(max > 1e-12) {
        return Vec::new();
    }
    let thresh = 0.01 * max;
    let mut out = Vec::new();
    for y in border..h - border {
        for x in border..w - border {
            let v = resp[y * w + x];
            if v <= thresh {
                continue;
            }
            let mut is_max = true;
            'win: for yy in y.saturating_sub(3)..=(y + 3).min(h - 1) {
                for xx in x.saturating_sub(3)..=(x + 3).min(w - 1) {
                    let o = resp[yy * w + xx];
                    if (yy, xx) != (y, x) && (o > v || (o == v && (yy, xx) < (y, x))) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                out.push((y, x, v));
            }
        }
    }
    out.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    out.truncate(max_corners);
    out.into_iter().map(|(y, x, _)| (y, x)).collect()
}

/// Zero-mean normalized cross-correlation of two square patches.
fn ncc(lum_a: &[f64], lum_b: &[f64], w: usize, a: (usize, usize), b: (usize, usize), r: usize) -> f64 {
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in 0..=2 * r {
        for dx in 0..=2 * r {
            let va = lum_a[(a.0 + dy - r) * w + a.1 + dx - r];
            let vb = lum_b[(b.0 + dy - r) * w + b.1 + dx - r];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let cov = sab - sa * sb / n;
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 1e-12 || vb <= 1e-12 {
        return -1.0;
    }
    cov / (va * vb).sqrt()
}

fn bilinear(lum: &[f64], h: usize, w: usize, y: f64, x: f64) -> Option<f64> {
    if !(y >= 0.0 && x >= 0.0 && y <= (h - 1) as f64 && x <= (w - 1) as f64) {
        return None;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = lum[y0 * w + x0] * (1.0 - fx) + lum[y0 * w + x1] * fx;
    let bot = lum[y1 * w + x0] * (1.0 - fx) + lum[y1 * w + x1] * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

/// Sub-pixel location in `b` of the patch around `pa`, by Gauss-Newton on the
/// photometrically normalized patch difference, starting at corner `pb`.
/// Returns `[x, y]`.
fn refine_match(la: &[f64], lb: &[f64], h: usize, w: usize, pa: (usize, usize), pb: (usize, usize), r: usize) -> Point {
    let r = r as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    let n = offsets.len() as f64;
    let norm = |v: &mut Vec<f64>| {
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        for x in v.iter_mut() {
            *x = (*x - m) / sd;
        }
        sd
    };
    let mut ta: Vec<f64> = offsets
        .iter()
        .map(|&(dy, dx)| la[(pa.0 as isize + dy) as usize * w + (pa.1 as isize + dx) as usize])
        .collect();
    norm(&mut ta);
    let (by, bx) = (pb.0 as f64, pb.1 as f64);
    let mut d = [0.0f64; 2];
    for _ in 0..10 {
        let sample = |oy: f64, ox: f64| -> Option<Vec<f64>> {
            offsets
                .iter()
                .map(|&(dy, dx)| bilinear(lb, h, w, by + d[1] + oy + dy as f64, bx + d[0] + ox + dx as f64))
                .collect()
        };
        let (Some(mut tb), Some(xp), Some(xm), Some(yp), Some(ym)) = (
            sample(0.0, 0.0),
            sample(0.0, 0.5),
            sample(0.0, -0.5),
            sample(0.5, 0.0),
            sample(-0.5, 0.0),
        ) else {
            break;
        };
        let sd = norm(&mut tb);
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..offsets.len() {
            let gx = (xp[i] - xm[i]) / sd;
            let gy = (yp[i] - ym[i]) / sd;
            let e = tb[i] - ta[i];
            a11 += gx * gx;
            a12 += gx * gy;
            a22 += gy * gy;
            b1 += gx * e;
            b2 += gy * e;
        }
        let det = a11 * a22 - a12 * a12;
        if !(det.abs() > 1e-12) {
            break;
        }
        let sx = (a22 * b1 - a12 * b2) / det;
        let sy = (a11 * b2 - a12 * b1) / det;
        d = [(d[0] - sx).clamp(-1.0, 1.0), (d[1] - sy).clamp(-1.0, 1.0)];
        if sx.abs() < 1e-4 && sy.abs() < 1e-4 {
            break;
        }
    }
    [bx + d[0], by + d[1]]
}

/// Matched corner pairs `(point in a, point in b)`, mutual best matches only,
/// with sub-pixel refinement of the point in `b`.
pub fn detect_correspondences(img_a: &Image, img_b: &Image) -> Result<Vec<(Point, Point)>> {
    detect_correspondences_with(img_a, img_b, &AlignConfig::default())
}

pub fn detect_correspondences_with(img_a: &Image, img_b: &Image, cfg: &AlignConfig) -> Result<Vec<(Point, Point)>> {
    if (img_a.height(), img_a.width()) != (img_b.height(), img_b.width()) {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            img_a.height(),
            img_a.width(),
            img_b.height(),
            img_b.width()
        )));
    }
    let (h, w) = (img_a.height(), img_a.width());
    let r = cfg.patch_radius;
    let border = r + 2;
    let ca = detect_corners(img_a, cfg.max_corners, border);
    let cb = detect_corners(img_b, cfg.max_corners, border);
    let (la, lb) = (img_a.luminance(), img_b.luminance());
    let near = |p: (usize, usize), q: (usize, usize)| {
        let d2 = (p.0 as f64 - q.0 as f64).powi(2) + (p.1 as f64 - q.1 as f64).powi(2);
        d2 <= cfg.search_radius * cfg.search_radius
    };
    let best = |from: &[(usize, usize)], to: &[(usize, usize)], lf: &[f64], lt: &[f64]| -> Vec<Option<(usize, f64)>> {
        from.iter()
            .map(|&p| {
                let mut top: Option<(usize, f64)> = None;
                for (j, &q) in to.iter().enumerate() {
                    if !near(p, q) {
                        continue;
                    }
                    let s = ncc(lf, lt, w, p, q, r);
                    if top.is_none_or(|(_, t)| s > t) {
                        top = Some((j, s));
                    }
                }
                top.filter(|&(_, s)| s >= cfg.min_correlation)
            })
            .collect()
    };
    let ab = best(&ca, &cb, &la, &lb);
    let ba = best(&cb, &ca, &lb, &la);
    let mut out = Vec::new();
    for (i, m) in ab.iter().enumerate() {
        let Some((j, _)) = *m else { continue };
        if ba[j].map(|(k, _)| k) != Some(i) {
            continue;
        }
        let (pa, pb) = (ca[i], cb[j]);
        let sub = refine_match(&la, &lb, h, w, pa, pb, r);
        out.push(([pa.1 as f64, pa.0 as f64], sub));
    }
    if out.len() < 4 {
        return Err(Error::AlignmentImpossible(format!(
            "only {} reliable matches ({} and {} corners)",
            out.len(),
            ca.len(),
            cb.len()
        )));
    }
    Ok(out)
}

/// Output pixel `p` takes the input at `H^-1 p`; samples outside are 0.
pub fn warp(img: &Image, h: &Homography) -> Result<Image> {
    let inv = h.inverse()?;
    let mut out = Image::zeros(img.height(), img.width());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let s = inv.apply([x as f64, y as f64]);
            if let Some(px) = img.sample(s[1], s[0]) {
                for (c, v) in px.iter().enumerate() {
                    out.set(y, x, c, *v);
                }
            }
        }
    }
    Ok(out)
}

/// Estimates the homography taking `img_b` onto `img_a`.
pub fn align_pair(img_a: &Image, img_b: &Image, cfg: &AlignConfig) -> Result<Homography> {
    let matches = detect_correspondences_with(img_a, img_b, cfg)?;
    let (dst, src): (Vec<Point>, Vec<Point>) = matches.into_iter().unzip();
    estimate_homography_with(&src, &dst, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth(h: usize, w: usize) -> Image {
        let mut img = Image::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let v = 0.5 + 0.3 * ((x as f64) / 9.0).sin() * ((y as f64) / 11.0).cos();
                for c in 0..3 {
                    img.set(y, x, c, v + 0.05 * c as f64);
                }
            }
        }
        img
    }

    fn textured(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = smooth(h, w);
        for _ in 0..25 {
            let (y0, x0) = (rng.random_range(0..h - 6), rng.random_range(0..w - 6));
            let (bh, bw) = (rng.random_range(4..14), rng.random_range(4..14));
            let v = rng.random_range(0.0..1.0);
            for y in y0..(y0 + bh).min(h) {
                for x in x0..(x0 + bw).min(w) {
                    for c in 0..3 {
                        img.set(y, x, c, v);
                    }
                }
            }
        }
        img
    }

    fn max_entry_diff(a: &Homography, b: &Homography) -> f64 {
        a.to_rows()
            .iter()
            .zip(b.to_rows())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn grid() -> Vec<Point> {
        (0..5).flat_map(|i| (0..4).map(move |j| [10.0 + 17.0 * i as f64 + j as f64, 5.0 + 13.0 * j as f64 + 0.3 * (i * i) as f64])).collect()
    }

    /// A random homography of moderate distortion around a 100x100 frame.
    fn random_h(rng: &mut ChaCha8Rng) -> Homography {
        loop {
            let m = Matrix3::new(
                1.0 + rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(-10.0..10.0),
                rng.random_range(-0.15..0.15),
                1.0 + rng.random_range(-0.15..0.15),
                rng.random_range(-10.0..10.0),
                rng.random_range(-5e-4..5e-4),
                rng.random_range(-5e-4..5e-4),
                1.0,
            );
            let h = Homography::from_matrix(m).unwrap();
            if h.condition_number() < 50.0 {
                return h;
            }
        }
    }

    #[test]
    fn identity_and_translation() {
        let src = grid();
        let h = estimate_homography(&src, &src).unwrap();
        assert!(max_entry_diff(&h, &Homography::identity()) < 1e-8);
        let dst: Vec<Point> = src.iter().map(|p| [p[0] + 5.0, p[1] + 3.0]).collect();
        let h = estimate_homography(&src, &dst).unwrap();
        assert!(max_entry_diff(&h, &Homography::translation(5.0, 3.0)) < 1e-6);
        assert_eq!(h.matrix()[(2, 2)], 1.0);
    }

    #[test]
    fn minimal_and_degenerate_sets() {
        let sq = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]];
        let dst = [[1.0, 1.0], [12.0, 0.0], [11.0, 12.0], [0.0, 9.0]];
        let h = estimate_homography(&sq, &dst).unwrap();
        assert!(reprojection_error(&h, &sq, &dst) < 1e-8);
        assert!(matches!(estimate_homography(&sq[..3], &dst[..3]), Err(Error::Estimation(_))));
        let line = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]];
        assert!(matches!(estimate_homography(&line, &line), Err(Error::Estimation(_))));
        let three = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 5.0]];
        assert!(matches!(estimate_homography(&three, &three), Err(Error::Estimation(_))));
    }

    #[test]
    fn noisy_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = rand_distr::Normal::new(0.0, 0.1).unwrap();
        for _ in 0..20 {
            let truth = random_h(&mut rng);
            let src: Vec<Point> = (0..20).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
            let clean: Vec<Point> = src.iter().map(|p| truth.apply(*p)).collect();
            let dst: Vec<Point> = clean
                .iter()
                .map(|p| [p[0] + rng.sample(noise), p[1] + rng.sample(noise)])
                .collect();
            let h = estimate_homography(&src, &dst).unwrap();
            assert!(reprojection_error(&h, &src, &clean) < 0.5);
        }
    }

    #[test]
    fn outliers_are_cut() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = random_h(&mut rng);
        let src: Vec<Point> = (0..30).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
        let mut dst: Vec<Point> = src.iter().map(|p| truth.apply(*p)).collect();
        dst[3][0] += 40.0;
        dst[17][1] -= 25.0;
        let h = estimate_homography(&src, &dst).unwrap();
        assert!(max_entry_diff(&h, &truth) < 1e-6);
    }

    #[test]
    fn warp_examples() {
        let img = smooth(30, 40);
        assert_eq!(warp(&img, &Homography::identity()).unwrap(), img);
        let shifted = warp(&img, &Homography::translation(3.0, -2.0)).unwrap();
        for y in 0..28 {
            for x in 3..40 {
                assert_eq!(shifted.pixel(y, x), img.pixel(y + 2, x - 3));
            }
        }
        assert_eq!(shifted.pixel(29, 0), [0.0; 3]);

        let h = Homography::from_rows([1.02, 0.03, 1.5, -0.02, 0.98, 0.7, 1e-4, -5e-5, 1.0]).unwrap();
        let back = warp(&warp(&img, &h).unwrap(), &h.inverse().unwrap()).unwrap();
        let mut err = 0.0;
        let mut n = 0.0;
        for y in 5..25 {
            for x in 5..35 {
                for c in 0..3 {
                    err += (back.get(y, x, c) - img.get(y, x, c)).abs();
                    n += 1.0;
                }
            }
        }
        assert!(err / n < 2.0 / 255.0, "{}", err / n);
    }

    #[test]
    fn warp_composition() {
        let img = smooth(40, 50);
        let h1 = Homography::from_rows([1.01, 0.02, 1.0, -0.01, 0.99, 0.5, 5e-5, 0.0, 1.0]).unwrap();
        let h2 = Homography::from_rows([0.99, -0.01, -0.8, 0.02, 1.01, 1.2, 0.0, 4e-5, 1.0]).unwrap();
        let a = warp(&warp(&img, &h1).unwrap(), &h2).unwrap();
        let b = warp(&img, &h2.compose(&h1).unwrap()).unwrap();
        for y in 6..34 {
            for x in 6..44 {
                for c in 0..3 {
                    assert!((a.get(y, x, c) - b.get(y, x, c)).abs() < 0.01);
                }
            }
        }
    }

    #[test]
    fn correspondences_on_shifted_images() {
        let img = textured(80, 100, 1);
        let same = detect_correspondences(&img, &img).unwrap();
        assert!(same.iter().all(|(a, b)| a == b));
        let moved = warp(&img, &Homography::translation(5.0, 0.0)).unwrap();
        let m = detect_correspondences(&img, &moved).unwrap();
        let mut dx: Vec<f64> = m.iter().map(|(a, b)| b[0] - a[0]).collect();
        let mut dy: Vec<f64> = m.iter().map(|(a, b)| b[1] - a[1]).collect();
        dx.sort_by(f64::total_cmp);
        dy.sort_by(f64::total_cmp);
        assert!((dx[dx.len() / 2] - 5.0).abs() <= 0.5);
        assert!(dy[dy.len() / 2].abs() <= 0.5);
    }

    #[test]
    fn textureless_input_is_impossible() {
        let flat = Image::from_vec(40, 40, vec![0.5; 4800]).unwrap();
        assert!(matches!(detect_correspondences(&flat, &flat), Err(Error::AlignmentImpossible(_))));
    }

    #[test]
    fn end_to_end_alignment() {
        let img = textured(90, 120, 7);
        let truth = Homography::from_rows([1.01, 0.015, 2.3, -0.012, 0.995, -1.6, 2e-5, -1e-5, 1.0]).unwrap();
        let moved = warp(&img, &truth).unwrap();
        let h = align_pair(&moved, &img, &AlignConfig::default()).unwrap();
        let mut d = 0.0;
        for y in 0..90 {
            for x in 0..120 {
                let (p, q) = (h.apply([x as f64, y as f64]), truth.apply([x as f64, y as f64]));
                d += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            }
        }
        assert!(d / (90.0 * 120.0) < 0.5, "{}", d / 10800.0);
    }

    #[test]
    fn json_is_nine_numbers() {
        let h = Homography::translation(1.0, 2.0);
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, "[1.0,0.0,1.0,0.0,1.0,2.0,0.0,0.0,1.0]");
        assert_eq!(serde_json::from_str::<Homography>(&s).unwrap(), h);
    }

    proptest! {
        #[test]
        fn similarity_equivariance(seed in 0u64..1000, angle in -0.5f64..0.5, scale in 0.5f64..2.0, tx in -20.0f64..20.0, ty in -20.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_h(&mut rng);
            let src: Vec<Point> = (0..12).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
            let dst: Vec<Point> = src.iter().map(|p| truth.apply(*p)).collect();
            let (s, c) = angle.sin_cos();
            let sim = Homography::from_rows([scale * c, -scale * s, tx, scale * s, scale * c, ty, 0.0, 0.0, 1.0]).unwrap();
            let src2: Vec<Point> = src.iter().map(|p| sim.apply(*p)).collect();
            let dst2: Vec<Point> = dst.iter().map(|p| sim.apply(*p)).collect();
            let h = estimate_homography(&src, &dst).unwrap();
            let h2 = estimate_homography(&src2, &dst2).unwrap();
            // h2 should equal sim * h * sim^-1
            let expect = sim.compose(&h.compose(&sim.inverse().unwrap()).unwrap()).unwrap();
            for p in &src2 {
                let (a, b) = (h2.apply(*p), expect.apply(*p));
                prop_assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
            }
        }
    }
}
