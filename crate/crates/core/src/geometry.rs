//! Pinhole cameras, rays, differentiable projection, harmonic encoding and
//! bilinear feature sampling.
//!
//! Pixel coordinates are continuous with pixel `(i, j)` covering
//! `[i, i+1) x [j, j+1)`, so its center sits at `(i + 0.5, j + 0.5)`.
//! Feature maps are addressed with coordinates normalized to `[0, 1]^2`
//! (pixel coordinate divided by image size), independent of resolution.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use trackerf_tensor::{Real, Tensor};

use crate::error::{CoreError, Result};

/// Pinhole camera: `x_cam = R x + t`, `u = K x_cam / z_cam`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub height: usize,
    pub width: usize,
}

/// Camera as stored in a dataset manifest (row-major matrices).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

const ORTHONORMAL_TOL: f64 = 1e-6;
const MIN_DEPTH: f64 = 1e-6;

impl Camera {
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>, height: usize, width: usize) -> Result<Self> {
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL || (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(CoreError::InvalidCamera(format!(
                "rotation is not orthonormal with det +1 (err {err:.3e}, det {:.6})",
                r.determinant()
            )));
        }
        if k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 || k[(1, 0)] != 0.0 {
            return Err(CoreError::InvalidCamera("intrinsics must be upper triangular with K[2,2]=1".into()));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(CoreError::InvalidCamera("focal lengths must be positive".into()));
        }
        if height == 0 || width == 0 {
            return Err(CoreError::InvalidCamera("empty image".into()));
        }
        Ok(Self { k, r, t, height, width })
    }

    /// Camera at `eye` looking at `target` with the image y axis pointing
    /// away from `up`, principal point at the image center.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, focal: f64, height: usize, width: usize) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(CoreError::InvalidCamera("up vector parallel to viewing direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        let k = Matrix3::new(focal, 0.0, width as f64 / 2.0, 0.0, focal, height as f64 / 2.0, 0.0, 0.0, 1.0);
        Self::new(k, r, t, height, width)
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        Vector2::new(self.k[(0, 2)], self.k[(1, 2)])
    }

    /// The full 4x4 projection `[K 0; 0 1] * [R t; 0 1]`.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut kk = Matrix4::identity();
        kk.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.k);
        let mut rt = Matrix4::identity();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        kk * rt
    }

    /// Recover K, R, t from a 4x4 projection produced by [`Camera::matrix`].
    pub fn from_matrix(p: &Matrix4<f64>, height: usize, width: usize) -> Result<Self> {
        let m = p.fixed_view::<3, 3>(0, 0).into_owned();
        let kt = p.fixed_view::<3, 1>(0, 3).into_owned();
        // m = K R with K upper triangular: RQ decomposition via QR of the flipped transpose.
        let flip = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
        let qr = (flip * m).transpose().qr();
        let (q, rr) = (qr.q(), qr.r());
        let mut k = flip * rr.transpose() * flip;
        let mut r = flip * q.transpose();
        for i in 0..3 {
            if k[(i, i)] < 0.0 {
                for row in 0..3 {
                    k[(row, i)] = -k[(row, i)];
                }
                for col in 0..3 {
                    r[(i, col)] = -r[(i, col)];
                }
            }
        }
        let scale = k[(2, 2)];
        k /= scale;
        let t = k.try_inverse().ok_or_else(|| CoreError::InvalidCamera("singular intrinsics".into()))? * kt;
        for v in [(1, 0), (2, 0), (2, 1)] {
            k[v] = 0.0;
        }
        Self::new(k, r, t, height, width)
    }

    pub fn to_record(&self) -> CameraRecord {
        let mut k = [0.0; 9];
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                k[i * 3 + j] = self.k[(i, j)];
                r[i * 3 + j] = self.r[(i, j)];
            }
        }
        CameraRecord { k, r, t: [self.t.x, self.t.y, self.t.z] }
    }

    pub fn from_record(rec: &CameraRecord, height: usize, width: usize) -> Result<Self> {
        Self::new(
            Matrix3::from_row_slice(&rec.k),
            Matrix3::from_row_slice(&rec.r),
            Vector3::from_column_slice(&rec.t),
            height,
            width,
        )
    }

    /// Project a world point to pixel coordinates and camera-frame depth.
    pub fn project(&self, x: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        let c = self.r * x + self.t;
        if c.z <= MIN_DEPTH {
            return Err(CoreError::BehindCamera(c.z));
        }
        let h = self.k * c;
        Ok((Vector2::new(h.x / c.z, h.y / c.z), c.z))
    }

    pub fn contains_pixel(&self, u: &Vector2<f64>) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x <= self.width as f64 && u.y <= self.height as f64
    }

    pub fn ray_for_pixel(&self, u: &Vector2<f64>) -> Result<Ray> {
        if !u.x.is_finite() || !u.y.is_finite() || !self.contains_pixel(u) {
            return Err(CoreError::PixelOutOfBounds(u.x, u.y));
        }
        let kinv = self
            .k
            .try_inverse()
            .ok_or_else(|| CoreError::InvalidCamera("singular intrinsics".into()))?;
        let d_cam = kinv * Vector3::new(u.x, u.y, 1.0);
        let direction = (self.r.transpose() * d_cam).normalize();
        Ok(Ray {
            origin: self.center(),
            direction,
            pixel: *u,
        })
    }

    /// Ray through the center of integer pixel `(col, row)`.
    pub fn ray_for_pixel_index(&self, col: usize, row: usize) -> Result<Ray> {
        self.ray_for_pixel(&Vector2::new(col as f64 + 0.5, row as f64 + 0.5))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
    pub pixel: Vector2<f64>,
}

impl Ray {
    pub fn at(&self, depth: f64) -> Vector3<f64> {
        self.origin + self.direction * depth
    }
}

/// Points along one ray. Depths are distances along the (unit) direction.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub points: Vec<Vector3<f64>>,
    pub depths: Vec<f64>,
    pub spacing: f64,
}

/// `n` samples in `[near, far]`: bin centers, or one uniform draw per bin
/// when `jitter` is set.
pub fn stratified_ray_points<R: Rng + ?Sized>(ray: &Ray, near: f64, far: f64, n: usize, jitter: bool, rng: &mut R) -> Result<RaySamples> {
    if !(near > 0.0 && far > near) || !near.is_finite() || !far.is_finite() {
        return Err(CoreError::InvalidBounds { near, far });
    }
    if n == 0 {
        return Err(CoreError::InvalidArgument("sample count must be positive".into()));
    }
    let spacing = (far - near) / n as f64;
    let depths: Vec<f64> = (0..n)
        .map(|i| {
            let offset = if jitter { rng.gen::<f64>() } else { 0.5 };
            near + (i as f64 + offset) * spacing
        })
        .collect();
    let points = depths.iter().map(|&d| ray.at(d)).collect();
    Ok(RaySamples { points, depths, spacing })
}

/// Bin-center depths without the positivity requirement on `near`; used by
/// closed-form checks that start at the origin.
pub fn bin_centers(near: f64, far: f64, n: usize) -> (Vec<f64>, f64) {
    let spacing = (far - near) / n as f64;
    ((0..n).map(|i| near + (i as f64 + 0.5) * spacing).collect(), spacing)
}

/// Harmonic encoding of every value: `[sin(2^k a), cos(2^k a)]` for
/// `k = 0..=levels`, optionally preceded by `a` itself.
pub fn harmonic_encode(values: &[f64], levels: usize, include_raw: bool) -> Vec<f64> {
    let per = harmonic_dim(levels, include_raw);
    let mut out = Vec::with_capacity(values.len() * per);
    for &a in values {
        if include_raw {
            out.push(a);
        }
        let mut f = 1.0;
        for _ in 0..=levels {
            out.push((f * a).sin());
            out.push((f * a).cos());
            f *= 2.0;
        }
    }
    out
}

pub fn harmonic_dim(levels: usize, include_raw: bool) -> usize {
    2 * (levels + 1) + usize::from(include_raw)
}

/// Projection of a batch of points, differentiable in the points.
pub struct Projection<T: Real> {
    /// `[P, 2]` pixel coordinates; zero for invalid points.
    pub pixels: Tensor<T>,
    /// Camera-frame depth per point.
    pub depth: Vec<f64>,
    /// False where the point is at or behind the camera plane.
    pub valid: Vec<bool>,
}

/// Project `[P, 3]` world points. Points with non-positive depth get zero
/// pixels, zero gradient and `valid = false`.
pub fn project_points<T: Real>(camera: &Camera, points: &Tensor<T>) -> Result<Projection<T>> {
    if points.rank() != 2 || points.shape()[1] != 3 {
        return Err(CoreError::DimensionMismatch(format!("points must be [P,3], got {:?}", points.shape())));
    }
    let n = points.shape()[0];
    let x = points.data();
    let r = camera.r;
    let (a0, a1, a2) = (camera.k[(0, 0)], camera.k[(0, 1)], camera.k[(0, 2)]);
    let (b1, b2) = (camera.k[(1, 1)], camera.k[(1, 2)]);
    let mut out = vec![T::zero(); n * 2];
    let mut depth = vec![0.0; n];
    let mut valid = vec![false; n];
    // Per point: (1/z, u, v, xc, yc) for the backward pass.
    let mut cache = vec![[0.0f64; 5]; n];
    for i in 0..n {
        let p = Vector3::new(x[3 * i].as_f64(), x[3 * i + 1].as_f64(), x[3 * i + 2].as_f64());
        let c = r * p + camera.t;
        depth[i] = c.z;
        if c.z <= MIN_DEPTH {
            continue;
        }
        let iz = 1.0 / c.z;
        let u = (a0 * c.x + a1 * c.y) * iz + a2;
        let v = b1 * c.y * iz + b2;
        out[2 * i] = T::of(u);
        out[2 * i + 1] = T::of(v);
        valid[i] = true;
        cache[i] = [iz, u - a2, v - b2, c.x, c.y];
    }
    let valid_c = valid.clone();
    let pixels = Tensor::from_op("project", &[points], vec![n, 2], out, move |g, needs| {
        vec![needs[0].then(|| {
            let mut gx = vec![T::zero(); n * 3];
            for i in 0..n {
                if !valid_c[i] {
                    continue;
                }
                let [iz, du, dv, _, _] = cache[i];
                let (gu, gv) = (g[2 * i].as_f64(), g[2 * i + 1].as_f64());
                // d(u)/d(c) = (a0, a1, -du) / z ; d(v)/d(c) = (0, b1, -dv) / z
                let gc = Vector3::new(gu * a0 * iz, (gu * a1 + gv * b1) * iz, -(gu * du + gv * dv) * iz);
                let gp = r.transpose() * gc;
                gx[3 * i] = T::of(gp.x);
                gx[3 * i + 1] = T::of(gp.y);
                gx[3 * i + 2] = T::of(gp.z);
            }
            gx
        })]
    })?;
    Ok(Projection { pixels, depth, valid })
}

/// Result of [`bilinear_sample`].
pub struct Sampled<T: Real> {
    /// `[P, D]` interpolated features.
    pub values: Tensor<T>,
    /// False where the coordinate fell outside `[0, 1]^2` (the value is then
    /// taken at the clamped border position).
    pub valid: Vec<bool>,
}

/// Bilinear interpolation of a `[D, H, W]` map at `[P, 2]` normalized
/// `(x, y)` coordinates, differentiable in both the map and the coordinates.
pub fn bilinear_sample<T: Real>(map: &Tensor<T>, coords: &Tensor<T>) -> Result<Sampled<T>> {
    if map.rank() != 3 || coords.rank() != 2 || coords.shape()[1] != 2 {
        return Err(CoreError::DimensionMismatch(format!(
            "bilinear_sample expects [D,H,W] and [P,2], got {:?} and {:?}",
            map.shape(),
            coords.shape()
        )));
    }
    let (d, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let p = coords.shape()[0];
    let c = coords.data();
    let m = map.data();
    let plane = h * w;

    #[derive(Clone, Copy, Default)]
    struct Tap {
        idx: [usize; 4],
        wt: [f64; 4],
        // d(value)/d(grid x) = (1-fy)(f01-f00) + fy(f11-f10); zero when clamped
        fx: f64,
        fy: f64,
        dx_live: bool,
        dy_live: bool,
    }

    fn axis(pos: f64, n: usize) -> (usize, usize, f64, bool) {
        if n == 1 {
            return (0, 0, 0.0, false);
        }
        let max = (n - 1) as f64;
        if pos <= 0.0 {
            return (0, 1, 0.0, pos == 0.0);
        }
        if pos >= max {
            return (n - 2, n - 1, 1.0, pos == max);
        }
        let i0 = (pos.floor() as usize).min(n - 2);
        (i0, i0 + 1, pos - i0 as f64, true)
    }

    let mut taps = vec![Tap::default(); p];
    let mut valid = vec![true; p];
    let mut out = vec![T::zero(); p * d];
    for i in 0..p {
        let (nx, ny) = (c[2 * i].as_f64(), c[2 * i + 1].as_f64());
        if !(nx.is_finite() && ny.is_finite()) {
            return Err(CoreError::NonFinite("bilinear_sample coordinate".into()));
        }
        if !(0.0..=1.0).contains(&nx) || !(0.0..=1.0).contains(&ny) {
            valid[i] = false;
        }
        let (x0, x1, fx, lx) = axis(nx * w as f64 - 0.5, w);
        let (y0, y1, fy, ly) = axis(ny * h as f64 - 0.5, h);
        let tap = Tap {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            wt: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            fx,
            fy,
            dx_live: lx,
            dy_live: ly,
        };
        for ch in 0..d {
            let base = ch * plane;
            let mut acc = 0.0;
            for k in 0..4 {
                acc += tap.wt[k] * m[base + tap.idx[k]].as_f64();
            }
            out[i * d + ch] = T::of(acc);
        }
        taps[i] = tap;
    }
    let map_arc = map.clone().detach();
    let (ww, hh) = (w as f64, h as f64);
    let values = Tensor::from_op("bilinear_sample", &[map, coords], vec![p, d], out, move |g, needs| {
        let gm = needs[0].then(|| {
            let mut gm = vec![T::zero(); d * plane];
            for (i, tap) in taps.iter().enumerate() {
                for ch in 0..d {
                    let gv = g[i * d + ch];
                    if gv == T::zero() {
                        continue;
                    }
                    for k in 0..4 {
                        gm[ch * plane + tap.idx[k]] += gv * T::of(tap.wt[k]);
                    }
                }
            }
            gm
        });
        let gc = needs[1].then(|| {
            let md = map_arc.data();
            let mut gc = vec![T::zero(); p * 2];
            for (i, tap) in taps.iter().enumerate() {
                let (mut sx, mut sy) = (0.0, 0.0);
                for ch in 0..d {
                    let base = ch * plane;
                    let f = |k: usize| md[base + tap.idx[k]].as_f64();
                    let gv = g[i * d + ch].as_f64();
                    if tap.dx_live {
                        sx += gv * ((1.0 - tap.fy) * (f(1) - f(0)) + tap.fy * (f(3) - f(2)));
                    }
                    if tap.dy_live {
                        sy += gv * ((1.0 - tap.fx) * (f(2) - f(0)) + tap.fx * (f(3) - f(1)));
                    }
                }
                gc[2 * i] = T::of(sx * ww);
                gc[2 * i + 1] = T::of(sy * hh);
            }
            gc
        });
        vec![gm, gc]
    })?;
    Ok(Sampled { values, valid })
}

/// Zero the rows of a `[P, D]` tensor where `keep` is false; gradient is
/// passed through kept rows only.
pub fn mask_rows<T: Real>(x: &Tensor<T>, keep: &[bool]) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[0] != keep.len() {
        return Err(CoreError::DimensionMismatch(format!("mask_rows {:?} vs {}", x.shape(), keep.len())));
    }
    let d = x.shape()[1];
    let mut out = x.to_vec();
    for (i, k) in keep.iter().enumerate() {
        if !k {
            out[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
        }
    }
    let keep = keep.to_vec();
    Ok(Tensor::from_op("mask_rows", &[x], x.shape().to_vec(), out, move |g, needs| {
        vec![needs[0].then(|| {
            let mut gx = g.to_vec();
            for (i, k) in keep.iter().enumerate() {
                if !k {
                    gx[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = T::zero());
                }
            }
            gx
        })]
    })?)
}
