//! Procedural deforming scene with exact ground truth.
//!
//! A textured ellipsoid lives in a canonical frame. At time `t` a canonical
//! point `p` is carried to the world by a bend around the vertical axis whose
//! angle grows with the height `p_y`, followed by a translation:
//!
//! ```text
//! W_t(p) = Rot_y(ω t + α sin(2π f t) p_y / r_y) p + T(t)
//! ```
//!
//! A rotation about `y` leaves `p_y` unchanged, so the bend angle of a world
//! point can be read off after removing `T(t)` and the inverse is closed form.
//! The Jacobian determinant of the bend is exactly one for any `α`.

mod candidates;
mod flow;

pub use candidates::{candidate_masks, CandidateConfig, Candidates};
pub use flow::{gt_optical_flow, AnalyticFlow, FlowPair};

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{bin_centers, Camera, Ray};
use crate::render::ea_weights_slice;

/// Parameters of a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub scene_id: String,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    pub orbit_revolutions: f64,
    pub fov_degrees: f64,
    /// Canonical ellipsoid semi-axes.
    pub radii: [f64; 3],
    pub sigma_max: f64,
    /// Width of the soft density shell in normalized radius; 0 gives a step.
    pub shell_width: f64,
    /// Rotation about the vertical axis, radians per unit time.
    pub rotation_rate: f64,
    pub translation_amplitude: f64,
    pub velocity: [f64; 3],
    pub bob_direction: [f64; 3],
    pub bob_frequency: f64,
    pub bend_amplitude: f64,
    pub bend_frequency: f64,
    pub texture_seed: u64,
    pub cse_seed: u64,
    pub cse_dim: usize,
    /// Samples per ray for reference renders.
    pub render_samples: usize,
    /// Candidate masks per frame written next to the dataset (0 disables).
    pub candidates: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            scene_id: "synth-0".into(),
            seed: 0,
            frames: 200,
            height: 64,
            width: 64,
            orbit_radius: 3.0,
            orbit_height: 0.8,
            orbit_revolutions: 1.5,
            fov_degrees: 40.0,
            radii: [0.75, 0.55, 0.45],
            sigma_max: 40.0,
            shell_width: 0.15,
            rotation_rate: 1.2,
            translation_amplitude: 0.25,
            velocity: [1.0, 0.0, -0.6],
            bob_direction: [0.0, 1.0, 0.0],
            bob_frequency: 2.0,
            bend_amplitude: 0.6,
            bend_frequency: 1.5,
            texture_seed: 1,
            cse_seed: 2,
            cse_dim: 8,
            render_samples: 256,
            candidates: 4,
        }
    }
}

/// Largest bend amplitude accepted; the bend is a volume-preserving shear
/// for any amplitude, the cap only keeps the texture from winding up.
pub const MAX_BEND_AMPLITUDE: f64 = std::f64::consts::PI;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidArgument(format!("scene spec: {m}")));
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("frames and resolution must be positive");
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) {
            return bad("radii must be positive");
        }
        if !(self.sigma_max > 0.0) || self.shell_width < 0.0 {
            return bad("sigma_max must be positive and shell_width non-negative");
        }
        if self.bend_amplitude.abs() > MAX_BEND_AMPLITUDE {
            return bad("bend amplitude above bound");
        }
        if !(self.fov_degrees > 1.0 && self.fov_degrees < 170.0) {
            return bad("field of view out of range");
        }
        if self.cse_dim == 0 || self.render_samples == 0 {
            return bad("cse_dim and render_samples must be positive");
        }
        Ok(())
    }

    /// A copy with no deformation and no translation; only the rigid rotation remains.
    pub fn rigid(&self) -> Self {
        Self { bend_amplitude: 0.0, translation_amplitude: 0.0, ..self.clone() }
    }

    /// A copy where the object only translates with constant velocity.
    pub fn pure_translation(&self) -> Self {
        Self { bend_amplitude: 0.0, rotation_rate: 0.0, bob_direction: [0.0; 3], ..self.clone() }
    }

    /// A copy where nothing moves.
    pub fn static_scene(&self) -> Self {
        Self { translation_amplitude: 0.0, ..self.pure_translation() }
    }
}

/// Time-dependent canonical-to-world map.
#[derive(Clone, Debug)]
pub struct WarpField {
    rotation_rate: f64,
    bend_amplitude: f64,
    bend_frequency: f64,
    radius_y: f64,
    amplitude: f64,
    velocity: Vector3<f64>,
    bob: Vector3<f64>,
    bob_frequency: f64,
}

fn rot_y(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

impl WarpField {
    pub fn new(spec: &SceneSpec) -> Self {
        Self {
            rotation_rate: spec.rotation_rate,
            bend_amplitude: spec.bend_amplitude,
            bend_frequency: spec.bend_frequency,
            radius_y: spec.radii[1],
            amplitude: spec.translation_amplitude,
            velocity: Vector3::from(spec.velocity),
            bob: Vector3::from(spec.bob_direction),
            bob_frequency: spec.bob_frequency,
        }
    }

    pub fn translation(&self, t: f64) -> Vector3<f64> {
        let tau = std::f64::consts::TAU;
        self.amplitude * (self.velocity * t + self.bob * (tau * self.bob_frequency * t).sin())
    }

    fn angle(&self, t: f64, height: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        self.rotation_rate * t + self.bend_amplitude * (tau * self.bend_frequency * t).sin() * height / self.radius_y
    }

    pub fn forward(&self, p: &Vector3<f64>, t: f64) -> Vector3<f64> {
        rot_y(self.angle(t, p.y)) * p + self.translation(t)
    }

    pub fn inverse(&self, x: &Vector3<f64>, t: f64) -> Vector3<f64> {
        let q = x - self.translation(t);
        rot_y(-self.angle(t, q.y)) * q
    }

    /// Displacement of the material point at `x` (time `t_from`) to time `t_to`.
    pub fn scene_flow(&self, x: &Vector3<f64>, t_from: f64, t_to: f64) -> Vector3<f64> {
        self.forward(&self.inverse(x, t_from), t_to) - x
    }

    /// Central-difference Jacobian determinant of the forward map.
    pub fn jacobian_det(&self, p: &Vector3<f64>, t: f64) -> f64 {
        let h = 1e-5;
        let mut j = Matrix3::zeros();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            j.set_column(k, &((self.forward(&(p + e), t) - self.forward(&(p - e), t)) / (2.0 * h)));
        }
        j.determinant()
    }
}

/// Values of the ground-truth field at one world point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub color: Vector3<f64>,
    pub canonical: Vector3<f64>,
}

/// Reference render of a single ray.
#[derive(Clone, Debug)]
pub struct PixelRender {
    pub color: Vector3<f64>,
    pub mask: f64,
    pub cse: Vec<f64>,
    pub depth: f64,
}

/// Reference render of one frame; images are channel-major.
#[derive(Clone, Debug)]
pub struct FrameRender {
    /// `[3, H, W]`
    pub image: Vec<f64>,
    /// `[H, W]`
    pub mask: Vec<f64>,
    /// `[D_cse, H, W]`
    pub cse: Vec<f64>,
    /// `[H, W]` expected distance along the ray, 0 where the mask is empty.
    pub depth: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingSphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl BoundingSphere {
    /// Distance bounds along a ray, padded by 10% of the radius. `None` when
    /// the ray misses the padded sphere.
    pub fn ray_bounds(&self, ray: &Ray) -> Option<(f64, f64)> {
        let c = Vector3::from(self.center);
        let r = self.radius * 1.1;
        let oc = ray.origin - c;
        let b = oc.dot(&ray.direction);
        let disc = b * b - (oc.norm_squared() - r * r);
        if disc <= 0.0 {
            return None;
        }
        let s = disc.sqrt();
        let (near, far) = (-b - s, -b + s);
        (far > 0.0).then(|| (near.max(1e-3), far))
    }

    /// Bounds shared by every ray of a camera: the padded sphere seen from
    /// the camera center.
    pub fn camera_bounds(&self, camera: &Camera) -> Result<(f64, f64)> {
        let d = (camera.center() - Vector3::from(self.center)).norm();
        let r = self.radius * 1.1;
        if d <= r {
            return Err(CoreError::InvalidCamera("camera inside the scene bounds".into()));
        }
        Ok((d - r, d + r))
    }
}

/// A fully instantiated synthetic scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub warp: WarpField,
    pub cameras: Vec<Camera>,
    pub timestamps: Vec<f64>,
    pub sphere: BoundingSphere,
    texture_freq: [Vector3<f64>; 3],
    texture_phase: [f64; 3],
    cse_map: DMatrix<f64>,
    cse_bias: DVector<f64>,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let warp = WarpField::new(&spec);
        let n = spec.frames;
        let timestamps: Vec<f64> = (0..n).map(|k| if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 }).collect();
        let focal = spec.width as f64 / 2.0 / (spec.fov_degrees.to_radians() / 2.0).tan();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let phase0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let cameras = timestamps
            .iter()
            .map(|t| {
                let phi = phase0 + std::f64::consts::TAU * spec.orbit_revolutions * t;
                let eye = Vector3::new(spec.orbit_radius * phi.cos(), spec.orbit_height, spec.orbit_radius * phi.sin());
                Camera::look_at(eye, Vector3::zeros(), Vector3::y(), focal, spec.height, spec.width)
            })
            .collect::<Result<Vec<_>>>()?;

        let rmax = spec.radii.iter().cloned().fold(0.0, f64::max);
        let travel = (0..=256)
            .map(|i| warp.translation(i as f64 / 256.0).norm())
            .fold(0.0, f64::max);
        let sphere = BoundingSphere { center: [0.0; 3], radius: rmax + travel };

        let mut trng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
        let mut freq = || Vector3::new(trng.gen_range(-4.0..4.0), trng.gen_range(-4.0..4.0), trng.gen_range(-4.0..4.0));
        let texture_freq = [freq(), freq(), freq()];
        let texture_phase = [trng.gen_range(0.0..6.3), trng.gen_range(0.0..6.3), trng.gen_range(0.0..6.3)];

        let mut crng = ChaCha8Rng::seed_from_u64(spec.cse_seed);
        let d = spec.cse_dim;
        let inv = [1.0 / spec.radii[0], 1.0 / spec.radii[1], 1.0 / spec.radii[2]];
        let cse_map = DMatrix::from_fn(d, 3, |_, j| crng.gen_range(-1.0..1.0) * inv[j]);
        let cse_bias = DVector::from_fn(d, |_, _| crng.gen_range(-0.5..0.5));
        Ok(Self { spec, warp, cameras, timestamps, sphere, texture_freq, texture_phase, cse_map, cse_bias })
    }

    pub fn num_frames(&self) -> usize {
        self.timestamps.len()
    }

    /// Occupancy of a canonical point.
    pub fn canonical_sigma(&self, p: &Vector3<f64>) -> f64 {
        let r = &self.spec.radii;
        let s = ((p.x / r[0]).powi(2) + (p.y / r[1]).powi(2) + (p.z / r[2]).powi(2)).sqrt();
        let w = self.spec.shell_width;
        if w == 0.0 {
            return if s < 1.0 { self.spec.sigma_max } else { 0.0 };
        }
        let u = ((1.0 - s) / w).clamp(0.0, 1.0);
        self.spec.sigma_max * u * u * (3.0 - 2.0 * u)
    }

    /// Texture color of a canonical point, in `[0.1, 0.9]`.
    pub fn canonical_color(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|k, _| 0.5 + 0.4 * (self.texture_freq[k].dot(p) + self.texture_phase[k]).sin())
    }

    /// Canonical surface embedding of a canonical point.
    pub fn embedding(&self, p: &Vector3<f64>) -> DVector<f64> {
        &self.cse_map * DVector::from_column_slice(p.as_slice()) + &self.cse_bias
    }

    pub fn gt_field(&self, x: &Vector3<f64>, t: f64) -> FieldSample {
        let p = self.warp.inverse(x, t);
        FieldSample { sigma: self.canonical_sigma(&p), color: self.canonical_color(&p), canonical: p }
    }

    pub fn gt_scene_flow(&self, x: &Vector3<f64>, t_tgt: f64, t_src: f64) -> Vector3<f64> {
        self.warp.scene_flow(x, t_tgt, t_src)
    }

    /// Reference render of frame `k` with `render_samples` bin-center samples
    /// between the camera-wide bounds.
    pub fn render_reference(&self, k: usize) -> Result<FrameRender> {
        self.render_frame(k, self.spec.render_samples)
    }

    /// Render frame `k` with `n` samples per ray.
    pub fn render_frame(&self, k: usize, n: usize) -> Result<FrameRender> {
        let cam = self.camera(k)?;
        let (h, w, d) = (cam.height, cam.width, self.spec.cse_dim);
        let hw = h * w;
        let mut out = FrameRender { image: vec![0.0; 3 * hw], mask: vec![0.0; hw], cse: vec![0.0; d * hw], depth: vec![0.0; hw] };
        for row in 0..h {
            for col in 0..w {
                let px = row * w + col;
                let p = self.render_pixel(k, &Vector2::new(col as f64 + 0.5, row as f64 + 0.5), n)?;
                for c in 0..3 {
                    out.image[c * hw + px] = p.color[c];
                }
                for c in 0..d {
                    out.cse[c * hw + px] = p.cse[c];
                }
                out.mask[px] = p.mask;
                out.depth[px] = p.depth;
            }
        }
        Ok(out)
    }

    /// Render the ray through continuous pixel position `u` of frame `k`.
    pub fn render_pixel(&self, k: usize, u: &Vector2<f64>, n: usize) -> Result<PixelRender> {
        let cam = self.camera(k)?;
        let t = self.timestamps[k];
        let (near, far) = self.sphere.camera_bounds(cam)?;
        let (depths, delta) = bin_centers(near, far, n);
        let ray = cam.ray_for_pixel(u)?;
        if self.sphere.ray_bounds(&ray).is_none() {
            // density vanishes outside the bounding sphere
            return Ok(PixelRender { color: Vector3::zeros(), mask: 0.0, cse: vec![0.0; self.spec.cse_dim], depth: 0.0 });
        }
        let fields: Vec<FieldSample> = depths.iter().map(|&dd| self.gt_field(&ray.at(dd), t)).collect();
        let sig: Vec<f64> = fields.iter().map(|f| f.sigma).collect();
        let (wts, _) = ea_weights_slice(&sig, delta)?;
        let mut m = 0.0;
        let mut dep = 0.0;
        let mut cc = Vector3::zeros();
        let mut cp = Vector3::zeros();
        for ((wj, f), dj) in wts.iter().zip(&fields).zip(&depths) {
            m += wj;
            dep += wj * dj;
            cc += *wj * f.color;
            cp += *wj * f.canonical;
        }
        // the embedding is affine, so compositing it equals mapping the
        // composited coordinate and scaling the offset by the mask
        let cse = &self.cse_map * DVector::from_column_slice(cp.as_slice()) + &self.cse_bias * m;
        Ok(PixelRender { color: cc, mask: m, cse: cse.iter().copied().collect(), depth: if m > 1e-9 { dep / m } else { 0.0 } })
    }

    pub fn camera(&self, k: usize) -> Result<&Camera> {
        self.cameras
            .get(k)
            .ok_or_else(|| CoreError::InvalidArgument(format!("frame {k} out of range ({} frames)", self.cameras.len())))
    }

    /// Project the padded bounding sphere's silhouette test for a pixel.
    pub fn pixel_sees_sphere(&self, k: usize, u: &Vector2<f64>) -> Result<bool> {
        let ray = self.camera(k)?.ray_for_pixel(u)?;
        Ok(self.sphere.ray_bounds(&ray).is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small() -> SceneSpec {
        SceneSpec { frames: 9, height: 16, width: 16, render_samples: 64, ..SceneSpec::default() }
    }

    #[test]
    fn warp_inverse_identity() {
        let scene = Scene::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &t in &scene.timestamps {
            for _ in 0..1000 {
                let p = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                assert!((scene.warp.inverse(&scene.warp.forward(&p, t), t) - p).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn bend_preserves_volume() {
        let spec = SceneSpec { bend_amplitude: MAX_BEND_AMPLITUDE, ..small() };
        let warp = WarpField::new(&spec);
        for i in 0..5 {
            for j in 0..5 {
                let p = Vector3::new(i as f64 * 0.4 - 0.8, j as f64 * 0.4 - 0.8, 0.3);
                assert_relative_eq!(warp.jacobian_det(&p, 0.37), 1.0, epsilon = 1e-6);
            }
        }
        assert!(SceneSpec { bend_amplitude: 4.0, ..small() }.validate().is_err());
    }

    #[test]
    fn field_examples() {
        let scene = Scene::new(small()).unwrap();
        assert_eq!(scene.gt_field(&Vector3::new(10.0, 0.0, 0.0), 0.5).sigma, 0.0);
        let center = scene.warp.forward(&Vector3::zeros(), 0.4);
        assert!(scene.gt_field(&center, 0.4).sigma > 0.99 * scene.spec.sigma_max);
        let rigid = Scene::new(small().rigid()).unwrap();
        let p = Vector3::new(0.2, -0.1, 0.3);
        let c0 = rigid.gt_field(&rigid.warp.forward(&p, 0.0), 0.0).color;
        for t in [0.25, 0.5, 1.0] {
            assert_relative_eq!(rigid.gt_field(&rigid.warp.forward(&p, t), t).color, c0, epsilon = 1e-12);
        }
    }

    #[test]
    fn scene_flow_properties() {
        let scene = Scene::new(small()).unwrap();
        let x = Vector3::new(0.3, 0.2, -0.1);
        assert!(scene.gt_scene_flow(&x, 0.3, 0.3).norm() < 1e-12);
        let f01 = scene.gt_scene_flow(&x, 0.1, 0.5);
        let f12 = scene.gt_scene_flow(&(x + f01), 0.5, 0.8);
        assert!((f01 + f12 - scene.gt_scene_flow(&x, 0.1, 0.8)).norm() < 1e-6);

        let tr = Scene::new(small().pure_translation()).unwrap();
        let v = Vector3::from(tr.spec.velocity) * tr.spec.translation_amplitude;
        assert_relative_eq!(tr.gt_scene_flow(&x, 0.2, 0.7), v * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn reference_mask_empty_off_sphere() {
        let scene = Scene::new(small()).unwrap();
        let fr = scene.render_reference(2).unwrap();
        let cam = &scene.cameras[2];
        for row in 0..cam.height {
            for col in 0..cam.width {
                let u = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
                if !scene.pixel_sees_sphere(2, &u).unwrap() {
                    assert!(fr.mask[row * cam.width + col] < 1e-9);
                }
            }
        }
        assert!(fr.mask.iter().any(|m| *m > 0.9));
    }

    #[test]
    fn reference_render_converges_in_samples() {
        let scene = Scene::new(small()).unwrap();
        let a = scene.render_frame(4, 256).unwrap();
        let b = scene.render_frame(4, 512).unwrap();
        let diff: f64 = a.image.iter().zip(&b.image).map(|(x, y)| (x - y).abs()).sum::<f64>();
        let total: f64 = b.image.iter().map(|v| v.abs()).sum::<f64>();
        assert!(diff / total < 0.005, "relative l1 {}", diff / total);
    }

    #[test]
    fn rigid_cse_consistent_across_views() {
        // static object: lift a pixel of view a through its depth, project
        // into view b and render exactly there
        let spec = SceneSpec { shell_width: 0.0, sigma_max: 1e5, ..small().static_scene() };
        let scene = Scene::new(spec).unwrap();
        let n = 16384;
        let mut checked = 0;
        for (row, col) in [(8, 8), (6, 9), (10, 7), (7, 6), (9, 10), (8, 6), (7, 9), (9, 8)] {
            let u = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
            let pa = scene.render_pixel(0, &u, n).unwrap();
            if pa.mask < 0.999 {
                continue;
            }
            let x = scene.cameras[0].ray_for_pixel(&u).unwrap().at(pa.depth);
            let (ub, _) = scene.cameras[1].project(&x).unwrap();
            let pb = scene.render_pixel(1, &ub, n).unwrap();
            let dist = (x - scene.cameras[1].center()).norm();
            if pb.mask < 0.999 || (pb.depth - dist).abs() > 1e-3 {
                continue; // occluded in view b
            }
            for c in 0..scene.spec.cse_dim {
                assert!((pa.cse[c] - pb.cse[c]).abs() < 1e-3, "{} vs {}", pa.cse[c], pb.cse[c]);
            }
            checked += 1;
        }
        assert!(checked >= 2);
    }
}
