//! Source-image features and the token grids built from them.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use trackerf_tensor::{Conv2dSpec, Real, Tensor};

use crate::error::{CoreError, Result};
use crate::geometry::{bilinear_sample, harmonic_dim, harmonic_encode, mask_rows, project_points, Camera};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Widths of the three 3x3 stages; the first has stride 2.
    pub channels: [usize; 3],
    /// Output feature width.
    pub d_z: usize,
    /// Concatenate the view's embedding image to the features.
    pub use_cse: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 32], d_z: 32, use_cse: true }
    }
}

/// Harmonic encoding levels and token composition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenConfig {
    pub gamma_space: usize,
    pub gamma_time: usize,
    pub gamma_dir: usize,
    /// Prepend the raw value to every harmonic encoding.
    pub include_raw: bool,
    /// Append encodings of the sample position and ray direction to every token.
    pub positional: bool,
}

impl Default for TokenConfig {
    fn default() -> Self {
        Self { gamma_space: 10, gamma_time: 4, gamma_dir: 4, include_raw: false, positional: true }
    }
}

impl TokenConfig {
    pub fn time_dim(&self) -> usize {
        harmonic_dim(self.gamma_time, self.include_raw)
    }

    pub fn positional_dim(&self) -> usize {
        if self.positional {
            3 * harmonic_dim(self.gamma_space, self.include_raw) + 3 * harmonic_dim(self.gamma_dir, self.include_raw)
        } else {
            0
        }
    }
}

/// One conditioning frame.
#[derive(Clone, Debug)]
pub struct SourceView {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Vec<f32>,
    /// `[H, W]`
    pub mask: Vec<f32>,
    pub camera: Camera,
    /// Normalized to `[0, 1]` over the sequence.
    pub timestamp: f64,
    /// `[D_cse, H, W]`
    pub cse: Option<Vec<f32>>,
}

/// A view's feature map with what is needed to sample it.
#[derive(Clone, Debug)]
pub struct ViewFeatures<T: Real> {
    /// `[C, H', W']`
    pub map: Tensor<T>,
    pub camera: Camera,
    pub timestamp: f64,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    convs: [(ParamId, ParamId, usize, usize); 4],
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let [c0, c1, c2] = cfg.channels;
        let shapes = [(3, c0, 3), (c0, c1, 3), (c1, c2, 3), (c2, cfg.d_z, 1)];
        let convs = std::array::from_fn(|i| {
            let (ci, co, k) = shapes[i];
            // He-uniform for ReLU stages
            let a = (6.0 / (ci * k * k) as f64).sqrt();
            let w = (0..co * ci * k * k).map(|_| T::of(rng.gen_range(-a..a))).collect();
            let wid = store.add(format!("encoder.conv{i}.w"), Tensor::new(vec![co, ci, k, k], w).expect("positive extents"));
            let bid = store.add(format!("encoder.conv{i}.b"), Tensor::zeros(vec![co]));
            (wid, bid, k, co)
        });
        Self { cfg: cfg.clone(), convs }
    }

    /// Channels of the feature maps produced for a scene with `cse_dim` embedding channels.
    pub fn out_channels(&self, cse_dim: usize) -> usize {
        self.cfg.d_z + if self.cfg.use_cse { cse_dim } else { 0 }
    }

    /// Feature maps `[C, H/2, W/2]` for each view, computed as one batch.
    pub fn encode<T: Real>(&self, p: &Bound<T>, views: &[&SourceView]) -> Result<Vec<ViewFeatures<T>>> {
        let first = views.first().ok_or_else(|| CoreError::InvalidArgument("no source views".into()))?;
        let (h, w) = (first.camera.height, first.camera.width);
        if views.iter().any(|v| v.camera.height != h || v.camera.width != w || v.image.len() != 3 * h * w) {
            return Err(CoreError::DimensionMismatch("source views differ in resolution".into()));
        }
        let n = views.len();
        let data: Vec<T> = views.iter().flat_map(|v| v.image.iter().map(|x| T::of(*x as f64))).collect();
        let mut x = Tensor::new(vec![n, 3, h, w], data)?;
        for (i, (wid, bid, k, _)) in self.convs.iter().enumerate() {
            let spec = Conv2dSpec { stride: if i == 0 { 2 } else { 1 }, padding: k / 2 };
            x = x.conv2d(p.get(*wid), p.get(*bid), spec)?;
            if i < 3 {
                x = x.relu()?;
            }
        }
        let (hp, wp) = (x.shape()[2], x.shape()[3]);
        if self.cfg.use_cse {
            let cse = views
                .iter()
                .map(|v| v.cse.as_deref().ok_or_else(|| CoreError::Data("view has no embedding channels".into())))
                .collect::<Result<Vec<_>>>()?;
            let d = cse[0].len() / (h * w);
            if d == 0 || cse.iter().any(|c| c.len() != d * h * w) {
                return Err(CoreError::DimensionMismatch("embedding images differ in size".into()));
            }
            let mut pooled = Vec::with_capacity(n * d * hp * wp);
            for c in &cse {
                pooled.extend(area_resample(c, d, h, w, hp, wp).into_iter().map(T::of));
            }
            let cse_t = Tensor::new(vec![n, d, hp, wp], pooled)?;
            x = Tensor::concat(&[&x, &cse_t], 1)?;
        }
        (0..n)
            .map(|i| {
                let c = x.shape()[1];
                Ok(ViewFeatures { map: x.slice(0, i, 1)?.reshape(&[c, hp, wp])?, camera: views[i].camera.clone(), timestamp: views[i].timestamp })
            })
            .collect()
    }
}

/// Box-filter `[D, H, W]` down to `[D, H', W']` (integer factors) or
/// nearest-neighbour otherwise.
fn area_resample(img: &[f32], d: usize, h: usize, w: usize, hp: usize, wp: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * hp * wp];
    let (fy, fx) = (h / hp.max(1), w / wp.max(1));
    let exact = fy * hp == h && fx * wp == w;
    for c in 0..d {
        for r in 0..hp {
            for q in 0..wp {
                let v = if exact {
                    let mut s = 0.0;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            s += img[c * h * w + (r * fy + dy) * w + q * fx + dx] as f64;
                        }
                    }
                    s / (fy * fx) as f64
                } else {
                    let (sr, sq) = (((r as f64 + 0.5) * h as f64 / hp as f64) as usize, ((q as f64 + 0.5) * w as f64 / wp as f64) as usize);
                    img[c * h * w + sr.min(h - 1) * w + sq.min(w - 1)] as f64
                };
                out[c * hp * wp + r * wp + q] = v;
            }
        }
    }
    out
}

/// Warp-conditioned embedding of `[P, 3]` points in one view: the feature
/// map sampled at each point's projection. Points behind the camera or
/// projecting outside the image give zero rows and `false` flags.
pub fn wce<T: Real>(points: &Tensor<T>, view: &ViewFeatures<T>) -> Result<(Tensor<T>, Vec<bool>)> {
    let proj = project_points(&view.camera, points)?;
    let scale = Tensor::from_slice(&[2], &[T::of(1.0 / view.camera.width as f64), T::of(1.0 / view.camera.height as f64)])?;
    let coords = proj.pixels.mul(&scale)?;
    let sampled = bilinear_sample(&view.map, &coords)?;
    let valid: Vec<bool> = proj.valid.iter().zip(&sampled.valid).map(|(a, b)| *a && *b).collect();
    Ok((mask_rows(&sampled.values, &valid)?, valid))
}

/// `[γ(t_tgt), γ(t_src)]`
pub fn time_code(t_tgt: f64, t_src: f64, cfg: &TokenConfig) -> Vec<f64> {
    let mut v = harmonic_encode(&[t_tgt], cfg.gamma_time, cfg.include_raw);
    v.extend(harmonic_encode(&[t_src], cfg.gamma_time, cfg.include_raw));
    v
}

/// Time-conditioned embedding: `[wce, γ(t_tgt), γ(t_src)]` per point.
pub fn twce<T: Real>(points: &Tensor<T>, view: &ViewFeatures<T>, t_tgt: f64, cfg: &TokenConfig) -> Result<(Tensor<T>, Vec<bool>)> {
    let (z, valid) = wce(points, view)?;
    let p = points.shape()[0];
    let code: Vec<T> = time_code(t_tgt, view.timestamp, cfg).into_iter().map(T::of).collect();
    let times = Tensor::new(vec![code.len()], code)?.broadcast_to(&[p, cfg.time_dim() * 2])?;
    Ok((Tensor::concat(&[&z, &times], 1)?, valid))
}

/// Tokens for `R` rays of `S` samples against `V` views, stored by part so
/// the parts shared across views or samples are kept once.
#[derive(Clone, Debug)]
pub struct TokenGrid<T: Real> {
    pub rays: usize,
    pub samples: usize,
    pub views: usize,
    /// `[R, S, V, C]` sampled features, zero where invalid.
    pub features: Tensor<T>,
    /// `[V, 2 D_t]` time codes `[γ(t_tgt), γ(t_src)]` per view.
    pub time: Tensor<T>,
    /// `[R, S, D_p]` position and direction codes, when enabled.
    pub positional: Option<Tensor<T>>,
    /// `[R, S, V]`
    pub valid: Vec<bool>,
}

impl<T: Real> TokenGrid<T> {
    /// Full tokens `[R, S, V, C + 2 D_t (+ D_p)]`.
    pub fn tokens(&self) -> Result<Tensor<T>> {
        let (r, s, v) = (self.rays, self.samples, self.views);
        let dt = self.time.shape()[1];
        let time = self.time.broadcast_to(&[r, s, v, dt])?;
        let mut parts = vec![self.features.clone(), time];
        if let Some(pos) = &self.positional {
            let dp = pos.shape()[2];
            parts.push(pos.reshape(&[r, s, 1, dp])?.broadcast_to(&[r, s, v, dp])?);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 3)?)
    }

    pub fn valid_at(&self, r: usize, s: usize, v: usize) -> bool {
        self.valid[(r * self.samples + s) * self.views + v]
    }
}

/// Ray sample positions and directions for a batch.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub rays: usize,
    pub samples: usize,
    /// `R * S` positions, ray-major.
    pub points: Vec<Vector3<f64>>,
    /// One unit direction per ray.
    pub directions: Vec<Vector3<f64>>,
}

impl SampleBatch {
    pub fn from_samples(samples: &[crate::geometry::RaySamples], directions: Vec<Vector3<f64>>) -> Result<Self> {
        let s = samples.first().map_or(0, |x| x.points.len());
        if samples.iter().any(|x| x.points.len() != s) || directions.len() != samples.len() || s == 0 {
            return Err(CoreError::DimensionMismatch("rays must share their sample count".into()));
        }
        Ok(Self { rays: samples.len(), samples: s, points: samples.iter().flat_map(|x| x.points.iter().copied()).collect(), directions })
    }

    pub fn points_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.points.iter().flat_map(|p| [T::of(p.x), T::of(p.y), T::of(p.z)]).collect();
        Tensor::new(vec![self.rays, self.samples, 3], data).expect("positive extents")
    }

    fn positional<T: Real>(&self, cfg: &TokenConfig) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.rays * self.samples * cfg.positional_dim());
        for r in 0..self.rays {
            let d = self.directions[r];
            let dir_code = harmonic_encode(&[d.x, d.y, d.z], cfg.gamma_dir, cfg.include_raw);
            for s in 0..self.samples {
                let p = self.points[r * self.samples + s];
                data.extend(harmonic_encode(&[p.x, p.y, p.z], cfg.gamma_space, cfg.include_raw).into_iter().map(T::of));
                data.extend(dir_code.iter().map(|v| T::of(*v)));
            }
        }
        Tensor::new(vec![self.rays, self.samples, cfg.positional_dim()], data).expect("positive extents")
    }
}

/// Build the token grid. With `offsets` (`[R, S, V, 3]`) each view is
/// sampled at the displaced points `x_j + δ_jv`; the positional part always
/// uses the undisplaced samples.
pub fn token_grid<T: Real>(batch: &SampleBatch, offsets: Option<&Tensor<T>>, views: &[ViewFeatures<T>], t_tgt: f64, cfg: &TokenConfig) -> Result<TokenGrid<T>> {
    let (r, s, v) = (batch.rays, batch.samples, views.len());
    if v == 0 {
        return Err(CoreError::InvalidArgument("token grid needs at least one view".into()));
    }
    if let Some(d) = offsets {
        if d.shape() != [r, s, v, 3] {
            return Err(CoreError::DimensionMismatch(format!("offsets {:?} for grid {r}x{s}x{v}", d.shape())));
        }
    }
    let c = views[0].map.shape()[0];
    let base = batch.points_tensor::<T>().reshape(&[r * s, 3])?;
    let mut feats = Vec::with_capacity(v);
    let mut valid = vec![false; r * s * v];
    for (i, view) in views.iter().enumerate() {
        let pts = match offsets {
            Some(d) => base.add(&d.slice(2, i, 1)?.reshape(&[r * s, 3])?)?,
            None => base.clone(),
        };
        let (z, ok) = wce(&pts, view)?;
        for (k, b) in ok.into_iter().enumerate() {
            valid[k * v + i] = b;
        }
        feats.push(z.reshape(&[r * s, 1, c])?);
    }
    let refs: Vec<&Tensor<T>> = feats.iter().collect();
    let features = Tensor::concat(&refs, 1)?.reshape(&[r, s, v, c])?;
    let time_vals: Vec<T> = views.iter().flat_map(|vw| time_code(t_tgt, vw.timestamp, cfg)).map(T::of).collect();
    let time = Tensor::new(vec![v, 2 * cfg.time_dim()], time_vals)?;
    let positional = cfg.positional.then(|| batch.positional(cfg));
    Ok(TokenGrid { rays: r, samples: s, views: v, features, time, positional, valid })
}

/// `[mean, std]` over `axis`, with population standard deviation.
pub fn pool_mean_std<T: Real>(tokens: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let mean = tokens.mean_axis(axis)?;
    let std = tokens.std_axis(axis)?;
    let last = mean.rank() - 1;
    Ok(Tensor::concat(&[&mean, &std], last)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Scene, SceneSpec};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use trackerf_tensor::gradcheck;

    fn view_from(scene: &Scene, k: usize) -> SourceView {
        let r = scene.render_frame(k, 64).unwrap();
        SourceView {
            image: r.image.iter().map(|v| *v as f32).collect(),
            mask: r.mask.iter().map(|v| *v as f32).collect(),
            camera: scene.cameras[k].clone(),
            timestamp: scene.timestamps[k],
            cse: Some(r.cse.iter().map(|v| *v as f32).collect()),
        }
    }

    fn scene() -> Scene {
        Scene::new(SceneSpec { frames: 5, height: 16, width: 16, ..SceneSpec::default() }).unwrap()
    }

    #[test]
    fn feature_map_sizes_and_determinism() {
        let sc = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut store, &EncoderConfig::default(), &mut rng);
        let v = view_from(&sc, 1);
        let f = enc.encode(&store.bind(None), &[&v, &v]).unwrap();
        assert_eq!(f[0].map.shape(), &[40, 8, 8]);
        assert_eq!(enc.out_channels(8), 40);
        assert_eq!(f[0].map.data(), f[1].map.data());
        let mut store2 = ParamStore::<f32>::new();
        let enc2 = Encoder::new(&mut store2, &EncoderConfig { use_cse: false, ..EncoderConfig::default() }, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(enc2.encode(&store2.bind(None), &[&v]).unwrap()[0].map.shape(), &[32, 8, 8]);
        let bare = SourceView { cse: None, ..v };
        assert!(enc.encode(&store.bind(None), &[&bare]).is_err());
    }

    fn map_view(cam: Camera) -> ViewFeatures<f64> {
        let (c, h, w) = (2, 4, 4);
        let data: Vec<f64> = (0..c * h * w).map(|i| ((i * 7 % 11) as f64) / 5.0 - 1.0).collect();
        ViewFeatures { map: Tensor::new(vec![c, h, w], data).unwrap(), camera: cam, timestamp: 0.25 }
    }

    fn cam() -> Camera {
        Camera::look_at(Vector3::new(0.0, 0.0, -3.0), Vector3::zeros(), Vector3::y(), 20.0, 16, 16).unwrap()
    }

    #[test]
    fn wce_node_behind_and_gradient() {
        let view = map_view(cam());
        // feature node (1, 2) of the 4x4 map sits at pixel (2.5 * 4, 1.5 * 4)
        let ray = view.camera.ray_for_pixel(&nalgebra::Vector2::new(10.0, 6.0)).unwrap();
        let x = ray.at(2.7);
        let pts = Tensor::from_slice(&[2, 3], &[x.x, x.y, x.z, 0.0, 0.0, -5.0]).unwrap();
        let (z, valid) = wce(&pts, &view).unwrap();
        assert_eq!(valid, vec![true, false]);
        for ch in 0..2 {
            assert_relative_eq!(z.data()[ch], view.map.data()[ch * 16 + 4 + 2], epsilon = 1e-9);
            assert_eq!(z.data()[2 + ch], 0.0);
        }
        let interior = Tensor::from_slice(&[2, 3], &[0.13, -0.07, 0.2, -0.21, 0.11, -0.3]).unwrap();
        let rep = gradcheck::check(&[interior], 1e-6, |x| -> Result<Tensor<f64>> {
            let coef = Tensor::from_slice(&[2, 2], &[1.0, -0.5, 0.7, 2.0])?;
            Ok(wce(&x[0], &view)?.0.mul(&coef)?.sum_all()?)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-3, "{rep:?}");
    }

    #[test]
    fn twce_layout() {
        let view = map_view(cam());
        let cfg = TokenConfig::default();
        let pts = Tensor::from_slice(&[1, 3], &[0.1, 0.0, 0.0]).unwrap();
        let (z, _) = twce(&pts, &view, 0.25, &cfg).unwrap();
        assert_eq!(z.shape(), &[1, 2 + 20]);
        let d = z.data();
        assert_eq!(&d[2..12], &d[12..22]);
        let (w, _) = wce(&pts, &view).unwrap();
        assert_eq!(&d[..2], w.data());
        // 32 feature channels give 52
        assert_eq!(32 + 2 * cfg.time_dim(), 52);
    }

    fn batch() -> SampleBatch {
        let c = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<_> = [(7, 8), (9, 6)]
            .iter()
            .map(|&(a, b)| crate::geometry::stratified_ray_points(&c.ray_for_pixel_index(a, b).unwrap(), 2.0, 4.0, 32, false, &mut rng).unwrap())
            .collect();
        let dirs = [(7, 8), (9, 6)].iter().map(|&(a, b)| c.ray_for_pixel_index(a, b).unwrap().direction).collect();
        SampleBatch::from_samples(&samples, dirs).unwrap()
    }

    #[test]
    fn grid_shape_permutation_and_identical_views() {
        let cfg = TokenConfig::default();
        let b = batch();
        let other = Camera::look_at(Vector3::new(3.0, 0.5, 0.0), Vector3::zeros(), Vector3::y(), 20.0, 16, 16).unwrap();
        let views: Vec<_> = (0..5)
            .map(|i| {
                let mut v = map_view(if i % 2 == 0 { cam() } else { other.clone() });
                v.timestamp = i as f64 / 4.0;
                v
            })
            .collect();
        let g = token_grid(&b, None, &views, 0.5, &cfg).unwrap();
        let full = g.tokens().unwrap();
        assert_eq!(full.shape(), &[2, 32, 5, 2 + 20 + cfg.positional_dim()]);
        let perm = [3, 0, 4, 1, 2];
        let pv: Vec<_> = perm.iter().map(|&i| views[i].clone()).collect();
        let gp = token_grid(&b, None, &pv, 0.5, &cfg).unwrap().tokens().unwrap();
        let d = full.shape()[3];
        for r in 0..2 {
            for s in 0..32 {
                for (k, &i) in perm.iter().enumerate() {
                    let a = &full.data()[((r * 32 + s) * 5 + i) * d..][..d];
                    let bb = &gp.data()[((r * 32 + s) * 5 + k) * d..][..d];
                    assert_eq!(a, bb);
                }
            }
        }
        let same: Vec<_> = (0..3).map(|_| map_view(cam())).collect();
        let gs = token_grid(&b, None, &same, 0.5, &cfg).unwrap().tokens().unwrap();
        for chunk in gs.data().chunks(3 * d) {
            assert_eq!(&chunk[..d], &chunk[d..2 * d]);
            assert_eq!(&chunk[..d], &chunk[2 * d..]);
        }
    }

    #[test]
    fn grid_slices_equal_twce() {
        let cfg = TokenConfig { positional: false, ..TokenConfig::default() };
        let b = batch();
        let views = vec![map_view(cam())];
        let g = token_grid(&b, None, &views, 0.7, &cfg).unwrap().tokens().unwrap();
        let (z, _) = twce(&b.points_tensor::<f64>().reshape(&[64, 3]).unwrap(), &views[0], 0.7, &cfg).unwrap();
        assert_eq!(g.data(), z.data());
    }

    #[test]
    fn mean_std_pooling() {
        let z = Tensor::<f64>::from_slice(&[1, 3], &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(pool_mean_std(&z, 0).unwrap().data(), &[0.5, -1.0, 2.0, 0.0, 0.0, 0.0]);
        let pm = Tensor::<f64>::from_slice(&[2, 3], &[0.5, -1.0, 2.0, -0.5, 1.0, -2.0]).unwrap();
        assert_eq!(pool_mean_std(&pm, 0).unwrap().data(), &[0.0, 0.0, 0.0, 0.5, 1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (v, d) = (6, 5);
        let vals: Vec<f64> = (0..v * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let out = pool_mean_std(&Tensor::from_slice(&[v, d], &vals).unwrap(), 0).unwrap();
        for k in 0..d {
            let mean: f64 = (0..v).map(|i| vals[i * d + k]).sum::<f64>() / v as f64;
            let var: f64 = (0..v).map(|i| (vals[i * d + k] - mean).powi(2)).sum::<f64>() / v as f64;
            assert!((out.data()[k] - mean).abs() < 1e-6);
            assert!((out.data()[d + k] - var.sqrt()).abs() < 1e-6);
        }
    }
}
