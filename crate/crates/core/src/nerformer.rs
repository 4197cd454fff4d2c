//! Two-pass transformer over token grids: a base block alternating ray and
//! source attention, a decoder predicting per-view offsets, and the
//! color/opacity/embedding heads.

use rand::Rng;
use serde::{Deserialize, Serialize};
use trackerf_tensor::{Real, Tensor};

use crate::encoder::{token_grid, Encoder, EncoderConfig, SampleBatch, SourceView, TokenConfig, TokenGrid, ViewFeatures};
use crate::error::{CoreError, Result};
use crate::params::{glorot, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::render::PointPredictions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Alternating attention rounds per base block.
    pub layers: usize,
    /// Hidden width of the feed-forward sublayers as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub tokens: TokenConfig,
    pub encoder: EncoderConfig,
    /// Second pass on offset-resampled tokens. Off gives the rigid single-pass model.
    pub offsets_enabled: bool,
    /// Both passes use one base block.
    pub shared_pass_weights: bool,
    /// Predict per-point embeddings.
    pub cse_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            ffn_mult: 2,
            tokens: TokenConfig::default(),
            encoder: EncoderConfig::default(),
            offsets_enabled: true,
            shared_pass_weights: true,
            cse_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_mult == 0 || self.encoder.d_z == 0 || self.encoder.channels.contains(&0) {
            return Err(CoreError::InvalidArgument("layer counts and widths must be positive".into()));
        }
        Ok(())
    }
}

/// Bias-free projection matrix.
fn proj<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: String, d_in: usize, d_out: usize, rng: &mut R) -> ParamId {
    store.add(name, glorot(rng, d_in, d_out))
}

/// Multi-head attention with per-key validity.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// `[B, N, D]` -> `[B * H, N, D / H]`
    fn split<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let dh = d / self.heads;
        Ok(x.reshape(&[b, n, self.heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * self.heads, n, dh])?)
    }

    /// Queries `[B, Nq, D]` attend to keys `[B, Nk, D]`; `key_valid` has
    /// `B * Nk` flags. Queries whose keys are all invalid receive the
    /// output projection's bias alone.
    pub fn forward<T: Real>(&self, p: &Bound<T>, xq: &Tensor<T>, xkv: &Tensor<T>, key_valid: &[bool]) -> Result<Tensor<T>> {
        let (b, nq, d) = (xq.shape()[0], xq.shape()[1], xq.shape()[2]);
        let nk = xkv.shape()[1];
        if key_valid.len() != b * nk || xkv.shape()[0] != b {
            return Err(CoreError::DimensionMismatch(format!(
                "attention over {:?} with {} key flags",
                xkv.shape(),
                key_valid.len()
            )));
        }
        let h = self.heads;
        let dh = d / h;
        let q = self.split(&self.q.forward(p, xq)?)?;
        let k = self.split(&self.k.forward(p, xkv)?)?;
        let v = self.split(&self.v.forward(p, xkv)?)?;
        let scores = q.bmm(&k, true)?.scale(T::of(1.0 / (dh as f64).sqrt()))?;
        let mut keep = Vec::with_capacity(b * h * nq * nk);
        for bi in 0..b {
            let row = &key_valid[bi * nk..(bi + 1) * nk];
            for _ in 0..h * nq {
                keep.extend_from_slice(row);
            }
        }
        let attn = scores.masked_softmax(&keep)?;
        let out = attn.bmm(&v, false)?.reshape(&[b, h, nq, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b, nq, d])?;
        self.o.forward(p, &out)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    ln: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, mult: usize, rng: &mut R) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            up: Linear::new(store, &format!("{name}.up"), d, d * mult, rng),
            down: Linear::new(store, &format!("{name}.down"), d * mult, d, rng),
        }
    }

    /// `x + down(relu(up(ln(x))))`
    fn residual<T: Real>(&self, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.up.forward(p, &self.ln.forward(p, x)?)?.relu()?;
        Ok(x.add(&self.down.forward(p, &h)?)?)
    }
}

#[derive(Clone, Debug)]
struct Round {
    ln_ray: LayerNorm,
    ray: Attention,
    ln_src: LayerNorm,
    src: Attention,
    ffn: FeedForward,
}

/// Input projection followed by alternating ray/source attention rounds.
#[derive(Clone, Debug)]
pub struct BaseBlock {
    w_feat: ParamId,
    w_time: ParamId,
    w_pos: Option<ParamId>,
    bias: ParamId,
    rounds: Vec<Round>,
    ln_out: LayerNorm,
    d_model: usize,
}

impl BaseBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, feat_dim: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let w_feat = proj(store, format!("{name}.in.feat"), feat_dim, d, rng);
        let w_time = proj(store, format!("{name}.in.time"), 2 * cfg.tokens.time_dim(), d, rng);
        let w_pos = cfg.tokens.positional.then(|| proj(store, format!("{name}.in.pos"), cfg.tokens.positional_dim(), d, rng));
        let bias = store.add(format!("{name}.in.b"), Tensor::zeros(vec![d]));
        let rounds = (0..cfg.layers)
            .map(|l| Round {
                ln_ray: LayerNorm::new(store, &format!("{name}.r{l}.ln_ray"), d),
                ray: Attention::new(store, &format!("{name}.r{l}.ray"), d, cfg.heads, rng),
                ln_src: LayerNorm::new(store, &format!("{name}.r{l}.ln_src"), d),
                src: Attention::new(store, &format!("{name}.r{l}.src"), d, cfg.heads, rng),
                ffn: FeedForward::new(store, &format!("{name}.r{l}.ffn"), d, cfg.ffn_mult, rng),
            })
            .collect();
        let ln_out = LayerNorm::new(store, &format!("{name}.ln_out"), d);
        Self { w_feat, w_time, w_pos, bias, rounds, ln_out, d_model: d }
    }

    /// The token projection, computed part by part. Equal to one linear map
    /// applied to [`TokenGrid::tokens`] with the three weight blocks stacked.
    pub fn project<T: Real>(&self, p: &Bound<T>, grid: &TokenGrid<T>) -> Result<Tensor<T>> {
        let (r, s, v, d) = (grid.rays, grid.samples, grid.views, self.d_model);
        let mut x = grid.features.matmul(p.get(self.w_feat))?.add(&grid.time.matmul(p.get(self.w_time))?)?;
        match (self.w_pos, &grid.positional) {
            (Some(w), Some(pos)) => {
                let pp = pos.matmul(p.get(w))?.reshape(&[r, s, 1, d])?.broadcast_to(&[r, s, v, d])?;
                x = x.add(&pp)?;
            }
            (None, None) => {}
            _ => return Err(CoreError::DimensionMismatch("positional tokens do not match the block".into())),
        }
        Ok(x.add(p.get(self.bias))?)
    }

    /// Stacked input weights `[C + 2 D_t (+ D_p), D]` matching the token layout.
    pub fn input_matrix<T: Real>(&self, p: &Bound<T>) -> Result<Tensor<T>> {
        let mut parts = vec![p.get(self.w_feat), p.get(self.w_time)];
        if let Some(w) = self.w_pos {
            parts.push(p.get(w));
        }
        Ok(Tensor::concat(&parts, 0)?)
    }

    /// Features `[R, S, V, D]`.
    pub fn forward<T: Real>(&self, p: &Bound<T>, grid: &TokenGrid<T>) -> Result<Tensor<T>> {
        let (r, s, v, d) = (grid.rays, grid.samples, grid.views, self.d_model);
        let ray_valid = ray_major(&grid.valid, r, s, v);
        let mut x = self.project(p, grid)?;
        for round in &self.rounds {
            // along the ray, one sequence per (ray, view)
            let xr = x.permute(&[0, 2, 1, 3])?.reshape(&[r * v, s, d])?;
            let h = round.ln_ray.forward(p, &xr)?;
            let a = round.ray.forward(p, &h, &h, &ray_valid)?;
            x = xr.add(&a)?.reshape(&[r, v, s, d])?.permute(&[0, 2, 1, 3])?;
            // across views, one set per (ray, sample)
            let xs = x.reshape(&[r * s, v, d])?;
            let h = round.ln_src.forward(p, &xs)?;
            let a = round.src.forward(p, &h, &h, &grid.valid)?;
            x = round.ffn.residual(p, &xs.add(&a)?)?.reshape(&[r, s, v, d])?;
        }
        self.ln_out.forward(p, &x)
    }
}

/// `[R, S, V]` flags reordered to `[R, V, S]`.
fn ray_major(valid: &[bool], r: usize, s: usize, v: usize) -> Vec<bool> {
    let mut out = vec![false; valid.len()];
    for ri in 0..r {
        for si in 0..s {
            for vi in 0..v {
                out[(ri * v + vi) * s + si] = valid[(ri * s + si) * v + vi];
            }
        }
    }
    out
}

/// Single decoder layer mapping first-pass features and source times to
/// per-(point, view) offsets `[R, S, V, 3]`.
#[derive(Clone, Debug)]
pub struct OffsetDecoder {
    q_feat: Linear,
    q_time: ParamId,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    cross: Attention,
    ffn: FeedForward,
    ln_out: LayerNorm,
    head: Linear,
    time_dim: usize,
}

impl OffsetDecoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let time_dim = cfg.tokens.time_dim();
        Self {
            q_feat: Linear::new(store, &format!("{name}.q_feat"), d, d, rng),
            q_time: proj(store, format!("{name}.q_time"), time_dim, d, rng),
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d),
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d),
            cross: Attention::new(store, &format!("{name}.cross"), d, cfg.heads, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_mult, rng),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d),
            head: Linear::zeros(store, &format!("{name}.head"), d, 3),
            time_dim,
        }
    }

    /// `features` is `[R, S, V, D]`; `source_time` holds `γ(t_src)` per view, `[V, D_t]`.
    pub fn forward<T: Real>(&self, p: &Bound<T>, features: &Tensor<T>, source_time: &Tensor<T>, valid: &[bool]) -> Result<Tensor<T>> {
        let sh = features.shape();
        let (r, s, v, d) = (sh[0], sh[1], sh[2], sh[3]);
        if source_time.shape() != [v, self.time_dim] {
            return Err(CoreError::DimensionMismatch(format!("source time codes {:?} for {v} views", source_time.shape())));
        }
        let q = self.q_feat.forward(p, features)?.add(&source_time.matmul(p.get(self.q_time))?)?.reshape(&[r * s, v, d])?;
        let kv = self.ln_kv.forward(p, &features.reshape(&[r * s, v, d])?)?;
        let h = q.add(&self.cross.forward(p, &self.ln_q.forward(p, &q)?, &kv, valid)?)?;
        let h = self.ffn.residual(p, &h)?;
        let delta = self.head.forward(p, &self.ln_out.forward(p, &h)?)?;
        Ok(delta.reshape(&[r, s, v, 3])?)
    }
}

/// Source pooling by a learned query, then per-point color, opacity and embedding.
#[derive(Clone, Debug)]
pub struct Heads {
    ln: LayerNorm,
    key: Linear,
    value: Linear,
    query: ParamId,
    trunk: Linear,
    color: Linear,
    sigma: Linear,
    cse: Option<Linear>,
    d_model: usize,
}

impl Heads {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, cse_dim: Option<usize>, rng: &mut R) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            query: proj(store, format!("{name}.query"), d, 1, rng),
            trunk: Linear::new(store, &format!("{name}.trunk"), d, d, rng),
            color: Linear::new(store, &format!("{name}.color"), d, 3, rng),
            sigma: Linear::new(store, &format!("{name}.sigma"), d, 1, rng),
            cse: cse_dim.map(|c| Linear::new(store, &format!("{name}.cse"), d, c, rng)),
            d_model: d,
        }
    }

    /// Validity-weighted pooling of `[R, S, V, D]` over views, `[R, S, D]`.
    pub fn pool<T: Real>(&self, p: &Bound<T>, features: &Tensor<T>, valid: &[bool]) -> Result<Tensor<T>> {
        let sh = features.shape();
        let (r, s, v, d) = (sh[0], sh[1], sh[2], sh[3]);
        let h = self.ln.forward(p, features)?;
        let scores = self
            .key
            .forward(p, &h)?
            .matmul(p.get(self.query))?
            .reshape(&[r * s, 1, v])?
            .scale(T::of(1.0 / (self.d_model as f64).sqrt()))?;
        let attn = scores.masked_softmax(valid)?;
        let values = self.value.forward(p, &h)?.reshape(&[r * s, v, d])?;
        Ok(attn.bmm(&values, false)?.reshape(&[r, s, d])?)
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, features: &Tensor<T>, valid: &[bool]) -> Result<PointPredictions<T>> {
        let sh = features.shape();
        let (r, s, v) = (sh[0], sh[1], sh[2]);
        let pooled = self.pool(p, features, valid)?;
        let h = self.trunk.forward(p, &pooled)?.relu()?;
        let color = self.color.forward(p, &h)?.sigmoid()?;
        let seen: Vec<T> = valid.chunks(v).map(|c| if c.iter().any(|b| *b) { T::one() } else { T::zero() }).collect();
        let sigma = self.sigma.forward(p, &h)?.softplus()?.reshape(&[r, s])?.mul(&Tensor::new(vec![r, s], seen)?)?;
        let cse = self.cse.as_ref().map(|c| c.forward(p, &h)).transpose()?;
        Ok(PointPredictions { color, sigma, cse })
    }
}

/// What one forward pass produces for rendering and losses.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Real> {
    pub pred: PointPredictions<T>,
    /// `[R, S, V, 3]`, absent for the rigid model.
    pub offsets: Option<Tensor<T>>,
    pub first_grid: TokenGrid<T>,
    pub second_grid: Option<TokenGrid<T>>,
}

/// Encoder, base block(s), offset decoder and heads with their parameter ids.
#[derive(Clone, Debug)]
pub struct TrackerNerf {
    pub cfg: ModelConfig,
    pub cse_dim: usize,
    pub encoder: Encoder,
    pub block: BaseBlock,
    pub second_block: Option<BaseBlock>,
    pub offsets: OffsetDecoder,
    pub heads: Heads,
}

impl TrackerNerf {
    /// Registers every parameter in `store`, deterministically given `rng`.
    /// `cse_dim` is the scene's embedding width (0 for none).
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, cse_dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if (cfg.encoder.use_cse || cfg.cse_head) && cse_dim == 0 {
            return Err(CoreError::InvalidArgument("embedding features or head requested for a scene without embeddings".into()));
        }
        let encoder = Encoder::new(store, &cfg.encoder, rng);
        let feat_dim = encoder.out_channels(cse_dim);
        let block = BaseBlock::new(store, "block", feat_dim, cfg, rng);
        let second_block = (!cfg.shared_pass_weights).then(|| BaseBlock::new(store, "block2", feat_dim, cfg, rng));
        let offsets = OffsetDecoder::new(store, "offset", cfg, rng);
        let heads = Heads::new(store, "heads", cfg.d_model, cfg.cse_head.then_some(cse_dim), rng);
        Ok(Self { cfg: cfg.clone(), cse_dim, encoder, block, second_block, offsets, heads })
    }

    pub fn encode<T: Real>(&self, p: &Bound<T>, views: &[&SourceView]) -> Result<Vec<ViewFeatures<T>>> {
        self.encoder.encode(p, views)
    }

    /// Rigid model on one grid: base block then heads.
    pub fn single_pass<T: Real>(&self, p: &Bound<T>, grid: &TokenGrid<T>) -> Result<PointPredictions<T>> {
        let f = self.block.forward(p, grid)?;
        self.heads.forward(p, &f, &grid.valid)
    }

    /// Offsets predicted from a first-pass grid.
    pub fn predict_offsets<T: Real>(&self, p: &Bound<T>, grid: &TokenGrid<T>) -> Result<Tensor<T>> {
        let f = self.block.forward(p, grid)?;
        let dt = self.cfg.tokens.time_dim();
        self.offsets.forward(p, &f, &grid.time.slice(1, dt, dt)?, &grid.valid)
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, batch: &SampleBatch, views: &[ViewFeatures<T>], t_tgt: f64) -> Result<ForwardOutput<T>> {
        let first_grid = token_grid(batch, None, views, t_tgt, &self.cfg.tokens)?;
        if !self.cfg.offsets_enabled {
            let pred = self.single_pass(p, &first_grid)?;
            return Ok(ForwardOutput { pred, offsets: None, first_grid, second_grid: None });
        }
        let delta = self.predict_offsets(p, &first_grid)?;
        let second_grid = token_grid(batch, Some(&delta), views, t_tgt, &self.cfg.tokens)?;
        let block = self.second_block.as_ref().unwrap_or(&self.block);
        let f2 = block.forward(p, &second_grid)?;
        let pred = self.heads.forward(p, &f2, &second_grid.valid)?;
        Ok(ForwardOutput { pred, offsets: Some(delta), first_grid, second_grid: Some(second_grid) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{stratified_ray_points, Camera};
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use trackerf_tensor::gradcheck;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            tokens: TokenConfig { gamma_space: 2, gamma_time: 1, gamma_dir: 1, ..TokenConfig::default() },
            encoder: EncoderConfig { channels: [4, 4, 4], d_z: 4, use_cse: false },
            cse_head: false,
            ..ModelConfig::default()
        }
    }

    fn cam_at(eye: Vector3<f64>) -> Camera {
        Camera::look_at(eye, Vector3::zeros(), Vector3::y(), 20.0, 16, 16).unwrap()
    }

    fn views(n: usize, c: usize, seed: u64) -> Vec<ViewFeatures<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.7;
                let data = (0..c * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                ViewFeatures {
                    map: Tensor::new(vec![c, 8, 8], data).unwrap(),
                    camera: cam_at(Vector3::new(3.0 * a.sin(), 0.4, -3.0 * a.cos())),
                    timestamp: i as f64 / n as f64,
                }
            })
            .collect()
    }

    fn batch(rays: usize, s: usize) -> SampleBatch {
        let c = cam_at(Vector3::new(0.0, 0.2, -3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rs: Vec<_> = (0..rays).map(|i| c.ray_for_pixel_index(5 + i % 6, 4 + i / 6).unwrap()).collect();
        let samples: Vec<_> = rs.iter().map(|r| stratified_ray_points(r, 2.0, 4.0, s, false, &mut rng).unwrap()).collect();
        SampleBatch::from_samples(&samples, rs.iter().map(|r| r.direction).collect()).unwrap()
    }

    fn model(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, TrackerNerf) {
        let mut store = ParamStore::new();
        let m = TrackerNerf::new(&mut store, cfg, 0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, m)
    }

    fn grid(cfg: &ModelConfig, nv: usize) -> TokenGrid<f64> {
        token_grid(&batch(3, 5), None, &views(nv, 4, 11), 0.4, &cfg.tokens).unwrap()
    }

    #[test]
    fn projection_equals_linear_map_on_full_tokens() {
        let cfg = tiny_cfg();
        let (store, m) = model(&cfg, 1);
        let p = store.bind(None);
        let g = grid(&cfg, 3);
        let parts = m.block.project(&p, &g).unwrap();
        let full = g.tokens().unwrap().matmul(&m.block.input_matrix(&p).unwrap()).unwrap().add(p.get(m.block.bias)).unwrap();
        for (a, b) in parts.data().iter().zip(full.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn base_block_shape_and_view_permutation() {
        let cfg = tiny_cfg();
        let (store, m) = model(&cfg, 2);
        let p = store.bind(None);
        let vs = views(4, 4, 5);
        let b = batch(3, 5);
        let f = m.block.forward(&p, &token_grid(&b, None, &vs, 0.4, &cfg.tokens).unwrap()).unwrap();
        assert_eq!(f.shape(), &[3, 5, 4, 8]);
        let perm = [2, 0, 3, 1];
        let pv: Vec<_> = perm.iter().map(|&i| vs[i].clone()).collect();
        let fp = m.block.forward(&p, &token_grid(&b, None, &pv, 0.4, &cfg.tokens).unwrap()).unwrap();
        for rs in 0..15 {
            for (k, &i) in perm.iter().enumerate() {
                for c in 0..8 {
                    let a = f.data()[(rs * 4 + i) * 8 + c];
                    let bb = fp.data()[(rs * 4 + k) * 8 + c];
                    assert!((a - bb).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn singleton_valid_key_returns_its_value() {
        let mut store = ParamStore::<f64>::new();
        let att = Attention::new(&mut store, "a", 4, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let p = store.bind(None);
        let x = Tensor::from_slice(&[1, 3, 4], &(0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let out = att.forward(&p, &x, &x, &[false, true, false]).unwrap();
        let only = att.o.forward(&p, &att.v.forward(&p, &x.slice(1, 1, 1).unwrap()).unwrap()).unwrap();
        for q in 0..3 {
            for c in 0..4 {
                assert!((out.data()[q * 4 + c] - only.data()[c]).abs() < 1e-12);
            }
        }
        let none = att.forward(&p, &x, &x, &[false; 3]).unwrap();
        assert!(none.data().iter().all(|v| v.is_finite()));
        for q in 0..3 {
            assert_eq!(&none.data()[q * 4..q * 4 + 4], p.get(att.o.b).data());
        }
    }

    #[test]
    fn zero_head_gives_zero_offsets_and_identical_grids() {
        let cfg = tiny_cfg();
        let (store, m) = model(&cfg, 5);
        let p = store.bind(None);
        let b = batch(3, 5);
        let vs = views(3, 4, 6);
        let out = m.forward(&p, &b, &vs, 0.4).unwrap();
        let delta = out.offsets.as_ref().unwrap();
        assert_eq!(delta.shape(), &[3, 5, 3, 3]);
        assert!(delta.data().iter().all(|v| *v == 0.0));
        let g1 = out.first_grid.tokens().unwrap();
        let g2 = out.second_grid.as_ref().unwrap().tokens().unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let single = m.single_pass(&p, &out.first_grid).unwrap();
        for (a, b) in out.pred.sigma.data().iter().zip(single.sigma.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in out.pred.color.data().iter().zip(single.color.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn offset_head_gradient() {
        let cfg = tiny_cfg();
        let (store, m) = model(&cfg, 6);
        let p = store.bind(None);
        let g = grid(&cfg, 2);
        let f = m.block.forward(&p, &g).unwrap();
        let dt = cfg.tokens.time_dim();
        let times = g.time.slice(1, dt, dt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w0 = Tensor::new(vec![8, 3], (0..24).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
        let b0 = Tensor::from_slice(&[3], &[0.1, -0.2, 0.05]).unwrap();
        let coef = Tensor::new(vec![3, 5, 2, 3], (0..90).map(|i| ((i * 13 % 7) as f64) - 3.0).collect()).unwrap();
        let rep = gradcheck::check(&[w0, b0], 1e-6, |x| -> Result<Tensor<f64>> {
            let mut bound = store.bind(None);
            bound.replace(m.offsets.head.w, x[0].clone());
            bound.replace(m.offsets.head.b, x[1].clone());
            Ok(m.offsets.forward(&bound, &f, &times, &g.valid)?.mul(&coef)?.sum_all()?)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn translated_view_with_matching_offset() {
        let cfg = tiny_cfg();
        let b = batch(3, 5);
        let shift = Vector3::new(0.05, -0.03, 0.08);
        let base = views(2, 4, 9);
        let moved: Vec<_> = base
            .iter()
            .map(|v| {
                let mut w = v.clone();
                w.camera = Camera::new(v.camera.k, v.camera.r, v.camera.t - v.camera.r * shift, 16, 16).unwrap();
                w
            })
            .collect();
        let delta = Tensor::from_slice(&[3], &[shift.x, shift.y, shift.z]).unwrap().broadcast_to(&[3, 5, 2, 3]).unwrap();
        let a = token_grid(&b, None, &base, 0.3, &cfg.tokens).unwrap().tokens().unwrap();
        let c = token_grid(&b, Some(&delta), &moved, 0.3, &cfg.tokens).unwrap().tokens().unwrap();
        for (x, y) in a.data().iter().zip(c.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn offsets_behind_camera_invalidate_tokens() {
        let cfg = tiny_cfg();
        let b = batch(2, 3);
        let vs = views(1, 4, 10);
        let center = vs[0].camera.center();
        let mut d = vec![0.0; 2 * 3 * 3];
        // move the first point far behind the camera
        let x0 = b.points[0];
        let target = center + (center - x0);
        for k in 0..3 {
            d[k] = target[k] - x0[k];
        }
        let delta = Tensor::new(vec![2, 3, 1, 3], d).unwrap();
        let g = token_grid(&b, Some(&delta), &vs, 0.0, &cfg.tokens).unwrap();
        assert!(!g.valid[0]);
        assert!(g.features.data()[..4].iter().all(|v| *v == 0.0));
        assert!(g.valid[1..].iter().all(|v| *v));
    }

    #[test]
    fn heads_ranges_and_permutation_invariance() {
        let mut cfg = tiny_cfg();
        cfg.cse_head = true;
        let mut store = ParamStore::<f64>::new();
        let m = TrackerNerf::new(&mut store, &cfg, 5, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let p = store.bind(None);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (r, s, v, d) = (2, 3, 4, 8);
        let f: Vec<f64> = (0..r * s * v * d).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut valid: Vec<bool> = (0..r * s * v).map(|_| rng.gen_bool(0.7)).collect();
        valid[4..8].fill(false);
        let ft = Tensor::new(vec![r, s, v, d], f.clone()).unwrap();
        let out = m.heads.forward(&p, &ft, &valid).unwrap();
        assert!(out.sigma.data().iter().all(|x| *x >= 0.0));
        assert_eq!(out.sigma.data()[1], 0.0);
        assert!(out.color.data().iter().all(|x| *x >= 0.0 && *x <= 1.0));
        assert_eq!(out.cse.as_ref().unwrap().shape(), &[2, 3, 5]);
        let perm = [3, 1, 0, 2];
        let mut fp = vec![0.0; f.len()];
        let mut vp = vec![false; valid.len()];
        for pt in 0..r * s {
            for (k, &i) in perm.iter().enumerate() {
                fp[(pt * v + k) * d..(pt * v + k + 1) * d].copy_from_slice(&f[(pt * v + i) * d..(pt * v + i + 1) * d]);
                vp[pt * v + k] = valid[pt * v + i];
            }
        }
        let outp = m.heads.forward(&p, &Tensor::new(vec![r, s, v, d], fp).unwrap(), &vp).unwrap();
        for (a, b) in out.sigma.data().iter().zip(outp.sigma.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in out.color.data().iter().zip(outp.color.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn separate_weights_and_rigid_mode() {
        let mut cfg = tiny_cfg();
        cfg.shared_pass_weights = false;
        let (s1, m1) = model(&cfg, 14);
        assert!(m1.second_block.is_some());
        assert!(s1.find("block2.in.b").is_some());
        cfg.offsets_enabled = false;
        let (s2, m2) = model(&cfg, 14);
        let out = m2.forward(&s2.bind(None), &batch(2, 4), &views(2, 4, 1), 0.5).unwrap();
        assert!(out.offsets.is_none() && out.second_grid.is_none());
        let again = m2.forward(&s2.bind(None), &batch(2, 4), &views(2, 4, 1), 0.5).unwrap();
        assert_eq!(out.pred.sigma.data(), again.pred.sigma.data());
    }
}
