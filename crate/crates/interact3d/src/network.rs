//! Query-conditioned predictor.
//!
//! A convolutional stem and patch embedding feed a small transformer encoder
//! whose token grid is the image memory. Features are kept channels-last and
//! every strided convolution is written as space-to-depth followed by a
//! linear map, which is much cheaper to differentiate on the CPU. Three decoders (interaction,
//! affordance, depth) each refine their own query tokens by cross-attending
//! to the memory; query tokens never attend to each other, so every point's
//! prediction depends only on the image and that point. Dense outputs are dot
//! products between a per-query vector and a per-pixel embedding at a quarter
//! of the input resolution.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::Linear;
use interact3d_core::datamodel::{ImagePrediction, InteractionPrediction, QueryPoint, RgbGrid};
use interact3d_core::{AxisEncoding, BoxXYXY, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const N_QUERIES: usize = interact3d_core::datamodel::MAX_QUERIES;
/// Stride of the stem, and so the ratio between input and output grids.
pub const STEM_STRIDE: usize = 4;
/// Features of one 3x3 RGB patch fed to the first stem layer.
pub const STEM_PATCH: usize = 27;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    /// Output grid `[height, width]` for masks, affordance and depth.
    pub mask_res: [usize; 2],
    pub n_queries: usize,
    pub mlp_ratio: usize,
    /// Width of the per-pixel embedding that dense heads dot against.
    pub pixel_dim: usize,
    pub stem_channels: [usize; 2],
    /// Random Fourier frequencies per coordinate pair.
    pub fourier_features: usize,
    pub fourier_scale: f64,
    /// Seeds weight initialization and the Fourier frequencies.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl NetworkConfig {
    pub fn toy() -> Self {
        Self {
            input_h: 192,
            input_w: 256,
            patch_size: 16,
            embed_dim: 64,
            encoder_depth: 4,
            decoder_depth: 2,
            num_heads: 4,
            mask_res: [48, 64],
            n_queries: N_QUERIES,
            mlp_ratio: 2,
            pixel_dim: 32,
            stem_channels: [32, 48],
            fourier_features: 32,
            fourier_scale: 2.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetworkError::Config(m));
        if self.n_queries != N_QUERIES {
            return bad(format!("n_queries must be {N_QUERIES}, got {}", self.n_queries));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(STEM_STRIDE) {
            return bad(format!("patch_size must be a positive multiple of {STEM_STRIDE}"));
        }
        if self.input_h == 0 || self.input_w == 0 || !self.input_h.is_multiple_of(self.patch_size) || !self.input_w.is_multiple_of(self.patch_size) {
            return bad(format!("input {}x{} not divisible by patch {}", self.input_h, self.input_w, self.patch_size));
        }
        if self.mask_res != [self.input_h / STEM_STRIDE, self.input_w / STEM_STRIDE] {
            return bad(format!("mask_res must be the input size over {STEM_STRIDE}"));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad("embed_dim must be divisible by num_heads".into());
        }
        if [self.encoder_depth, self.decoder_depth, self.mlp_ratio, self.pixel_dim, self.fourier_features]
            .contains(&0)
            || self.stem_channels.contains(&0)
        {
            return bad("depths and widths must be positive".into());
        }
        if !(self.fourier_scale > 0.0 && self.fourier_scale.is_finite()) {
            return bad("fourier_scale must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_h / self.patch_size, self.input_w / self.patch_size)
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Output grid as `(width, height)`.
    pub fn out_size(&self) -> (usize, usize) {
        (self.mask_res[1], self.mask_res[0])
    }
}

/// Named trainable parameters, ordered by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

enum Fill {
    Zeros,
    Ones,
    Constant(f64),
    Uniform(f64),
    Normal(f64),
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
    device: Device,
}

impl Builder {
    fn var(&mut self, name: String, shape: &[usize], fill: Fill) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match fill {
            Fill::Zeros => vec![0.0; n],
            Fill::Ones => vec![1.0; n],
            Fill::Constant(c) => vec![c as f32; n],
            Fill::Uniform(a) => (0..n).map(|_| self.rng.random_range(-a..a) as f32).collect(),
            Fill::Normal(s) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    (s * z) as f32
                })
                .collect(),
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        if self.store.vars.insert(name.clone(), var).is_some() {
            return Err(NetworkError::Config(format!("duplicate parameter {name}")));
        }
        Ok(t)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        let a = 1.0 / (din as f64).sqrt();
        let w = self.var(format!("{name}.weight"), &[dout, din], Fill::Uniform(a))?;
        let b = self.var(format!("{name}.bias"), &[dout], Fill::Zeros)?;
        Ok(Linear::new(w, Some(b)))
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<Norm> {
        Ok(Norm {
            weight: self.var(format!("{name}.weight"), &[dim], Fill::Ones)?,
            bias: self.var(format!("{name}.bias"), &[dim], Fill::Zeros)?,
        })
    }

    fn mlp(&mut self, name: &str, dims: &[usize]) -> Result<Mlp> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.linear(&format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }
}

/// Layer norm over the last axis, built from differentiable primitives.
struct Norm {
    weight: Tensor,
    bias: Tensor,
}

impl Norm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::layer_norm_slow(x, &self.weight, &self.bias, 1e-5)?)
    }
}

/// Linear layers with SiLU between them.
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.silu()?;
            }
        }
        Ok(x)
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: b.linear(&format!("{name}.q"), dim, dim)?,
            k: b.linear(&format!("{name}.k"), dim, dim)?,
            v: b.linear(&format!("{name}.v"), dim, dim)?,
            o: b.linear(&format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Each row of `q` attends over `k`/`v` on its own.
    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (b, n, d) = q.dims3()?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let q = self.split(&self.q.forward(q)?)?;
        let k = self.split(&self.k.forward(k)?)?;
        let v = self.split(&self.v.forward(v)?)?;
        let att = (q.matmul(&k.t()?)? * scale)?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        Ok(self.o.forward(&out)?)
    }
}

struct EncoderBlock {
    n1: Norm,
    attn: Attention,
    n2: Norm,
    mlp: Mlp,
}

impl EncoderBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.n1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, &h)?)?;
        let h = self.mlp.forward(&self.n2.forward(&x)?)?;
        Ok((x + h)?)
    }
}

struct DecoderLayer {
    n1: Norm,
    cross: Attention,
    n2: Norm,
    mlp: Mlp,
}

/// Query tokens refined by cross-attention to the memory only.
struct Decoder {
    layers: Vec<DecoderLayer>,
    out_norm: Norm,
}

impl Decoder {
    fn new(b: &mut Builder, name: &str, cfg: &NetworkConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let layers = (0..cfg.decoder_depth)
            .map(|i| {
                let p = format!("{name}.layers.{i}");
                Ok(DecoderLayer {
                    n1: b.norm(&format!("{p}.n1"), d)?,
                    cross: Attention::new(b, &format!("{p}.cross"), d, cfg.num_heads)?,
                    n2: b.norm(&format!("{p}.n2"), d)?,
                    mlp: b.mlp(&format!("{p}.mlp"), &[d, d * cfg.mlp_ratio, d])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, out_norm: b.norm(&format!("{name}.out_norm"), d)? })
    }

    /// `q`, `q_pe`: `(B, N, D)`; `mem`, `mem_pe`: `(B, T, D)`.
    fn forward(&self, q: &Tensor, q_pe: &Tensor, mem: &Tensor, mem_pe: &Tensor) -> Result<Tensor> {
        let keys = (mem + mem_pe)?;
        let mut x = q.clone();
        for l in &self.layers {
            let h = (l.n1.forward(&x)? + q_pe)?;
            x = (&x + l.cross.forward(&h, &keys, mem)?)?;
            x = (&x + l.mlp.forward(&l.n2.forward(&x)?)?)?;
        }
        self.out_norm.forward(&x)
    }
}

/// Token grid produced by the encoder, plus the dense skip features.
pub struct EncoderMemory {
    /// `(B, T, D)` tokens.
    pub tokens: Tensor,
    /// `(B, C, H/4, W/4)` stem features.
    pub skip: Tensor,
}

/// Raw network outputs for a batch, all `f32`.
pub struct NetOutput {
    /// `(B, Q, 3)`, `(B, Q, 2)`, `(B, Q, 3)`, `(B, Q, 3)`.
    pub movable: Tensor,
    pub rigidity: Tensor,
    pub articulation: Tensor,
    pub action: Tensor,
    /// `(B, Q, 4)` corners `x1, y1, x2, y2`.
    pub bbox: Tensor,
    /// `(B, Q, 3)` as `(sin 2θ, cos 2θ, r)`.
    pub axis: Tensor,
    /// `(B, Q, H, W)` logits.
    pub mask: Tensor,
    pub affordance: Tensor,
    /// `(B, H, W)`.
    pub depth: Tensor,
}

impl NetOutput {
    /// Every output tensor, in a fixed order matching [`ImageGradTensors`].
    pub fn parts(&self) -> [&Tensor; 9] {
        [
            &self.movable,
            &self.rigidity,
            &self.articulation,
            &self.action,
            &self.bbox,
            &self.axis,
            &self.mask,
            &self.affordance,
            &self.depth,
        ]
    }
}

/// `ln(p / (1 - p))` for `p = 1e-3`.
const AFFORDANCE_PRIOR_LOGIT: f64 = -6.9068;

pub struct Network {
    cfg: NetworkConfig,
    params: ParamStore,
    device: Device,
    fourier: Tensor,
    token_pe_coords: Tensor,
    pixel_pe_coords: Tensor,
    pixel_to_token: Tensor,
    stem1: Linear,
    stem2: Linear,
    patch: Linear,
    pos_proj: Linear,
    blocks: Vec<EncoderBlock>,
    enc_norm: Norm,
    point_type: Tensor,
    aff_type: Tensor,
    skip_proj: Linear,
    depth_query: Tensor,
    inter_dec: Decoder,
    aff_dec: Decoder,
    depth_dec: Decoder,
    movable_head: Linear,
    rigidity_head: Linear,
    articulation_head: Linear,
    action_head: Linear,
    box_head: Mlp,
    axis_head: Mlp,
    mask_hyper: Mlp,
    aff_hyper: Mlp,
    depth_hyper: Mlp,
    depth_bias: Tensor,
    aff_bias: Tensor,
    pix_tokens: Linear,
    pix_skip: Linear,
    pix_pos: Linear,
    pix_mix: Linear,
    pix_mask: Linear,
    pix_aff: Linear,
    pix_depth: Linear,
}

/// Normalized coordinates in `[0, 1]` of the centers of a `w x h` grid.
fn cell_centers(w: usize, h: usize) -> Vec<f32> {
    (0..h)
        .flat_map(|r| (0..w).flat_map(move |c| [(c as f32 + 0.5) / w as f32, (r as f32 + 0.5) / h as f32]))
        .collect()
}

impl Network {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let mut b = Builder { store: ParamStore::default(), rng: ChaCha8Rng::seed_from_u64(cfg.seed), device: device.clone() };
        let d = cfg.embed_dim;
        let [c1, c2] = cfg.stem_channels;
        let pd = cfg.pixel_dim;
        let f = cfg.fourier_features;

        let mut frng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f00d);
        let freqs: Vec<f32> = (0..2 * f)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut frng);
                (z * cfg.fourier_scale) as f32
            })
            .collect();
        let fourier = Tensor::from_vec(freqs, (2, f), &device)?;
        let (gh, gw) = cfg.grid();
        let token_pe_coords = Tensor::from_vec(cell_centers(gw, gh), (1, gh * gw, 2), &device)?;
        let [mh, mw] = cfg.mask_res;
        let per = cfg.patch_size / STEM_STRIDE;
        let map: Vec<u32> =
            (0..mh).flat_map(|r| (0..mw).map(move |c| ((r / per) * gw + c / per) as u32)).collect();
        let pixel_to_token = Tensor::from_vec(map, mh * mw, &device)?;
        let pixel_pe_coords = Tensor::from_vec(cell_centers(mw, mh), (1, mh * mw, 2), &device)?;

        let k = per;
        let net = Self {
            stem1: b.linear("stem.0", STEM_PATCH, c1)?,
            stem2: b.linear("stem.1", 4 * c1, c2)?,
            patch: b.linear("patch", k * k * c2, d)?,
            pos_proj: b.linear("pos_proj", 2 * f, d)?,
            blocks: (0..cfg.encoder_depth)
                .map(|i| {
                    let p = format!("encoder.{i}");
                    Ok(EncoderBlock {
                        n1: b.norm(&format!("{p}.n1"), d)?,
                        attn: Attention::new(&mut b, &format!("{p}.attn"), d, cfg.num_heads)?,
                        n2: b.norm(&format!("{p}.n2"), d)?,
                        mlp: b.mlp(&format!("{p}.mlp"), &[d, d * cfg.mlp_ratio, d])?,
                    })
                })
                .collect::<Result<_>>()?,
            enc_norm: b.norm("encoder.norm", d)?,
            point_type: b.var("query.point_type".into(), &[1, 1, d], Fill::Normal(0.02))?,
            aff_type: b.var("query.affordance_type".into(), &[1, 1, d], Fill::Normal(0.02))?,
            skip_proj: b.linear("query.skip_proj", c2, d)?,
            depth_query: b.var("query.depth".into(), &[1, 1, d], Fill::Normal(0.02))?,
            inter_dec: Decoder::new(&mut b, "decoder.interaction", cfg)?,
            aff_dec: Decoder::new(&mut b, "decoder.affordance", cfg)?,
            depth_dec: Decoder::new(&mut b, "decoder.depth", cfg)?,
            movable_head: b.linear("head.movable", d, 3)?,
            rigidity_head: b.linear("head.rigidity", d, 2)?,
            articulation_head: b.linear("head.articulation", d, 3)?,
            action_head: b.linear("head.action", d, 3)?,
            box_head: b.mlp("head.box", &[d, d, d, 4])?,
            axis_head: b.mlp("head.axis", &[d, d, d, 3])?,
            mask_hyper: b.mlp("head.mask_hyper", &[d, d, d, pd])?,
            aff_hyper: b.mlp("head.affordance_hyper", &[d, d, d, pd])?,
            depth_hyper: b.mlp("head.depth_hyper", &[d, d, d, pd])?,
            depth_bias: b.var("head.depth_bias".into(), &[1], Fill::Zeros)?,
            // Starts every affordance pixel near probability 1e-3 so the
            // background carries little mass from the first step.
            aff_bias: b.var("head.affordance_bias".into(), &[1], Fill::Constant(AFFORDANCE_PRIOR_LOGIT))?,
            pix_tokens: b.linear("pixel.tokens", d, pd)?,
            pix_skip: b.linear("pixel.skip", c2, pd)?,
            pix_pos: b.linear("pixel.pos", 2 * f, pd)?,
            pix_mix: b.linear("pixel.mix", pd, pd)?,
            pix_mask: b.linear("pixel.mask", pd, pd)?,
            pix_aff: b.linear("pixel.affordance", pd, pd)?,
            pix_depth: b.linear("pixel.depth", pd, pd)?,
            cfg: cfg.clone(),
            params: ParamStore::default(),
            device,
            fourier,
            token_pe_coords,
            pixel_pe_coords,
            pixel_to_token,
        };
        let mut net = net;
        net.params = b.store;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Overwrites parameter values by name; every parameter must be present
    /// with the right shape.
    pub fn load_params(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter() {
            let t = values.get(name).ok_or_else(|| NetworkError::Shape(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(NetworkError::Shape(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        if let Some(extra) = values.keys().find(|k| self.params.get(k).is_none()) {
            return Err(NetworkError::Shape(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Fourier features of `(…, 2)` coordinates in `[0, 1]`.
    fn fourier_features(&self, coords: &Tensor) -> Result<Tensor> {
        let centered = ((coords * 2.0)? - 1.0)?;
        let proj = (centered.broadcast_matmul(&self.fourier)? * (2.0 * std::f64::consts::PI))?;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], D::Minus1)?)
    }

    /// Positional embedding of normalized points, `(B, N, 2) -> (B, N, D)`.
    pub fn encode_points(&self, points: &Tensor) -> Result<Tensor> {
        Ok(self.pos_proj.forward(&self.fourier_features(points)?)?)
    }

    /// Embedding of a single query point.
    pub fn encode_query_point(&self, p: QueryPoint) -> Result<Vec<f32>> {
        p.validate("point").map_err(|e| NetworkError::Shape(e.to_string()))?;
        let t = Tensor::from_vec(vec![p.x as f32, p.y as f32], (1, 1, 2), &self.device)?;
        Ok(self.encode_points(&t)?.flatten_all()?.to_vec1()?)
    }

    /// Stem input grid `(height, width)`: one 3x3 patch per cell.
    pub fn stem_grid(&self) -> (usize, usize) {
        (self.cfg.input_h / 2, self.cfg.input_w / 2)
    }

    /// `(B, H/2 * W/2, 27)` stem patches (see [`Network::image_tensor`]) to
    /// the token memory.
    pub fn encode_image(&self, patches: &Tensor) -> Result<EncoderMemory> {
        let (bsz, n, k) = patches.dims3()?;
        let (sh, sw) = self.stem_grid();
        if (n, k) != (sh * sw, STEM_PATCH) {
            return Err(NetworkError::Shape(format!(
                "expected stem patches of shape (B, {}, {STEM_PATCH}) for a {}x{} input, got {:?}",
                sh * sw,
                self.cfg.input_w,
                self.cfg.input_h,
                patches.dims()
            )));
        }
        let [c1, _] = self.cfg.stem_channels;
        let x = self.stem1.forward(patches)?.silu()?.reshape((bsz, sh, sw, c1))?;
        let skip = self.stem2.forward(&space_to_depth(&x, 2)?)?.silu()?;
        let per = self.cfg.patch_size / STEM_STRIDE;
        let x = self.patch.forward(&space_to_depth(&skip, per)?)?;
        let (_, gh, gw, d) = x.dims4()?;
        let mut x = x.reshape((bsz, gh * gw, d))?.broadcast_add(&self.token_pe()?)?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        let (_, h, w, c2) = skip.dims4()?;
        Ok(EncoderMemory { tokens: self.enc_norm.forward(&x)?, skip: skip.reshape((bsz, h * w, c2))? })
    }

    fn token_pe(&self) -> Result<Tensor> {
        self.encode_points(&self.token_pe_coords)
    }

    /// Skip features at each point's nearest cell, `(B, N, C)`.
    fn gather_skip(&self, skip: &Tensor, points: &Tensor) -> Result<Tensor> {
        let bsz = skip.dim(0)?;
        let [h, w] = self.cfg.mask_res;
        let pts = points.to_vec3::<f32>()?;
        let mut out = Vec::with_capacity(bsz);
        for (bi, row) in pts.iter().enumerate() {
            let idx: Vec<u32> = row
                .iter()
                .map(|p| {
                    let c = ((p[0] * w as f32) as usize).min(w - 1);
                    let r = ((p[1] * h as f32) as usize).min(h - 1);
                    (r * w + c) as u32
                })
                .collect();
            let idx = Tensor::from_vec(idx, row.len(), &self.device)?;
            out.push(skip.get(bi)?.index_select(&idx, 0)?);
        }
        Ok(Tensor::stack(&out, 0)?)
    }

    /// Per-pixel embeddings `(B, C, H*W)` for the mask, affordance and depth heads.
    fn pixel_embeddings(&self, mem: &EncoderMemory) -> Result<[Tensor; 3]> {
        let up = self.pix_tokens.forward(&mem.tokens)?.index_select(&self.pixel_to_token, 1)?;
        let pos = self.pix_pos.forward(&self.fourier_features(&self.pixel_pe_coords)?)?;
        let base = (up + self.pix_skip.forward(&mem.skip)?)?.broadcast_add(&pos)?.silu()?;
        let base = self.pix_mix.forward(&base)?.silu()?;
        let head = |l: &Linear| -> Result<Tensor> { Ok(l.forward(&base)?.transpose(1, 2)?.contiguous()?) };
        Ok([head(&self.pix_mask)?, head(&self.pix_aff)?, head(&self.pix_depth)?])
    }

    /// Full forward pass: `(B, H/2 * W/2, 27)` stem patches and `(B, N, 2)` points.
    pub fn forward(&self, images: &Tensor, points: &Tensor) -> Result<NetOutput> {
        let (bsz, n, two) = points.dims3()?;
        if two != 2 || bsz != images.dim(0)? {
            return Err(NetworkError::Shape(format!("points must be (B, N, 2) matching the image batch, got {:?}", points.dims())));
        }
        if n != self.cfg.n_queries {
            return Err(NetworkError::Shape(format!("expected {} query slots, got {n}", self.cfg.n_queries)));
        }
        let mem = self.encode_image(images)?;
        let mem_pe = self.token_pe()?.broadcast_as(mem.tokens.shape())?.contiguous()?;
        let q_pe = self.encode_points(points)?;
        let point_feat = self.skip_proj.forward(&self.gather_skip(&mem.skip, points)?)?;
        let base = (&q_pe + point_feat)?;

        let h = self.inter_dec.forward(&base.broadcast_add(&self.point_type)?, &q_pe, &mem.tokens, &mem_pe)?;
        let ha = self.aff_dec.forward(&base.broadcast_add(&self.aff_type)?, &q_pe, &mem.tokens, &mem_pe)?;
        let dq = self.depth_query.broadcast_as((bsz, 1, self.cfg.embed_dim))?.contiguous()?;
        let hd = self.depth_dec.forward(&dq, &dq.zeros_like()?, &mem.tokens, &mem_pe)?;

        let [pix_mask, pix_aff, pix_depth] = self.pixel_embeddings(&mem)?;
        let [mh, mw] = self.cfg.mask_res;

        let cxcywh = candle_nn::ops::sigmoid(&self.box_head.forward(&h)?)?;
        let c = cxcywh.narrow(D::Minus1, 0, 2)?;
        let half = (cxcywh.narrow(D::Minus1, 2, 2)? * 0.5)?;
        let bbox = Tensor::cat(&[(&c - &half)?, (&c + &half)?], D::Minus1)?;

        let raw = self.axis_head.forward(&h)?;
        let sc = raw.narrow(D::Minus1, 0, 2)?.tanh()?;
        let norm = (sc.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        let axis = Tensor::cat(&[sc.broadcast_div(&norm)?, raw.narrow(D::Minus1, 2, 1)?], D::Minus1)?;

        let mask = self.mask_hyper.forward(&h)?.matmul(&pix_mask)?.reshape((bsz, n, mh, mw))?;
        let affordance = self
            .aff_hyper
            .forward(&ha)?
            .matmul(&pix_aff)?
            .broadcast_add(&self.aff_bias)?
            .reshape((bsz, n, mh, mw))?;
        let depth = self
            .depth_hyper
            .forward(&hd)?
            .matmul(&pix_depth)?
            .broadcast_add(&self.depth_bias)?
            .reshape((bsz, mh, mw))?;

        Ok(NetOutput {
            movable: self.movable_head.forward(&h)?,
            rigidity: self.rigidity_head.forward(&h)?,
            articulation: self.articulation_head.forward(&h)?,
            action: self.action_head.forward(&h)?,
            bbox,
            axis,
            mask,
            affordance,
            depth,
        })
    }

    /// Resizes and normalizes an RGB image, then cuts it into the stem's
    /// overlapping 3x3 patches at stride 2 (zero padded), giving a
    /// `(H/2 * W/2, 27)` tensor ordered by row, column, then `(dy, dx, channel)`.
    pub fn image_tensor(&self, image: &RgbGrid) -> Result<Tensor> {
        let (w, h) = (self.cfg.input_w, self.cfg.input_h);
        let resized = resize_rgb(image, w, h);
        let norm = resized.map(|p| p.map(|v| (v as f32 / 255.0 - 0.5) / 0.25));
        let (sh, sw) = self.stem_grid();
        let mut data = Vec::with_capacity(sh * sw * STEM_PATCH);
        for r in 0..sh {
            for c in 0..sw {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (y, x) = ((2 * r + dy) as isize - 1, (2 * c + dx) as isize - 1);
                        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            data.extend([0.0; 3]);
                        } else {
                            data.extend(norm.get(x as usize, y as usize));
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec(data, (sh * sw, STEM_PATCH), &self.device)?)
    }

    /// Padded query slots as a `(N, 2)` tensor.
    pub fn points_tensor(&self, points: &[QueryPoint]) -> Result<Tensor> {
        if points.len() != self.cfg.n_queries {
            return Err(NetworkError::Shape(format!("expected {} query slots, got {}", self.cfg.n_queries, points.len())));
        }
        let data: Vec<f32> = points.iter().flat_map(|p| [p.x as f32, p.y as f32]).collect();
        Ok(Tensor::from_vec(data, (points.len(), 2), &self.device)?)
    }

    /// Predictions for one image and up to `n_queries` points.
    pub fn predict(&self, image: &RgbGrid, points: &[QueryPoint]) -> Result<ImagePrediction> {
        let (padded, _) =
            interact3d_core::datamodel::pad_queries(points).map_err(|e| NetworkError::Shape(e.to_string()))?;
        let img = self.image_tensor(image)?.unsqueeze(0)?;
        let pts = self.points_tensor(&padded)?.unsqueeze(0)?;
        let out = self.forward(&img, &pts)?;
        let mut preds = to_predictions(&out)?;
        let mut pred = preds.remove(0);
        pred.queries.truncate(points.len());
        Ok(pred)
    }
}

/// `(B, H, W, C) -> (B, H/f, W/f, f*f*C)`, blocks flattened as `(dy, dx, c)`.
fn space_to_depth(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % f != 0 || w % f != 0 {
        return Err(NetworkError::Shape(format!("{h}x{w} grid not divisible by {f}")));
    }
    let (ho, wo) = (h / f, w / f);
    // (b, ho, dy, wo, dx*c) -> (b, ho, wo, dy, dx*c)
    Ok(x.reshape((b * ho, f, wo, f * c))?.transpose(1, 2)?.contiguous()?.reshape((b, ho, wo, f * f * c))?)
}

/// Bilinear resize of an 8-bit RGB image; a no-op at equal size.
pub fn resize_rgb(image: &RgbGrid, w: usize, h: usize) -> RgbGrid {
    if image.width() == w && image.height() == h {
        return image.clone();
    }
    let chans: Vec<Grid<f64>> = (0..3).map(|k| image.map(|p| p[k] as f64).resize_bilinear(w, h)).collect();
    Grid::from_fn(w, h, |c, r| {
        let px = |k: usize| chans[k].get(c, r).round().clamp(0.0, 255.0) as u8;
        [px(0), px(1), px(2)]
    })
}

fn grid_from(v: &[f32], w: usize, h: usize) -> Grid<f64> {
    Grid::from_vec(w, h, v.iter().map(|&x| x as f64).collect()).expect("tensor size matches grid")
}

/// Converts batched outputs into per-image predictions.
pub fn to_predictions(out: &NetOutput) -> Result<Vec<ImagePrediction>> {
    let (bsz, n, mh, mw) = out.mask.dims4()?;
    let movable = out.movable.to_vec3::<f32>()?;
    let rigidity = out.rigidity.to_vec3::<f32>()?;
    let articulation = out.articulation.to_vec3::<f32>()?;
    let action = out.action.to_vec3::<f32>()?;
    let bbox = out.bbox.to_vec3::<f32>()?;
    let axis = out.axis.to_vec3::<f32>()?;
    let mask = out.mask.flatten_from(2)?.to_vec3::<f32>()?;
    let aff = out.affordance.flatten_from(2)?.to_vec3::<f32>()?;
    let depth = out.depth.flatten_from(1)?.to_vec2::<f32>()?;
    let arr = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
    Ok((0..bsz)
        .map(|b| ImagePrediction {
            queries: (0..n)
                .map(|q| {
                    let bx = arr(&bbox[b][q]);
                    let ax = arr(&axis[b][q]);
                    InteractionPrediction {
                        movable_logits: arr(&movable[b][q]).try_into().expect("3 logits"),
                        rigidity_logits: arr(&rigidity[b][q]).try_into().expect("2 logits"),
                        articulation_logits: arr(&articulation[b][q]).try_into().expect("3 logits"),
                        action_logits: arr(&action[b][q]).try_into().expect("3 logits"),
                        bbox: BoxXYXY::new(bx[0], bx[1], bx[2], bx[3]),
                        axis_enc: AxisEncoding { s2: ax[0], c2: ax[1], r: ax[2] },
                        mask_logits: grid_from(&mask[b][q], mw, mh),
                        affordance_logits: grid_from(&aff[b][q], mw, mh),
                    }
                })
                .collect(),
            depth: grid_from(&depth[b], mw, mh),
        })
        .collect())
}
