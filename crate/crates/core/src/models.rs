//! Mapping network g (3D U-Net), potential network d, feature extractor f and
//! the view-encoder / volume-decoder baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{kaiming_normal, Graph, ParamStore, Tensor, Var};
use crate::volgrid::{CompositeVolume, Projection2D, Volume3D};

const SLOPE: f64 = 0.2;
const K3: [usize; 3] = [3, 3, 3];
const ONE: [usize; 3] = [1, 1, 1];
const TWO: [usize; 3] = [2, 2, 2];
const ZERO: [usize; 3] = [0, 0, 0];

/// Whether a forward pass records gradients for the network's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grad {
    Track,
    Frozen,
}

fn param(g: &mut Graph, store: &ParamStore, name: &str, grad: Grad) -> Result<Var> {
    match grad {
        Grad::Track => g.param(store, name),
        Grad::Frozen => g.frozen_param(store, name),
    }
}

/// Adds a conv weight `[co, ci, k...]` with Kaiming init and a zero bias.
fn add_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, co: usize, ci: usize, k: [usize; 3]) -> Result<()> {
    let shape = [co, ci, k[0], k[1], k[2]];
    store.insert(&format!("{name}.w"), kaiming_normal(&shape, ci * k.iter().product::<usize>(), rng)?)?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[co]))
}

fn add_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize) -> Result<()> {
    store.insert(&format!("{name}.w"), kaiming_normal(&[out, inp], inp, rng)?)?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[out]))
}

fn add_norm(store: &mut ParamStore, name: &str, c: usize) -> Result<()> {
    store.insert(&format!("{name}.gamma"), Tensor::full(&[c], 1.0))?;
    store.insert(&format!("{name}.beta"), Tensor::zeros(&[c]))
}

struct Ctx<'a> {
    store: &'a ParamStore,
    grad: Grad,
}

impl Ctx<'_> {
    fn conv(&self, g: &mut Graph, x: Var, name: &str, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let w = param(g, self.store, &format!("{name}.w"), self.grad)?;
        let b = param(g, self.store, &format!("{name}.b"), self.grad)?;
        g.conv3d(x, w, Some(b), stride, pad)
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gamma = param(g, self.store, &format!("{name}.gamma"), self.grad)?;
        let beta = param(g, self.store, &format!("{name}.beta"), self.grad)?;
        g.instance_norm(x, Some(gamma), Some(beta))
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = param(g, self.store, &format!("{name}.w"), self.grad)?;
        let b = param(g, self.store, &format!("{name}.b"), self.grad)?;
        g.linear(x, w, Some(b))
    }

    /// conv-norm-act, conv-norm, plus a (projected) identity path, then act.
    fn res_block(&self, g: &mut Graph, x: Var, name: &str, project: bool) -> Result<Var> {
        let h = self.conv(g, x, &format!("{name}.conv1"), ONE, ONE)?;
        let h = self.norm(g, h, &format!("{name}.norm1"))?;
        let h = g.leaky_relu(h, SLOPE);
        let h = self.conv(g, h, &format!("{name}.conv2"), ONE, ONE)?;
        let h = self.norm(g, h, &format!("{name}.norm2"))?;
        let skip = if project {
            self.conv(g, x, &format!("{name}.proj"), ONE, ZERO)?
        } else {
            x
        };
        let sum = g.add(h, skip)?;
        Ok(g.leaky_relu(sum, SLOPE))
    }
}

fn add_res_block(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ci: usize, co: usize) -> Result<()> {
    add_conv(store, rng, &format!("{name}.conv1"), co, ci, K3)?;
    add_norm(store, &format!("{name}.norm1"), co)?;
    add_conv(store, rng, &format!("{name}.conv2"), co, co, K3)?;
    add_norm(store, &format!("{name}.norm2"), co)?;
    if ci != co {
        add_conv(store, rng, &format!("{name}.proj"), co, ci, [1, 1, 1])?;
    }
    Ok(())
}

/// Stacks single-sample volumes into `[N, C, H, W, D]`.
pub fn batch_tensor(volumes: &[&Volume3D]) -> Result<Tensor> {
    let Some(first) = volumes.first() else {
        return Err(Error::EmptyInput("empty batch".into()));
    };
    let shape = first.shape();
    let mut data = Vec::with_capacity(volumes.len() * first.data().len());
    for v in volumes {
        if v.shape() != shape {
            return Err(Error::InvalidDimension(format!(
                "batch mixes shapes {shape:?} and {:?}",
                v.shape()
            )));
        }
        data.extend(v.data().iter().map(|&x| x as f64));
    }
    Tensor::new(vec![volumes.len(), shape[0], shape[1], shape[2], shape[3]], data)
}

/// Splits `[N, C, H, W, D]` back into volumes, clamping to `[0, 1]`.
pub fn tensor_volumes(t: &Tensor) -> Result<Vec<Volume3D>> {
    let s = t.shape();
    if s.len() != 5 {
        return Err(Error::InvalidDimension(format!("expected [N,C,H,W,D], got {s:?}")));
    }
    let per: usize = s[1..].iter().product();
    t.data()
        .chunks_exact(per)
        .map(|c| Volume3D::new(s[1], s[2], s[3], s[4], c.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingNetworkConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_levels")]
    pub depth_levels: usize,
    #[serde(default = "default_width")]
    pub base_width: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_levels() -> usize {
    3
}

fn default_width() -> usize {
    8
}

impl MappingNetworkConfig {
    pub fn new(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        MappingNetworkConfig {
            in_channels,
            out_channels,
            depth_levels: default_levels(),
            base_width: default_width(),
            seed,
        }
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Residual 3D U-Net with strided-conv downsampling, trilinear upsampling,
/// concatenated skips and a sigmoid head. Level `l` runs at `1/2^l` resolution;
/// the deepest level is the bottleneck.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    pub config: MappingNetworkConfig,
    pub params: ParamStore,
}

impl MappingNetwork {
    pub fn new(config: MappingNetworkConfig) -> Result<Self> {
        if config.in_channels == 0 || config.out_channels == 0 || config.depth_levels == 0 || config.base_width == 0 {
            return Err(Error::InvalidValue(format!("invalid mapping network config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new(config.seed).with_scope("g");
        let levels = config.depth_levels;
        add_res_block(&mut store, &mut rng, "enc0", config.in_channels, config.width(0))?;
        for l in 1..levels {
            add_conv(&mut store, &mut rng, &format!("down{l}"), config.width(l), config.width(l - 1), K3)?;
            add_res_block(&mut store, &mut rng, &format!("enc{l}"), config.width(l), config.width(l))?;
        }
        for l in (0..levels - 1).rev() {
            let ci = config.width(l + 1) + config.width(l);
            add_res_block(&mut store, &mut rng, &format!("dec{l}"), ci, config.width(l))?;
        }
        add_conv(&mut store, &mut rng, "head", config.out_channels, config.width(0), [1, 1, 1])?;
        Ok(MappingNetwork { config, params: store })
    }

    /// Spatial extents must be divisible by `2^(levels − 1)`.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = 1 << (self.config.depth_levels - 1);
        if shape.len() != 5 || shape[1] != self.config.in_channels || shape[2..].iter().any(|&n| n == 0 || n % f != 0) {
            return Err(Error::InvalidDimension(format!(
                "mapping network expects [N, {}, H, W, D] with extents divisible by {f}, got {shape:?}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var, grad: Grad) -> Result<Var> {
        self.forward_with(g, x, grad, false)
    }

    /// `zero_bottleneck` replaces the deepest features with zeros so only the
    /// skip connections carry input information to the decoder.
    pub fn forward_with(&self, g: &mut Graph, x: Var, grad: Grad, zero_bottleneck: bool) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let ctx = Ctx {
            store: &self.params,
            grad,
        };
        let levels = self.config.depth_levels;
        let mut skips = Vec::with_capacity(levels);
        let mut h = ctx.res_block(g, x, "enc0", self.config.in_channels != self.config.width(0))?;
        for l in 1..levels {
            skips.push(h);
            let d = ctx.conv(g, h, &format!("down{l}"), TWO, ONE)?;
            h = ctx.res_block(g, d, &format!("enc{l}"), false)?;
        }
        if zero_bottleneck {
            h = g.scale(h, 0.0);
        }
        for l in (0..levels - 1).rev() {
            let up = g.upsample(h, 2)?;
            let cat = g.concat(&[up, skips[l]])?;
            h = ctx.res_block(g, cat, &format!("dec{l}"), true)?;
        }
        let out = ctx.conv(g, h, "head", ONE, ZERO)?;
        Ok(g.sigmoid(out))
    }
}

/// Runs g on one composite volume.
pub fn mapping_forward(net: &MappingNetwork, composite: &CompositeVolume) -> Result<Volume3D> {
    let mut g = Graph::new();
    let x = g.constant(batch_tensor(&[composite.base()])?);
    let y = net.forward(&mut g, x, Grad::Frozen)?;
    Ok(tensor_volumes(g.value(y))?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialNetworkConfig {
    pub in_channels: usize,
    #[serde(default = "default_potential_widths")]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_potential_widths() -> Vec<usize> {
    vec![8, 16, 32]
}

impl PotentialNetworkConfig {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        PotentialNetworkConfig {
            in_channels,
            widths: default_potential_widths(),
            seed,
        }
    }
}

/// Strided-conv encoder, global average pool and a linear scalar head.
#[derive(Clone, Debug)]
pub struct PotentialNetwork {
    pub config: PotentialNetworkConfig,
    pub params: ParamStore,
}

impl PotentialNetwork {
    pub fn new(config: PotentialNetworkConfig) -> Result<Self> {
        if config.in_channels == 0 || config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::InvalidValue(format!("invalid potential network config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new(config.seed).with_scope("d");
        let mut ci = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            add_conv(&mut store, &mut rng, &format!("conv{i}"), w, ci, K3)?;
            ci = w;
        }
        add_linear(&mut store, &mut rng, "head", 1, ci)?;
        Ok(PotentialNetwork { config, params: store })
    }

    /// `[N, C, H, W, D] → [N, 1]`.
    pub fn forward(&self, g: &mut Graph, x: Var, grad: Grad) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(Error::InvalidDimension(format!(
                "potential network expects [N, {}, H, W, D], got {s:?}",
                self.config.in_channels
            )));
        }
        let ctx = Ctx {
            store: &self.params,
            grad,
        };
        let mut h = x;
        for i in 0..self.config.widths.len() {
            h = ctx.conv(g, h, &format!("conv{i}"), TWO, ONE)?;
            h = g.leaky_relu(h, SLOPE);
        }
        let pooled = g.global_avg_pool(h)?;
        ctx.linear(g, pooled, "head")
    }
}

pub fn potential_forward(net: &PotentialNetwork, volume: &Volume3D) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(batch_tensor(&[volume])?);
    let y = net.forward(&mut g, x, Grad::Frozen)?;
    g.value(y).item()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureExtractorConfig {
    pub in_channels: usize,
    /// Volume extents `[H, W, D]` the extractor is built for.
    pub grid: [usize; 3],
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_feature_widths")]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_feature_dim() -> usize {
    64
}

fn default_feature_widths() -> Vec<usize> {
    vec![8, 16]
}

impl FeatureExtractorConfig {
    pub fn new(in_channels: usize, grid: [usize; 3], seed: u64) -> Self {
        FeatureExtractorConfig {
            in_channels,
            grid,
            feature_dim: default_feature_dim(),
            widths: default_feature_widths(),
            seed,
        }
    }
}

fn halved(n: usize, times: usize) -> usize {
    (0..times).fold(n, |n, _| (n + 1) / 2)
}

/// Strided convolutions, flatten and a linear map to `feature_dim` values.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub config: FeatureExtractorConfig,
    pub params: ParamStore,
}

impl FeatureExtractor {
    pub fn new(config: FeatureExtractorConfig) -> Result<Self> {
        let volume_size = config.in_channels * config.grid.iter().product::<usize>();
        if config.feature_dim == 0 || config.feature_dim >= volume_size {
            return Err(Error::InvalidValue(format!(
                "feature dimension {} must be in 1..{volume_size}",
                config.feature_dim
            )));
        }
        if config.in_channels == 0 || config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::InvalidValue(format!("invalid feature extractor config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new(config.seed).with_scope("f");
        let mut ci = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            add_conv(&mut store, &mut rng, &format!("conv{i}"), w, ci, K3)?;
            ci = w;
        }
        let n = config.widths.len();
        let flat = ci * config.grid.iter().map(|&e| halved(e, n)).product::<usize>();
        add_linear(&mut store, &mut rng, "head", config.feature_dim, flat)?;
        Ok(FeatureExtractor { config, params: store })
    }

    /// `[N, C, H, W, D] → [N, M]`.
    pub fn forward(&self, g: &mut Graph, x: Var, grad: Grad) -> Result<Var> {
        let s = g.shape(x);
        let c = &self.config;
        if s.len() != 5 || s[1] != c.in_channels || s[2..] != c.grid {
            return Err(Error::InvalidDimension(format!(
                "feature extractor expects [N, {}, {:?}], got {s:?}",
                c.in_channels, c.grid
            )));
        }
        let ctx = Ctx {
            store: &self.params,
            grad,
        };
        let mut h = x;
        for i in 0..c.widths.len() {
            h = ctx.conv(g, h, &format!("conv{i}"), TWO, ONE)?;
            h = g.leaky_relu(h, SLOPE);
        }
        let flat = g.flatten(h)?;
        ctx.linear(g, flat, "head")
    }
}

pub fn feature_forward(net: &FeatureExtractor, volume: &Volume3D) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(batch_tensor(&[volume])?);
    let y = net.forward(&mut g, x, Grad::Frozen)?;
    Ok(g.value(y).data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineAEConfig {
    pub n_views: usize,
    pub channels: usize,
    /// Output volume extents `[H, W, D]`; views are `H × W`.
    pub grid: [usize; 3],
    #[serde(default = "default_feature_widths")]
    pub encoder_widths: Vec<usize>,
    /// Per-view latent size.
    #[serde(default = "default_feature_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_decoder_widths")]
    pub decoder_widths: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_decoder_widths() -> Vec<usize> {
    vec![16, 8]
}

impl BaselineAEConfig {
    pub fn new(n_views: usize, channels: usize, grid: [usize; 3], seed: u64) -> Self {
        BaselineAEConfig {
            n_views,
            channels,
            grid,
            encoder_widths: default_feature_widths(),
            latent_dim: default_feature_dim(),
            decoder_widths: default_decoder_widths(),
            seed,
        }
    }

    fn seed_extent(&self) -> [usize; 3] {
        let f = 1 << self.decoder_widths.len();
        [self.grid[0] / f, self.grid[1] / f, self.grid[2] / f]
    }
}

/// Shared 2D view encoder to a latent vector per view; latents are
/// concatenated and decoded into a volume by transposed convolutions.
#[derive(Clone, Debug)]
pub struct BaselineAE {
    pub config: BaselineAEConfig,
    pub params: ParamStore,
}

impl BaselineAE {
    pub fn new(config: BaselineAEConfig) -> Result<Self> {
        let c = &config;
        let view_size = c.channels * c.grid[0] * c.grid[1];
        if c.latent_dim == 0 || c.latent_dim >= view_size {
            return Err(Error::InvalidValue(format!(
                "latent dimension {} must be in 1..{view_size}",
                c.latent_dim
            )));
        }
        let f = 1 << c.decoder_widths.len();
        if c.n_views == 0
            || c.channels == 0
            || c.encoder_widths.is_empty()
            || c.decoder_widths.is_empty()
            || c.grid.iter().any(|&e| e == 0 || e % f != 0)
        {
            return Err(Error::InvalidValue(format!("invalid baseline config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut store = ParamStore::new(c.seed).with_scope("g");
        let mut ci = c.channels;
        for (i, &w) in c.encoder_widths.iter().enumerate() {
            add_conv(&mut store, &mut rng, &format!("enc{i}"), w, ci, [3, 3, 1])?;
            ci = w;
        }
        let n = c.encoder_widths.len();
        let flat = ci * halved(c.grid[0], n) * halved(c.grid[1], n);
        add_linear(&mut store, &mut rng, "latent", c.latent_dim, flat)?;
        let seed_len: usize = c.seed_extent().iter().product();
        add_linear(&mut store, &mut rng, "expand", c.decoder_widths[0] * seed_len, c.n_views * c.latent_dim)?;
        let mut ci = c.decoder_widths[0];
        for (i, &w) in c.decoder_widths.iter().enumerate() {
            let shape = [ci, w, 2, 2, 2];
            store.insert(&format!("up{i}.w"), kaiming_normal(&shape, ci, &mut rng)?)?;
            store.insert(&format!("up{i}.b"), Tensor::zeros(&[w]))?;
            ci = w;
        }
        add_conv(&mut store, &mut rng, "head", c.channels, ci, K3)?;
        Ok(BaselineAE { config, params: store })
    }

    /// Encodes views `[N, C, H, W, 1]` to latents `[N, latent_dim]`.
    pub fn encode(&self, g: &mut Graph, view: Var, grad: Grad) -> Result<Var> {
        let c = &self.config;
        let s = g.shape(view);
        if s.len() != 5 || s[1] != c.channels || s[2..] != [c.grid[0], c.grid[1], 1] {
            return Err(Error::InvalidDimension(format!(
                "baseline encoder expects [N, {}, {}, {}, 1], got {s:?}",
                c.channels, c.grid[0], c.grid[1]
            )));
        }
        let ctx = Ctx {
            store: &self.params,
            grad,
        };
        let mut h = view;
        for i in 0..c.encoder_widths.len() {
            h = ctx.conv(g, h, &format!("enc{i}"), [2, 2, 1], [1, 1, 0])?;
            h = g.leaky_relu(h, SLOPE);
        }
        let flat = g.flatten(h)?;
        ctx.linear(g, flat, "latent")
    }

    /// Decodes concatenated latents `[N, n_views · latent_dim]` to a volume.
    pub fn decode(&self, g: &mut Graph, z: Var, grad: Grad) -> Result<Var> {
        let c = &self.config;
        let ctx = Ctx {
            store: &self.params,
            grad,
        };
        let n = g.shape(z)[0];
        let h = ctx.linear(g, z, "expand")?;
        let [a, b, e] = c.seed_extent();
        let mut h = g.reshape(h, &[n, c.decoder_widths[0], a, b, e])?;
        h = g.leaky_relu(h, SLOPE);
        for i in 0..c.decoder_widths.len() {
            let w = param(g, &self.params, &format!("up{i}.w"), grad)?;
            let bias = param(g, &self.params, &format!("up{i}.b"), grad)?;
            h = g.conv_transpose3d(h, w, Some(bias), TWO, ZERO)?;
            h = g.leaky_relu(h, SLOPE);
        }
        let out = ctx.conv(g, h, "head", ONE, ONE)?;
        Ok(g.sigmoid(out))
    }

    /// One `[N, C, H, W, 1]` input per view.
    pub fn forward(&self, g: &mut Graph, views: &[Var], grad: Grad) -> Result<Var> {
        if views.len() != self.config.n_views {
            return Err(Error::InvalidDimension(format!(
                "baseline expects {} views, got {}",
                self.config.n_views,
                views.len()
            )));
        }
        let latents = views.iter().map(|&v| self.encode(g, v, grad)).collect::<Result<Vec<_>>>()?;
        let z = g.concat(&latents)?;
        self.decode(g, z, grad)
    }
}

/// Stacks same-index views of several samples into `[N, C, H, W, 1]`.
pub fn view_batch(views: &[&Projection2D]) -> Result<Tensor> {
    let Some(first) = views.first() else {
        return Err(Error::EmptyInput("empty view batch".into()));
    };
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(views.len() * first.data().len());
    for v in views {
        if (v.channels(), v.height(), v.width()) != (c, h, w) {
            return Err(Error::InvalidDimension("view batch mixes shapes".into()));
        }
        data.extend(v.data().iter().map(|&x| x as f64));
    }
    Tensor::new(vec![views.len(), c, h, w, 1], data)
}

pub fn baseline_ae_forward(ae: &BaselineAE, views: &[Projection2D]) -> Result<Volume3D> {
    let mut g = Graph::new();
    let vars = views
        .iter()
        .map(|v| Ok(g.constant(view_batch(&[v])?)))
        .collect::<Result<Vec<_>>>()?;
    let y = ae.forward(&mut g, &vars, Grad::Frozen)?;
    Ok(tensor_volumes(g.value(y))?.remove(0))
}
