//! Alternating training of the mapping network against the potential network:
//! `inner_k` generator steps on `S_ε(f(g(x)), f(v)) − λ·mean d(g(x))` with `d`
//! frozen, then one potential step on `mean d(g(x)) − mean d(v)` with `g` frozen.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json};
use crate::models::{
    batch_tensor, tensor_volumes, view_batch, BaselineAE, BaselineAEConfig, FeatureExtractor, FeatureExtractorConfig,
    Grad, MappingNetwork, MappingNetworkConfig, PotentialNetwork, PotentialNetworkConfig,
};
use crate::neural::{adamw_step, AdamWConfig, Checkpoint, Graph, OptimizerState, ParamStore, RngState, Tensor, Var};
use crate::projector::{cos_sin, Dataset, Sample};
use crate::sinkhorn::{sinkhorn_divergence_with_grads, EmpiricalMeasure, SinkhornConfig};
use crate::volgrid::{build_composite, concatenate, repeat, Alignment, CompositeVolume, Projection2D, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Contrast scale range around the view mean.
    pub contrast: [f64; 2],
    /// In-plane rotation range in degrees.
    pub rotation_deg: [f64; 2],
    pub hflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            contrast: [0.9, 1.1],
            rotation_deg: [-5.0, 5.0],
            hflip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            contrast: [1.0, 1.0],
            rotation_deg: [0.0, 0.0],
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if !ordered(self.contrast) || self.contrast[0] < 0.0 || !ordered(self.rotation_deg) || !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::InvalidValue(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }
}

fn with_data(view: &Projection2D, data: Vec<f32>) -> Projection2D {
    Projection2D::new(view.channels(), view.height(), view.width(), data, view.view_label()).expect("same shape, values in [0, 1]")
}

/// Mirrors each row (`w → W − 1 − w`).
pub fn hflip(view: &Projection2D) -> Projection2D {
    let w = view.width();
    let data = view.data().chunks_exact(w).flat_map(|row| row.iter().rev().copied()).collect();
    with_data(view, data)
}

/// Rotates each channel about the image center with bilinear resampling and
/// zero fill. Output pixel `(h, w)` reads the input at the source point
/// rotated by `−degrees`; at 90° this is `out[h][w] = in[w][W − 1 − h]` for
/// square views.
pub fn rotate_view(view: &Projection2D, degrees: f64) -> Projection2D {
    let (hh, ww) = (view.height(), view.width());
    let (c, s) = cos_sin(degrees);
    let (ch, cw) = ((hh as f64 - 1.0) / 2.0, (ww as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; view.data().len()];
    for (k, plane) in view.data().chunks_exact(hh * ww).enumerate() {
        let at = |i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i as usize >= hh || j as usize >= ww {
                0.0
            } else {
                plane[i as usize * ww + j as usize] as f64
            }
        };
        for h in 0..hh {
            for w in 0..ww {
                let (dh, dw) = (h as f64 - ch, w as f64 - cw);
                let sh = ch + c * dh + s * dw;
                let sw = cw - s * dh + c * dw;
                let (h0, w0) = (sh.floor(), sw.floor());
                let (a, b) = (sh - h0, sw - w0);
                let (i, j) = (h0 as isize, w0 as isize);
                let v = (1.0 - a) * ((1.0 - b) * at(i, j) + b * at(i, j + 1)) + a * ((1.0 - b) * at(i + 1, j) + b * at(i + 1, j + 1));
                out[k * hh * ww + h * ww + w] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    with_data(view, out)
}

/// Random flip, rotation and contrast. Always consumes three draws from `rng`
/// so streams stay aligned whatever the settings.
pub fn augment(view: &Projection2D, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Projection2D {
    let flip = rng.gen::<f64>() < cfg.hflip_prob;
    let angle = cfg.rotation_deg[0] + (cfg.rotation_deg[1] - cfg.rotation_deg[0]) * rng.gen::<f64>();
    let scale = cfg.contrast[0] + (cfg.contrast[1] - cfg.contrast[0]) * rng.gen::<f64>();
    let mut out = if flip { hflip(view) } else { view.clone() };
    if angle != 0.0 {
        out = rotate_view(&out, angle);
    }
    if scale != 1.0 {
        let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / out.data().len() as f64;
        let data = out.data().iter().map(|&v| (mean + scale * (v as f64 - mean)).clamp(0.0, 1.0) as f32).collect();
        out = with_data(&out, data);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One noise volume per patient.
    FixedZ,
    /// A fresh noise volume for every draw.
    ResampledZ,
}

/// `repeat(view) ⊕ z` with `z ~ N(0, I)` shaped like the repeated view.
/// `FixedZ` derives `z` from `seed` alone; `ResampledZ` from `(seed, draw)`.
pub fn noise_ablation_composite(view: &Projection2D, depth: usize, mode: NoiseMode, seed: u64, draw: u64) -> Result<CompositeVolume> {
    let base = repeat(view, depth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if mode == NoiseMode::ResampledZ {
        rng.set_stream(draw.wrapping_add(1));
    }
    let n = base.data().len();
    let noise: Vec<f32> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    let (h, w, d) = base.spatial();
    let z = Volume3D::new_unbounded(base.channels(), h, w, d, noise)?;
    concatenate(&[base, z])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Views,
    NoiseFixed,
    NoiseResampled,
}

/// Which views feed the generator and how they are combined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSpec {
    pub view_indices: Vec<usize>,
    pub alignment: Alignment,
    pub mode: InputMode,
    /// Seed of the ablation noise.
    pub noise_seed: u64,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec {
            view_indices: vec![0, 1],
            alignment: Alignment::TransposePerpendicular,
            mode: InputMode::Views,
            noise_seed: 0,
        }
    }
}

impl InputSpec {
    /// Channel blocks of the composite.
    pub fn n_blocks(&self) -> usize {
        match self.mode {
            InputMode::Views => self.view_indices.len(),
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_indices.is_empty() {
            return Err(Error::InvalidValue("at least one input view is required".into()));
        }
        if self.mode != InputMode::Views && self.view_indices.len() != 1 {
            return Err(Error::InvalidValue("noise ablation takes exactly one view".into()));
        }
        Ok(())
    }
}

/// Generator inputs for a batch: the composite and the raw views per index.
#[derive(Clone, Debug)]
pub struct GenInput {
    /// `[B, N·C, H, W, D]`.
    pub composite: Tensor,
    /// One `[B, C, H, W, 1]` tensor per view index.
    pub views: Vec<Tensor>,
    pub composites: Vec<CompositeVolume>,
}

impl GenInput {
    pub fn composite_volumes(&self) -> &[CompositeVolume] {
        &self.composites
    }
}

/// Builds generator inputs for `indices` of `data`. With `aug`, views are
/// augmented before alignment; `draw` feeds resampled ablation noise.
pub fn prepare_inputs(
    data: &Dataset,
    indices: &[usize],
    spec: &InputSpec,
    mut aug: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
    draw: u64,
) -> Result<GenInput> {
    spec.validate()?;
    let mut composites = Vec::with_capacity(indices.len());
    let mut per_view: Vec<Vec<Projection2D>> = vec![Vec::new(); spec.view_indices.len()];
    for (b, &i) in indices.iter().enumerate() {
        let sample: &Sample = data
            .samples
            .get(i)
            .ok_or_else(|| Error::Contract(format!("sample index {i} out of range")))?;
        let depth = sample.volume.depth();
        let mut views = Vec::with_capacity(spec.view_indices.len());
        for &v in &spec.view_indices {
            let view = sample
                .views
                .get(v)
                .ok_or_else(|| Error::Contract(format!("sample {i} has no view {v}")))?;
            views.push(match aug.as_mut() {
                Some((cfg, rng)) => augment(view, cfg, rng),
                None => view.clone(),
            });
        }
        let composite = match spec.mode {
            InputMode::Views => build_composite(&views, depth, spec.alignment)?,
            InputMode::NoiseFixed => {
                noise_ablation_composite(&views[0], depth, NoiseMode::FixedZ, noise_seed(spec.noise_seed, i as u64), 0)?
            }
            InputMode::NoiseResampled => noise_ablation_composite(
                &views[0],
                depth,
                NoiseMode::ResampledZ,
                noise_seed(spec.noise_seed, i as u64),
                draw.wrapping_mul(indices.len() as u64).wrapping_add(b as u64),
            )?,
        };
        for (k, v) in views.into_iter().enumerate() {
            per_view[k].push(v);
        }
        composites.push(composite);
    }
    let bases: Vec<&Volume3D> = composites.iter().map(|c| c.base()).collect();
    let composite = batch_tensor(&bases)?;
    let views = per_view
        .iter()
        .map(|vs| view_batch(&vs.iter().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(GenInput {
        composite,
        views,
        composites,
    })
}

fn noise_seed(base: u64, patient: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(patient)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Unet,
    BaselineAe,
}

/// Widths and sizes of the three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub generator: GeneratorKind,
    pub base_width: usize,
    pub depth_levels: usize,
    pub potential_widths: Vec<usize>,
    pub feature_dim: usize,
    pub feature_widths: Vec<usize>,
    pub ae_encoder_widths: Vec<usize>,
    pub ae_latent_dim: usize,
    pub ae_decoder_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            generator: GeneratorKind::Unet,
            base_width: 8,
            depth_levels: 3,
            potential_widths: vec![8, 16, 32],
            feature_dim: 64,
            feature_widths: vec![8, 16],
            ae_encoder_widths: vec![8, 16],
            ae_latent_dim: 64,
            ae_decoder_widths: vec![16, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub inner_k: usize,
    pub batch_size: usize,
    /// Outer steps; each runs `inner_k` generator updates and one potential update.
    pub total_steps: usize,
    pub optimizer_g: AdamWConfig,
    pub optimizer_d: AdamWConfig,
    pub optimizer_f: AdamWConfig,
    pub sinkhorn: SinkhornConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub cotrain_f: bool,
    /// Outer steps between checkpoints; 0 keeps only the initial and final ones.
    pub checkpoint_every: usize,
    /// Outer steps between progress lines on stderr; 0 disables them.
    pub log_every: usize,
    pub input: InputSpec,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            inner_k: 10,
            batch_size: 8,
            total_steps: 200,
            optimizer_g: AdamWConfig::default(),
            optimizer_d: AdamWConfig::default(),
            optimizer_f: AdamWConfig::default(),
            sinkhorn: SinkhornConfig {
                epsilon: 1.0,
                ..SinkhornConfig::default()
            },
            augment: AugmentConfig::default(),
            seed: 0,
            cotrain_f: false,
            checkpoint_every: 50,
            log_every: 0,
            input: InputSpec::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidValue(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.inner_k == 0 || self.batch_size == 0 {
            return Err(Error::InvalidValue("inner_k and batch_size must be ≥ 1".into()));
        }
        self.optimizer_g.validate()?;
        self.optimizer_d.validate()?;
        self.optimizer_f.validate()?;
        self.sinkhorn.validate()?;
        self.augment.validate()?;
        self.input.validate()?;
        if self.model.generator == GeneratorKind::BaselineAe && self.input.mode != InputMode::Views {
            return Err(Error::InvalidValue("the baseline generator takes real views only".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Generator {
    Unet(MappingNetwork),
    Baseline(BaselineAE),
}

impl Generator {
    pub fn params(&self) -> &ParamStore {
        match self {
            Generator::Unet(n) => &n.params,
            Generator::Baseline(n) => &n.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Generator::Unet(n) => &mut n.params,
            Generator::Baseline(n) => &mut n.params,
        }
    }

    /// The U-Net reads the composite, the baseline reads the raw views.
    pub fn forward(&self, g: &mut Graph, composite: Var, views: &[Var], grad: Grad) -> Result<Var> {
        match self {
            Generator::Unet(n) => n.forward(g, composite, grad),
            Generator::Baseline(n) => n.forward(g, views, grad),
        }
    }

    /// `[B, C, H, W, D]` reconstructions without gradient tracking.
    pub fn reconstruct(&self, input: &GenInput) -> Result<Tensor> {
        let mut g = Graph::new();
        let c = g.constant(input.composite.clone());
        let views: Vec<Var> = input.views.iter().map(|v| g.constant(v.clone())).collect();
        let y = self.forward(&mut g, c, &views, Grad::Frozen)?;
        Ok(g.value(y).clone())
    }
}

/// The three trained (or frozen) networks of one run.
#[derive(Clone, Debug)]
pub struct Networks {
    pub g: Generator,
    pub d: PotentialNetwork,
    pub f: FeatureExtractor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfigs {
    pub mapping: Option<MappingNetworkConfig>,
    pub baseline: Option<BaselineAEConfig>,
    pub potential: PotentialNetworkConfig,
    pub features: FeatureExtractorConfig,
    pub input: InputSpec,
}

impl Networks {
    /// Fresh Kaiming-initialized networks for volumes of `channels × grid`.
    pub fn init(cfg: &TrainConfig, channels: usize, grid: [usize; 3]) -> Result<Self> {
        let m = &cfg.model;
        let g = match m.generator {
            GeneratorKind::Unet => Generator::Unet(MappingNetwork::new(MappingNetworkConfig {
                in_channels: cfg.input.n_blocks() * channels,
                out_channels: channels,
                depth_levels: m.depth_levels,
                base_width: m.base_width,
                seed: cfg.seed,
            })?),
            GeneratorKind::BaselineAe => Generator::Baseline(BaselineAE::new(BaselineAEConfig {
                n_views: cfg.input.view_indices.len(),
                channels,
                grid,
                encoder_widths: m.ae_encoder_widths.clone(),
                latent_dim: m.ae_latent_dim,
                decoder_widths: m.ae_decoder_widths.clone(),
                seed: cfg.seed,
            })?),
        };
        let d = PotentialNetwork::new(PotentialNetworkConfig {
            in_channels: channels,
            widths: m.potential_widths.clone(),
            seed: cfg.seed.wrapping_add(1),
        })?;
        let f = FeatureExtractor::new(FeatureExtractorConfig {
            in_channels: channels,
            grid,
            feature_dim: m.feature_dim,
            widths: m.feature_widths.clone(),
            seed: cfg.seed.wrapping_add(2),
        })?;
        Ok(Networks { g, d, f })
    }

    pub fn configs(&self, input: &InputSpec) -> NetworkConfigs {
        let (mapping, baseline) = match &self.g {
            Generator::Unet(n) => (Some(n.config.clone()), None),
            Generator::Baseline(n) => (None, Some(n.config.clone())),
        };
        NetworkConfigs {
            mapping,
            baseline,
            potential: self.d.config.clone(),
            features: self.f.config.clone(),
            input: input.clone(),
        }
    }

    pub fn to_checkpoint(&self, step: u64, rng: Option<RngState>, input: &InputSpec) -> Result<Checkpoint> {
        let meta = serde_json::to_value(self.configs(input)).map_err(|e| Error::json("network configs", e))?;
        Ok(Checkpoint::from_stores(
            step,
            rng,
            meta,
            &[("g", self.g.params()), ("d", &self.d.params), ("f", &self.f.params)],
        ))
    }

    /// Rebuilds the networks recorded in a checkpoint and loads their weights.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, InputSpec)> {
        let cfg: NetworkConfigs =
            serde_json::from_value(ck.meta.clone()).map_err(|e| Error::json("checkpoint network configs", e))?;
        let mut g = match (cfg.mapping, cfg.baseline) {
            (Some(m), _) => Generator::Unet(MappingNetwork::new(m)?),
            (None, Some(b)) => Generator::Baseline(BaselineAE::new(b)?),
            (None, None) => return Err(Error::Contract("checkpoint records no generator".into())),
        };
        let mut d = PotentialNetwork::new(cfg.potential)?;
        let mut f = FeatureExtractor::new(cfg.features)?;
        ck.load_into("g", g.params_mut())?;
        ck.load_into("d", &mut d.params)?;
        ck.load_into("f", &mut f.params)?;
        Ok((Networks { g, d, f }, cfg.input))
    }
}

/// Values of the generator objective's terms for one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub sinkhorn: f64,
    /// Mean potential of the generated batch.
    pub potential: f64,
}

fn rows(t: &Tensor) -> Result<EmpiricalMeasure> {
    let n = t.shape()[0];
    EmpiricalMeasure::uniform_flat(t.len() / n, t.data().to_vec())
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericInput(format!("non-finite {what}")))
    }
}

/// Appends `S_ε(f(y), f(v)) − λ·mean d(y)` for generated `y` to the graph.
/// `d` is read as constants; `f` tracks gradients only when `cotrain_f`.
fn generator_objective(g: &mut Graph, nets: &Networks, y: Var, targets: &Tensor, cfg: &TrainConfig) -> Result<(Var, LossTerms)> {
    if targets.shape()[0] == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let fgrad = if cfg.cotrain_f { Grad::Track } else { Grad::Frozen };
    let fy = nets.f.forward(g, y, fgrad)?;
    let v = g.constant(targets.clone());
    let fv = nets.f.forward(g, v, fgrad)?;
    let (res, grad_a, grad_b) = sinkhorn_divergence_with_grads(&rows(g.value(fy))?, &rows(g.value(fv))?, &cfg.sinkhorn)?;
    let sinkhorn = check_finite(res.divergence, "Sinkhorn divergence")?;
    let mut inputs = vec![(fy, Tensor::new(g.shape(fy).to_vec(), grad_a)?)];
    if cfg.cotrain_f {
        inputs.push((fv, Tensor::new(g.shape(fv).to_vec(), grad_b)?));
    }
    let s = g.custom_scalar(sinkhorn, inputs)?;
    let dy = nets.d.forward(g, y, Grad::Frozen)?;
    let pot = g.mean(dy);
    let potential = check_finite(g.value(pot).item()?, "potential")?;
    let weighted = g.scale(pot, -cfg.lambda);
    let total = g.add(s, weighted)?;
    Ok((
        total,
        LossTerms {
            total: g.value(total).item()?,
            sinkhorn,
            potential,
        },
    ))
}

/// Generator objective on an already generated batch (no generator in the graph).
pub fn loss_g_on_output(nets: &Networks, generated: &Tensor, targets: &Tensor, cfg: &TrainConfig) -> Result<LossTerms> {
    let mut g = Graph::new();
    let y = g.constant(generated.clone());
    Ok(generator_objective(&mut g, nets, y, targets, cfg)?.1)
}

/// Generator loss with gradients written into `g`'s store (and `f`'s when
/// co-training). The potential network receives no gradient.
pub fn loss_g(nets: &mut Networks, input: &GenInput, targets: &Tensor, cfg: &TrainConfig) -> Result<LossTerms> {
    let mut graph = Graph::new();
    let c = graph.constant(input.composite.clone());
    let views: Vec<Var> = input.views.iter().map(|v| graph.constant(v.clone())).collect();
    let y = nets.g.forward(&mut graph, c, &views, Grad::Track)?;
    let (total, terms) = generator_objective(&mut graph, nets, y, targets, cfg)?;
    graph.backward(total)?;
    nets.g.params_mut().zero_grad();
    nets.g.params_mut().accumulate_grads(&graph)?;
    if cfg.cotrain_f {
        nets.f.params.zero_grad();
        nets.f.params.accumulate_grads(&graph)?;
    }
    Ok(terms)
}

/// Potential loss `mean d(g(x)) − mean d(v)` with gradients written into `d`.
pub fn loss_d(nets: &mut Networks, input: &GenInput, targets: &Tensor) -> Result<f64> {
    let generated = nets.g.reconstruct(input)?;
    loss_d_on_output(nets, &generated, targets, true)
}

/// Potential loss on a given generated batch; `accumulate` stores gradients.
pub fn loss_d_on_output(nets: &mut Networks, generated: &Tensor, targets: &Tensor, accumulate: bool) -> Result<f64> {
    if targets.shape()[0] == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut graph = Graph::new();
    let y = graph.constant(generated.clone());
    let v = graph.constant(targets.clone());
    let dy = nets.d.forward(&mut graph, y, Grad::Track)?;
    let dv = nets.d.forward(&mut graph, v, Grad::Track)?;
    let my = graph.mean(dy);
    let mv = graph.mean(dv);
    let l = graph.sub(my, mv)?;
    let value = check_finite(graph.value(l).item()?, "potential loss")?;
    if accumulate {
        graph.backward(l)?;
        nets.d.params.zero_grad();
        nets.d.params.accumulate_grads(&graph)?;
    }
    Ok(value)
}

/// One row of `losses.csv`: means over the outer step's generator updates and
/// the value of its potential update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_g: f64,
    pub l_d: f64,
    pub sinkhorn_term: f64,
    pub potential_term: f64,
}

pub fn losses_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,L_g,L_d,sinkhorn_term,potential_term\n");
    for r in history {
        let _ = writeln!(s, "{},{:e},{:e},{:e},{:e}", r.step, r.l_g, r.l_d, r.sinkhorn_term, r.potential_term);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Generator,
    Potential,
}

/// Observation points around every optimizer update.
pub trait TrainHooks {
    fn before_update(&mut self, _phase: Phase, _outer_step: u64, _nets: &Networks) {}
    fn after_update(&mut self, _phase: Phase, _outer_step: u64, _nets: &Networks) {}
}

impl TrainHooks for () {}

pub struct TrainState {
    pub step: u64,
    pub nets: Networks,
    pub opt_g: OptimizerState,
    pub opt_d: OptimizerState,
    pub opt_f: Option<OptimizerState>,
    pub history: Vec<LossRecord>,
    pub g_updates: u64,
    pub d_updates: u64,
    pub rng: ChaCha8Rng,
}

/// Where a run writes its outputs, and an optional held-out set used to keep
/// the best-SSIM checkpoint.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub out_dir: Option<&'a Path>,
    pub validation: Option<&'a Dataset>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

fn draw_batch(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    if b <= n {
        sample_indices(rng, n, b).into_vec()
    } else {
        (0..b).map(|_| rng.gen_range(0..n)).collect()
    }
}

fn targets_for(data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    batch_tensor(&idx.iter().map(|&i| &data.samples[i].volume).collect::<Vec<_>>())
}

/// Mean SSIM of the generator on `data` (no augmentation).
pub fn validation_ssim(nets: &Networks, data: &Dataset, spec: &InputSpec) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let input = prepare_inputs(data, &idx, spec, None, 0)?;
    let out = tensor_volumes(&nets.g.reconstruct(&input)?)?;
    let mut total = 0.0;
    for (v, s) in out.iter().zip(&data.samples) {
        total += crate::eval::ssim(v, &s.volume)?;
    }
    Ok(total / data.len() as f64)
}

fn save_checkpoint(state: &TrainState, dir: &Path, path: &Path, input: &InputSpec) -> Result<()> {
    let ck = state.nets.to_checkpoint(state.step, Some(RngState::capture(&state.rng)), input)?;
    ck.save(path)?;
    write_atomic(&dir.join("losses.csv"), losses_csv(&state.history).as_bytes())
}

/// Runs the alternating schedule for `cfg.total_steps` outer steps.
pub fn train(data: &Dataset, cfg: &TrainConfig, opts: TrainOptions<'_>, hooks: &mut dyn TrainHooks) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty".into()));
    }
    let first = &data.samples[0].volume;
    let (h, w, d) = first.spatial();
    let nets = Networks::init(cfg, first.channels(), [h, w, d])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = TrainState {
        step: 0,
        nets,
        opt_g: OptimizerState::new(cfg.optimizer_g),
        opt_d: OptimizerState::new(cfg.optimizer_d),
        opt_f: cfg.cotrain_f.then(|| OptimizerState::new(cfg.optimizer_f)),
        history: Vec::new(),
        g_updates: 0,
        d_updates: 0,
        rng,
    };
    let mut best_ssim = f64::NEG_INFINITY;
    if let Some(dir) = opts.out_dir {
        write_json(&dir.join("config.json"), cfg)?;
        save_checkpoint(&state, dir, &checkpoint_path(dir, 0), &cfg.input)?;
    }
    for outer in 1..=cfg.total_steps as u64 {
        let at = |e: Error| match e {
            Error::NumericInput(m) => Error::NumericInput(format!("step {outer}: {m}")),
            other => other,
        };
        let mut acc = LossTerms {
            total: 0.0,
            sinkhorn: 0.0,
            potential: 0.0,
        };
        for _ in 0..cfg.inner_k {
            let idx = draw_batch(&mut state.rng, data.len(), cfg.batch_size);
            let input = prepare_inputs(data, &idx, &cfg.input, Some((&cfg.augment, &mut state.rng)), state.g_updates).map_err(at)?;
            let targets = targets_for(data, &idx)?;
            hooks.before_update(Phase::Generator, outer, &state.nets);
            let terms = loss_g(&mut state.nets, &input, &targets, cfg).map_err(at)?;
            adamw_step(state.nets.g.params_mut(), &mut state.opt_g)?;
            if let Some(opt) = state.opt_f.as_mut() {
                adamw_step(&mut state.nets.f.params, opt)?;
            }
            state.g_updates += 1;
            hooks.after_update(Phase::Generator, outer, &state.nets);
            acc.total += terms.total;
            acc.sinkhorn += terms.sinkhorn;
            acc.potential += terms.potential;
        }
        let idx = draw_batch(&mut state.rng, data.len(), cfg.batch_size);
        let input = prepare_inputs(data, &idx, &cfg.input, Some((&cfg.augment, &mut state.rng)), state.g_updates).map_err(at)?;
        let targets = targets_for(data, &idx)?;
        hooks.before_update(Phase::Potential, outer, &state.nets);
        let l_d = loss_d(&mut state.nets, &input, &targets).map_err(at)?;
        adamw_step(&mut state.nets.d.params, &mut state.opt_d)?;
        state.d_updates += 1;
        hooks.after_update(Phase::Potential, outer, &state.nets);
        let k = cfg.inner_k as f64;
        state.step = outer;
        state.history.push(LossRecord {
            step: outer,
            l_g: acc.total / k,
            l_d,
            sinkhorn_term: acc.sinkhorn / k,
            potential_term: acc.potential / k,
        });
        if cfg.log_every > 0 && outer % cfg.log_every as u64 == 0 {
            let r = state.history.last().expect("just pushed");
            eprintln!(
                "step {outer}/{}: L_g {:.5} L_d {:.5} S {:.5} d {:.5}",
                cfg.total_steps, r.l_g, r.l_d, r.sinkhorn_term, r.potential_term
            );
        }
        let last = outer == cfg.total_steps as u64;
        let periodic = cfg.checkpoint_every > 0 && outer % cfg.checkpoint_every as u64 == 0;
        if let Some(dir) = opts.out_dir {
            if periodic || last {
                save_checkpoint(&state, dir, &checkpoint_path(dir, outer), &cfg.input)?;
                if let Some(val) = opts.validation {
                    let s = validation_ssim(&state.nets, val, &cfg.input)?;
                    if s > best_ssim {
                        best_ssim = s;
                        save_checkpoint(&state, dir, &dir.join("checkpoints").join("best.ckpt"), &cfg.input)?;
                    }
                }
            }
        }
    }
    if let Some(dir) = opts.out_dir {
        write_atomic(&dir.join("losses.csv"), losses_csv(&state.history).as_bytes())?;
    }
    Ok(state)
}
