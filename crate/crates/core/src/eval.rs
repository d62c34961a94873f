//! Reconstruction metrics, evaluation harness, input-gradient attribution and
//! the alignment ablation table.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_pgm;
use crate::models::{tensor_volumes, Grad};
use crate::neural::{Graph, Tensor};
use crate::projector::{rotate3d_inverse_adjoint, Dataset};
use crate::training::{prepare_inputs, GenInput, Generator, InputMode, InputSpec};
use crate::volgrid::{write_volume, Alignment, AlignmentApplied, Volume3D};

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    if sum.is_infinite() {
        // the correction term is NaN once an infinity has been absorbed
        return sum;
    }
    sum + comp
}

fn same_shape(a: &Volume3D, b: &Volume3D) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidDimension(format!(
            "volumes differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    Ok(compensated_sum(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2))) / n)
}

pub fn mae(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    Ok(compensated_sum(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs())) / n)
}

/// `10·log10(range² / mse)`; identical inputs give `+∞`.
pub fn psnr(a: &Volume3D, b: &Volume3D, data_range: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Inclusive-exclusive 3D prefix sums with a zero border.
struct Integral {
    dims: [usize; 3],
    sums: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, d: usize, value: impl Fn(usize) -> f64) -> Self {
        let (hp, wp, dp) = (h + 1, w + 1, d + 1);
        let mut s = vec![0.0; hp * wp * dp];
        let idx = |i: usize, j: usize, k: usize| (i * wp + j) * dp + k;
        for i in 1..hp {
            for j in 1..wp {
                for k in 1..dp {
                    let v = value(((i - 1) * w + (j - 1)) * d + (k - 1));
                    s[idx(i, j, k)] = v + s[idx(i - 1, j, k)] + s[idx(i, j - 1, k)] + s[idx(i, j, k - 1)]
                        - s[idx(i - 1, j - 1, k)]
                        - s[idx(i - 1, j, k - 1)]
                        - s[idx(i, j - 1, k - 1)]
                        + s[idx(i - 1, j - 1, k - 1)];
                }
            }
        }
        Integral { dims: [hp, wp, dp], sums: s }
    }

    /// Sum over the cube starting at `(i, j, k)` with side `n`.
    fn cube(&self, i: usize, j: usize, k: usize, n: usize) -> f64 {
        let [_, wp, dp] = self.dims;
        let at = |a: usize, b: usize, c: usize| self.sums[(a * wp + b) * dp + c];
        let (i1, j1, k1) = (i + n, j + n, k + n);
        at(i1, j1, k1) - at(i, j1, k1) - at(i1, j, k1) - at(i1, j1, k) + at(i, j, k1) + at(i, j1, k) + at(i1, j, k)
            - at(i, j, k)
    }
}

/// Mean local SSIM over all fully contained 7³ windows, uniform weights,
/// population statistics and constants for a data range of 1.
pub fn ssim(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    same_shape(a, b)?;
    if a.channels() != 1 {
        return Err(Error::InvalidDimension(format!("ssim expects one channel, got {}", a.channels())));
    }
    let (h, w, d) = a.spatial();
    let n = SSIM_WINDOW;
    if h < n || w < n || d < n {
        return Err(Error::InvalidDimension(format!("volume {h}×{w}×{d} is smaller than the {n}³ SSIM window")));
    }
    let (x, y) = (a.data(), b.data());
    let sx = Integral::new(h, w, d, |i| x[i] as f64);
    let sy = Integral::new(h, w, d, |i| y[i] as f64);
    let sxx = Integral::new(h, w, d, |i| (x[i] as f64).powi(2));
    let syy = Integral::new(h, w, d, |i| (y[i] as f64).powi(2));
    let sxy = Integral::new(h, w, d, |i| x[i] as f64 * y[i] as f64);
    let count = (n * n * n) as f64;
    let mut local = Vec::with_capacity((h - n + 1) * (w - n + 1) * (d - n + 1));
    for i in 0..=h - n {
        for j in 0..=w - n {
            for k in 0..=d - n {
                let mx = sx.cube(i, j, k, n) / count;
                let my = sy.cube(i, j, k, n) / count;
                let vx = (sxx.cube(i, j, k, n) / count - mx * mx).max(0.0);
                let vy = (syy.cube(i, j, k, n) / count - my * my).max(0.0);
                let cxy = sxy.cube(i, j, k, n) / count - mx * my;
                local.push(((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2)));
            }
        }
    }
    let len = local.len() as f64;
    Ok(compensated_sum(local.into_iter()) / len)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub mse: f64,
    pub mae: f64,
}

/// Means over samples (and over repeats when inputs are stochastic). PSNR is
/// the mean of per-sample values, so one identical pair makes it `+∞`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub psnr: f64,
    pub mse: f64,
    pub mae: f64,
    pub n_samples: usize,
    pub repeats: usize,
    pub per_sample: Vec<SampleMetrics>,
}

pub fn sample_metrics(index: usize, recon: &Volume3D, truth: &Volume3D) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        index,
        ssim: ssim(recon, truth)?,
        psnr: psnr(recon, truth, 1.0)?,
        mse: mse(recon, truth)?,
        mae: mae(recon, truth)?,
    })
}

fn aggregate(per_sample: Vec<SampleMetrics>, n_samples: usize, repeats: usize) -> MetricReport {
    let n = per_sample.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| compensated_sum(per_sample.iter().map(f)) / n;
    MetricReport {
        ssim: mean(|m| m.ssim),
        psnr: mean(|m| m.psnr),
        mse: mean(|m| m.mse),
        mae: mean(|m| m.mae),
        n_samples,
        repeats,
        per_sample,
    }
}

/// Number of evaluation repeats: five when the inputs are stochastic.
pub fn repeats_for(spec: &InputSpec) -> usize {
    if spec.mode == InputMode::NoiseResampled {
        5
    } else {
        1
    }
}

pub const EVAL_BATCH: usize = 8;

/// Evaluates an arbitrary reconstruction function over `data`. Repeat `r`
/// uses `r` as the noise draw.
pub fn evaluate_with(
    data: &Dataset,
    spec: &InputSpec,
    mut recon: impl FnMut(&GenInput, &[usize]) -> Result<Vec<Volume3D>>,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset is empty".into()));
    }
    let repeats = repeats_for(spec);
    let mut per_sample = Vec::with_capacity(data.len() * repeats);
    for r in 0..repeats {
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(EVAL_BATCH) {
            let input = prepare_inputs(data, chunk, spec, None, r as u64)?;
            let outs = recon(&input, chunk)?;
            for (&i, v) in chunk.iter().zip(&outs) {
                per_sample.push(sample_metrics(i, v, &data.samples[i].volume)?);
            }
        }
    }
    Ok(aggregate(per_sample, data.len(), repeats))
}

/// Reconstructs every sample with the generator and scores it.
pub fn evaluate(generator: &Generator, data: &Dataset, spec: &InputSpec) -> Result<MetricReport> {
    evaluate_with(data, spec, |input, _| tensor_volumes(&generator.reconstruct(input)?))
}

/// Per-view gradient magnitudes `|∂ mean(g(x)) / ∂ view|`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    /// One `C × H × W` field per input view (stored with depth 1).
    pub views: Vec<Volume3D>,
    /// L2 norm of each field.
    pub norms: Vec<f64>,
}

/// Signed gradients of `mean(g(x))` with respect to each input view, as
/// `[C, H, W]` arrays.
pub fn view_gradients(generator: &Generator, input: &GenInput, spec: &InputSpec) -> Result<Vec<Tensor>> {
    if input.composite.shape()[0] != 1 {
        return Err(Error::Contract("attribution works on one sample at a time".into()));
    }
    let mut g = Graph::new();
    match generator {
        Generator::Baseline(_) => {
            let c = g.constant(input.composite.clone());
            let views: Vec<_> = input.views.iter().map(|v| g.variable(v.clone())).collect();
            let y = generator.forward(&mut g, c, &views, Grad::Frozen)?;
            let l = g.mean(y);
            g.backward(l)?;
            views
                .iter()
                .zip(&input.views)
                .map(|(&v, t)| {
                    let s = t.shape();
                    g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(s)).reshape(&[s[1], s[2], s[3]])
                })
                .collect()
        }
        Generator::Unet(_) => {
            let c = g.variable(input.composite.clone());
            let y = generator.forward(&mut g, c, &[], Grad::Frozen)?;
            let l = g.mean(y);
            g.backward(l)?;
            let grad = g.grad(c).cloned().unwrap_or_else(|| Tensor::zeros(input.composite.shape()));
            let composite = &input.composite_volumes()[0];
            let channels = composite.view_channels();
            let s = grad.shape();
            let (h, w, d) = (s[2], s[3], s[4]);
            let block_len = channels * h * w * d;
            let n_views = if spec.mode == InputMode::Views { spec.view_indices.len() } else { 1 };
            (0..n_views)
                .map(|k| {
                    let block = &grad.data()[k * block_len..(k + 1) * block_len];
                    let applied = composite.provenance()[k].1;
                    let unaligned = align_adjoint(block, channels, [h, w, d], applied)?;
                    let mut out = vec![0.0; channels * h * w];
                    for (p, col) in unaligned.chunks_exact(d).enumerate() {
                        out[p] = col.iter().sum();
                    }
                    Tensor::new(vec![channels, h, w], out)
                })
                .collect()
        }
    }
}

/// Adjoint of the alignment applied to one repeated view.
fn align_adjoint(block: &[f64], c: usize, [h, w, d]: [usize; 3], applied: AlignmentApplied) -> Result<Vec<f64>> {
    match applied {
        AlignmentApplied::None => Ok(block.to_vec()),
        AlignmentApplied::Transpose => {
            // swapping W and D is its own inverse, hence self-adjoint
            let mut out = vec![0.0; block.len()];
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        for k in 0..d {
                            out[((ch * h + i) * d + k) * w + j] = block[((ch * h + i) * w + j) * d + k];
                        }
                    }
                }
            }
            Ok(out)
        }
        AlignmentApplied::Rotate3d { azimuth, elevation } => {
            let v = Volume3D::new_unbounded(c, h, w, d, block.iter().map(|&x| x as f32).collect())?;
            Ok(rotate3d_inverse_adjoint(&v, azimuth, elevation).data().iter().map(|&x| x as f64).collect())
        }
    }
}

pub fn attribute(generator: &Generator, data: &Dataset, index: usize, spec: &InputSpec) -> Result<AttributionMap> {
    let input = prepare_inputs(data, &[index], spec, None, 0)?;
    attribution_from_input(generator, &input, spec)
}

pub fn attribution_from_input(generator: &Generator, input: &GenInput, spec: &InputSpec) -> Result<AttributionMap> {
    let grads = view_gradients(generator, input, spec)?;
    let mut views = Vec::with_capacity(grads.len());
    let mut norms = Vec::with_capacity(grads.len());
    for t in grads {
        let s = t.shape().to_vec();
        norms.push(t.data().iter().map(|v| v * v).sum::<f64>().sqrt());
        views.push(Volume3D::new_unbounded(s[0], s[1], s[2], 1, t.data().iter().map(|v| v.abs() as f32).collect())?);
    }
    Ok(AttributionMap { views, norms })
}

/// Coefficient of variation (population std / mean) of positive values.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// `norms[p][r]` holds an attribution norm of phantom `p` under input draw `r`.
/// Returns `(intra, inter)`: the mean over phantoms of the within-phantom
/// coefficient of variation, and the coefficient of variation of the
/// per-phantom means.
pub fn attribution_variability(norms: &[Vec<f64>]) -> (f64, f64) {
    let intra = norms.iter().map(|r| coefficient_of_variation(r)).sum::<f64>() / norms.len() as f64;
    let means: Vec<f64> = norms.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    (intra, coefficient_of_variation(&means))
}

/// Writes each attribution field in the volume file format under `dir`.
pub fn write_attribution(map: &AttributionMap, dir: &Path) -> Result<()> {
    for (k, v) in map.views.iter().enumerate() {
        write_volume(&dir.join(format!("view_{k}")), v)?;
    }
    Ok(())
}

/// Scores each mode's generator on the same data. Each entry pairs an
/// alignment with the generator trained under it.
pub fn alignment_ablation(entries: &[(Alignment, &Generator)], data: &Dataset, spec: &InputSpec) -> Result<Vec<(Alignment, MetricReport)>> {
    entries
        .iter()
        .map(|(mode, g)| {
            let spec = InputSpec {
                alignment: *mode,
                ..spec.clone()
            };
            Ok((*mode, evaluate(g, data, &spec)?))
        })
        .collect()
}

pub fn alignment_name(a: Alignment) -> &'static str {
    match a {
        Alignment::None => "none",
        Alignment::TransposePerpendicular => "transpose_perpendicular",
        Alignment::Rotate3d => "rotate3d",
    }
}

pub fn ablation_csv(rows: &[(Alignment, MetricReport)]) -> String {
    let mut s = String::from("alignment,ssim,psnr,mse,mae,n_samples\n");
    for (a, r) in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", alignment_name(*a), r.ssim, r.psnr, r.mse, r.mae, r.n_samples);
    }
    s
}

/// Writes every depth slice of channel 0 as `<prefix>_dNN.pgm`.
pub fn dump_slices(volume: &Volume3D, dir: &Path, prefix: &str) -> Result<()> {
    let (h, w, d) = volume.spatial();
    for k in 0..d {
        write_pgm(&dir.join(format!("{prefix}_d{k:02}.pgm")), w, h, &volume.slice(0, k))?;
    }
    Ok(())
}
