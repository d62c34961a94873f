//! Ellipsoid phantoms, trilinear 3D rotation and parallel-beam DRRs.
//!
//! Rotation convention: coordinates are `(h, w, d)` voxel indices, centred on
//! `(n - 1) / 2` per axis. Rotating by azimuth `a` (about the H axis) then by
//! elevation `e` (about the W axis) produces `out(p) = in(M (p - c) + c)` with
//! `M = A(a) · E(e)`, where
//!
//! ```text
//! A(a): w' = w cos a - d sin a,  d' = w sin a + d cos a
//! E(e): h' = h cos e - d sin e,  d' = h sin e + d cos e
//! ```
//!
//! A projection at `(a, e)` is the mean along depth of the rotated volume. With
//! this convention the 90° azimuth view has `P[h, x] = mean_w V[h, w, x]`, so
//! repeating it along depth and swapping W with D puts every pixel back on
//! the ray it integrated.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::volgrid::{self, Projection2D, ViewLabel, Volume3D};

type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Centre in unit coordinates `(h, w, d)`.
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Euler angles in degrees, applied about H, W then D.
    pub rotation: [f64; 3],
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub ellipsoids: Vec<Ellipsoid>,
    /// `(H, W, D)`.
    pub grid: (usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamKind {
    ParallelBeam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewGeometry {
    pub azimuth: f64,
    pub elevation: f64,
    #[serde(default = "default_beam")]
    pub kind: BeamKind,
}

fn default_beam() -> BeamKind {
    BeamKind::ParallelBeam
}

impl ViewGeometry {
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        let g = Self {
            azimuth,
            elevation,
            kind: BeamKind::ParallelBeam,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn frontal() -> Self {
        Self::new(0.0, 0.0).unwrap()
    }

    pub fn lateral() -> Self {
        Self::new(90.0, 0.0).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..360.0).contains(&self.azimuth) {
            return Err(Error::InvalidValue(format!(
                "azimuth {} outside [0, 360)",
                self.azimuth
            )));
        }
        if !(-90.0..=90.0).contains(&self.elevation) {
            return Err(Error::InvalidValue(format!(
                "elevation {} outside [-90, 90]",
                self.elevation
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> ViewLabel {
        ViewLabel::from_angles(self.azimuth, self.elevation)
    }
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

/// cos/sin with exact values at multiples of 90°.
pub(crate) fn cos_sin(degrees: f64) -> (f64, f64) {
    let r = degrees.to_radians();
    let snap = |x: f64| {
        if x.abs() < 1e-12 {
            0.0
        } else if (x.abs() - 1.0).abs() < 1e-12 {
            x.signum()
        } else {
            x
        }
    };
    (snap(r.cos()), snap(r.sin()))
}

fn azimuth_matrix(degrees: f64) -> Mat3 {
    let (c, s) = cos_sin(degrees);
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn elevation_matrix(degrees: f64) -> Mat3 {
    let (c, s) = cos_sin(degrees);
    [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
}

fn source_matrix(azimuth: f64, elevation: f64) -> Mat3 {
    mat_mul(&azimuth_matrix(azimuth), &elevation_matrix(elevation))
}

/// Calls `tap(flat_spatial_index, weight)` for every in-bounds trilinear
/// neighbour of `pos`. Out-of-bounds neighbours contribute zero.
#[inline]
fn trilinear_taps(pos: [f64; 3], dims: (usize, usize, usize), mut tap: impl FnMut(usize, f64)) {
    let n = [dims.0 as isize, dims.1 as isize, dims.2 as isize];
    let mut base = [0isize; 3];
    let mut frac = [0.0f64; 3];
    for k in 0..3 {
        let f = pos[k].floor();
        base[k] = f as isize;
        frac[k] = pos[k] - f;
    }
    for corner in 0..8 {
        let mut idx = [0isize; 3];
        let mut weight = 1.0;
        for k in 0..3 {
            let hi = (corner >> (2 - k)) & 1 == 1;
            idx[k] = base[k] + hi as isize;
            weight *= if hi { frac[k] } else { 1.0 - frac[k] };
        }
        if weight == 0.0 {
            continue;
        }
        if (0..3).all(|k| idx[k] >= 0 && idx[k] < n[k]) {
            let flat = (idx[0] as usize * dims.1 + idx[1] as usize) * dims.2 + idx[2] as usize;
            tap(flat, weight);
        }
    }
}

fn sample_positions(dims: (usize, usize, usize), m: &Mat3, mut visit: impl FnMut(usize, [f64; 3])) {
    let c = [
        (dims.0 as f64 - 1.0) / 2.0,
        (dims.1 as f64 - 1.0) / 2.0,
        (dims.2 as f64 - 1.0) / 2.0,
    ];
    let mut out = 0;
    for h in 0..dims.0 {
        for w in 0..dims.1 {
            for d in 0..dims.2 {
                let q = [h as f64 - c[0], w as f64 - c[1], d as f64 - c[2]];
                let mut src = [0.0; 3];
                for i in 0..3 {
                    src[i] = m[i][0] * q[0] + m[i][1] * q[1] + m[i][2] * q[2] + c[i];
                }
                visit(out, src);
                out += 1;
            }
        }
    }
}

fn resample(volume: &Volume3D, m: &Mat3) -> Volume3D {
    let dims = volume.spatial();
    let per = volume.voxels_per_channel();
    let mut data = vec![0.0f32; volume.data().len()];
    for c in 0..volume.channels() {
        let src = volume.channel(c);
        let dst = &mut data[c * per..(c + 1) * per];
        sample_positions(dims, m, |o, pos| {
            let mut acc = 0.0f64;
            trilinear_taps(pos, dims, |i, wgt| acc += wgt * src[i] as f64);
            dst[o] = acc as f32;
        });
    }
    let (h, w, d) = dims;
    Volume3D::new_unbounded(volume.channels(), h, w, d, data).expect("shape preserved")
}

fn resample_adjoint(volume: &Volume3D, m: &Mat3) -> Volume3D {
    let dims = volume.spatial();
    let per = volume.voxels_per_channel();
    let mut data = vec![0.0f64; volume.data().len()];
    for c in 0..volume.channels() {
        let src = volume.channel(c);
        let dst = &mut data[c * per..(c + 1) * per];
        sample_positions(dims, m, |o, pos| {
            let v = src[o] as f64;
            trilinear_taps(pos, dims, |i, wgt| dst[i] += wgt * v);
        });
    }
    let (h, w, d) = dims;
    Volume3D::new_unbounded(
        volume.channels(),
        h,
        w,
        d,
        data.into_iter().map(|v| v as f32).collect(),
    )
    .expect("shape preserved")
}

/// Rotates every channel about the grid centre by azimuth then elevation,
/// trilinear resampling with zero padding. Zero angles return an exact copy.
pub fn rotate3d(volume: &Volume3D, azimuth: f64, elevation: f64) -> Volume3D {
    if azimuth == 0.0 && elevation == 0.0 {
        return volume.clone();
    }
    resample(volume, &source_matrix(azimuth, elevation))
}

/// Undoes [`rotate3d`] with the same angles (up to interpolation and the
/// voxels lost to zero padding).
pub fn rotate3d_inverse(volume: &Volume3D, azimuth: f64, elevation: f64) -> Volume3D {
    if azimuth == 0.0 && elevation == 0.0 {
        return volume.clone();
    }
    resample(volume, &transpose(&source_matrix(azimuth, elevation)))
}

/// Adjoint of [`rotate3d_inverse`] as a linear map; used to carry gradients
/// from a rotation-aligned composite back to the repeated view.
pub fn rotate3d_inverse_adjoint(volume: &Volume3D, azimuth: f64, elevation: f64) -> Volume3D {
    if azimuth == 0.0 && elevation == 0.0 {
        return volume.clone();
    }
    resample_adjoint(volume, &transpose(&source_matrix(azimuth, elevation)))
}

fn euler_matrix(degrees: [f64; 3]) -> Mat3 {
    let rx = {
        let (c, s) = cos_sin(degrees[0]);
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
    };
    let ry = {
        let (c, s) = cos_sin(degrees[1]);
        [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
    };
    let rz = {
        let (c, s) = cos_sin(degrees[2]);
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    };
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

/// Voxel value = clamp(sum of intensities of the ellipsoids containing the
/// voxel centre, 0, 1).
pub fn rasterize_phantom(phantom: &Phantom) -> Result<Volume3D> {
    let (h, w, d) = phantom.grid;
    if h < 2 || w < 2 || d < 2 {
        return Err(Error::InvalidDimension(format!(
            "phantom grid {h}×{w}×{d} must be at least 2 per axis"
        )));
    }
    if phantom.ellipsoids.is_empty() {
        return Err(Error::InvalidPhantom("no ellipsoids".into()));
    }
    let mut shapes = Vec::with_capacity(phantom.ellipsoids.len());
    for e in &phantom.ellipsoids {
        if e.semi_axes.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::InvalidPhantom(format!(
                "semi-axes {:?} must all be positive",
                e.semi_axes
            )));
        }
        if e.center.iter().chain(&e.rotation).any(|v| !v.is_finite()) || !e.intensity.is_finite() {
            return Err(Error::InvalidPhantom("non-finite ellipsoid parameter".into()));
        }
        shapes.push((transpose(&euler_matrix(e.rotation)), e));
    }
    let mut data = Vec::with_capacity(h * w * d);
    for hi in 0..h {
        let y = (hi as f64 + 0.5) / h as f64;
        for wi in 0..w {
            let x = (wi as f64 + 0.5) / w as f64;
            for di in 0..d {
                let z = (di as f64 + 0.5) / d as f64;
                let mut value = 0.0;
                for (rt, e) in &shapes {
                    let p = [y - e.center[0], x - e.center[1], z - e.center[2]];
                    let mut r = 0.0;
                    for i in 0..3 {
                        let q = rt[i][0] * p[0] + rt[i][1] * p[1] + rt[i][2] * p[2];
                        r += (q / e.semi_axes[i]).powi(2);
                    }
                    if r <= 1.0 {
                        value += e.intensity;
                    }
                }
                data.push(value.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Volume3D::new(1, h, w, d, data)
}

/// Parallel-beam DRR: the mean of the volume along each ray.
///
/// Axis-aligned views average whole rows of the (exactly permuted) volume.
/// Oblique views rotate the volume with zero padding and divide the ray sum
/// by the rotated support, so each pixel is the mean over the part of the
/// ray inside the volume and a constant volume projects to that constant.
pub fn project(volume: &Volume3D, geometry: &ViewGeometry) -> Result<Projection2D> {
    geometry.validate()?;
    if volume.channels() != 1 {
        return Err(Error::InvalidDimension(format!(
            "projection needs a single-channel volume, got {} channels",
            volume.channels()
        )));
    }
    let (h, w, d) = volume.spatial();
    let m = source_matrix(geometry.azimuth, geometry.elevation);
    if m.iter().flatten().all(|v| v.fract() == 0.0) {
        let rotated = permute_aligned(volume, &m);
        let (rh, rw, rd) = rotated.spatial();
        let data = rotated
            .data()
            .chunks_exact(rd)
            .map(|ray| ray_mean(ray, rd as f64))
            .collect();
        return Projection2D::new(1, rh, rw, data, geometry.label());
    }
    let rotated = resample(volume, &m);
    let support = resample(&Volume3D::filled(1, h, w, d, 1.0)?, &m);
    let data = rotated
        .data()
        .chunks_exact(d)
        .zip(support.data().chunks_exact(d))
        .map(|(ray, mask)| {
            let length: f64 = mask.iter().map(|&v| v as f64).sum();
            if length > 1e-9 {
                ray_mean(ray, length)
            } else {
                0.0
            }
        })
        .collect();
    Projection2D::new(1, h, w, data, geometry.label())
}

/// Exact rotation by a signed axis permutation. Output axis `k` runs along
/// source axis `i` where `m[i][k] != 0`, so the extents permute with it and
/// non-cubic volumes lose nothing.
fn permute_aligned(volume: &Volume3D, m: &Mat3) -> Volume3D {
    let (h, w, d) = volume.spatial();
    let src_dims = [h, w, d];
    let mut axis = [0usize; 3];
    let mut flip = [false; 3];
    for k in 0..3 {
        let i = (0..3).find(|&i| m[i][k] != 0.0).expect("permutation matrix");
        axis[k] = i;
        flip[k] = m[i][k] < 0.0;
    }
    let out_dims = [src_dims[axis[0]], src_dims[axis[1]], src_dims[axis[2]]];
    let per = h * w * d;
    let mut data = Vec::with_capacity(volume.data().len());
    for c in 0..volume.channels() {
        let src = volume.channel(c);
        for o0 in 0..out_dims[0] {
            for o1 in 0..out_dims[1] {
                for o2 in 0..out_dims[2] {
                    let mut s = [0usize; 3];
                    for (k, o) in [o0, o1, o2].into_iter().enumerate() {
                        s[axis[k]] = if flip[k] { out_dims[k] - 1 - o } else { o };
                    }
                    data.push(src[(s[0] * w + s[1]) * d + s[2]]);
                }
            }
        }
        debug_assert_eq!(data.len(), (c + 1) * per);
    }
    Volume3D::new_unbounded(volume.channels(), out_dims[0], out_dims[1], out_dims[2], data).expect("permuted shape")
}

fn ray_mean(ray: &[f32], length: f64) -> f32 {
    let sum: f64 = ray.iter().map(|&v| v as f64).sum();
    (sum / length).clamp(0.0, 1.0) as f32
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    rng.gen_range(-amount..=amount)
}

/// A chest-like template (body, two lungs, heart, spine) with per-sample
/// perturbations and one to three nodules at random lung locations.
pub fn random_phantom(rng: &mut ChaCha8Rng, grid: (usize, usize, usize)) -> Phantom {
    let scale = 1.0 + jitter(rng, 0.08);
    let shift = [jitter(rng, 0.03), jitter(rng, 0.03), jitter(rng, 0.03)];
    let yaw = jitter(rng, 8.0);
    let template = |center: [f64; 3], axes: [f64; 3], intensity: f64, rng: &mut ChaCha8Rng| Ellipsoid {
        center: [
            0.5 + (center[0] - 0.5) * scale + shift[0] + jitter(rng, 0.015),
            0.5 + (center[1] - 0.5) * scale + shift[1] + jitter(rng, 0.015),
            0.5 + (center[2] - 0.5) * scale + shift[2] + jitter(rng, 0.015),
        ],
        semi_axes: [
            axes[0] * scale * (1.0 + jitter(rng, 0.08)),
            axes[1] * scale * (1.0 + jitter(rng, 0.08)),
            axes[2] * scale * (1.0 + jitter(rng, 0.08)),
        ],
        rotation: [yaw, 0.0, 0.0],
        intensity: intensity + jitter(rng, 0.04),
    };
    let mut ellipsoids = vec![
        template([0.5, 0.5, 0.5], [0.44, 0.42, 0.32], 0.35, rng),
        template([0.45, 0.31, 0.48], [0.28, 0.12, 0.2], -0.25, rng),
        template([0.45, 0.69, 0.48], [0.28, 0.12, 0.2], -0.25, rng),
        template([0.6, 0.54, 0.4], [0.12, 0.1, 0.1], 0.3, rng),
        template([0.5, 0.5, 0.74], [0.4, 0.06, 0.06], 0.5, rng),
    ];
    let nodules = rng.gen_range(1..=3);
    for _ in 0..nodules {
        let side = if rng.gen_bool(0.5) { 0.31 } else { 0.69 };
        let r = rng.gen_range(0.06..0.1);
        ellipsoids.push(Ellipsoid {
            center: [
                rng.gen_range(0.3..0.62),
                side + jitter(rng, 0.05),
                rng.gen_range(0.36..0.62),
            ],
            semi_axes: [r, r * rng.gen_range(0.8..1.2), r * rng.gen_range(0.8..1.2)],
            rotation: [0.0, 0.0, 0.0],
            intensity: rng.gen_range(0.4..0.6),
        });
    }
    Phantom { ellipsoids, grid }
}

/// Per-sample RNG stream derived from the dataset seed and sample index.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One paired example: a CT-like volume and its DRRs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub volume: Volume3D,
    pub views: Vec<Projection2D>,
    pub geometries: Vec<ViewGeometry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub grid: (usize, usize, usize),
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples `range` as a new dataset (e.g. a held-out split).
    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            samples: self.samples[range].to_vec(),
            grid: self.grid,
            seed: self.seed,
        }
    }
}

/// Builds the phantom dataset in memory; identical to what
/// [`generate_dataset`] writes.
pub fn synthesize(
    n_samples: usize,
    grid: (usize, usize, usize),
    views: &[ViewGeometry],
    seed: u64,
) -> Result<Dataset> {
    synthesize_range(0..n_samples, grid, views, seed)
}

/// Samples with indices in `range`, so held-out sets can be drawn from the
/// same stream family without overlapping the training indices.
pub fn synthesize_range(
    range: std::ops::Range<usize>,
    grid: (usize, usize, usize),
    views: &[ViewGeometry],
    seed: u64,
) -> Result<Dataset> {
    if range.is_empty() {
        return Err(Error::EmptyInput("dataset needs at least one sample".into()));
    }
    if views.is_empty() {
        return Err(Error::EmptyInput("dataset needs at least one view".into()));
    }
    for g in views {
        g.validate()?;
    }
    let mut samples = Vec::with_capacity(range.len());
    for i in range {
        let mut rng = sample_rng(seed, i as u64);
        let volume = rasterize_phantom(&random_phantom(&mut rng, grid))?;
        let projections = views
            .iter()
            .map(|g| project(&volume, g))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            volume,
            views: projections,
            geometries: views.to_vec(),
        });
    }
    Ok(Dataset {
        samples,
        grid,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub path: String,
    pub azimuth: f64,
    pub elevation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub volume: String,
    pub views: Vec<ManifestView>,
}

/// `manifest.json`; paths are file stems relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestSample>,
    pub seed: u64,
    pub grid: [usize; 3],
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `n_samples` phantoms and their DRRs under `out` plus `manifest.json`.
pub fn generate_dataset(
    n_samples: usize,
    grid: (usize, usize, usize),
    views: &[ViewGeometry],
    seed: u64,
    out: &Path,
) -> Result<Manifest> {
    let dataset = synthesize(n_samples, grid, views, seed)?;
    write_dataset(&dataset, out)
}

pub fn write_dataset(dataset: &Dataset, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, sample) in dataset.samples.iter().enumerate() {
        let dir = format!("sample_{i:04}");
        let volume = format!("{dir}/volume");
        volgrid::write_volume(&out.join(&volume), &sample.volume)?;
        let mut views = Vec::with_capacity(sample.views.len());
        for (k, (view, g)) in sample.views.iter().zip(&sample.geometries).enumerate() {
            let path = format!("{dir}/view_{k}");
            volgrid::write_projection(&out.join(&path), view)?;
            views.push(ManifestView {
                path,
                azimuth: g.azimuth,
                elevation: g.elevation,
            });
        }
        entries.push(ManifestSample { volume, views });
    }
    let manifest = Manifest {
        samples: entries,
        seed: dataset.seed,
        grid: [dataset.grid.0, dataset.grid.1, dataset.grid.2],
    };
    io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads a dataset from a manifest file (or a directory containing one).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path: PathBuf = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let manifest: Manifest = io::read_json(&manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    if manifest.samples.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{}: manifest lists no samples",
            manifest_path.display()
        )));
    }
    let grid = (manifest.grid[0], manifest.grid[1], manifest.grid[2]);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let volume = volgrid::read_volume(&root.join(&entry.volume))?;
        if volume.spatial() != grid {
            return Err(Error::InvalidDimension(format!(
                "{}: volume dims {:?} differ from manifest grid {grid:?}",
                entry.volume,
                volume.spatial()
            )));
        }
        let mut views = Vec::with_capacity(entry.views.len());
        let mut geometries = Vec::with_capacity(entry.views.len());
        for v in &entry.views {
            let g = ViewGeometry::new(v.azimuth, v.elevation)?;
            views.push(volgrid::read_projection(&root.join(&v.path))?.with_label(g.label()));
            geometries.push(g);
        }
        samples.push(Sample {
            volume,
            views,
            geometries,
        });
    }
    Ok(Dataset {
        samples,
        grid,
        seed: manifest.seed,
    })
}
