//! Volumetric data types and the repeat-and-concatenate preprocessing.
//!
//! A 2D view `C×H×W` is stretched into a `C×H×W×D` volume by repeating it
//! along depth, optionally aligned, and the repeated views are stacked along
//! the channel axis into an `N·C×H×W×D` composite that the mapping network
//! consumes. Memory layout is row-major with depth innermost, so voxel
//! `(c, h, w, d)` lives at `((c·H + h)·W + w)·D + d`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::projector;

/// Which way a projection was acquired.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewLabel {
    Frontal,
    Lateral,
    /// Azimuth in degrees.
    Oblique(f64),
}

impl ViewLabel {
    /// Label for a view acquired at the given angles.
    pub fn from_angles(azimuth: f64, elevation: f64) -> Self {
        if elevation == 0.0 && azimuth == 0.0 {
            ViewLabel::Frontal
        } else if elevation == 0.0 && azimuth == 90.0 {
            ViewLabel::Lateral
        } else {
            ViewLabel::Oblique(azimuth)
        }
    }

    pub fn azimuth(&self) -> f64 {
        match self {
            ViewLabel::Frontal => 0.0,
            ViewLabel::Lateral => 90.0,
            ViewLabel::Oblique(a) => *a,
        }
    }

    /// True when the view is 90° (or 270°) away from the frontal reference.
    pub fn is_perpendicular(&self) -> bool {
        let a = self.azimuth().rem_euclid(180.0);
        a == 90.0
    }
}

fn check_intensities(data: &[f32], what: &str) -> Result<()> {
    if let Some((i, v)) = data
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::InvalidValue(format!(
            "{what} intensity {v} at index {i} outside [0,1]"
        )));
    }
    Ok(())
}

/// A single 2D view (DRR), `C×H×W`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    view_label: ViewLabel,
}

impl Projection2D {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        view_label: ViewLabel,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidDimension(format!(
                "projection dims {channels}×{height}×{width} must be positive"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidDimension(format!(
                "projection data length {} != {channels}·{height}·{width}",
                data.len()
            )));
        }
        check_intensities(&data, "projection")?;
        Ok(Self {
            channels,
            height,
            width,
            data,
            view_label,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn view_label(&self) -> ViewLabel {
        self.view_label
    }

    pub fn with_label(mut self, label: ViewLabel) -> Self {
        self.view_label = label;
        self
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(c, h, w)]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// A `C×H×W×D` scalar field, row-major with depth innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    channels: usize,
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f32>,
}

impl Volume3D {
    /// Builds a volume, checking the length and that every intensity is in [0,1].
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        depth: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        check_intensities(&data, "volume")?;
        Self::new_unbounded(channels, height, width, depth, data)
    }

    /// Like [`Volume3D::new`] but without the intensity range check. Used for
    /// Gaussian noise blocks and signed attribution fields.
    pub fn new_unbounded(
        channels: usize,
        height: usize,
        width: usize,
        depth: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || depth == 0 {
            return Err(Error::InvalidDimension(format!(
                "volume dims {channels}×{height}×{width}×{depth} must be positive"
            )));
        }
        if data.len() != channels * height * width * depth {
            return Err(Error::InvalidDimension(format!(
                "volume data length {} != {channels}·{height}·{width}·{depth}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericInput(format!("non-finite voxel {v}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            depth,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, depth: usize) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            depth,
            vec![0.0; channels * height * width * depth],
        )
    }

    pub fn filled(
        channels: usize,
        height: usize,
        width: usize,
        depth: usize,
        value: f32,
    ) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            depth,
            vec![value; channels * height * width * depth],
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn depth(&self) -> usize {
        self.depth
    }
    /// `(H, W, D)`.
    pub fn spatial(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.depth)
    }
    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.height, self.width, self.depth]
    }
    pub fn voxels_per_channel(&self) -> usize {
        self.height * self.width * self.depth
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize, d: usize) -> usize {
        ((c * self.height + h) * self.width + w) * self.depth + d
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize, d: usize) -> f32 {
        self.data[self.index(c, h, w, d)]
    }

    /// The data of channel `c` as a contiguous slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels_per_channel();
        &self.data[c * n..(c + 1) * n]
    }

    /// Channels `[start, start + count)` as a new volume.
    pub fn channel_block(&self, start: usize, count: usize) -> Result<Volume3D> {
        if count == 0 || start + count > self.channels {
            return Err(Error::InvalidDimension(format!(
                "channel block {start}..{} out of range for {} channels",
                start + count,
                self.channels
            )));
        }
        let n = self.voxels_per_channel();
        Volume3D::new_unbounded(
            count,
            self.height,
            self.width,
            self.depth,
            self.data[start * n..(start + count) * n].to_vec(),
        )
    }

    /// Depth slice `d` of channel `c`, as `H×W` row-major.
    pub fn slice(&self, c: usize, d: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for h in 0..self.height {
            for w in 0..self.width {
                out.push(self.get(c, h, w, d));
            }
        }
        out
    }
}

/// How views are aligned before concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    None,
    TransposePerpendicular,
    Rotate3d,
}

impl std::str::FromStr for Alignment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Alignment::None),
            "transpose" | "transpose_perpendicular" => Ok(Alignment::TransposePerpendicular),
            "rotate3d" => Ok(Alignment::Rotate3d),
            other => Err(Error::Usage(format!(
                "unknown alignment '{other}' (expected none, transpose_perpendicular, rotate3d)"
            ))),
        }
    }
}

/// The alignment that was actually applied to one view of a composite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentApplied {
    None,
    Transpose,
    Rotate3d { azimuth: f64, elevation: f64 },
}

/// `N` repeated views stacked along channels: `N·C×H×W×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeVolume {
    n_views: usize,
    base: Volume3D,
    provenance: Vec<(ViewLabel, AlignmentApplied)>,
}

impl CompositeVolume {
    pub fn n_views(&self) -> usize {
        self.n_views
    }
    pub fn base(&self) -> &Volume3D {
        &self.base
    }
    pub fn into_base(self) -> Volume3D {
        self.base
    }
    pub fn provenance(&self) -> &[(ViewLabel, AlignmentApplied)] {
        &self.provenance
    }
    /// Channels contributed by each view.
    pub fn view_channels(&self) -> usize {
        self.base.channels / self.n_views
    }
    /// The channel block contributed by view `i`.
    pub fn view_block(&self, i: usize) -> Result<Volume3D> {
        let c = self.view_channels();
        self.base.channel_block(i * c, c)
    }

    pub(crate) fn from_parts(
        base: Volume3D,
        provenance: Vec<(ViewLabel, AlignmentApplied)>,
    ) -> Result<Self> {
        let n_views = provenance.len();
        if n_views == 0 || base.channels % n_views != 0 {
            return Err(Error::InvalidDimension(format!(
                "{} channels cannot be split into {n_views} views",
                base.channels
            )));
        }
        Ok(Self {
            n_views,
            base,
            provenance,
        })
    }
}

/// Repeats a view `depth` times along the depth axis.
pub fn repeat(view: &Projection2D, depth: usize) -> Result<Volume3D> {
    if depth == 0 {
        return Err(Error::InvalidDimension("repeat depth must be ≥ 1".into()));
    }
    let mut data = Vec::with_capacity(view.data.len() * depth);
    for &v in &view.data {
        data.extend(std::iter::repeat(v).take(depth));
    }
    Volume3D::new_unbounded(view.channels, view.height, view.width, depth, data)
}

/// Recovers the view from a volume whose depth slices are all identical. The
/// result is labelled frontal; use [`Projection2D::with_label`] to relabel.
pub fn inverse_repeat(volume: &Volume3D) -> Result<Projection2D> {
    let depth = volume.depth;
    let mut data = Vec::with_capacity(volume.data.len() / depth);
    for (i, column) in volume.data.chunks_exact(depth).enumerate() {
        let first = column[0];
        if let Some(k) = column.iter().position(|v| v.to_bits() != first.to_bits()) {
            return Err(Error::NotARepetition { slice: k, index: i });
        }
        data.push(first);
    }
    Projection2D::new(
        volume.channels,
        volume.height,
        volume.width,
        data,
        ViewLabel::Frontal,
    )
}

/// Swaps the width and depth axes: `out[c,h,w,d] = in[c,h,d,w]`.
pub fn transpose_perpendicular(volume: &Volume3D) -> Result<Volume3D> {
    let (c, h, w, d) = (volume.channels, volume.height, volume.width, volume.depth);
    if w != d {
        return Err(Error::InvalidDimension(format!(
            "transpose needs width == depth, got {w} and {d}"
        )));
    }
    let mut out = vec![0.0f32; volume.data.len()];
    for ci in 0..c {
        for hi in 0..h {
            let base = (ci * h + hi) * w * d;
            for wi in 0..w {
                for di in 0..d {
                    out[base + wi * d + di] = volume.data[base + di * d + wi];
                }
            }
        }
    }
    Volume3D::new_unbounded(c, h, d, w, out)
}

/// Concatenates volumes along the channel axis, one provenance entry each.
pub fn concatenate(volumes: &[Volume3D]) -> Result<CompositeVolume> {
    let provenance = vec![(ViewLabel::Frontal, AlignmentApplied::None); volumes.len()];
    concatenate_with(volumes, provenance)
}

fn concatenate_with(
    volumes: &[Volume3D],
    provenance: Vec<(ViewLabel, AlignmentApplied)>,
) -> Result<CompositeVolume> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::EmptyInput("concatenate needs at least one volume".into()))?;
    let channels = first.channels;
    for v in volumes {
        if v.spatial() != first.spatial() {
            return Err(Error::InvalidDimension(format!(
                "spatial dims {:?} differ from {:?}",
                v.spatial(),
                first.spatial()
            )));
        }
        if v.channels != channels {
            return Err(Error::InvalidDimension(format!(
                "view channel count {} differs from {channels}",
                v.channels
            )));
        }
    }
    let mut data = Vec::with_capacity(first.data.len() * volumes.len());
    for v in volumes {
        data.extend_from_slice(&v.data);
    }
    let base = Volume3D::new_unbounded(
        channels * volumes.len(),
        first.height,
        first.width,
        first.depth,
        data,
    )?;
    CompositeVolume::from_parts(base, provenance)
}

/// Repeats, aligns and concatenates a list of views into the network input.
pub fn build_composite(
    views: &[Projection2D],
    depth: usize,
    alignment: Alignment,
) -> Result<CompositeVolume> {
    if views.is_empty() {
        return Err(Error::EmptyInput("build_composite needs at least one view".into()));
    }
    let mut volumes = Vec::with_capacity(views.len());
    let mut provenance = Vec::with_capacity(views.len());
    for view in views {
        let repeated = repeat(view, depth)?;
        let label = view.view_label;
        let (aligned, applied) = match alignment {
            Alignment::None => (repeated, AlignmentApplied::None),
            Alignment::TransposePerpendicular if label.is_perpendicular() => {
                (transpose_perpendicular(&repeated)?, AlignmentApplied::Transpose)
            }
            Alignment::TransposePerpendicular => (repeated, AlignmentApplied::None),
            Alignment::Rotate3d => {
                let azimuth = label.azimuth();
                let rotated = projector::rotate3d_inverse(&repeated, azimuth, 0.0);
                (
                    rotated,
                    AlignmentApplied::Rotate3d {
                        azimuth,
                        elevation: 0.0,
                    },
                )
            }
        };
        volumes.push(aligned);
        provenance.push((label, applied));
    }
    concatenate_with(&volumes, provenance)
}

// On-disk format: `<stem>.raw` holds little-endian f32 in memory order,
// `<stem>.json` the sidecar below.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_label: Option<ViewLabel>,
}

/// `(raw path, sidecar path)` for a stem such as `out/sample_0000/volume`.
pub fn file_pair(stem: &Path) -> (PathBuf, PathBuf) {
    let with_ext = |ext: &str| {
        let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".");
        name.push(ext);
        stem.with_file_name(name)
    };
    (with_ext("raw"), with_ext("json"))
}

fn strip_known_ext(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("raw") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

pub fn write_volume(stem: &Path, volume: &Volume3D) -> Result<()> {
    let (raw, json) = file_pair(stem);
    io::write_atomic(&raw, &io::f32_to_le_bytes(&volume.data))?;
    io::write_json(
        &json,
        &Sidecar {
            channels: volume.channels,
            height: volume.height,
            width: volume.width,
            depth: Some(volume.depth),
            view_label: None,
        },
    )
}

/// Reads a volume; `path` may be the stem or either file of the pair.
pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let (raw, json) = file_pair(&strip_known_ext(path));
    let side: Sidecar = io::read_json(&json)?;
    let depth = side
        .depth
        .ok_or_else(|| Error::InvalidDimension(format!("{}: sidecar has no depth", json.display())))?;
    let data = io::f32_from_le_bytes(&io::read_bytes(&raw)?, &raw)?;
    Volume3D::new_unbounded(side.channels, side.height, side.width, depth, data)
}

pub fn write_projection(stem: &Path, view: &Projection2D) -> Result<()> {
    let (raw, json) = file_pair(stem);
    io::write_atomic(&raw, &io::f32_to_le_bytes(&view.data))?;
    io::write_json(
        &json,
        &Sidecar {
            channels: view.channels,
            height: view.height,
            width: view.width,
            depth: None,
            view_label: Some(view.view_label),
        },
    )
}

pub fn read_projection(path: &Path) -> Result<Projection2D> {
    let (raw, json) = file_pair(&strip_known_ext(path));
    let side: Sidecar = io::read_json(&json)?;
    let data = io::f32_from_le_bytes(&io::read_bytes(&raw)?, &raw)?;
    Projection2D::new(
        side.channels,
        side.height,
        side.width,
        data,
        side.view_label.unwrap_or(ViewLabel::Frontal),
    )
}
