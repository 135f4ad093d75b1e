//! Multi-level density map ground truth.
//!
//! A density map discretizes a sum of isotropic Gaussian kernels, one per
//! annotated head. The kernel bandwidth for a head is its nearest-neighbor
//! distance clamped at `tau`, sharpened per level: at level `k` the bandwidth
//! becomes `sigma^(1/k)`, so higher levels concentrate mass toward the head
//! pixel. The limiting level `inf` is a localization map holding a unit
//! impulse at each head's rounded pixel; coinciding heads accumulate, so the
//! map total always equals the head count.
//!
//! Rendering evaluates kernels at pixel centers `(px + 0.5, py + 0.5)`,
//! truncates at `truncation_radius_sigmas * bandwidth`, and by default
//! renormalizes each kernel so its discrete in-image sum is exactly one
//! (mass conservation: map total equals head count). The alternative
//! literal mode applies the `1 / (sqrt(2*pi) * bandwidth)` prefactor with
//! no renormalization, so border truncation and discretization leak mass.

use std::cmp::Ordering;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::annotations::{nn_bandwidths, AnnotationError, AnnotationSet};

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("level must be >= 1 (got {0})")]
    BadLevel(f64),
    #[error("sigma must be positive (got {0})")]
    BadSigma(f64),
    #[error("kernel policy: tau must be positive (got {0})")]
    BadTau(f64),
    #[error("kernel policy: truncation radius must be >= 3 sigmas (got {0})")]
    BadTruncation(f64),
    #[error("render_density needs a finite level; use render_localization for level inf")]
    InfLevel,
    #[error("map dimensions must be nonzero (got {width}x{height})")]
    EmptyDimensions { width: usize, height: usize },
    #[error("grid {grid_w}x{grid_h} does not match annotation dimensions {ann_w}x{ann_h}")]
    GridMismatch {
        grid_w: usize,
        grid_h: usize,
        ann_w: usize,
        ann_h: usize,
    },
    #[error("downsample factor {factor} does not divide {width}x{height}")]
    BadDownsample {
        factor: usize,
        width: usize,
        height: usize,
    },
    #[error("target stack needs at least one level")]
    NoLevels,
    #[error("stack levels must be strictly increasing")]
    UnorderedLevels,
    #[error("stack maps must share dimensions")]
    MixedDimensions,
    #[error("value buffer holds {got} values, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid density raster: {reason}")]
    Format { path: String, reason: String },
}

/// Sharpening level of a density map. Finite levels are real numbers >= 1;
/// `Inf` denotes the localization map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Level {
    Finite(f64),
    Inf,
}

impl Level {
    pub fn finite(k: f64) -> Result<Self, DensityError> {
        if k.is_finite() && k >= 1.0 {
            Ok(Level::Finite(k))
        } else {
            Err(DensityError::BadLevel(k))
        }
    }

    pub fn is_inf(&self) -> bool {
        matches!(self, Level::Inf)
    }

    /// Stable integer code: `round(k * 1000)` for finite levels, `u32::MAX`
    /// for `inf`. Used by the density raster file format.
    pub fn code(&self) -> u32 {
        match self {
            Level::Finite(k) => (k * 1000.0).round() as u32,
            Level::Inf => u32::MAX,
        }
    }

    pub fn from_code(code: u32) -> Result<Self, DensityError> {
        if code == u32::MAX {
            Ok(Level::Inf)
        } else {
            Level::finite(code as f64 / 1000.0)
        }
    }

    /// Short label for file names: `k1`, `k2`, `k1.5`, `kinf`.
    pub fn label(&self) -> String {
        format!("k{self}")
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Finite(k) if k.fract() == 0.0 => write!(f, "{}", *k as i64),
            Level::Finite(k) => write!(f, "{k}"),
            Level::Inf => write!(f, "inf"),
        }
    }
}

impl PartialOrd for Level {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Level::Inf, Level::Inf) => Some(Ordering::Equal),
            (Level::Inf, Level::Finite(_)) => Some(Ordering::Greater),
            (Level::Finite(_), Level::Inf) => Some(Ordering::Less),
            (Level::Finite(a), Level::Finite(b)) => a.partial_cmp(b),
        }
    }
}

impl Serialize for Level {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Level::Finite(k) => serializer.serialize_f64(*k),
            Level::Inf => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Level {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Num(k) => Level::finite(k).map_err(D::Error::custom),
            Repr::Text(s) if s.eq_ignore_ascii_case("inf") => Ok(Level::Inf),
            Repr::Text(s) => s
                .parse::<f64>()
                .map_err(D::Error::custom)
                .and_then(|k| Level::finite(k).map_err(D::Error::custom)),
        }
    }
}

/// Kernel bandwidth after level sharpening.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Gaussian(f64),
    /// Unit impulse at the rounded pixel.
    Dirac,
}

/// Bandwidth at a sharpening level: `sigma^(1/k)` for finite `k`, a Dirac
/// impulse for level `inf`.
pub fn bandwidth_at_level(sigma: f64, level: Level) -> Result<Bandwidth, DensityError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(DensityError::BadSigma(sigma));
    }
    match level {
        Level::Finite(k) if k >= 1.0 => Ok(Bandwidth::Gaussian(sigma.powf(1.0 / k))),
        Level::Finite(k) => Err(DensityError::BadLevel(k)),
        Level::Inf => Ok(Bandwidth::Dirac),
    }
}

/// How kernels are sized, truncated, and normalized.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelPolicy {
    /// Upper clamp on nearest-neighbor bandwidths, in pixels.
    pub tau: f64,
    pub level: Level,
    /// Rescale each kernel so its discrete in-image sum is exactly one.
    pub normalize_per_kernel: bool,
    /// Kernel support radius in units of the level bandwidth.
    pub truncation_radius_sigmas: f64,
}

impl KernelPolicy {
    pub fn new(tau: f64, level: Level) -> Self {
        Self {
            tau,
            level,
            normalize_per_kernel: true,
            truncation_radius_sigmas: 4.0,
        }
    }

    pub fn validate(&self) -> Result<(), DensityError> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(DensityError::BadTau(self.tau));
        }
        if !(self.truncation_radius_sigmas >= 3.0) {
            return Err(DensityError::BadTruncation(self.truncation_radius_sigmas));
        }
        if let Level::Finite(k) = self.level {
            if !(k >= 1.0) || !k.is_finite() {
                return Err(DensityError::BadLevel(k));
            }
        }
        Ok(())
    }
}

impl Default for KernelPolicy {
    fn default() -> Self {
        KernelPolicy::new(15.0, Level::Finite(1.0))
    }
}

/// A single-level density map over a pixel grid, row-major, 64-bit values.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    width: usize,
    height: usize,
    level: Level,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(width: usize, height: usize, level: Level) -> Result<Self, DensityError> {
        if width == 0 || height == 0 {
            return Err(DensityError::EmptyDimensions { width, height });
        }
        Ok(Self {
            width,
            height,
            level,
            values: vec![0.0; width * height],
        })
    }

    pub fn from_values(
        width: usize,
        height: usize,
        level: Level,
        values: Vec<f64>,
    ) -> Result<Self, DensityError> {
        if width == 0 || height == 0 {
            return Err(DensityError::EmptyDimensions { width, height });
        }
        if values.len() != width * height {
            return Err(DensityError::BufferSize {
                expected: width * height,
                got: values.len(),
            });
        }
        Ok(Self {
            width,
            height,
            level,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Total mass of the map.
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Total mass with negative values clamped to zero; used when a map sum
    /// stands in for a count.
    pub fn clamped_sum(&self) -> f64 {
        self.values.iter().map(|v| v.max(0.0)).sum()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mass-preserving block-sum downsample by an integer factor.
    pub fn block_downsample(&self, factor: usize) -> Result<DensityMap, DensityError> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(DensityError::BadDownsample {
                factor,
                width: self.width,
                height: self.height,
            });
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let ow = self.width / factor;
        let oh = self.height / factor;
        let mut out = DensityMap::zeros(ow, oh, self.level)?;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for iy in oy * factor..(oy + 1) * factor {
                    for ix in ox * factor..(ox + 1) * factor {
                        acc += self.values[iy * self.width + ix];
                    }
                }
                out.values[oy * ow + ox] = acc;
            }
        }
        Ok(out)
    }
}

/// Density maps of one image or patch at every configured level, plus the
/// scalar head count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityStack {
    maps: Vec<DensityMap>,
    count: f64,
}

impl DensityStack {
    /// Levels must be strictly increasing and all maps must share dimensions.
    pub fn new(maps: Vec<DensityMap>, count: f64) -> Result<Self, DensityError> {
        if maps.is_empty() {
            return Err(DensityError::NoLevels);
        }
        for pair in maps.windows(2) {
            if pair[0].level().partial_cmp(&pair[1].level()) != Some(Ordering::Less) {
                return Err(DensityError::UnorderedLevels);
            }
            if pair[0].width() != pair[1].width() || pair[0].height() != pair[1].height() {
                return Err(DensityError::MixedDimensions);
            }
        }
        Ok(Self { maps, count })
    }

    pub fn maps(&self) -> &[DensityMap] {
        &self.maps
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn levels(&self) -> Vec<Level> {
        self.maps.iter().map(|m| m.level()).collect()
    }
}

/// Render the density map of an annotation set at a finite level.
pub fn render_density(ann: &AnnotationSet, policy: &KernelPolicy) -> Result<DensityMap, DensityError> {
    policy.validate()?;
    let k = match policy.level {
        Level::Finite(k) => k,
        Level::Inf => return Err(DensityError::InfLevel),
    };
    let mut map = DensityMap::zeros(ann.width(), ann.height(), policy.level)?;
    if ann.count() == 0 {
        return Ok(map);
    }
    let sigmas = nn_bandwidths(ann, policy.tau)?;
    let w = map.width;
    let h = map.height;
    let mut support: Vec<(usize, f64)> = Vec::new();
    for (p, &sigma) in ann.points().iter().zip(&sigmas) {
        let b = match bandwidth_at_level(sigma, Level::Finite(k))? {
            Bandwidth::Gaussian(b) => b,
            Bandwidth::Dirac => unreachable!("finite level"),
        };
        let radius = policy.truncation_radius_sigmas * b;
        let inv_two_b2 = 1.0 / (2.0 * b * b);
        // pixel centers inside [c - radius, c + radius] per axis
        let x_lo = ((p.x - radius - 0.5).ceil().max(0.0)) as usize;
        let x_hi = ((p.x + radius - 0.5).floor().min((w - 1) as f64).max(0.0)) as usize;
        let y_lo = ((p.y - radius - 0.5).ceil().max(0.0)) as usize;
        let y_hi = ((p.y + radius - 0.5).floor().min((h - 1) as f64).max(0.0)) as usize;
        support.clear();
        let mut total = 0.0f64;
        for py in y_lo..=y_hi {
            let dy = (py as f64 + 0.5) - p.y;
            for px in x_lo..=x_hi {
                let dx = (px as f64 + 0.5) - p.x;
                let r2 = dx * dx + dy * dy;
                if r2 <= radius * radius {
                    let v = (-r2 * inv_two_b2).exp();
                    support.push((py * w + px, v));
                    total += v;
                }
            }
        }
        if policy.normalize_per_kernel {
            if total > 0.0 {
                for &(i, v) in &support {
                    map.values[i] += v / total;
                }
            } else {
                // kernel narrower than half a pixel: keep its unit mass on
                // the nearest pixel center
                let px = nearest_pixel(p.x, w);
                let py = nearest_pixel(p.y, h);
                map.values[py * w + px] += 1.0;
            }
        } else {
            let prefactor = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * b);
            for &(i, v) in &support {
                map.values[i] += prefactor * v;
            }
        }
    }
    Ok(map)
}

/// Pixel whose center is nearest to coordinate `c`, clamped into the grid.
fn nearest_pixel(c: f64, extent: usize) -> usize {
    ((c - 0.5).round().max(0.0) as usize).min(extent - 1)
}

/// Render the localization map: one unit impulse per head at its rounded
/// pixel. Heads rounding to the same pixel accumulate, so the map total is
/// always the head count.
pub fn render_localization(
    ann: &AnnotationSet,
    grid_w: usize,
    grid_h: usize,
) -> Result<DensityMap, DensityError> {
    if grid_w != ann.width() || grid_h != ann.height() {
        return Err(DensityError::GridMismatch {
            grid_w,
            grid_h,
            ann_w: ann.width(),
            ann_h: ann.height(),
        });
    }
    let mut map = DensityMap::zeros(grid_w, grid_h, Level::Inf)?;
    for p in ann.points() {
        let px = (p.x.round() as usize).min(grid_w - 1);
        let py = (p.y.round() as usize).min(grid_h - 1);
        map.values[py * grid_w + px] += 1.0;
    }
    Ok(map)
}

/// Build the ground-truth stack for one annotation set: every level rendered
/// at full resolution, then block-sum downsampled by `downsample`.
pub fn build_target_stack(
    ann: &AnnotationSet,
    levels: &[Level],
    policy: &KernelPolicy,
    downsample: usize,
) -> Result<DensityStack, DensityError> {
    if levels.is_empty() {
        return Err(DensityError::NoLevels);
    }
    if downsample == 0 || ann.width() % downsample != 0 || ann.height() % downsample != 0 {
        return Err(DensityError::BadDownsample {
            factor: downsample,
            width: ann.width(),
            height: ann.height(),
        });
    }
    let mut maps = Vec::with_capacity(levels.len());
    for &level in levels {
        let full = match level {
            Level::Finite(_) => {
                let mut p = policy.clone();
                p.level = level;
                render_density(ann, &p)?
            }
            Level::Inf => render_localization(ann, ann.width(), ann.height())?,
        };
        maps.push(full.block_downsample(downsample)?);
    }
    DensityStack::new(maps, ann.count() as f64)
}

const QDM_MAGIC: &[u8; 4] = b"QDM1";

/// Write a density map raster: magic `QDM1`, little-endian u32 width, height
/// and level code, then row-major little-endian f32 values.
pub fn write_qdm<P: AsRef<Path>>(map: &DensityMap, path: P) -> Result<(), DensityError> {
    let path = path.as_ref();
    let wrap = |source| DensityError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(wrap)?);
    w.write_all(QDM_MAGIC).map_err(wrap)?;
    w.write_all(&(map.width as u32).to_le_bytes()).map_err(wrap)?;
    w.write_all(&(map.height as u32).to_le_bytes()).map_err(wrap)?;
    w.write_all(&map.level.code().to_le_bytes()).map_err(wrap)?;
    for &v in &map.values {
        w.write_all(&(v as f32).to_le_bytes()).map_err(wrap)?;
    }
    w.flush().map_err(wrap)
}

/// Read a density map raster written by [`write_qdm`].
pub fn read_qdm<P: AsRef<Path>>(path: P) -> Result<DensityMap, DensityError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let wrap_io = |source| DensityError::Io {
        path: display.clone(),
        source,
    };
    let fail = |reason: &str| DensityError::Format {
        path: display.clone(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(wrap_io)?)
        .read_to_end(&mut bytes)
        .map_err(wrap_io)?;
    if bytes.len() < 16 || &bytes[0..4] != QDM_MAGIC {
        return Err(fail("missing QDM1 magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let width = u32_at(4) as usize;
    let height = u32_at(8) as usize;
    let level = Level::from_code(u32_at(12))?;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail("dimensions overflow"))?;
    if bytes.len() != 16 + expected {
        return Err(fail("value payload size mismatch"));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    DensityMap::from_values(width, height, level, values)
}
