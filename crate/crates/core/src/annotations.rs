//! Point annotations for head locations, dataset statistics, and synthetic
//! scene generation.
//!
//! An annotation set records one head position per person as real-valued
//! pixel coordinates. Coordinates use image convention: x grows rightward,
//! y grows downward, and a point is valid when `0 <= x < width` and
//! `0 <= y < height`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kdtree::KdTree2;
use crate::raster::{GrayImage, RasterError};

/// Bandwidths never collapse to zero even for duplicated annotation points.
const SIGMA_FLOOR: f64 = 1e-6;

/// Brute-force nearest neighbor up to this set size; k-d tree above.
const BRUTE_FORCE_MAX: usize = 256;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("annotation dimensions must be nonzero (got {width}x{height})")]
    EmptyDimensions { width: usize, height: usize },
    #[error("point {index} at ({x}, {y}) lies outside {width}x{height}")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("tau must be positive (got {0})")]
    BadTau(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid annotation JSON: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("scene of {width}x{height} cannot hold {n_points} points (mean spacing below 1 px)")]
    InfeasibleDensity {
        width: usize,
        height: usize,
        n_points: usize,
    },
    #[error("clustered layout needs at least one cluster")]
    NoClusters,
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("dataset statistics need at least one annotation set")]
    EmptyDataset,
}

/// A single head location in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// All head annotations for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    image_id: String,
    width: usize,
    height: usize,
    points: Vec<Point>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationSetRepr {
    image_id: String,
    width: usize,
    height: usize,
    points: Vec<[f64; 2]>,
}

impl AnnotationSet {
    pub fn new(
        image_id: impl Into<String>,
        width: usize,
        height: usize,
        points: Vec<Point>,
    ) -> Result<Self, AnnotationError> {
        if width == 0 || height == 0 {
            return Err(AnnotationError::EmptyDimensions { width, height });
        }
        for (index, p) in points.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(AnnotationError::NonFinite { index });
            }
            if p.x < 0.0 || p.x >= width as f64 || p.y < 0.0 || p.y >= height as f64 {
                return Err(AnnotationError::OutOfBounds {
                    index,
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            width,
            height,
            points,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Number of annotated people.
    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Load one annotation set from a JSON file.
pub fn load_annotations<P: AsRef<Path>>(path: P) -> Result<AnnotationSet, AnnotationError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| AnnotationError::Io {
        path: display.clone(),
        source,
    })?;
    let repr: AnnotationSetRepr = serde_json::from_reader(BufReader::new(file)).map_err(
        |source| AnnotationError::Parse {
            path: display.clone(),
            source,
        },
    )?;
    AnnotationSet::new(
        repr.image_id,
        repr.width,
        repr.height,
        repr.points.iter().map(|p| Point::new(p[0], p[1])).collect(),
    )
}

/// Write one annotation set as JSON.
pub fn save_annotations<P: AsRef<Path>>(
    set: &AnnotationSet,
    path: P,
) -> Result<(), AnnotationError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let wrap = |source| AnnotationError::Io {
        path: display.clone(),
        source,
    };
    let repr = AnnotationSetRepr {
        image_id: set.image_id.clone(),
        width: set.width,
        height: set.height,
        points: set.points.iter().map(|p| [p.x, p.y]).collect(),
    };
    let mut w = BufWriter::new(File::create(path).map_err(wrap)?);
    serde_json::to_writer_pretty(&mut w, &repr).map_err(|e| AnnotationError::Io {
        path: display.clone(),
        source: e.into(),
    })?;
    w.write_all(b"\n").map_err(wrap)?;
    w.flush().map_err(wrap)
}

/// Adaptive kernel bandwidth per point: the L2 distance to the nearest other
/// annotation, clamped from above by `tau`. A set with a single point gets
/// `tau` directly. Exact for every set size; the spatial index used for large
/// sets returns the same distances as a brute-force scan.
pub fn nn_bandwidths(ann: &AnnotationSet, tau: f64) -> Result<Vec<f64>, AnnotationError> {
    if !(tau > 0.0) {
        return Err(AnnotationError::BadTau(tau));
    }
    let pts = ann.points();
    let n = pts.len();
    let mut out = Vec::with_capacity(n);
    if n <= BRUTE_FORCE_MAX {
        for i in 0..n {
            let mut best = f64::INFINITY;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dx = pts[i].x - pts[j].x;
                let dy = pts[i].y - pts[j].y;
                let d2 = dx * dx + dy * dy;
                if d2 < best {
                    best = d2;
                }
            }
            out.push(clamp_sigma(best, tau));
        }
    } else {
        let coords: Vec<(f64, f64)> = pts.iter().map(|p| (p.x, p.y)).collect();
        let tree = KdTree2::build(&coords);
        for i in 0..n {
            let best = tree
                .nearest_excluding(coords[i], i)
                .unwrap_or(f64::INFINITY);
            out.push(clamp_sigma(best, tau));
        }
    }
    Ok(out)
}

fn clamp_sigma(best_dist2: f64, tau: f64) -> f64 {
    if best_dist2.is_finite() {
        best_dist2.sqrt().min(tau).max(SIGMA_FLOOR)
    } else {
        tau
    }
}

/// Point placement for synthetic scenes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Uniform,
    Clustered { n_clusters: usize, spread: f64 },
}

/// Everything needed to generate one synthetic scene deterministically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub n_points: usize,
    pub layout: Layout,
    /// Radius of the rendered head blob, in pixels.
    pub blob_sigma: f64,
    /// Peak gray value added per head blob.
    pub blob_amplitude: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn uniform(image_id: impl Into<String>, width: usize, height: usize, n_points: usize, seed: u64) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            n_points,
            layout: Layout::Uniform,
            blob_sigma: 3.0,
            blob_amplitude: 200.0,
            seed,
        }
    }
}

/// Generate a synthetic crowd scene: head blobs on a dark background plus
/// the matching annotation set. Bit-identical for a fixed spec.
pub fn gen_synthetic_scene(spec: &SceneSpec) -> Result<(GrayImage, AnnotationSet), AnnotationError> {
    if spec.width == 0 || spec.height == 0 {
        return Err(AnnotationError::EmptyDimensions {
            width: spec.width,
            height: spec.height,
        });
    }
    if spec.n_points > spec.width * spec.height {
        return Err(AnnotationError::InfeasibleDensity {
            width: spec.width,
            height: spec.height,
            n_points: spec.n_points,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w = spec.width as f64;
    let h = spec.height as f64;
    let mut points = Vec::with_capacity(spec.n_points);
    match &spec.layout {
        Layout::Uniform => {
            for _ in 0..spec.n_points {
                points.push(Point::new(rng.gen_range(0.0..w), rng.gen_range(0.0..h)));
            }
        }
        Layout::Clustered { n_clusters, spread } => {
            if *n_clusters == 0 {
                return Err(AnnotationError::NoClusters);
            }
            let centers: Vec<(f64, f64)> = (0..*n_clusters)
                .map(|_| (rng.gen_range(0.0..w), rng.gen_range(0.0..h)))
                .collect();
            let normal = Normal::new(0.0, spread.max(f64::MIN_POSITIVE)).expect("finite spread");
            for _ in 0..spec.n_points {
                let (cx, cy) = centers[rng.gen_range(0..centers.len())];
                let mut placed = None;
                for _ in 0..64 {
                    let x = cx + normal.sample(&mut rng);
                    let y = cy + normal.sample(&mut rng);
                    if x >= 0.0 && x < w && y >= 0.0 && y < h {
                        placed = Some(Point::new(x, y));
                        break;
                    }
                }
                // pathological spreads: fall back to clamping into the frame
                points.push(placed.unwrap_or_else(|| {
                    let x = cx.clamp(0.0, w - 0.5);
                    let y = cy.clamp(0.0, h - 0.5);
                    Point::new(x, y)
                }));
            }
        }
    }

    let mut accum = vec![0.0f64; spec.width * spec.height];
    let radius = 4.0 * spec.blob_sigma;
    let inv_two_sigma2 = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
    for p in &points {
        let x_lo = ((p.x - radius - 0.5).ceil().max(0.0)) as usize;
        let x_hi = ((p.x + radius - 0.5).floor()).min(w - 1.0).max(0.0) as usize;
        let y_lo = ((p.y - radius - 0.5).ceil().max(0.0)) as usize;
        let y_hi = ((p.y + radius - 0.5).floor()).min(h - 1.0).max(0.0) as usize;
        for py in y_lo..=y_hi {
            let dy = (py as f64 + 0.5) - p.y;
            for px in x_lo..=x_hi {
                let dx = (px as f64 + 0.5) - p.x;
                let r2 = dx * dx + dy * dy;
                if r2 <= radius * radius {
                    accum[py * spec.width + px] += spec.blob_amplitude * (-r2 * inv_two_sigma2).exp();
                }
            }
        }
    }
    let pixels: Vec<u8> = accum
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let image = GrayImage::from_pixels(spec.width, spec.height, pixels)?;
    let ann = AnnotationSet::new(spec.image_id.clone(), spec.width, spec.height, points)?;
    Ok((image, ann))
}

/// Aggregate statistics over a set of annotated images.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsReport {
    pub n_images: usize,
    pub n_annotations: usize,
    pub min_count: usize,
    pub max_count: usize,
    pub mean_count: f64,
    pub median_count: f64,
    pub mean_width: f64,
    pub mean_height: f64,
    /// Mean over images of count / (width * height).
    pub mean_density: f64,
}

/// Compute dataset statistics over one or more annotation sets.
pub fn dataset_stats(sets: &[AnnotationSet]) -> Result<StatsReport, AnnotationError> {
    if sets.is_empty() {
        return Err(AnnotationError::EmptyDataset);
    }
    let mut counts: Vec<usize> = sets.iter().map(|s| s.count()).collect();
    counts.sort_unstable();
    let n = counts.len();
    let median_count = if n % 2 == 1 {
        counts[n / 2] as f64
    } else {
        (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0
    };
    let n_annotations: usize = counts.iter().sum();
    let mean_density = sets
        .iter()
        .map(|s| s.count() as f64 / (s.width() as f64 * s.height() as f64))
        .sum::<f64>()
        / n as f64;
    Ok(StatsReport {
        n_images: n,
        n_annotations,
        min_count: counts[0],
        max_count: counts[n - 1],
        mean_count: n_annotations as f64 / n as f64,
        median_count,
        mean_width: sets.iter().map(|s| s.width() as f64).sum::<f64>() / n as f64,
        mean_height: sets.iter().map(|s| s.height() as f64).sum::<f64>() / n as f64,
        mean_density,
    })
}
