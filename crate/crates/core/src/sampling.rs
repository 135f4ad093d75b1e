//! Training patch sampling and test-time tiling.
//!
//! Training draws square patches whose sizes cycle through a configured list.
//! Patch centers are biased toward crowded regions: the probability of an
//! origin is proportional to the number of annotations strictly inside its
//! window plus a constant floor of 1, so empty regions still get sampled.
//! Images smaller than a requested patch are zero-padded.
//!
//! Test-time evaluation tiles the zero-padded image into fixed-size cells on
//! a half-open grid, so every annotation belongs to exactly one cell, and the
//! per-cell counts sum to the image count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::annotations::{AnnotationError, AnnotationSet, Point};
use crate::raster::{GrayImage, RasterError};

/// Constant weight floor added to every candidate origin.
const ORIGIN_WEIGHT_FLOOR: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("patch size list is empty")]
    EmptySizes,
    #[error("patch size must be nonzero")]
    ZeroSize,
    #[error("cell size must be nonzero")]
    ZeroCell,
    #[error("annotations are {ann_w}x{ann_h} but the image is {img_w}x{img_h}")]
    DimensionMismatch {
        ann_w: usize,
        ann_h: usize,
        img_w: usize,
        img_h: usize,
    },
    #[error("cell index {index} out of range ({cells} cells)")]
    CellIndex { index: usize, cells: usize },
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// One training patch: pixels plus the annotations falling strictly inside
/// it, re-origined to patch coordinates.
#[derive(Clone, Debug)]
pub struct Patch {
    pub image_id: String,
    pub origin: (usize, usize),
    pub size: usize,
    pub pixels: GrayImage,
    pub annotations: AnnotationSet,
}

/// Inclusive origin range along one axis whose windows of extent `size`
/// strictly contain coordinate `c`, clamped to the padded extent.
fn origin_span(c: f64, size: usize, padded: usize) -> Option<(usize, usize)> {
    let lo = (c - size as f64).floor() as i64 + 1;
    let hi = c.ceil() as i64 - 1;
    let lo = lo.max(0);
    let hi = hi.min((padded - size) as i64);
    if hi < lo {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

struct PointMass {
    x_span: (usize, usize),
    y_span: (usize, usize),
    mass: f64,
}

/// Draw `n_patches` patches, cycling through `sizes`. Deterministic for a
/// fixed seed.
pub fn sample_patches(
    image: &GrayImage,
    ann: &AnnotationSet,
    sizes: &[usize],
    n_patches: usize,
    seed: u64,
) -> Result<Vec<Patch>, SamplingError> {
    if sizes.is_empty() {
        return Err(SamplingError::EmptySizes);
    }
    if sizes.contains(&0) {
        return Err(SamplingError::ZeroSize);
    }
    if ann.width() != image.width() || ann.height() != image.height() {
        return Err(SamplingError::DimensionMismatch {
            ann_w: ann.width(),
            ann_h: ann.height(),
            img_w: image.width(),
            img_h: image.height(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(n_patches);
    for i in 0..n_patches {
        let size = sizes[i % sizes.len()];
        let pw = image.width().max(size);
        let ph = image.height().max(size);
        let masses: Vec<PointMass> = ann
            .points()
            .iter()
            .filter_map(|p| {
                let x_span = origin_span(p.x, size, pw)?;
                let y_span = origin_span(p.y, size, ph)?;
                let mass =
                    (x_span.1 - x_span.0 + 1) as f64 * (y_span.1 - y_span.0 + 1) as f64;
                Some(PointMass {
                    x_span,
                    y_span,
                    mass,
                })
            })
            .collect();
        let point_mass: f64 = masses.iter().map(|m| m.mass).sum();
        let n_origins = ((pw - size + 1) * (ph - size + 1)) as f64;
        let floor_mass = ORIGIN_WEIGHT_FLOOR * n_origins;

        let draw = rng.gen_range(0.0..point_mass + floor_mass);
        let (ox, oy) = if draw < point_mass {
            // crowded branch: every origin accrues one unit of weight per
            // annotation its window contains
            let mut rest = draw;
            let mut chosen = &masses[masses.len() - 1];
            for m in &masses {
                if rest < m.mass {
                    chosen = m;
                    break;
                }
                rest -= m.mass;
            }
            (
                rng.gen_range(chosen.x_span.0..=chosen.x_span.1),
                rng.gen_range(chosen.y_span.0..=chosen.y_span.1),
            )
        } else {
            (
                rng.gen_range(0..=pw - size),
                rng.gen_range(0..=ph - size),
            )
        };

        let pixels = image.crop_zero_padded(ox, oy, size, size)?;
        let inside: Vec<Point> = ann
            .points()
            .iter()
            .filter(|p| {
                p.x > ox as f64
                    && p.x < (ox + size) as f64
                    && p.y > oy as f64
                    && p.y < (oy + size) as f64
            })
            .map(|p| Point::new(p.x - ox as f64, p.y - oy as f64))
            .collect();
        let annotations = AnnotationSet::new(ann.image_id(), size, size, inside)?;
        patches.push(Patch {
            image_id: ann.image_id().to_string(),
            origin: (ox, oy),
            size,
            pixels,
            annotations,
        });
    }
    Ok(patches)
}

/// Fixed-size cell decomposition of a zero-padded image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub cell_size: usize,
    pub padded_width: usize,
    pub padded_height: usize,
    /// Cell origins in row-major order.
    pub origins: Vec<(usize, usize)>,
}

impl TileGrid {
    pub fn n_cells(&self) -> usize {
        self.origins.len()
    }
}

/// Tile a `width` x `height` image into `cell_size` cells, zero-padding up to
/// the smallest covering multiples.
pub fn tile_image(width: usize, height: usize, cell_size: usize) -> Result<TileGrid, SamplingError> {
    if cell_size == 0 {
        return Err(SamplingError::ZeroCell);
    }
    if width == 0 || height == 0 {
        return Err(SamplingError::DimensionMismatch {
            ann_w: width,
            ann_h: height,
            img_w: width,
            img_h: height,
        });
    }
    let cells_x = width.div_ceil(cell_size);
    let cells_y = height.div_ceil(cell_size);
    let mut origins = Vec::with_capacity(cells_x * cells_y);
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            origins.push((cx * cell_size, cy * cell_size));
        }
    }
    Ok(TileGrid {
        cell_size,
        padded_width: cells_x * cell_size,
        padded_height: cells_y * cell_size,
        origins,
    })
}

/// Pixels of one grid cell, zero-padded past the image border.
pub fn cell_pixels(
    image: &GrayImage,
    grid: &TileGrid,
    index: usize,
) -> Result<GrayImage, SamplingError> {
    let &(ox, oy) = grid
        .origins
        .get(index)
        .ok_or(SamplingError::CellIndex {
            index,
            cells: grid.n_cells(),
        })?;
    Ok(image.crop_zero_padded(ox, oy, grid.cell_size, grid.cell_size)?)
}

/// Annotations of every grid cell, re-origined to cell coordinates. Cell
/// membership is half-open (`origin <= coord < origin + cell_size`), so each
/// annotation lands in exactly one cell.
pub fn cell_annotation_sets(
    ann: &AnnotationSet,
    grid: &TileGrid,
) -> Result<Vec<AnnotationSet>, SamplingError> {
    let cells_x = grid.padded_width / grid.cell_size;
    let mut buckets: Vec<Vec<Point>> = vec![Vec::new(); grid.n_cells()];
    for p in ann.points() {
        let cx = (p.x / grid.cell_size as f64) as usize;
        let cy = (p.y / grid.cell_size as f64) as usize;
        let idx = cy * cells_x + cx;
        let (ox, oy) = grid.origins[idx];
        buckets[idx].push(Point::new(p.x - ox as f64, p.y - oy as f64));
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, pts)| {
            Ok(AnnotationSet::new(
                format!("{}#cell{}", ann.image_id(), i),
                grid.cell_size,
                grid.cell_size,
                pts,
            )?)
        })
        .collect()
}

/// Image-level count: ordered sum of per-cell counts.
pub fn aggregate_counts(cell_counts: &[f64]) -> f64 {
    cell_counts.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ann(points: &[(f64, f64)], w: usize, h: usize) -> AnnotationSet {
        AnnotationSet::new(
            "t",
            w,
            h,
            points.iter().map(|&(x, y)| Point::new(x, y)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sizes_cycle_uniformly() {
        let img = GrayImage::zeros(512, 512).unwrap();
        let a = ann(&[(100.0, 100.0)], 512, 512);
        let patches = sample_patches(&img, &a, &[448, 224, 112], 9, 7).unwrap();
        let mut by_size = std::collections::HashMap::new();
        for p in &patches {
            *by_size.entry(p.size).or_insert(0usize) += 1;
        }
        assert_eq!(by_size[&448], 3);
        assert_eq!(by_size[&224], 3);
        assert_eq!(by_size[&112], 3);
    }

    #[test]
    fn small_images_are_zero_padded() {
        let mut img = GrayImage::zeros(100, 80).unwrap();
        img.set(50, 40, 200);
        let a = ann(&[(50.5, 40.5)], 100, 80);
        let patches = sample_patches(&img, &a, &[224], 4, 3).unwrap();
        for p in &patches {
            assert_eq!(p.origin, (0, 0));
            assert_eq!(p.pixels.width(), 224);
            assert_eq!(p.pixels.get(50, 40), 200);
            assert_eq!(p.pixels.get(150, 150), 0);
            assert_eq!(p.annotations.count(), 1);
        }
    }

    #[test]
    fn patch_pixels_match_direct_crop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut img = GrayImage::zeros(300, 200).unwrap();
        for y in 0..200 {
            for x in 0..300 {
                img.set(x, y, rng.gen());
            }
        }
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|_| (rng.gen_range(0.0..300.0), rng.gen_range(0.0..200.0)))
            .collect();
        let a = ann(&pts, 300, 200);
        for p in sample_patches(&img, &a, &[64, 96], 10, 11).unwrap() {
            for y in 0..p.size {
                for x in 0..p.size {
                    let sx = p.origin.0 + x;
                    let sy = p.origin.1 + y;
                    let want = if sx < 300 && sy < 200 { img.get(sx, sy) } else { 0 };
                    assert_eq!(p.pixels.get(x, y), want);
                }
            }
            for q in p.annotations.points() {
                assert!(q.x > 0.0 && q.x < p.size as f64);
                assert!(q.y > 0.0 && q.y < p.size as f64);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let img = GrayImage::zeros(256, 256).unwrap();
        let a = ann(&[(10.0, 10.0), (200.0, 130.0)], 256, 256);
        let p1 = sample_patches(&img, &a, &[128], 6, 42).unwrap();
        let p2 = sample_patches(&img, &a, &[128], 6, 42).unwrap();
        let o1: Vec<_> = p1.iter().map(|p| p.origin).collect();
        let o2: Vec<_> = p2.iter().map(|p| p.origin).collect();
        assert_eq!(o1, o2);
        let p3 = sample_patches(&img, &a, &[128], 6, 43).unwrap();
        let o3: Vec<_> = p3.iter().map(|p| p.origin).collect();
        assert_ne!(o1, o3);
    }

    #[test]
    fn centers_concentrate_on_annotated_regions() {
        // all heads in one small cluster of a big empty image
        let img = GrayImage::zeros(512, 512).unwrap();
        let pts: Vec<(f64, f64)> = (0..20)
            .map(|i| (100.0 + (i % 5) as f64 * 3.0, 100.0 + (i / 5) as f64 * 3.0))
            .collect();
        let a = ann(&pts, 512, 512);
        let patches = sample_patches(&img, &a, &[64], 500, 17).unwrap();
        let hits = patches
            .iter()
            .filter(|p| p.annotations.count() > 0)
            .count() as f64
            / 500.0;
        // uniform origins would contain part of the cluster ~3% of the time
        assert!(hits > 0.15, "hit rate {hits}");
    }

    #[test]
    fn tiling_examples() {
        let grid = tile_image(500, 300, 224).unwrap();
        assert_eq!(grid.padded_width, 672);
        assert_eq!(grid.padded_height, 448);
        assert_eq!(grid.n_cells(), 6);
        assert_eq!(grid.origins[0], (0, 0));
        assert_eq!(grid.origins[5], (448, 224));

        let grid = tile_image(225, 224, 224).unwrap();
        assert_eq!(grid.n_cells(), 2);
        assert_eq!(grid.padded_width, 448);
        assert_eq!(grid.padded_height, 224);
    }

    #[test]
    fn every_annotation_lands_in_exactly_one_cell() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let pts: Vec<(f64, f64)> = (0..300)
            .map(|_| (rng.gen_range(0.0..500.0), rng.gen_range(0.0..300.0)))
            .collect();
        let a = ann(&pts, 500, 300);
        let grid = tile_image(500, 300, 224).unwrap();
        let cells = cell_annotation_sets(&a, &grid).unwrap();
        let total: usize = cells.iter().map(|c| c.count()).sum();
        assert_eq!(total, 300);
        // boundary coordinate belongs to the cell it opens
        let b = ann(&[(224.0, 0.0)], 500, 300);
        let cells = cell_annotation_sets(&b, &grid).unwrap();
        assert_eq!(cells[1].count(), 1);
        assert_eq!(cells[0].count(), 0);
        assert_eq!(cells[1].points()[0], Point::new(0.0, 0.0));
    }

    #[test]
    fn aggregate_is_plain_sum() {
        assert_eq!(aggregate_counts(&[1.5, 2.0, 0.25]), 3.75);
        assert_eq!(aggregate_counts(&[]), 0.0);
    }
}
