//! Property tests for the geometry and rendering invariants the rest of the
//! pipeline leans on: conserved mass, order independence, translation and
//! scale behavior, and partition properties of the samplers.

use proptest::prelude::*;

use qcrowd::annotations::{nn_bandwidths, AnnotationSet, Point};
use qcrowd::density::{
    render_density, render_localization, DensityMap, KernelPolicy, Level,
};
use qcrowd::eval::density_metrics;
use qcrowd::raster::GrayImage;
use qcrowd::sampling::{cell_annotation_sets, sample_patches, tile_image};

/// Distinct-ish point sets on a grid of half-pixel positions, so pairwise
/// distances are bounded away from the bandwidth floor.
fn point_set(max_n: usize, w: usize, h: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::hash_set((0..w * 2, 0..h * 2), 1..=max_n).prop_map(move |cells| {
        cells
            .into_iter()
            .map(|(cx, cy)| Point::new(cx as f64 / 2.0, cy as f64 / 2.0))
            .collect()
    })
}

fn set_of(points: Vec<Point>, w: usize, h: usize) -> AnnotationSet {
    AnnotationSet::new("prop", w, h, points).expect("in-bounds by construction")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // conservation: every kernel carries unit mass, so the map integrates
    // to the head count; the impulse map does so exactly
    #[test]
    fn rendered_mass_matches_count(points in point_set(40, 96, 80), k in 1.0f64..8.0) {
        let n = points.len() as f64;
        let ann = set_of(points, 96, 80);
        let policy = KernelPolicy::new(15.0, Level::Finite(k));
        let map = render_density(&ann, &policy).unwrap();
        prop_assert!((map.sum() - n).abs() <= 1e-6 * n, "sum {} vs {}", map.sum(), n);
        let loc = render_localization(&ann, 96, 80).unwrap();
        prop_assert_eq!(loc.sum(), n);
    }

    #[test]
    fn bandwidths_stay_in_range(points in point_set(30, 64, 64), tau in 0.5f64..30.0) {
        let ann = set_of(points, 64, 64);
        let sigmas = nn_bandwidths(&ann, tau).unwrap();
        prop_assert_eq!(sigmas.len(), ann.count());
        for s in sigmas {
            prop_assert!(s > 0.0 && s <= tau, "sigma {} out of (0, {}]", s, tau);
        }
    }

    // doubling all coordinates and tau doubles every bandwidth exactly:
    // squared distances scale by 4 and sqrt/min are exact under that scaling
    #[test]
    fn bandwidths_scale_with_coordinates(points in point_set(30, 64, 64), tau in 1.0f64..20.0) {
        let small = set_of(points.clone(), 64, 64);
        let doubled: Vec<Point> = points.iter().map(|p| Point::new(p.x * 2.0, p.y * 2.0)).collect();
        let big = set_of(doubled, 128, 128);
        let s1 = nn_bandwidths(&small, tau).unwrap();
        let s2 = nn_bandwidths(&big, tau * 2.0).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            prop_assert_eq!(*b, a * 2.0);
        }
    }

    #[test]
    fn rendering_ignores_annotation_order(points in point_set(25, 48, 48), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = points.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        shuffled.shuffle(&mut rng);
        let a = render_density(&set_of(points, 48, 48), &KernelPolicy::default()).unwrap();
        let b = render_density(&set_of(shuffled, 48, 48), &KernelPolicy::default()).unwrap();
        for (va, vb) in a.values().iter().zip(b.values()) {
            prop_assert!((va - vb).abs() <= 1e-12);
        }
    }

    // shifting every annotation by whole pixels shifts the rendered map
    // bitwise, as long as every kernel window stays inside the image
    #[test]
    fn rendering_is_translation_equivariant(
        points in point_set(12, 32, 32),
        dx in 0usize..32,
        dy in 0usize..32,
    ) {
        let margin = 64.0; // 4 sigma at tau 15, plus slack
        let base: Vec<Point> = points
            .iter()
            .map(|p| Point::new(p.x + margin, p.y + margin))
            .collect();
        let moved: Vec<Point> = base
            .iter()
            .map(|p| Point::new(p.x + dx as f64, p.y + dy as f64))
            .collect();
        let size = 32 + 2 * margin as usize + 32;
        let a = render_density(&set_of(base, size, size), &KernelPolicy::default()).unwrap();
        let b = render_density(&set_of(moved, size, size), &KernelPolicy::default()).unwrap();
        for y in 0..size - dy {
            for x in 0..size - dx {
                prop_assert_eq!(a.get(x, y).to_bits(), b.get(x + dx, y + dy).to_bits());
            }
        }
    }

    // block pooling must preserve mass for any divisor factor
    #[test]
    fn downsampling_preserves_mass(points in point_set(20, 64, 64), factor in prop::sample::select(vec![1usize, 2, 4, 8, 16])) {
        let ann = set_of(points, 64, 64);
        let map = render_density(&ann, &KernelPolicy::default()).unwrap();
        let small = map.block_downsample(factor).unwrap();
        prop_assert!((small.sum() - map.sum()).abs() <= 1e-9 * map.sum().max(1.0));
        prop_assert_eq!(small.width(), 64 / factor);
    }

    #[test]
    fn histogram_intersection_is_bounded(
        a in prop::collection::vec(0.0f64..5.0, 64),
        b in prop::collection::vec(0.0f64..5.0, 64),
    ) {
        prop_assume!(a.iter().sum::<f64>() > 0.0 && b.iter().sum::<f64>() > 0.0);
        let ma = DensityMap::from_values(8, 8, Level::Finite(1.0), a).unwrap();
        let mb = DensityMap::from_values(8, 8, Level::Finite(1.0), b).unwrap();
        let m = density_metrics(&ma, &mb).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&m.dm_hi), "hi {}", m.dm_hi);
        let selfm = density_metrics(&ma, &ma).unwrap();
        prop_assert!((selfm.dm_hi - 1.0).abs() <= 1e-12);
    }

    // patches keep only strictly interior annotations, re-origined in range
    #[test]
    fn patch_annotations_are_strictly_interior(
        points in point_set(30, 100, 70),
        n_patches in 1usize..8,
        seed in any::<u64>(),
    ) {
        let img = GrayImage::zeros(100, 70).unwrap();
        let ann = set_of(points, 100, 70);
        let patches = sample_patches(&img, &ann, &[48, 96], n_patches, seed).unwrap();
        prop_assert_eq!(patches.len(), n_patches);
        for p in patches {
            prop_assert_eq!(p.pixels.width(), p.size);
            for q in p.annotations.points() {
                prop_assert!(q.x > 0.0 && q.x < p.size as f64);
                prop_assert!(q.y > 0.0 && q.y < p.size as f64);
                let gx = q.x + p.origin.0 as f64;
                let gy = q.y + p.origin.1 as f64;
                prop_assert!(ann.points().iter().any(|r| r.x == gx && r.y == gy));
            }
        }
    }

    // tiling partitions the annotations: each point lands in exactly one
    // cell and the per-cell counts add back up
    #[test]
    fn tiling_partitions_annotations(points in point_set(60, 300, 200), cell in 32usize..256) {
        let ann = set_of(points, 300, 200);
        let grid = tile_image(300, 200, cell).unwrap();
        let cells = cell_annotation_sets(&ann, &grid).unwrap();
        prop_assert_eq!(cells.len(), grid.n_cells());
        let total: usize = cells.iter().map(|c| c.count()).sum();
        prop_assert_eq!(total, ann.count());
        for (i, c) in cells.iter().enumerate() {
            let (ox, oy) = grid.origins[i];
            for q in c.points() {
                prop_assert!(q.x < cell as f64 && q.y < cell as f64);
                let gx = q.x + ox as f64;
                let gy = q.y + oy as f64;
                prop_assert!(ann.points().iter().any(|r| r.x == gx && r.y == gy));
            }
        }
    }
}

/// Brute-force renderer used as an independent oracle: per point, brute
/// nearest-neighbor bandwidths, Gaussian evaluated at every pixel center of
/// the whole image (no truncation window), normalized over the image.
fn oracle_density(ann: &AnnotationSet, tau: f64, k: f64) -> Vec<f64> {
    let (w, h) = (ann.width(), ann.height());
    let pts = ann.points();
    let mut out = vec![0.0f64; w * h];
    for (i, p) in pts.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, q) in pts.iter().enumerate() {
            if i != j {
                let d = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        let sigma = if best.is_finite() { best.min(tau) } else { tau };
        let b = sigma.powf(1.0 / k);
        let mut kernel = vec![0.0f64; w * h];
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - p.x;
                let dy = y as f64 + 0.5 - p.y;
                let v = (-(dx * dx + dy * dy) / (2.0 * b * b)).exp();
                kernel[y * w + x] = v;
                total += v;
            }
        }
        for (o, v) in out.iter_mut().zip(&kernel) {
            *o += v / total;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // the production renderer with a wide truncation window agrees with the
    // untruncated whole-image oracle almost to machine precision
    #[test]
    fn renderer_matches_untruncated_oracle(points in point_set(8, 48, 40), k in prop::sample::select(vec![1.0f64, 2.0])) {
        let ann = set_of(points, 48, 40);
        let mut policy = KernelPolicy::new(15.0, Level::Finite(k));
        policy.truncation_radius_sigmas = 8.0;
        let map = render_density(&ann, &policy).unwrap();
        let want = oracle_density(&ann, 15.0, k);
        for (got, want) in map.values().iter().zip(&want) {
            prop_assert!((got - want).abs() <= 1e-9, "got {} want {}", got, want);
        }
    }
}
