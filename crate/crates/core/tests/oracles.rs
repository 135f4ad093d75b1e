//! Cross-checks of the rendering and peak-detection pipeline against
//! independently computed expectations: peak recovery on well-separated
//! scenes, kernel sharpening across levels, and impulse-map arithmetic.

use anyhow::Result;

use qcrowd::annotations::{AnnotationSet, Point};
use qcrowd::density::{render_density, render_localization, KernelPolicy, Level};
use qcrowd::eval::{default_peak_threshold, find_peaks, PEAK_RADIUS};

/// With isolated points, each kernel gets the full tau bandwidth; spacing
/// them beyond twice the truncation radius keeps the kernels disjoint, so
/// peak detection must recover exactly the annotated pixels.
#[test]
fn peaks_recover_well_separated_annotations() -> Result<()> {
    let tau = 15.0;
    let spacing = 128.0; // > 2 * 4 * tau
    let mut points = Vec::new();
    let mut expected = Vec::new();
    for gy in 0..4 {
        for gx in 0..4 {
            // offset from the pixel grid so the nearest pixel is unambiguous
            let x = 70.3 + gx as f64 * spacing;
            let y = 66.7 + gy as f64 * spacing;
            points.push(Point::new(x, y));
            // kernel peak lands on the pixel whose center is nearest
            expected.push(((x - 0.5).round() as usize, (y - 0.5).round() as usize));
        }
    }
    let ann = AnnotationSet::new("grid", 512, 512, points)?;
    let map = render_density(&ann, &KernelPolicy::new(tau, Level::Finite(1.0)))?;
    let peaks = find_peaks(&map, default_peak_threshold(&map), PEAK_RADIUS);
    assert_eq!(peaks.len(), 16);
    let mut got: Vec<(usize, usize)> = peaks.iter().map(|p| (p.x, p.y)).collect();
    got.sort_unstable();
    expected.sort_unstable();
    assert_eq!(got, expected);
    Ok(())
}

/// Raising the level sharpens the kernel: the value at the annotated pixel
/// must not decrease with the level, and the impulse map tops out at one.
#[test]
fn sharpening_is_monotone_in_level() -> Result<()> {
    for &(x, y) in &[(100.3, 100.3), (128.0, 141.5), (110.7, 95.2)] {
        let ann = AnnotationSet::new("single", 256, 256, vec![Point::new(x, y)])?;
        let px = (x - 0.5).round() as usize;
        let py = (y - 0.5).round() as usize;
        let mut last = 0.0;
        for k in [1.0, 2.0, 4.0, 8.0] {
            let map = render_density(&ann, &KernelPolicy::new(15.0, Level::Finite(k)))?;
            let v = map.get(px, py);
            assert!(
                v >= last,
                "level {k} peak {v} dropped below {last} at ({x}, {y})"
            );
            last = v;
        }
        // the impulse map continues the chain: its peak of exactly one
        // dominates every finite-level peak here
        let loc = render_localization(&ann, 256, 256)?;
        assert_eq!(loc.max_value(), 1.0);
        assert!(loc.max_value() >= last);
        assert_eq!(loc.get(x.round() as usize, y.round() as usize), 1.0);
    }
    Ok(())
}

/// The impulse map is integer-valued and integrates to the head count even
/// when annotations collide on a pixel.
#[test]
fn localization_map_is_integer_valued() -> Result<()> {
    let points = vec![
        Point::new(10.2, 10.2),
        Point::new(10.4, 9.8),   // rounds onto the same pixel
        Point::new(63.9, 0.0),   // clamps to the right edge
        Point::new(0.0, 31.5),
    ];
    let ann = AnnotationSet::new("collide", 64, 32, points)?;
    let loc = render_localization(&ann, 64, 32)?;
    assert_eq!(loc.sum(), 4.0);
    for v in loc.values() {
        assert_eq!(v.fract(), 0.0, "non-integer impulse value {v}");
        assert!(*v >= 0.0);
    }
    assert_eq!(loc.get(10, 10), 2.0);
    Ok(())
}

/// Adjacent annotations shrink each other's bandwidth: a crowded pair must
/// render sharper (higher peak) than an isolated point at the same level.
#[test]
fn crowding_sharpens_kernels() -> Result<()> {
    let lone = AnnotationSet::new("lone", 256, 256, vec![Point::new(128.3, 128.3)])?;
    let pair = AnnotationSet::new(
        "pair",
        256,
        256,
        vec![Point::new(128.3, 128.3), Point::new(131.3, 128.3)],
    )?;
    let policy = KernelPolicy::new(15.0, Level::Finite(1.0));
    let lone_map = render_density(&lone, &policy)?;
    let pair_map = render_density(&pair, &policy)?;
    // lone point gets sigma = tau = 15; in the pair each gets sigma = 3
    assert!(pair_map.get(128, 128) > lone_map.get(128, 128) * 5.0);
    Ok(())
}
