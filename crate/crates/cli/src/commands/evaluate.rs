//! `evaluate`: tile each manifest image, predict per-cell density stacks
//! (or replay ground truth with `--oracle-gt`), stitch them back together,
//! and report counting, density, and localization metrics.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use qcrowd::annotations::{load_annotations, Point};
use qcrowd::density::{build_target_stack, DensityMap, DensityStack, Level};
use qcrowd::eval::{
    counting_metrics, default_peak_threshold, density_metrics, find_peaks, pr_curve_pooled,
    CountMetrics, EvalError, PrCurve, PEAK_RADIUS,
};
use qcrowd::model::{forward_fused, load_checkpoint, ModelParams};
use qcrowd::raster::GrayImage;
use qcrowd::sampling::{cell_annotation_sets, cell_pixels, tile_image, TileGrid};

use crate::commands::{ensure_dir, write_text};
use crate::config::PipelineConfig;
use crate::{load_manifest, run_indexed, CliError};

pub struct EvaluateArgs<'a> {
    pub manifest: &'a Path,
    pub out_dir: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub localize: bool,
    pub oracle_gt: bool,
    pub at_thresholds: Vec<u32>,
    pub threads: usize,
}

struct ImageResult {
    stem: String,
    gt_count: f64,
    pred_count: f64,
    /// One (dm_mae, dm_mse, dm_hi) triple per level.
    dm: Vec<(f64, f64, f64)>,
    /// (predicted points, ground-truth points) when localizing.
    points: Option<(Vec<Point>, Vec<Point>)>,
}

#[derive(Serialize)]
struct DensitySummary {
    level: String,
    dm_mae: f64,
    dm_mse: f64,
    dm_hi: f64,
}

#[derive(Serialize)]
struct LocalizationSummary {
    l_auc: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    at: Vec<ThresholdPoint>,
}

#[derive(Serialize)]
struct ThresholdPoint {
    threshold: u32,
    precision: f64,
    recall: f64,
}

#[derive(Serialize)]
struct MetricsSummary {
    images: usize,
    c_mae: f64,
    c_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_nae: Option<f64>,
    density: Vec<DensitySummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    localization: Option<LocalizationSummary>,
}

/// Copy per-cell maps of one level into a full padded-resolution map.
fn stitch(
    grid: &TileGrid,
    downsample: usize,
    cells: &[&DensityMap],
    level: Level,
) -> Result<DensityMap, CliError> {
    let m = grid.cell_size / downsample;
    let w = grid.padded_width / downsample;
    let h = grid.padded_height / downsample;
    let mut values = vec![0.0f64; w * h];
    for (idx, map) in cells.iter().enumerate() {
        let (ox, oy) = grid.origins[idx];
        let (cx, cy) = (ox / downsample, oy / downsample);
        for y in 0..m {
            for x in 0..m {
                values[(cy + y) * w + (cx + x)] = map.get(x, y);
            }
        }
    }
    Ok(DensityMap::from_values(w, h, level, values)?)
}

/// Peaks of the stitched impulse-level map, reported at block centers in
/// image coordinates. A map with no positive value has no peaks.
fn peak_points(map: &DensityMap, downsample: usize) -> Vec<Point> {
    if map.max_value() <= 0.0 {
        return Vec::new();
    }
    find_peaks(map, default_peak_threshold(map), PEAK_RADIUS)
        .into_iter()
        .map(|p| {
            Point::new(
                (p.x as f64 + 0.5) * downsample as f64,
                (p.y as f64 + 0.5) * downsample as f64,
            )
        })
        .collect()
}

fn evaluate_image(
    cfg: &PipelineConfig,
    params: Option<&ModelParams>,
    stem: &str,
    ann_path: &Path,
    image_path: &Path,
    localize: bool,
) -> Result<ImageResult, CliError> {
    let (input_size, downsample, levels) = match params {
        Some(p) => (
            p.config().input_size,
            p.config().downsample,
            p.config().levels.clone(),
        ),
        None => (
            cfg.model.input_size,
            cfg.model.downsample,
            cfg.levels.clone(),
        ),
    };
    let ann = load_annotations(ann_path)?;
    let grid = tile_image(ann.width(), ann.height(), input_size)?;
    let cell_sets = cell_annotation_sets(&ann, &grid)?;
    let policy = cfg.kernel.policy(levels[0]);
    let gt_stacks: Vec<DensityStack> = cell_sets
        .iter()
        .map(|c| build_target_stack(c, &levels, &policy, downsample))
        .collect::<Result<_, _>>()?;

    let pred_stacks: Vec<DensityStack> = match params {
        None => gt_stacks.clone(),
        Some(p) => {
            let image = GrayImage::read_pgm(image_path)?;
            if image.width() != ann.width() || image.height() != ann.height() {
                return Err(CliError::Data(format!(
                    "{stem}: image is {}x{} but annotations say {}x{}",
                    image.width(),
                    image.height(),
                    ann.width(),
                    ann.height()
                )));
            }
            (0..grid.n_cells())
                .map(|i| {
                    let pixels = cell_pixels(&image, &grid, i)?;
                    Ok(forward_fused(p, &pixels, cfg.fusion_mode)?.stack)
                })
                .collect::<Result<_, CliError>>()?
        }
    };

    let gt_count = ann.count() as f64;
    let pred_count: f64 = pred_stacks.iter().map(|s| s.count()).sum();

    let mut dm = Vec::with_capacity(levels.len());
    let mut pred_loc: Option<DensityMap> = None;
    for (li, &level) in levels.iter().enumerate() {
        let pred_cells: Vec<&DensityMap> = pred_stacks.iter().map(|s| &s.maps()[li]).collect();
        let gt_cells: Vec<&DensityMap> = gt_stacks.iter().map(|s| &s.maps()[li]).collect();
        let pred_map = stitch(&grid, downsample, &pred_cells, level)?;
        let gt_map = stitch(&grid, downsample, &gt_cells, level)?;
        let m = density_metrics(&pred_map, &gt_map)
            .map_err(|e| CliError::Data(format!("{stem} level {level}: {e}")))?;
        dm.push((m.dm_mae, m.dm_mse, m.dm_hi));
        if level == Level::Inf {
            pred_loc = Some(pred_map);
        }
    }

    let points = if localize {
        let preds = match params {
            // ground truth localizes at the annotations themselves
            None => ann.points().to_vec(),
            Some(_) => {
                let loc = pred_loc.as_ref().ok_or_else(|| {
                    CliError::Data(
                        "localization needs the impulse level in the model's level list".into(),
                    )
                })?;
                peak_points(loc, downsample)
            }
        };
        Some((preds, ann.points().to_vec()))
    } else {
        None
    };

    Ok(ImageResult {
        stem: stem.to_string(),
        gt_count,
        pred_count,
        dm,
        points,
    })
}

pub fn cmd_evaluate(cfg: &PipelineConfig, args: &EvaluateArgs) -> Result<(), CliError> {
    for &t in &args.at_thresholds {
        if !(1..=100).contains(&t) {
            return Err(CliError::Data(format!(
                "--at-thresholds values must be in 1..=100, got {t}"
            )));
        }
    }
    let entries = load_manifest(args.manifest)?;
    ensure_dir(args.out_dir)?;

    let params = match (args.oracle_gt, args.checkpoint) {
        (true, _) => None,
        (false, Some(path)) => Some(load_checkpoint(path)?),
        (false, None) => {
            return Err(CliError::Data(
                "evaluate needs --checkpoint unless --oracle-gt is set".into(),
            ))
        }
    };
    let levels = params
        .as_ref()
        .map(|p| p.config().levels.clone())
        .unwrap_or_else(|| cfg.levels.clone());
    let localize = args.localize || args.oracle_gt;
    if localize && !levels.contains(&Level::Inf) {
        return Err(CliError::Data(
            "localization needs the impulse level in the level list".into(),
        ));
    }

    let results = run_indexed(entries.len(), args.threads, |i| {
        evaluate_image(
            cfg,
            params.as_ref(),
            &entries[i].stem,
            &entries[i].annotation_path,
            &entries[i].image_path,
            localize,
        )
    })?;

    // counts.csv: one row per image plus a totals row
    let mut counts_csv = String::from("image,gt_count,pred_count\n");
    for r in &results {
        writeln!(counts_csv, "{},{},{}", r.stem, r.gt_count, r.pred_count).expect("write");
    }
    let total_gt: f64 = results.iter().map(|r| r.gt_count).sum();
    let total_pred: f64 = results.iter().map(|r| r.pred_count).sum();
    writeln!(counts_csv, "ALL,{total_gt},{total_pred}").expect("write");
    write_text(&args.out_dir.join("counts.csv"), &counts_csv)?;

    let gts: Vec<f64> = results.iter().map(|r| r.gt_count).collect();
    let preds: Vec<f64> = results.iter().map(|r| r.pred_count).collect();
    let (c_mae, c_mse, c_nae) = match counting_metrics(&preds, &gts) {
        Ok(CountMetrics { c_mae, c_mse, c_nae }) => (c_mae, c_mse, Some(c_nae)),
        // zero-count images leave the normalized error undefined
        Err(EvalError::NonPositiveGt { .. }) => {
            let n = gts.len() as f64;
            let mae = preds
                .iter()
                .zip(&gts)
                .map(|(p, g)| (p - g).abs())
                .sum::<f64>()
                / n;
            let mse = (preds
                .iter()
                .zip(&gts)
                .map(|(p, g)| (p - g) * (p - g))
                .sum::<f64>()
                / n)
                .sqrt();
            (mae, mse, None)
        }
        Err(e) => return Err(e.into()),
    };

    // density_metrics.csv: per image and level, then per-level means
    let mut dm_csv = String::from("image,level,dm_mae,dm_mse,dm_hi\n");
    for r in &results {
        for (li, &level) in levels.iter().enumerate() {
            let (mae, mse, hi) = r.dm[li];
            writeln!(dm_csv, "{},{},{},{},{}", r.stem, level.label(), mae, mse, hi)
                .expect("write");
        }
    }
    let mut density_summary = Vec::with_capacity(levels.len());
    for (li, &level) in levels.iter().enumerate() {
        let n = results.len() as f64;
        let mae = results.iter().map(|r| r.dm[li].0).sum::<f64>() / n;
        let mse = results.iter().map(|r| r.dm[li].1).sum::<f64>() / n;
        let hi = results.iter().map(|r| r.dm[li].2).sum::<f64>() / n;
        writeln!(dm_csv, "ALL,{},{},{},{}", level.label(), mae, mse, hi).expect("write");
        density_summary.push(DensitySummary {
            level: level.label(),
            dm_mae: mae,
            dm_mse: mse,
            dm_hi: hi,
        });
    }
    write_text(&args.out_dir.join("density_metrics.csv"), &dm_csv)?;

    // pooled localization curve
    let localization = if localize {
        let sets: Vec<(Vec<Point>, Vec<Point>)> = results
            .iter()
            .map(|r| r.points.clone().expect("localization rows present"))
            .collect();
        let curve: PrCurve = pr_curve_pooled(&sets)?;
        let mut pr_csv = String::from("threshold,precision,recall\n");
        for p in &curve.points {
            writeln!(pr_csv, "{},{},{}", p.threshold, p.precision, p.recall).expect("write");
        }
        write_text(&args.out_dir.join("pr_curve.csv"), &pr_csv)?;
        let at: Vec<ThresholdPoint> = args
            .at_thresholds
            .iter()
            .map(|&t| {
                let p = &curve.points[t as usize - 1];
                ThresholdPoint {
                    threshold: t,
                    precision: p.precision,
                    recall: p.recall,
                }
            })
            .collect();
        Some(LocalizationSummary {
            l_auc: curve.l_auc,
            at,
        })
    } else {
        None
    };

    let summary = MetricsSummary {
        images: results.len(),
        c_mae,
        c_mse,
        c_nae,
        density: density_summary,
        localization,
    };
    write_text(
        &args.out_dir.join("metrics.json"),
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&summary).expect("summary")
        ),
    )?;

    println!("images: {}", summary.images);
    match summary.c_nae {
        Some(nae) => println!(
            "counting: C-MAE {:.4}  C-MSE {:.4}  C-NAE {:.6}",
            summary.c_mae, summary.c_mse, nae
        ),
        None => println!(
            "counting: C-MAE {:.4}  C-MSE {:.4}  C-NAE undefined (zero-count images)",
            summary.c_mae, summary.c_mse
        ),
    }
    for d in &summary.density {
        println!(
            "density {}: MAE {:.6}  MSE {:.6}  HI {:.6}",
            d.level, d.dm_mae, d.dm_mse, d.dm_hi
        );
    }
    if let Some(loc) = &summary.localization {
        println!("localization: L-AUC {:.6}", loc.l_auc);
        for p in &loc.at {
            println!(
                "  P/R @ {}px: {:.6} / {:.6}",
                p.threshold, p.precision, p.recall
            );
        }
    }
    Ok(())
}
