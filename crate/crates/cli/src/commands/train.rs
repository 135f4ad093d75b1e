//! `train`: sample patches from a manifest, train the reference model, and
//! write the checkpoint plus a per-epoch history CSV.

use std::fmt::Write as _;
use std::path::Path;

use qcrowd::annotations::{load_annotations, AnnotationSet, Point};
use qcrowd::density::build_target_stack;
use qcrowd::model::{save_checkpoint, train, TrainSample};
use qcrowd::raster::GrayImage;
use qcrowd::sampling::sample_patches;

use crate::commands::{ensure_dir, write_text};
use crate::config::PipelineConfig;
use crate::{load_manifest, run_indexed, CliError};

/// Patches whose size differs from the model input are rescaled, pixels
/// bilinearly and annotation coordinates proportionally.
fn to_sample(
    pixels: &GrayImage,
    ann: &AnnotationSet,
    cfg: &PipelineConfig,
) -> Result<TrainSample, CliError> {
    let input = cfg.model.input_size;
    let (patch, scaled);
    if pixels.width() == input && pixels.height() == input {
        patch = pixels.clone();
        scaled = ann.clone();
    } else {
        patch = pixels.resize_bilinear(input, input)?;
        let sx = input as f64 / pixels.width() as f64;
        let sy = input as f64 / pixels.height() as f64;
        let points: Vec<Point> = ann
            .points()
            .iter()
            .map(|p| Point::new(p.x * sx, p.y * sy))
            .collect();
        scaled = AnnotationSet::new(ann.image_id(), input, input, points)?;
    }
    let target = build_target_stack(
        &scaled,
        &cfg.levels,
        &cfg.kernel.policy(cfg.levels[0]),
        cfg.model.downsample,
    )?;
    Ok(TrainSample { patch, target })
}

pub fn cmd_train(
    cfg: &PipelineConfig,
    manifest: &Path,
    out_dir: &Path,
    threads: usize,
) -> Result<(), CliError> {
    let entries = load_manifest(manifest)?;
    if entries.len() < 2 {
        return Err(CliError::Data(
            "training needs at least 2 manifest images (one is held out)".into(),
        ));
    }
    ensure_dir(out_dir)?;

    let per_image: Vec<Vec<TrainSample>> = run_indexed(entries.len(), threads, |i| {
        let entry = &entries[i];
        let ann = load_annotations(&entry.annotation_path)?;
        let image = GrayImage::read_pgm(&entry.image_path)?;
        let seed = cfg
            .seed
            .wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let patches = sample_patches(
            &image,
            &ann,
            &cfg.sampling.patch_sizes,
            cfg.sampling.patches_per_image,
            seed,
        )?;
        patches
            .iter()
            .map(|p| to_sample(&p.pixels, &p.annotations, cfg))
            .collect()
    })?;

    // hold out whole images, never patches of a training image
    let n_val = ((entries.len() as f64 * cfg.sampling.val_fraction).round() as usize)
        .clamp(1, entries.len() - 1);
    let split = entries.len() - n_val;
    let train_set: Vec<TrainSample> = per_image[..split].iter().flatten().cloned().collect();
    let val_set: Vec<TrainSample> = per_image[split..].iter().flatten().cloned().collect();

    let lcfg = cfg.loss_config()?;
    let mcfg = cfg.model_config();
    let (params, history) = train(&train_set, &val_set, &mcfg, &cfg.train, &lcfg)?;

    let ckpt = out_dir.join("model.qcp");
    save_checkpoint(&params, &ckpt)?;

    let mut csv = String::from("epoch,lr,train_loss,val_loss,val_c_mae\n");
    for row in &history.epochs {
        writeln!(
            csv,
            "{},{},{},{},{}",
            row.epoch, row.lr, row.train_loss, row.val_loss, row.val_c_mae
        )
        .expect("string write");
    }
    write_text(&out_dir.join("history.csv"), &csv)?;

    let best = &history.epochs[history.best_epoch - 1];
    println!(
        "trained on {} patches ({} val), best epoch {} with val C-MAE {:.4}",
        train_set.len(),
        val_set.len(),
        history.best_epoch,
        best.val_c_mae
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}
