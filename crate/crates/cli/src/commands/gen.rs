//! `gen synth`: synthetic scenes (image, annotations, manifest).
//! `gen targets`: per-level ground-truth density maps for a manifest.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;

use qcrowd::annotations::{gen_synthetic_scene, load_annotations, save_annotations, Layout, SceneSpec};
use qcrowd::density::{render_density, render_localization, write_qdm, Level};

use crate::commands::{ensure_dir, write_text};
use crate::config::PipelineConfig;
use crate::{load_manifest, run_indexed, CliError};

/// Mixes the base seed with a per-item index so parallel generation stays
/// order-independent.
fn item_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn cmd_gen_synth(
    cfg: &PipelineConfig,
    out_dir: &Path,
    threads: usize,
) -> Result<(), CliError> {
    ensure_dir(out_dir)?;
    let sc = &cfg.scenes;
    // per-scene head counts drawn up front, so scene generation itself can
    // run in any order
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let counts: Vec<usize> = (0..sc.n_images)
        .map(|_| rng.gen_range(sc.min_points..=sc.max_points))
        .collect();

    let names = run_indexed(sc.n_images, threads, |i| {
        let id = format!("scene_{i:03}");
        let layout = if sc.clustered {
            Layout::Clustered {
                n_clusters: sc.n_clusters,
                spread: sc.cluster_spread,
            }
        } else {
            Layout::Uniform
        };
        let spec = SceneSpec {
            image_id: id.clone(),
            width: sc.width,
            height: sc.height,
            n_points: counts[i],
            layout,
            blob_sigma: sc.blob_sigma,
            blob_amplitude: sc.blob_amplitude,
            seed: item_seed(cfg.seed, i),
        };
        let (image, ann) = gen_synthetic_scene(&spec)?;
        image.write_pgm(out_dir.join(format!("{id}.pgm")))?;
        save_annotations(&ann, out_dir.join(format!("{id}.json")))?;
        Ok(format!("{id}.json"))
    })?;

    let manifest = serde_json::to_string_pretty(&names).expect("string array");
    write_text(&out_dir.join("manifest.json"), &format!("{manifest}\n"))?;
    println!(
        "generated {} scenes ({}x{}) under {}",
        sc.n_images,
        sc.width,
        sc.height,
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_gen_targets(
    cfg: &PipelineConfig,
    manifest: &Path,
    out_dir: &Path,
    threads: usize,
) -> Result<(), CliError> {
    let entries = load_manifest(manifest)?;
    ensure_dir(out_dir)?;
    let written = run_indexed(entries.len(), threads, |i| {
        let entry = &entries[i];
        let ann = load_annotations(&entry.annotation_path)?;
        let mut files = 0usize;
        for &level in &cfg.levels {
            let map = match level {
                Level::Inf => render_localization(&ann, ann.width(), ann.height())?,
                finite => render_density(&ann, &cfg.kernel.policy(finite))?,
            };
            let name = format!("{}_{}.qdm", entry.stem, level.label());
            write_qdm(&map, out_dir.join(name))?;
            files += 1;
        }
        Ok(files)
    })?;
    println!(
        "wrote {} density maps for {} images under {}",
        written.iter().sum::<usize>(),
        entries.len(),
        out_dir.display()
    );
    Ok(())
}
