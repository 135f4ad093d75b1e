//! `stats`: dataset summary over a manifest of annotation files.

use std::path::Path;

use qcrowd::annotations::{dataset_stats, load_annotations};

use crate::{load_manifest, run_indexed, CliError};

pub fn cmd_stats(manifest: &Path, json: bool, threads: usize) -> Result<(), CliError> {
    let entries = load_manifest(manifest)?;
    let sets = run_indexed(entries.len(), threads, |i| {
        Ok(load_annotations(&entries[i].annotation_path)?)
    })?;
    let report = dataset_stats(&sets)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report"));
    } else {
        println!("images:          {}", report.n_images);
        println!("annotations:     {}", report.n_annotations);
        println!("count min:       {}", report.min_count);
        println!("count max:       {}", report.max_count);
        println!("count mean:      {:.3}", report.mean_count);
        println!("count median:    {:.3}", report.median_count);
        println!(
            "mean image size: {:.1} x {:.1}",
            report.mean_width, report.mean_height
        );
        println!("mean density:    {:.6} heads/px", report.mean_density);
    }
    Ok(())
}
