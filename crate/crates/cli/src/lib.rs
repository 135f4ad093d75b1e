//! Library backing the `qcrowd` binary. Each subcommand is an ordinary
//! function so integration tests can drive the pipeline in-process.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use qcrowd::annotations::AnnotationError;
use qcrowd::density::DensityError;
use qcrowd::eval::EvalError;
use qcrowd::loss::LossError;
use qcrowd::model::ModelError;
use qcrowd::raster::RasterError;
use qcrowd::sampling::SamplingError;

/// Exit code for data, validation, and I/O failures.
pub const EXIT_DATA: i32 = 3;
/// Exit code for numerical failures (divergence, non-finite values).
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    pub(crate) fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AnnotationError> for CliError {
    fn from(e: AnnotationError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DensityError> for CliError {
    fn from(e: DensityError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SamplingError> for CliError {
    fn from(e: SamplingError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Diverged { .. } | ModelError::NonFinite { .. } => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// One dataset entry: the annotation JSON and its sibling image.
#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub stem: String,
    pub annotation_path: PathBuf,
    pub image_path: PathBuf,
}

/// A manifest is a JSON array of annotation file paths, resolved relative
/// to the manifest's own directory; each image shares its annotation's stem
/// with a `.pgm` extension.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let names: Vec<String> = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("invalid manifest {}: {e}", path.display())))?;
    if names.is_empty() {
        return Err(CliError::Data(format!(
            "manifest {} lists no annotation files",
            path.display()
        )));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    names
        .into_iter()
        .map(|name| {
            let annotation_path = base.join(&name);
            let stem = annotation_path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| CliError::Data(format!("bad manifest entry: {name}")))?
                .to_string();
            let image_path = annotation_path.with_extension("pgm");
            Ok(ManifestEntry {
                stem,
                annotation_path,
                image_path,
            })
        })
        .collect()
}

/// Worker count: explicit flag, then the QCK_THREADS variable, then the
/// machine's available parallelism.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize, CliError> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("QCK_THREADS") {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .map_err(|_| CliError::Data(format!("QCK_THREADS is not a number: {v}")))?,
            Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        },
    };
    if n == 0 {
        return Err(CliError::Data("thread count must be >= 1".into()));
    }
    Ok(n)
}

/// Run `f(0..n)` across `threads` workers and return the results in index
/// order. Outputs are bitwise independent of the thread count: each item is
/// computed from its index alone and slotted back by position.
pub fn run_indexed<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(usize) -> Result<T, CliError> + Sync,
{
    let slots: Vec<Mutex<Option<Result<T, CliError>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.max(1).min(n.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                *slots[i].lock().expect("result slot") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("worker filled slot"))
        .collect()
}
