//! Subcommand implementations. Each takes plain arguments and returns a
//! [`crate::CliError`] carrying its exit code, so both `main` and the test
//! suite can call them directly.

mod evaluate;
mod gen;
mod stats;
mod train;

pub use evaluate::{cmd_evaluate, EvaluateArgs};
pub use gen::{cmd_gen_synth, cmd_gen_targets};
pub use stats::cmd_stats;
pub use train::cmd_train;

use std::io::Write;
use std::path::Path;

use crate::CliError;

/// Create `dir` if needed and write `lines` joined by newlines.
pub(crate) fn write_text(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    file.write_all(content.as_bytes())
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}
