//! Experiment plumbing behind the command-line verbs: configuration files,
//! run directories, sweeps, synthetic corpora, evaluation and reports.

mod commands;
mod config;
mod plot;
mod report;

pub use commands::{
    cmd_eval, cmd_gen_data, cmd_sweep, cmd_train, format_evaluation, EvalRequest, EvalSplit, GenDataSummary, SweepRow,
    SweepSummary, CONFIG_SNAPSHOT, EVAL_CSV, HDF5_DIR, MANIFEST_HDF5, MANIFEST_RAWJSON, RAWJSON_DIR, RESULT_FILE,
    SEED_RESULT_FILE,
};
pub use config::{load_experiment, load_sweep, load_synthetic, ExperimentConfig, GlobalOptions, SweepAxis, SweepSpec};
pub use report::{cmd_report, Report, ReportRow, REPORT_CSV, REPORT_MD};

use crate::backbone::ModelError;
use crate::data::DataError;
use crate::trainer::TrainError;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("no results found under {0}")]
    NoResults(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("plot {path}: {message}")]
    Plot { path: PathBuf, message: String },
    /// Some seeds or sweep values failed; the rest were written.
    #[error("{0}")]
    Partial(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
        move |source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Short machine-readable error class.
    pub fn code(&self) -> &'static str {
        match self {
            HarnessError::Invalid(_) | HarnessError::Config { .. } => "invalid_config",
            HarnessError::NoResults(_) => "no_results",
            HarnessError::Io { .. } => "io",
            HarnessError::Plot { .. } => "plot",
            HarnessError::Partial(_) => "partial_failure",
            HarnessError::Train(TrainError::Config(_)) => "invalid_config",
            HarnessError::Train(TrainError::ClassCount { .. })
            | HarnessError::Model(ModelError::IncompatibleShape { .. } | ModelError::ChannelMismatch { .. })
            | HarnessError::Train(TrainError::Model(
                ModelError::IncompatibleShape { .. } | ModelError::ChannelMismatch { .. },
            )) => "incompatible",
            HarnessError::Train(TrainError::Model(ModelError::InvalidConfig(_)) | TrainError::Loss(_)) => {
                "invalid_config"
            }
            HarnessError::Data(DataError::InvalidSpec(_)) => "invalid_config",
            HarnessError::Data(
                DataError::Manifest(_) | DataError::DuplicateId(_) | DataError::Overlap(_) | DataError::MissingFile(_),
            ) => "invalid_manifest",
            HarnessError::Model(ModelError::InvalidConfig(_)) => "invalid_config",
            HarnessError::Train(TrainError::AllSeedsFailed(_) | TrainError::Diverged(_)) => "training_failed",
            _ => "runtime",
        }
    }

    /// 2 for problems with the inputs, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self.code() {
            "invalid_config" | "invalid_manifest" | "incompatible" | "no_results" => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        }
    }
}

/// Create `dir`, refusing a non-empty one unless `resume` is set.
pub(crate) fn prepare_out_dir(dir: &Path, resume: bool) -> Result<(), HarnessError> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(HarnessError::io(dir))?;
        if entries.next().is_some() && !resume {
            return Err(HarnessError::Invalid(format!(
                "output directory {} is not empty; choose another or resume it explicitly",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    std::fs::write(path, contents).map_err(HarnessError::io(path))
}
