//! Shared harness plumbing: error-to-exit-code mapping, metrics documents,
//! deterministic output writing, and the per-seed thread fan-out.

use serde::Serialize;
use std::path::{Path, PathBuf};

/// Stable exit-code contract: 0 success, 2 config, 3 numerical, 4 I/O.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self {
            CliError::Config(_) => "config error",
            CliError::Numeric(_) => "numerical failure",
            CliError::Io(_) => "i/o failure",
        };
        write!(f, "{kind}: {}", self.message())
    }
}

impl From<neuroctl_core::trainer::TrainerError> for CliError {
    fn from(e: neuroctl_core::trainer::TrainerError) -> Self {
        use neuroctl_core::trainer::TrainerError as E;
        match e {
            E::EmptyCorpus => CliError::Config(e.to_string()),
            E::Numerical(m) => CliError::Numeric(m),
            E::Tensor(t) => CliError::Numeric(t.to_string()),
        }
    }
}

impl From<neuroctl_core::checkpoint::CheckpointError> for CliError {
    fn from(e: neuroctl_core::checkpoint::CheckpointError) -> Self {
        use neuroctl_core::checkpoint::CheckpointError as E;
        match e {
            E::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// The metrics document every command emits.
#[derive(Debug, Serialize)]
pub struct MetricsDoc {
    pub experiment: String,
    pub seed: u64,
    pub metrics: serde_json::Value,
    pub pass: bool,
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Numeric(format!("serialize {}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

/// Timestamps are quarantined here so metric files stay byte-stable.
pub fn append_sidecar_log(dir: &Path, line: &str) {
    let _ = std::fs::create_dir_all(dir);
    let path = dir.join("run.log");
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let _ = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| {
            use std::io::Write;
            writeln!(f, "{stamp} {line}")
        });
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Run one closure per seed on worker threads, collecting results in seed
/// order so reports are deterministic regardless of scheduling.
pub fn run_seeds<T, F>(seeds: &[u64], f: F) -> CliResult<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> CliResult<T> + Sync,
{
    let mut slots: Vec<Option<CliResult<T>>> = seeds.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for &seed in seeds {
            let f = &f;
            handles.push(scope.spawn(move || f(seed)));
        }
        for (slot, handle) in slots.iter_mut().zip(handles) {
            *slot = Some(handle.join().unwrap_or_else(|_| {
                Err(CliError::Numeric("worker thread panicked".into()))
            }));
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}
