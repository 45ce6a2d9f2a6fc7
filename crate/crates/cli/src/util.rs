use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::args::Common;
use crate::config::RunConfig;
use crate::error::CliError;

/// Loads the config named by `--config` and applies the shared flags.
pub fn base_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(dir) = &common.out_dir {
        cfg.output_dir = Some(dir.clone());
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

/// Validates `cfg`, creates its output directory and returns it.
pub fn prepare_output(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let dir = cfg.output_dir()?.to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

/// Applies `f` to every item on at most `jobs` threads; output keeps input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                *slots[i].lock().expect("slot lock") = Some(f(item));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let text: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
        .collect();
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::config(format!("async runtime: {e}")))
}
