//! JSON-configured experiment runner: single runs, grid sweeps with
//! per-row checkpointing, deterministic per-row seeding, and CSV/JSON-lines
//! emission.
//!
//! Dataset manifests resolve against the directory named by the
//! `VFGNN_DATA` environment variable (default `data`).

mod config;
mod runner;

pub use config::{
    expand_grid, DatasetSpec, ExperimentConfig, GnnOverrides, GridSpec, Mode, RESULT_COLUMNS,
};
pub use runner::{
    emit_series, read_embeddings_csv, replay_params, run, sweep, write_embeddings_csv, ResultRow,
};

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "VFGNN_DATA";

/// Resolves the dataset root: `$VFGNN_DATA` or `data`.
pub fn data_root() -> std::path::PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::path::PathBuf::from("data"))
}

/// FNV-1a over the canonical JSON encoding of a config: the per-row seed
/// salt and the row identifier in sweep outputs.
pub fn config_digest<T: serde::Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    format!("{h:016x}")
}
