//! Golden-file helpers shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;

use shiftlab::config::ExperimentConfig;
use shiftlab::env::{Env, ObsMap, ShiftSpec};
use shiftlab::manifest::sha256_hex;

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares `actual` with the frozen file `name`. With `UPDATE_GOLDEN=1` the
/// file is (re)written instead.
pub fn check_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, want, "golden mismatch for {name}");
}

/// Golden comparison of the SHA-256 of a long rendering.
pub fn check_golden_hash(name: &str, rendering: &str) {
    check_golden(name, &format!("{}\n", sha256_hex(rendering.as_bytes())));
}

pub fn render(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join("\n")
}

pub fn default_env(cfg: &ExperimentConfig, shift: ShiftSpec) -> Env {
    let m = cfg.obs_map;
    let map = ObsMap::generate(m.seed, cfg.env.obs_dim, m.x_scale, m.v_scale);
    Env::new(&cfg.env, shift, cfg.profile.clone(), map, cfg.init).unwrap()
}
