#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tsdn::dataio::{self, SynthConfig};

/// Small stripes dataset under `<root>/stripes`.
pub fn tiny_dataset(root: &Path) -> PathBuf {
    let cfg = SynthConfig {
        n_train: 16,
        n_test_normal: 4,
        n_test_abnormal: 4,
        ..SynthConfig::default()
    };
    dataio::generate_synthetic(&cfg, root).unwrap();
    root.to_path_buf()
}

pub fn tsdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsdn")).args(args).output().unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
