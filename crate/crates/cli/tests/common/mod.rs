// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const TINY: &str = r#"
seeds = [0, 1]

[dataset]
samples_per_class = 40
extra_dims = 4

[mlp]
input_dim = 6
hidden_width = 16
max_epochs = 5

[align]
max_epochs = 3
samples_per_epoch = 128
eval_samples = 32

[eval]
iia_samples = 80
divergence_samples = 40
"#;

pub fn write_tiny(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

pub fn repdiv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repdiv"))
        .current_dir(dir)
        .env_remove("REPDIV_OUT")
        .args(args)
        .output()
        .expect("spawn repdiv")
}

/// Run and require success; returns stdout.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = repdiv(dir, args);
    assert!(
        out.status.success(),
        "repdiv {args:?} failed with {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}
