//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use hypergcn::data::{write_synthetic_dataset, SkeletonLayout};

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    /// Value of the first `key=value` stdout line with this key.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.stdout.lines().find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
    }
}

pub fn hypergcn(args: &[&str], envs: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hypergcn"));
    cmd.args(args).env_remove("HGCN_SEED").env_remove("HGCN_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Eight two-class synthetic sequences on the five-joint chain.
pub fn synthetic_set(dir: &Path, val: bool) -> PathBuf {
    write_synthetic_dataset(dir, &SkeletonLayout::chain(5), 8, 2, 8, val, 1).expect("synthetic data")
}

/// The tiny model with two classes, one optimizer step per epoch on eight samples.
pub fn tiny_config(dir: &Path, manifest: &Path, epochs: usize, seed: u64) -> PathBuf {
    let text = format!(
        "layout=chain5\nnum_classes=2\nhyper_joints=2\nframes=8\nchannels=16,32,32\nstrides=1,2,2\n\
         k_scales=2,3,4,5,6,7,2,3\nstep_epochs=\nstep_factors=\nepochs={epochs}\nbatch_size=8\n\
         manifest={}\nseed={seed}\n",
        manifest.display()
    );
    let path = dir.join(format!("run_{epochs}_{seed}.cfg"));
    std::fs::write(&path, text).expect("config written");
    path
}
