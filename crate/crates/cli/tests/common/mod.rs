#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;
use wastebench_core::Label;
use wastebench_models::data::Dataset;

pub const BIN: &str = env!("CARGO_BIN_EXE_wastebench");

/// A scratch project: raw images, a manifest and a config, all relative to
/// one directory.
pub struct Project {
    pub dir: tempfile::TempDir,
}

pub const CONFIG: &str = r#"[paths]
manifest = "manifest.json"
data_root = "raw"
dataset_root = "data"
output_root = "runs"

[train]
batch_size = 8
learning_rate = 0.01
max_epochs = 3
patience = 3

[model]
kind = "single"
architecture = "toy_cnn"
"#;

impl Project {
    /// `positives` bright-patch and `negatives` dark-patch images; every
    /// fourth image of each class is tagged for the test split.
    pub fn new(positives: usize, negatives: usize) -> Project {
        let dir = tempfile::tempdir().unwrap();
        let data = Dataset::synthetic_bright_dark(2 * positives.max(negatives), 11);
        let (mut pos, mut neg) = (0, 0);
        let keep: Vec<usize> = data
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| match s.label {
                Some(Label::Positive) => {
                    pos += 1;
                    pos <= positives
                }
                _ => {
                    neg += 1;
                    neg <= negatives
                }
            })
            .map(|(i, _)| i)
            .collect();
        let data = data.subset(&keep);
        data.write_labeled_dir(&dir.path().join("raw")).unwrap();
        let mut counts = [0usize; 2];
        let images: Vec<_> = data
            .samples()
            .iter()
            .map(|s| {
                let label = s.label.unwrap();
                counts[label.index()] += 1;
                let id = s.name.trim_end_matches(".png");
                let mut entry = json!({
                    "id": id,
                    "path": format!("{}/{}", label.folder_name(), s.name),
                    "source": "synthetic",
                    "label": label.index(),
                });
                if counts[label.index()] % 4 == 0 {
                    entry["split"] = json!("test");
                }
                entry
            })
            .collect();
        let manifest = json!({ "images": images });
        fs::write(dir.path().join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
        Project { dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn config(&self) -> PathBuf {
        self.path("config.toml")
    }

    /// Append TOML to the project config.
    pub fn extend_config(&self, extra: &str) {
        let mut text = fs::read_to_string(self.config()).unwrap();
        text.push_str(extra);
        fs::write(self.config(), text).unwrap();
    }

    pub fn run(&self, args: &[&str]) -> Output {
        run_with(Some(&self.config()), args, &[])
    }

    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert_success(&out, args);
        String::from_utf8_lossy(&out.stdout).into_owned()
    }
}

/// Run the binary with a clean `WASTEBENCH_*` environment.
pub fn run_with(config: Option<&Path>, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    for (key, _) in std::env::vars() {
        if key.starts_with("WASTEBENCH_") {
            cmd.env_remove(key);
        }
    }
    cmd.env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

pub fn assert_success(out: &Output, args: &[&str]) {
    assert!(
        out.status.success(),
        "{args:?} exited with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every regular file under `root`, relative path mapped to its bytes.
pub fn snapshot(root: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}
