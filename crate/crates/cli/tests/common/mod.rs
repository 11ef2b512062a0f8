//! Helpers for tests that drive the binary.
#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};

pub const FEDLOOM: &str = env!("CARGO_BIN_EXE_fedloom");

pub const NET_TASK: &str = r#"
[task]
n_classes = 4
train_per_class = 30
test_per_class = 25
spread = 0.2
dataset_seed = 5
allocation = [1, 1, 1]
batch_size = 20

[train]
epochs = 2
"#;

/// Worker processes that are sent SIGTERM when dropped.
pub struct Workers(pub Vec<Child>);

impl Drop for Workers {
    fn drop(&mut self) {
        for child in &mut self.0 {
            let _ = Command::new("kill")
                .arg("-TERM")
                .arg(child.id().to_string())
                .status();
        }
        for child in &mut self.0 {
            let _ = child.wait();
        }
    }
}

pub fn start_worker(dir: &Path, shard: usize, speed: f64) -> Result<(Child, String), String> {
    let path = dir.join(format!("worker{shard}.toml"));
    let text = format!(
        "role = \"worker\"\n{NET_TASK}\n[worker]\nshards = [{shard}]\nspeed_class = {speed:?}\nunit_cost = 0.0002\n"
    );
    std::fs::write(&path, text).map_err(|e| e.to_string())?;
    let mut child = Command::new(FEDLOOM)
        .args(["work", "--config"])
        .arg(&path)
        .env("FEDLOOM_LOG", "error")
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .map_err(|e| e.to_string())?;
    let address = line
        .trim()
        .strip_prefix("listening ")
        .ok_or_else(|| format!("worker {shard} printed {line:?}"))?
        .to_string();
    Ok((child, address))
}
