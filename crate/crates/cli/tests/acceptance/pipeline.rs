use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use genhmr::io::{read_dataset, write_keypoints};
use genhmr::pipeline::sample_keypoints;
use sha2::{Digest, Sha256};

use crate::Checks;

const CONFIG: &str = "image_size = 32
patch_size = 8
focal = 142.85714285714286
heatmap_sigma = 1.0
n_layers = 1
tokenizer_steps = 60
steps = 40
eval_every = 20
eval_samples = 4
";

fn run(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_genhmr"))
        .args(args)
        .current_dir(dir)
        .env("GHMR_THREADS", "2")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn pipeline(dir: &Path) -> Result<BTreeMap<String, String>, String> {
    std::fs::write(dir.join("toy.toml"), CONFIG).map_err(|e| e.to_string())?;
    run(dir, &["gen-data", "--n", "24", "--seed", "1", "--out", "train.jsonl", "--config", "toy.toml"])?;
    run(dir, &["gen-data", "--n", "6", "--seed", "2", "--out", "test.jsonl", "--config", "toy.toml"])?;
    run(dir, &["train-tokenizer", "--config", "toy.toml", "--data", "train.jsonl", "--eval", "test.jsonl", "--out", "tok.ghmr"])?;
    run(
        dir,
        &[
            "train-model", "--config", "toy.toml", "--data", "train.jsonl", "--eval", "test.jsonl", "--tokenizer", "tok.ghmr",
            "--out", "model.ghmr",
        ],
    )?;
    let test = read_dataset(&dir.join("test.jsonl"), 32).map_err(|e| e.to_string())?;
    write_keypoints(&dir.join("kp.csv"), &sample_keypoints(&test, 1)).map_err(|e| e.to_string())?;
    run(
        dir,
        &[
            "infer", "--ckpt", "model.ghmr", "--input", "test.jsonl", "--index", "1", "--keypoints", "kp.csv", "--topk", "3",
            "--refine", "3", "--out", "inf",
        ],
    )?;
    run(dir, &["eval", "--ckpt", "model.ghmr", "--data", "test.jsonl", "--topk", "2", "--refine", "2", "--out", "ev"])?;
    let mut digests = BTreeMap::new();
    hash_tree(dir, dir, &mut digests).map_err(|e| e.to_string())?;
    Ok(digests)
}

fn hash_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            hash_tree(root, &path, out)?;
            continue;
        }
        let name = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
        if name.contains("timings") {
            continue;
        }
        let digest = Sha256::digest(std::fs::read(&path)?);
        out.insert(name, digest.iter().map(|b| format!("{b:02x}")).collect());
    }
    Ok(())
}

pub fn reproducibility(checks: &mut Checks) {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs.iter().map(|d| pipeline(d.path())).collect();
    match (&runs[0], &runs[1]) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<_> = a.keys().filter(|k| b.get(*k) != a.get(*k)).cloned().collect();
            let same_set = a.keys().eq(b.keys());
            checks.expect(
                same_set && differing.is_empty(),
                format!("{} artefacts byte-identical across two runs{}", a.len(), if differing.is_empty() {
                    String::new()
                } else {
                    format!(", differing: {}", differing.join(", "))
                }),
            );
        }
        (Err(e), _) | (_, Err(e)) => checks.expect(false, e.clone()),
    }
}
