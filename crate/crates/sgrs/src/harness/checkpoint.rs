//! Checkpoint persistence: student and teacher parameter tensors as TSR
//! files under one directory per step, described by a JSON manifest that
//! also pins the config's dynamics hash so a resume under different
//! hyperparameters is rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::net::NetworkParams;
use crate::teacher::ModelState;
use crate::tensor::Tensor;
use crate::tsr;

#[derive(Serialize, Deserialize)]
struct Manifest {
    step: usize,
    dynamics_hash: String,
    base_width: usize,
    num_classes: usize,
    ema_decay: f64,
    /// Parameter names in network order; each maps to
    /// `student/<name>.tsr` and `teacher/<name>.tsr`.
    tensors: Vec<String>,
}

pub fn checkpoint_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:06}"))
}

pub fn save_checkpoint(
    run_dir: &Path,
    state: &ModelState<f32>,
    dynamics_hash: &str,
) -> Result<PathBuf> {
    let dir = checkpoint_dir(run_dir, state.step);
    fs::create_dir_all(dir.join("student"))?;
    fs::create_dir_all(dir.join("teacher"))?;
    let mut tensors = Vec::new();
    for (side, net) in [("student", &state.student), ("teacher", &state.teacher)] {
        for (name, tensor) in net.params() {
            tsr::write_tensor(&dir.join(side).join(format!("{name}.tsr")), tensor)?;
            if side == "student" {
                tensors.push(name.clone());
            }
        }
    }
    let manifest = Manifest {
        step: state.step,
        dynamics_hash: dynamics_hash.to_string(),
        base_width: state.student.base_width(),
        num_classes: state.student.num_classes(),
        ema_decay: state.ema_decay(),
        tensors,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(dir)
}

/// Loads a checkpoint directory. When `expect_hash` is given, a manifest
/// recorded under a different dynamics hash is rejected.
pub fn load_checkpoint(dir: &Path, expect_hash: Option<&str>) -> Result<ModelState<f32>> {
    let raw = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| config_err(format!("invalid manifest: {e}")))?;
    if let Some(want) = expect_hash {
        if manifest.dynamics_hash != want {
            return Err(config_err(format!(
                "checkpoint at {} was trained under a different configuration \
                 (hash {} vs expected {want})",
                dir.display(),
                manifest.dynamics_hash
            )));
        }
    }
    let load_net = |side: &str| -> Result<NetworkParams<f32>> {
        let params: Result<Vec<(String, Tensor<f32>)>> = manifest
            .tensors
            .iter()
            .map(|name| {
                let t = tsr::read_tensor(&dir.join(side).join(format!("{name}.tsr")))?;
                Ok((name.clone(), t))
            })
            .collect();
        NetworkParams::from_parts(manifest.base_width, manifest.num_classes, params?)
    };
    ModelState::from_parts(
        load_net("student")?,
        load_net("teacher")?,
        manifest.ema_decay,
        manifest.step,
    )
}

/// The highest-step checkpoint under `run_dir`, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let dir = run_dir.join("checkpoints");
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir).ok()?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(step) = name
            .strip_prefix("step_")
            .and_then(|s| s.parse::<usize>().ok())
        {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn state() -> ModelState<f32> {
        let student = NetworkParams::<f32>::init(3, 2, 2).unwrap();
        let mut s = ModelState::new(student, 0.95).unwrap();
        s.ema_update();
        s.ema_update();
        s
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempdir().unwrap();
        let original = state();
        let saved = save_checkpoint(dir.path(), &original, "abc123").unwrap();
        let loaded = load_checkpoint(&saved, Some("abc123")).unwrap();
        assert_eq!(loaded.step, original.step);
        assert_eq!(loaded.ema_decay(), original.ema_decay());
        for ((n1, a), (n2, b)) in loaded
            .student
            .params()
            .iter()
            .zip(original.student.params())
        {
            assert_eq!(n1, n2);
            assert_eq!(a.data(), b.data());
        }
        for ((_, a), (_, b)) in loaded.teacher.params().iter().zip(original.teacher.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let saved = save_checkpoint(dir.path(), &state(), "abc123").unwrap();
        assert!(load_checkpoint(&saved, Some("zzz")).is_err());
        assert!(load_checkpoint(&saved, None).is_ok());
    }

    #[test]
    fn latest_picks_highest_step() {
        let dir = tempdir().unwrap();
        assert!(latest_checkpoint(dir.path()).is_none());
        let mut s = state(); // step 2
        save_checkpoint(dir.path(), &s, "h").unwrap();
        for _ in 0..10 {
            s.ema_update();
        }
        let newest = save_checkpoint(dir.path(), &s, "h").unwrap();
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), newest);
    }

    #[test]
    fn missing_checkpoint_is_an_io_error() {
        let dir = tempdir().unwrap();
        match load_checkpoint(&dir.path().join("nope"), None) {
            Err(crate::Error::Io(_)) => {}
            other => panic!("expected Io error, got {other:?}"),
        }
    }
}
