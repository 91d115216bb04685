//! Run artifact persistence: a JSON header describing tensor names and
//! shapes followed by a flat little-endian f64 blob. Byte-stable for
//! identical artifacts, so reproducibility can be checked with a file
//! compare.

use crate::error::{Result, UcaError};
use crate::matrix::Matrix;
use crate::model::LinearMap;
use crate::trainer::{LossRecord, RunArtifact, TrainConfig};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"UCA1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct ArtifactHeader {
    run_seed: u64,
    config: TrainConfig,
    final_losses: LossRecord,
    tensors: Vec<TensorMeta>,
}

pub fn save_artifact(artifact: &RunArtifact, path: &Path) -> Result<()> {
    let maps: [(&str, &Matrix); 4] = [
        ("w_x", &artifact.w_x.weight),
        ("w_y", &artifact.w_y.weight),
        ("v_x", &artifact.v_x.weight),
        ("v_y", &artifact.v_y.weight),
    ];
    let header = ArtifactHeader {
        run_seed: artifact.run_seed,
        config: artifact.config.clone(),
        final_losses: artifact.final_losses,
        tensors: maps
            .iter()
            .map(|(name, m)| TensorMeta {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| UcaError::Data(format!("artifact header encode: {e}")))?;
    let mut f = std::fs::File::create(path)
        .map_err(|e| UcaError::io(path.display().to_string(), e))?;
    let write = |f: &mut std::fs::File, bytes: &[u8]| {
        f.write_all(bytes)
            .map_err(|e| UcaError::io(path.display().to_string(), e))
    };
    write(&mut f, MAGIC)?;
    write(&mut f, &(header_bytes.len() as u64).to_le_bytes())?;
    write(&mut f, &header_bytes)?;
    for (_, m) in maps {
        let mut blob = Vec::with_capacity(m.as_slice().len() * 8);
        for v in m.as_slice() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        write(&mut f, &blob)?;
    }
    Ok(())
}

pub fn load_artifact(path: &Path) -> Result<RunArtifact> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| UcaError::io(path.display().to_string(), e))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|e| UcaError::Data(format!("{}: truncated: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(UcaError::Data(format!(
            "{}: not a run artifact (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|e| UcaError::Data(format!("{}: truncated: {e}", path.display())))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|e| UcaError::Data(format!("{}: truncated header: {e}", path.display())))?;
    let header: ArtifactHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| UcaError::Data(format!("{}: bad header: {e}", path.display())))?;
    if header.tensors.len() != 4 {
        return Err(UcaError::Data(format!(
            "{}: expected 4 tensors, found {}",
            path.display(),
            header.tensors.len()
        )));
    }
    let mut maps = Vec::with_capacity(4);
    for meta in &header.tensors {
        let n = meta.rows * meta.cols;
        let mut blob = vec![0u8; n * 8];
        f.read_exact(&mut blob).map_err(|e| {
            UcaError::Data(format!(
                "{}: truncated tensor {}: {e}",
                path.display(),
                meta.name
            ))
        })?;
        let vals: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        maps.push(LinearMap {
            weight: Matrix::new(meta.rows, meta.cols, vals)?,
        });
    }
    let [w_x, w_y, v_x, v_y]: [LinearMap; 4] = maps.try_into().expect("length checked");
    Ok(RunArtifact {
        w_x,
        w_y,
        v_x,
        v_y,
        config: header.config,
        run_seed: header.run_seed,
        final_losses: header.final_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{center, ViewDataset};
    use crate::rng::RngStream;
    use crate::trainer::{train_run, Variant};

    fn toy_artifact() -> RunArtifact {
        let mut rng = RngStream::new(1);
        let x = center(&ViewDataset::new(Matrix::from_fn(6, 48, |_, _| {
            rng.uniform()
        })));
        let y = center(&ViewDataset::new(Matrix::from_fn(5, 48, |_, _| {
            rng.uniform()
        })));
        let mut config = TrainConfig::for_variant(Variant::CycUca);
        config.d = 3;
        config.hidden = 8;
        config.epochs = 1;
        config.batch_size = 16;
        train_run(&x, &y, &config, 3).unwrap()
    }

    #[test]
    fn artifact_round_trip_is_exact() {
        let artifact = toy_artifact();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run_0000.uca");
        save_artifact(&artifact, &path).unwrap();
        let loaded = load_artifact(&path).unwrap();
        assert_eq!(artifact, loaded);
    }

    #[test]
    fn identical_artifacts_serialize_to_identical_bytes() {
        let artifact = toy_artifact();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.uca");
        let p2 = dir.path().join("b.uca");
        save_artifact(&artifact, &p1).unwrap();
        save_artifact(&artifact, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.uca");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(load_artifact(&path), Err(UcaError::Data(_))));
    }
}
