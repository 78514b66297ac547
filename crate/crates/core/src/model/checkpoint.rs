//! Binary checkpoint container: magic `TVCK`, version, a config/metadata
//! text blob, then one record per tensor (name, dims, f64 data, all
//! little-endian). Loading rebuilds the model from the embedded config and
//! fills every parameter and batchnorm statistic by name; anything missing,
//! extra, or mis-shaped fails loudly.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Model, ModelError};
use crate::nn::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training metadata carried alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    /// Test accuracy at the checkpointed epoch (the metric snapshot).
    pub test_accuracy: f64,
    pub class_names: Vec<String>,
}

pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct MetaDoc {
    meta: CheckpointMeta,
}

pub fn save_checkpoint(
    model: &Model,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), ModelError> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let blob = format!(
        "{}\n{}",
        model.config().to_toml(),
        toml::to_string(&MetaDoc { meta: meta.clone() }).expect("meta serializes")
    );
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob.as_bytes());

    let names = model.param_names();
    let params = model.params();
    for (name, tensor) in names.iter().zip(params) {
        write_record(&mut out, name, tensor);
    }
    for (name, tensor) in model.state_tensors() {
        write_record(&mut out, &name, &tensor);
    }

    let mut file = fs::File::create(path).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    file.write_all(&out).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_record(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            got: version,
        });
    }
    let blob_len = r.u64()? as usize;
    let blob = std::str::from_utf8(r.slice(blob_len)?)
        .map_err(|_| ModelError::CorruptCheckpoint("config blob is not UTF-8".into()))?;
    let cfg = ArchConfig::from_toml(blob)?;
    let meta: MetaDoc =
        toml::from_str(blob).map_err(|e| ModelError::CorruptCheckpoint(format!("metadata: {e}")))?;

    // Seed is irrelevant; every tensor gets overwritten and verified below.
    let mut model = Model::build(cfg, 0)?;
    let mut expected: Vec<String> = model.param_names();
    expected.extend(model.state_tensors().into_iter().map(|(n, _)| n));
    let mut filled = vec![false; expected.len()];

    while !r.at_end() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.slice(name_len)?)
            .map_err(|_| ModelError::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(
                r.slice(8)?.try_into().expect("8-byte slice"),
            ));
        }
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| ModelError::CorruptCheckpoint(format!("tensor `{name}`: {e}")))?;
        match expected.iter().position(|n| *n == name) {
            Some(idx) => {
                model.set_named(&name, &tensor)?;
                filled[idx] = true;
            }
            None => {
                return Err(ModelError::CorruptCheckpoint(format!(
                    "unexpected tensor `{name}` for this architecture"
                )))
            }
        }
    }
    if let Some(idx) = filled.iter().position(|f| !f) {
        return Err(ModelError::CorruptCheckpoint(format!(
            "checkpoint is missing tensor `{}`",
            expected[idx]
        )));
    }
    Ok(Checkpoint {
        model,
        meta: meta.meta,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn slice(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::CorruptCheckpoint(
                "file truncated mid-record".into(),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        self.slice(n)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.slice(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.slice(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionMode;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn probe(seed: u64) -> Tensor {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let data = (0..128 * 128).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[1, 1, 128, 128], data).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            epoch: 29,
            seed: 17,
            test_accuracy: 0.9375,
            class_names: vec!["a".into(), "b".into(), "c".into(), "d".into()],
        }
    }

    #[test]
    fn round_trip_reproduces_forward_bitwise() {
        let model = Model::build(ArchConfig::compact(4), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tvck");
        save_checkpoint(&model, &meta(), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta, meta());
        for seed in [1u64, 2, 3] {
            let x1 = probe(seed);
            let x2 = probe(seed + 100);
            let a = model.forward_fused(Some(&x1), Some(&x2)).unwrap();
            let b = loaded.model.forward_fused(Some(&x1), Some(&x2)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let model = Model::build(ArchConfig::compact(4), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tvck");
        save_checkpoint(&model, &meta(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&cut),
            Err(ModelError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn bad_magic_and_version_are_detected() {
        let model = Model::build(ArchConfig::compact(4), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tvck");
        save_checkpoint(&model, &meta(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = path.with_extension("badmagic");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(ModelError::CorruptCheckpoint(_))
        ));

        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        let bad = path.with_extension("badver");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(ModelError::VersionMismatch { .. })
        ));
    }

    #[test]
    fn branch_only_checkpoints_round_trip() {
        let mut cfg = ArchConfig::compact(4);
        cfg.mode = FusionMode::Branch2Only;
        let model = Model::build(cfg, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b2.tvck");
        save_checkpoint(&model, &meta(), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let x = probe(4);
        assert_eq!(
            model.forward_fused(None, Some(&x)).unwrap(),
            loaded.model.forward_fused(None, Some(&x)).unwrap()
        );
    }
}
