//! Binary model persistence.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CXR1"  u32 version
//! u32 config_len  config_len bytes of ModelConfig JSON
//! u32 tensor_count
//! per tensor: u32 name_len, name bytes, u32 ndim, ndim × u64 extent,
//!             product(extents) × f32
//! ```

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CXR1";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("ModelConfig serialises");
    let params = model.params();
    let mut out = Vec::with_capacity(64 + config.len() + 4 * model.num_parameters());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated {
            context: context.to_string(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, context: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, context: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().expect("8 bytes")))
    }
}

/// Header and tensors of a checkpoint, before any model is built.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn decode(bytes: &[u8]) -> Result<Decoded, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    let expected = config
        .param_shapes()
        .map_err(|e| CheckpointError::Malformed(format!("stored config is invalid: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(CheckpointError::Malformed(format!(
            "{count} tensors stored, config implies {}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (i, (want_name, want_shape)) in expected.into_iter().enumerate() {
        let ctx = format!("tensor {i} ({want_name})");
        let name_len = r.u32(&ctx)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &ctx)?)
            .map_err(|_| CheckpointError::Malformed(format!("{ctx}: name is not UTF-8")))?
            .to_string();
        if name != want_name {
            return Err(CheckpointError::Malformed(format!("{ctx}: found name {name:?}")));
        }
        let ndim = r.u32(&ctx)? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64(&ctx).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if shape != want_shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: shape,
                expected: want_shape,
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &format!("values of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(Decoded { config, tensors })
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let decoded = decode(bytes)?;
    let mut model = Model::build(&decoded.config)?;
    model.set_params(decoded.tensors)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| {
        CheckpointError::Unreadable {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = read(path)?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and checks that it fits `expected`. Differences in
/// parameter shapes are reported as [`CheckpointError::ShapeMismatch`].
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Model<f32>> {
    let bytes = read(path)?;
    let decoded = decode(&bytes)?;
    check_compatible(&decoded.config, expected)?;
    let mut model = Model::build(&decoded.config)?;
    model.set_params(decoded.tensors)?;
    Ok(model)
}

fn check_compatible(stored: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let have = stored.param_shapes()?;
    let want = expected.param_shapes()?;
    for ((name, found), (_, exp)) in have.iter().zip(&want) {
        if found != exp {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                found: found.clone(),
                expected: exp.clone(),
            }
            .into());
        }
    }
    if have.len() != want.len() {
        return Err(CheckpointError::ConfigMismatch(format!(
            "checkpoint has {} parameter tensors, config expects {}",
            have.len(),
            want.len()
        ))
        .into());
    }
    if !stored.same_architecture(expected) {
        return Err(CheckpointError::ConfigMismatch(format!(
            "checkpoint input is {}×{}×{}, config expects {}×{}×{}",
            stored.input_size,
            stored.input_size,
            stored.channels,
            expected.input_size,
            expected.input_size,
            expected.channels
        ))
        .into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvBlock;

    fn config(input: usize) -> ModelConfig {
        ModelConfig {
            input_size: input,
            conv_blocks: vec![ConvBlock::new(2), ConvBlock::new(3)],
            fc_widths: vec![5],
            seed: 9,
            class_names: vec!["covid".into(), "normal".into()],
            ..ModelConfig::default()
        }
    }

    fn model() -> Model<f32> {
        Model::build(&config(12)).unwrap()
    }

    fn bits(m: &Model<f32>) -> Vec<Vec<u32>> {
        m.params()
            .iter()
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(bits(&m), bits(&back));
        assert_eq!(back.config(), m.config());
        assert_eq!(encode(&back), bytes);
        let x = Tensor::from_fn(&[2, 12, 12, 1], |i| (i % 144) as f32 / 144.0);
        assert_eq!(m.infer(&x).unwrap(), back.infer(&x).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cxr");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(bits(&load_checkpoint(&path).unwrap()), bits(&m));
        assert!(load_checkpoint_expecting(&path, &config(12)).is_ok());
    }

    #[test]
    fn truncation_anywhere_is_an_error() {
        let bytes = encode(&model());
        for cut in [0, 3, 6, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Truncated { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&model());
        bytes[4] = 7;
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::VersionMismatch { found: 7, expected: 1 })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic { .. })));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode(&model());
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn other_config_is_a_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cxr");
        save_checkpoint(&model(), &path).unwrap();
        let err = load_checkpoint_expecting(&path, &config(16)).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(CheckpointError::ShapeMismatch { ref name, .. }) if name == "fc1.weights"),
            "{err}"
        );
        let wider = ModelConfig {
            conv_blocks: vec![ConvBlock::new(4), ConvBlock::new(3)],
            ..config(12)
        };
        let err = load_checkpoint_expecting(&path, &wider).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(CheckpointError::ShapeMismatch { ref name, .. }) if name == "conv1.kernels"),
            "{err}"
        );
    }

    #[test]
    fn tampered_tensor_shape_is_detected() {
        let m = model();
        let mut bytes = encode(&m);
        let config_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        // first tensor: name_len, "conv1.kernels", ndim, then the first extent
        let extent_at = 12 + config_len + 4 + 4 + "conv1.kernels".len() + 4;
        bytes[extent_at] = 5;
        assert!(matches!(decode(&bytes), Err(CheckpointError::ShapeMismatch { .. })));
    }
}
