//! Binary checkpoint serialization.
//!
//! Layout (all integers little-endian): magic "RDXC", u32 version = 1,
//! u32 config-blob length + UTF-8 JSON network config, u32 tensor count,
//! then per tensor: u16 name length, name bytes, u8 dtype (0 = f32),
//! u8 rank, u32 dims[rank], raw row-major payload. Tensors are emitted in
//! deterministic layer order (trainable parameters first, then populated
//! batchnorm running statistics), so save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{build_network, Network, NetworkConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RDXC";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Encodes one named tensor in the checkpoint's per-tensor record format.
pub fn tensor_record_bytes(name: &str, t: &Tensor<f32>) -> Vec<u8> {
    assert!(name.len() <= u16::MAX as usize, "tensor name too long");
    assert!(t.shape().len() <= u8::MAX as usize, "tensor rank too large");
    let mut out = Vec::with_capacity(4 + name.len() + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        push_u32(&mut out, d as u32);
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Serializes a network (config + every parameter and populated running
/// statistic) to checkpoint bytes.
pub fn checkpoint_bytes(net: &Network<f32>) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(net.config())?;
    let tensors: Vec<(String, &Tensor<f32>)> = net
        .trainable_params()
        .into_iter()
        .chain(net.state_tensors())
        .collect();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, config_json.len() as u32);
    out.extend_from_slice(&config_json);
    push_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        out.extend_from_slice(&tensor_record_bytes(&name, t));
    }
    Ok(out)
}

pub fn save_checkpoint(net: &Network<f32>, path: &Path) -> Result<()> {
    Ok(fs::write(path, checkpoint_bytes(net)?)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor<f32>)> {
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::CheckpointShape("tensor name is not UTF-8".into()))?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::CheckpointShape(format!(
            "tensor {name:?} has unsupported dtype {dtype}"
        )));
    }
    let rank = r.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let numel: usize = dims.iter().product();
    let payload = r.take(4 * numel)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&dims, data)
        .map_err(|e| Error::CheckpointShape(format!("tensor {name:?}: {e}")))
        .map(|t| (name, t))
}

/// Rebuilds a network from checkpoint bytes. The embedded config is
/// validated by building the network, then every stored tensor overwrites
/// its freshly initialized counterpart; a checkpoint missing any trainable
/// parameter is rejected.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let config_len = r.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(r.take(config_len)?)?;
    // The seed only matters for parameters, and every parameter is about to
    // be overwritten from the file.
    let mut net: Network<f32> = build_network(&config, 0)?;

    let count = r.u32()? as usize;
    let mut restored = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, tensor) = read_tensor(&mut r)?;
        net.restore_tensor(&name, tensor)?;
        restored.push(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointShape(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    for (name, _) in net.trainable_params() {
        if !restored.contains(&name) {
            return Err(Error::CheckpointShape(format!(
                "checkpoint is missing tensor {name:?}"
            )));
        }
    }
    Ok(net)
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    load_checkpoint_bytes(&fs::read(path)?)
}

/// Writes a single tensor as a standalone record file (the checkpoint's
/// per-tensor encoding without the surrounding container).
pub fn write_tensor_record(path: &Path, name: &str, t: &Tensor<f32>) -> Result<()> {
    Ok(fs::write(path, tensor_record_bytes(name, t))?)
}

pub fn read_tensor_record_bytes(bytes: &[u8]) -> Result<(String, Tensor<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    let out = read_tensor(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::CheckpointShape(format!(
            "{} trailing bytes after the tensor record",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn read_tensor_record(path: &Path) -> Result<(String, Tensor<f32>)> {
    read_tensor_record_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::rng::Rng;

    fn small_net(seed: u64) -> Network<f32> {
        let cfg = NetworkConfig::preset("table1_shrunk").unwrap();
        build_network(&cfg, seed).unwrap()
    }

    fn random_input(seed: u64, n: usize) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[n, 3, 8, 8], || rng.uniform() as f32)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        // Fresh network: no running stats yet.
        let net = small_net(1);
        let bytes = checkpoint_bytes(&net).unwrap();
        let reloaded = load_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&reloaded).unwrap(), bytes);

        // After a training pass the running statistics are included too.
        let mut net = small_net(1);
        net.forward(&random_input(2, 4), Mode::Training).unwrap();
        let bytes = checkpoint_bytes(&net).unwrap();
        let reloaded = load_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&reloaded).unwrap(), bytes);
        assert_eq!(reloaded.state_tensors().len(), 4); // 2 bn layers × (mean, var)
    }

    #[test]
    fn predictions_survive_the_roundtrip() {
        let mut net = small_net(7);
        net.forward(&random_input(0, 4), Mode::Training).unwrap();
        let bytes = checkpoint_bytes(&net).unwrap();
        let mut reloaded = load_checkpoint_bytes(&bytes).unwrap();
        for seed in 10..13 {
            let x = random_input(seed, 2);
            let a = net.forward(&x, Mode::Inference).unwrap();
            let b = reloaded.forward(&x, Mode::Inference).unwrap();
            assert_eq!(a.data(), b.data(), "seed {seed}");
        }
    }

    #[test]
    fn bad_magic_and_version_are_distinct_errors() {
        let net = small_net(1);
        let mut bytes = checkpoint_bytes(&net).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            load_checkpoint_bytes(&bytes),
            Err(Error::CheckpointMagic)
        ));

        let mut bytes = checkpoint_bytes(&net).unwrap();
        bytes[4] = 9; // version little-endian low byte
        assert!(matches!(
            load_checkpoint_bytes(&bytes),
            Err(Error::CheckpointVersion(9))
        ));
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let mut net = small_net(1);
        net.forward(&random_input(2, 4), Mode::Training).unwrap();
        let bytes = checkpoint_bytes(&net).unwrap();
        // Cut at a spread of prefix lengths covering header, config, tensor
        // headers, and payloads.
        for cut in [0, 3, 4, 7, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = load_checkpoint_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::CheckpointTruncated | Error::Json(_)),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn missing_tensors_are_rejected() {
        let net = small_net(1);
        let config_json = serde_json::to_vec(net.config()).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RDXC");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&config_json);
        bytes.extend_from_slice(&0u32.to_le_bytes()); // zero tensors
        assert!(matches!(
            load_checkpoint_bytes(&bytes),
            Err(Error::CheckpointShape(_))
        ));
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let net = small_net(1);
        let bytes = checkpoint_bytes(&net).unwrap();
        // Rebuild with a conv1.bias record of the wrong length by writing a
        // handcrafted checkpoint with one bogus tensor.
        let config_json = serde_json::to_vec(net.config()).unwrap();
        let mut bad = Vec::new();
        bad.extend_from_slice(b"RDXC");
        bad.extend_from_slice(&1u32.to_le_bytes());
        bad.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        bad.extend_from_slice(&config_json);
        bad.extend_from_slice(&1u32.to_le_bytes());
        bad.extend_from_slice(&tensor_record_bytes(
            "conv1.bias",
            &Tensor::zeros(&[3]), // conv1 has 8 filters, not 3
        ));
        assert!(matches!(
            load_checkpoint_bytes(&bad),
            Err(Error::CheckpointShape(_))
        ));
        // The original bytes stay loadable.
        assert!(load_checkpoint_bytes(&bytes).is_ok());
    }

    #[test]
    fn unknown_tensor_name_is_rejected() {
        let net = small_net(1);
        let config_json = serde_json::to_vec(net.config()).unwrap();
        let mut bad = Vec::new();
        bad.extend_from_slice(b"RDXC");
        bad.extend_from_slice(&1u32.to_le_bytes());
        bad.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
        bad.extend_from_slice(&config_json);
        bad.extend_from_slice(&1u32.to_le_bytes());
        bad.extend_from_slice(&tensor_record_bytes("conv9.bias", &Tensor::zeros(&[8])));
        assert!(matches!(
            load_checkpoint_bytes(&bad),
            Err(Error::CheckpointShape(_))
        ));
    }

    #[test]
    fn tensor_record_roundtrip() {
        let mut rng = Rng::new(5);
        let t: Tensor<f32> = Tensor::from_fn(&[3, 4, 5], || rng.uniform() as f32);
        let bytes = tensor_record_bytes("input", &t);
        let (name, back) = read_tensor_record_bytes(&bytes).unwrap();
        assert_eq!(name, "input");
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
        assert!(matches!(
            read_tensor_record_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::CheckpointTruncated)
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rdxc");
        let mut net = small_net(3);
        net.forward(&random_input(1, 2), Mode::Training).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let reloaded = load_checkpoint(&path).unwrap();
        assert_eq!(
            checkpoint_bytes(&reloaded).unwrap(),
            checkpoint_bytes(&net).unwrap()
        );
    }
}
