use super::Model;
use crate::error::{Error, Result};
use crate::linalg::{decode_tensor, encode_tensor, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
    precision: u8,
}

/// Checkpoint = one blob of concatenated tensor encodings plus a JSON
/// manifest mapping name -> (shape, offset). The frozen high-rank embedding
/// buffer is stored alongside the parameters so `TE` is reconstructible.
pub fn save_checkpoint<S: Scalar>(dir: &Path, model: &Model<S>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut manifest = BTreeMap::new();
    let mut add = |name: &str, tensor: &Tensor<S>, blob: &mut Vec<u8>| {
        let offset = blob.len();
        let enc = encode_tensor(tensor);
        manifest.insert(
            name.to_string(),
            ManifestEntry {
                shape: tensor.shape().to_vec(),
                offset,
                bytes: enc.len(),
                precision: S::PRECISION_TAG,
            },
        );
        blob.extend_from_slice(&enc);
    };
    for (name, tensor) in model.params.iter() {
        add(name, tensor, &mut blob);
    }
    add("buffer.t_perp", &model.t_perp, &mut blob);

    write_atomic(&dir.join("checkpoint.bin"), &blob)?;
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join("manifest.json"), &manifest_bytes)?;
    Ok(())
}

/// Load every named tensor recorded in a checkpoint manifest.
pub fn load_named_tensors<S: Scalar>(dir: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let manifest: BTreeMap<String, ManifestEntry> =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let blob = std::fs::read(dir.join("checkpoint.bin"))?;
    let mut out = Vec::with_capacity(manifest.len());
    for (name, entry) in manifest {
        let end = entry.offset + entry.bytes;
        if end > blob.len() {
            return Err(Error::Decode(format!("checkpoint entry {name} out of bounds")));
        }
        let tensor = decode_tensor::<S>(&blob[entry.offset..end])?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Decode(format!("checkpoint entry {name} shape mismatch")));
        }
        out.push((name, tensor));
    }
    Ok(out)
}

/// Write via a temp file and atomic rename so failures never leave partial
/// artifacts behind.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{params_from_named, ModelConfig};

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2.0,
            vocab: 16,
            seq_len: 4,
            precision: crate::linalg::Precision::F64,
        };
        let model = Model::<f64>::init(&cfg, 5).unwrap();
        let dir = std::env::temp_dir().join(format!("sloco_ckpt_{}", std::process::id()));
        save_checkpoint(&dir, &model).unwrap();
        let mut named = load_named_tensors::<f64>(&dir).unwrap();
        let t_perp_idx = named.iter().position(|(n, _)| n == "buffer.t_perp").unwrap();
        let (_, t_perp) = named.remove(t_perp_idx);
        assert_eq!(t_perp, model.t_perp);
        let params = params_from_named(&cfg, named).unwrap();
        assert_eq!(params, model.params);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
