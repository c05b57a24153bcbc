//! Weight snapshots: one little-endian `f64` file per tensor plus a JSON
//! manifest, and post-hoc diagnostics over them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{alignment_angle, excess_kurtosis, weight_magnitude_stats, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::feedback::RuleKind;
use crate::network::{Network, WeightOp};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    /// File name relative to the snapshot directory.
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    /// Weight-layer index.
    pub index: usize,
    /// `dense` or `conv`.
    pub kind: String,
    pub rule: RuleKind,
    pub lambda: f64,
    pub weight: TensorEntry,
    pub bias: Option<TensorEntry>,
    /// The feedback matrix `B` at snapshot time.
    pub feedback: TensorEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub epoch: usize,
    pub seed: u64,
    pub setting: String,
    pub layers: Vec<LayerEntry>,
}

fn write_tensor(dir: &Path, file: String, t: &Tensor) -> Result<TensorEntry> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let path = dir.join(&file);
    std::fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(TensorEntry {
        file,
        shape: t.shape().to_vec(),
    })
}

/// Reads one tensor file, checking its length against the manifest shape.
pub fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Tensor> {
    let path = dir.join(&entry.file);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let expected = entry.shape.iter().product::<usize>() * 8;
    if bytes.len() != expected {
        return Err(Error::Format {
            path,
            offset: bytes.len().min(expected) as u64,
            msg: format!("expected {expected} bytes for shape {:?}, found {}", entry.shape, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

/// Writes every weight layer's `W`, bias and current `B` into `dir`.
pub fn write_snapshot(net: &Network, dir: &Path, epoch: usize, seed: u64, setting: &str) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut layers = Vec::new();
    for w in net.weight_layers() {
        let k = w.index();
        let kind = match w.op() {
            WeightOp::Dense { .. } => "dense",
            WeightOp::Conv { .. } => "conv",
        };
        let bias = match w.bias() {
            Some(b) => Some(write_tensor(dir, format!("layer{k}.bias.bin"), b)?),
            None => None,
        };
        layers.push(LayerEntry {
            index: k,
            kind: kind.to_string(),
            rule: w.rule(),
            lambda: w.lambda(),
            weight: write_tensor(dir, format!("layer{k}.weight.bin"), w.weight())?,
            bias,
            feedback: write_tensor(dir, format!("layer{k}.feedback.bin"), &w.feedback_matrix()?)?,
        });
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        epoch,
        seed,
        setting: setting.to_string(),
        layers,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        offset: 0,
        msg: e.to_string(),
    })?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Format {
            path,
            offset: 0,
            msg: format!("unsupported snapshot format {}", manifest.format),
        });
    }
    Ok(manifest)
}

/// Weight statistics for every layer of a snapshot. The backward-signal
/// cosine needs data and is left empty.
pub fn diagnose(dir: &Path) -> Result<Vec<DiagnosticsRecord>> {
    let manifest = read_manifest(dir)?;
    manifest
        .layers
        .iter()
        .map(|entry| {
            let w = read_tensor(dir, &entry.weight)?;
            let b = read_tensor(dir, &entry.feedback)?;
            if w.shape() != b.shape() {
                return Err(Error::dim("snapshot feedback", w.shape(), b.shape()));
            }
            let reference = match entry.rule {
                RuleKind::Symmetric => w.signum(),
                _ => b,
            };
            let (mean_abs, std_abs) = weight_magnitude_stats(&w);
            Ok(DiagnosticsRecord {
                epoch: manifest.epoch,
                layer: entry.index,
                rule: entry.rule,
                alignment_deg: alignment_angle(&w, &reference).ok(),
                excess_kurtosis: excess_kurtosis(&w).ok(),
                mean_abs_weight: mean_abs,
                std_abs_weight: std_abs,
                signal_cos: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::layer_diagnostics;
    use crate::feedback::LayerAssignment;
    use crate::network::NetworkSpec;

    #[test]
    fn round_trip_matches_live_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetworkSpec::mlp(6, &[5], 3);
        let net = Network::build(&spec, &LayerAssignment::with_last_layer(RuleKind::SignSymmetric, RuleKind::Symmetric), 4).unwrap();
        let m = write_snapshot(&net, dir.path(), 2, 4, "ss+last-bp").unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        let w = read_tensor(dir.path(), &m.layers[0].weight).unwrap();
        assert_eq!(&w, net.weight_layers()[0].weight());

        let offline = diagnose(dir.path()).unwrap();
        let live = layer_diagnostics(&net, 2);
        assert_eq!(offline.len(), live.len());
        for (a, b) in offline.iter().zip(&live) {
            assert_eq!(a.alignment_deg, b.alignment_deg);
            assert_eq!(a.excess_kurtosis, b.excess_kurtosis);
            assert_eq!(a.rule, b.rule);
        }
    }

    #[test]
    fn short_tensor_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t.bin"), [0u8; 12]).unwrap();
        let entry = TensorEntry {
            file: "t.bin".into(),
            shape: vec![2],
        };
        assert!(matches!(read_tensor(dir.path(), &entry), Err(Error::Format { .. })));
    }
}
