//! Binary model serialization.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic      8 bytes   "DCNMODEL"
//! version    u32       currently 1
//! config     u32 byte length, then the network config as UTF-8 TOML
//! seed       u64
//! iterations u64
//! layers     for each layer in config order:
//!              comp-conv:       per (feature, channel) group a u32 component
//!                               count followed by (weight, mu_x, mu_y, sigma)
//!                               as f64 per component; then f64 biases
//!              dense-conv:      f64 weights (feature, channel, row, col),
//!                               then f64 biases
//!              fully-connected: f64 weights (output-major), then f64 biases
//!              other layers:    nothing
//! ```
//!
//! Trailing bytes are rejected.

use std::path::Path;

use crate::comp_layer::CompFilterBank;
use crate::config::NetworkConfig;
use crate::error::{io_err, DcnError, Result};
use crate::gaussian::GaussianComponent;
use crate::network::{Layer, Network};
use crate::tensor::{DenseFilterBank, FcParams};

pub const MAGIC: &[u8; 8] = b"DCNMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub network: Network,
    pub seed: u64,
    pub iterations: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(DcnError::Format(format!(
                "model file truncated reading {} at byte {}",
                what, self.pos
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| DcnError::Format(format!("{} count overflows", what)))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl ModelFile {
    pub fn new(network: Network, seed: u64, iterations: u64) -> Self {
        ModelFile {
            network,
            seed,
            iterations,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config = self.network.config().to_toml();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.iterations.to_le_bytes());
        for layer in self.network.layers() {
            match layer {
                Layer::CompConv(bank) => {
                    for group in bank.groups() {
                        out.extend_from_slice(&(group.len() as u32).to_le_bytes());
                        for c in group {
                            put_f64s(&mut out, &[c.weight, c.mu_x, c.mu_y, c.sigma]);
                        }
                    }
                    put_f64s(&mut out, bank.bias());
                }
                Layer::DenseConv(bank) => {
                    put_f64s(&mut out, &bank.weights);
                    put_f64s(&mut out, &bank.bias);
                }
                Layer::FullyConnected(fc) => {
                    put_f64s(&mut out, &fc.weights);
                    put_f64s(&mut out, &fc.bias);
                }
                Layer::Relu | Layer::MaxPool { .. } | Layer::SoftmaxLoss => {}
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(DcnError::Format("not a model file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(DcnError::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let config_len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(config_len, "config")?)
            .map_err(|_| DcnError::Format("embedded config is not UTF-8".into()))?;
        let config = NetworkConfig::parse(text)?;
        let seed = r.u64("seed")?;
        let iterations = r.u64("iterations")?;

        let shapes = config.shapes()?;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (spec, &(c, h, w)) in config.layers.iter().zip(&shapes) {
            use crate::config::LayerSpec;
            let layer = match *spec {
                LayerSpec::CompConv {
                    features, kernel, ..
                } => {
                    let mut groups = Vec::with_capacity(features * c);
                    for _ in 0..features * c {
                        let count = r.u32("component count")? as usize;
                        let raw = r.f64s(4 * count, "components")?;
                        groups.push(
                            raw.chunks_exact(4)
                                .map(|p| GaussianComponent::new(p[0], p[1], p[2], p[3]))
                                .collect(),
                        );
                    }
                    let bias = r.f64s(features, "bias")?;
                    let geom = crate::gaussian::KernelGeometry::new(kernel[1], kernel[0])?;
                    Layer::CompConv(CompFilterBank::new(features, c, geom, groups, bias)?)
                }
                LayerSpec::DenseConv { features, kernel } => {
                    let weights = r.f64s(features * c * kernel[0] * kernel[1], "weights")?;
                    let bias = r.f64s(features, "bias")?;
                    Layer::DenseConv(DenseFilterBank::new(
                        features, c, kernel[0], kernel[1], weights, bias,
                    )?)
                }
                LayerSpec::FullyConnected { outputs } => {
                    let inputs = c * h * w;
                    let weights = r.f64s(inputs * outputs, "weights")?;
                    let bias = r.f64s(outputs, "bias")?;
                    Layer::FullyConnected(FcParams::new(inputs, outputs, weights, bias)?)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Maxpool { window, stride } => Layer::MaxPool { window, stride },
                LayerSpec::SoftmaxLoss => Layer::SoftmaxLoss,
            };
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(DcnError::Format(format!(
                "{} trailing bytes after the parameters",
                bytes.len() - r.pos
            )));
        }
        let network = Network::from_layers(config, layers)?;
        Ok(ModelFile {
            network,
            seed,
            iterations,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CIFAR10_STANDARD;

    fn small() -> Network {
        let cfg = NetworkConfig::parse(include_str!("../../../configs/shapes-small.toml")).unwrap();
        Network::new(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let model = ModelFile::new(small(), 3, 17);
        let bytes = model.to_bytes();
        let back = ModelFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        let a: Vec<u64> = model.network.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.network.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn dense_network_round_trips() {
        let cfg = NetworkConfig::parse(CIFAR10_STANDARD).unwrap();
        let model = ModelFile::new(Network::new(cfg, 1).unwrap(), 1, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dcn");
        model.save(&path).unwrap();
        assert_eq!(ModelFile::load(&path).unwrap(), model);
    }

    #[test]
    fn pruned_groups_keep_their_sizes() {
        let mut net = small();
        if let Layer::CompConv(bank) = &mut net.layers_mut()[0] {
            bank.group_mut(0, 0).truncate(1);
        }
        let model = ModelFile::new(net, 0, 0);
        let back = ModelFile::from_bytes(&model.to_bytes()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn rejects_bad_files() {
        let bytes = ModelFile::new(small(), 0, 0).to_bytes();
        let mut wrong_version = bytes.clone();
        wrong_version[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            ModelFile::from_bytes(&wrong_version),
            Err(DcnError::UnsupportedVersion {
                found: 7,
                expected: 1
            })
        ));
        assert!(ModelFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelFile::from_bytes(&extra).is_err());
        assert!(ModelFile::from_bytes(b"NOTMODEL\x01\0\0\0").is_err());
    }
}
