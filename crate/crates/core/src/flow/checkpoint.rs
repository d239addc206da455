//! JSON checkpoint container. Every floating-point value is stored as
//! base64-encoded little-endian IEEE-754 doubles, so a reload is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::coupling::CouplingLayer;
use super::mlp::Mlp;
use super::model::{FlowArch, FlowModel, Standardizer};
use super::train::{TrainConfig, TrainState};
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "flowis-flow";
pub const FORMAT_VERSION: u32 = 1;
pub const FLOAT_ENCODING: &str = "f64-le-base64";

#[derive(Debug, Serialize, Deserialize)]
struct FileLayer {
    mask: Vec<bool>,
    sizes: Vec<usize>,
    weights: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileTraining {
    config: TrainConfig,
    epochs_done: usize,
    step: u64,
    best_epoch: usize,
    /// best validation NLL, initial validation NLL
    scalars: String,
    current: String,
    first_moment: String,
    second_moment: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileCheckpoint {
    format: String,
    format_version: u32,
    float_encoding: String,
    dim: usize,
    arch: FlowArch,
    standardizer_mean: String,
    standardizer_scale: String,
    layers: Vec<FileLayer>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    training: Option<FileTraining>,
}

/// A flow plus, optionally, what is needed to resume its training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub training: Option<(TrainConfig, TrainState)>,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let layers = m
            .layers()
            .iter()
            .map(|l| FileLayer {
                mask: l.mask().to_vec(),
                sizes: l.conditioner().sizes().to_vec(),
                weights: encode_f64s(l.params()),
            })
            .collect();
        let training = self.training.as_ref().map(|(cfg, st)| FileTraining {
            config: cfg.clone(),
            epochs_done: st.epochs_done,
            step: st.step,
            best_epoch: st.best_epoch,
            scalars: encode_f64s(&[st.best_val_nll, st.initial_val_nll]),
            current: encode_f64s(&st.current),
            first_moment: encode_f64s(&st.first_moment),
            second_moment: encode_f64s(&st.second_moment),
        });
        let file = FileCheckpoint {
            format: FORMAT_NAME.into(),
            format_version: FORMAT_VERSION,
            float_encoding: FLOAT_ENCODING.into(),
            dim: m.dim(),
            arch: m.arch().clone(),
            standardizer_mean: encode_f64s(&m.standardizer().mean),
            standardizer_scale: encode_f64s(&m.standardizer().scale),
            layers,
            training,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FileCheckpoint = serde_json::from_str(text)?;
        if file.format != FORMAT_NAME {
            return Err(Error::Checkpoint(format!("unexpected format `{}`", file.format)));
        }
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                file.format_version
            )));
        }
        if file.float_encoding != FLOAT_ENCODING {
            return Err(Error::Checkpoint(format!(
                "unsupported float encoding `{}`",
                file.float_encoding
            )));
        }
        file.arch.validate()?;
        let standardizer = Standardizer {
            mean: decode_f64s(&file.standardizer_mean)?,
            scale: decode_f64s(&file.standardizer_scale)?,
        };
        if standardizer.mean.len() != file.dim || standardizer.scale.len() != file.dim {
            return Err(Error::Checkpoint("standardizer dimension mismatch".into()));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for fl in file.layers {
            if fl.mask.len() != file.dim {
                return Err(Error::Checkpoint("layer mask dimension mismatch".into()));
            }
            let mlp = Mlp::from_params(fl.sizes, decode_f64s(&fl.weights)?)
                .ok_or_else(|| Error::Checkpoint("conditioner weight count mismatch".into()))?;
            let layer = CouplingLayer::from_parts(fl.mask, mlp, file.arch.bins, file.arch.tail_bound)
                .ok_or_else(|| Error::Checkpoint("conditioner shape does not match mask".into()))?;
            layers.push(layer);
        }
        if layers.len() != file.arch.layers {
            return Err(Error::Checkpoint("layer count mismatch".into()));
        }
        let model = FlowModel::from_parts(file.dim, file.arch, layers, standardizer);
        let training = match file.training {
            None => None,
            Some(t) => {
                let scalars = decode_f64s(&t.scalars)?;
                if scalars.len() != 2 {
                    return Err(Error::Checkpoint("bad training scalars".into()));
                }
                let state = TrainState {
                    epochs_done: t.epochs_done,
                    step: t.step,
                    first_moment: decode_f64s(&t.first_moment)?,
                    second_moment: decode_f64s(&t.second_moment)?,
                    current: decode_f64s(&t.current)?,
                    best_val_nll: scalars[0],
                    best_epoch: t.best_epoch,
                    initial_val_nll: scalars[1],
                };
                if state.current.len() != model.parameter_count() {
                    return Err(Error::Checkpoint("training state does not match model".into()));
                }
                Some((t.config, state))
            }
        };
        Ok(Self { model, training })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::RowMatrix;

    #[test]
    fn reload_is_bit_exact() {
        let arch = FlowArch {
            layers: 3,
            bins: 5,
            hidden: vec![7, 7],
            tail_bound: 3.0,
        };
        let mut model = FlowModel::with_random_parameters(3, arch, 4, 0.5).unwrap();
        model
            .set_standardizer(Standardizer {
                mean: vec![0.1, -2.0, 1.0 / 3.0],
                scale: vec![1.7, 0.3, std::f64::consts::PI],
            })
            .unwrap();
        let probe = RowMatrix::from_rows(&[[0.3, -2.2, 1.0], [1.1, -1.9, 4.0], [-3.0, -2.0, 0.0]]).unwrap();
        let before = model.log_prob_batch(&probe).unwrap();
        let ck = Checkpoint {
            model,
            training: None,
        };
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let after = back.model.log_prob_batch(&probe).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_version() {
        let model = FlowModel::identity(2, FlowArch::default()).unwrap();
        let text = Checkpoint {
            model,
            training: None,
        }
        .to_json()
        .unwrap()
        .replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn float_codec_round_trips_special_values() {
        let v = [0.0, -0.0, 1e-310, f64::MAX, -1.5, f64::INFINITY];
        let back = decode_f64s(&encode_f64s(&v)).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
