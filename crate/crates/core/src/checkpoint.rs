//! NNKC checkpoint files: run config, network tensors and the centre bank.
//!
//! Layout (little-endian): magic `NNKC`, version `u16`, config JSON length
//! `u64` and bytes, then each tensor as rank `u8`, dims `u64`..., `f32`
//! data, then the bank as `m u64`, `d u64`, centres `f32`, labels `u32`,
//! weights `f32`, version `u64`. Tensor order is weight then bias for each
//! layer, followed by the softmax head when the config declares one.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::bank::CentreBank;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::net::{Activation, Layer, MlpModel};

const MAGIC: &[u8; 4] = b"NNKC";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: MlpModel,
    pub bank: CentreBank,
}

impl Checkpoint {
    /// Rounds all stored values to `f32` so that a save/load cycle is exact.
    pub fn new(config: RunConfig, mut model: MlpModel, mut bank: CentreBank) -> Result<Self> {
        if model.embedding_dim() != bank.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.embedding_dim(),
                found: bank.dim(),
            });
        }
        model.quantize_f32();
        bank.quantize_f32();
        Ok(Self { config, model, bank })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;
        let json = serde_json::to_vec(&self.config)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        for layer in self.model.layers().iter().chain(self.model.head()) {
            write_tensor(&mut w, layer.weight.shape(), layer.weight.iter())?;
            write_tensor(&mut w, layer.bias.shape(), layer.bias.iter())?;
        }
        let bank = &self.bank;
        w.write_u64::<LittleEndian>(bank.len() as u64)?;
        w.write_u64::<LittleEndian>(bank.dim() as u64)?;
        for &v in bank.centres() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        for &l in bank.labels() {
            w.write_u32::<LittleEndian>(l as u32)?;
        }
        for &v in bank.weights() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        w.write_u64::<LittleEndian>(bank.version())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint header", "bad magic, expected NNKC"));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::format(
                "checkpoint header",
                format!("unsupported version {version}"),
            ));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let config: RunConfig = serde_json::from_slice(&json)?;
        let spec = &config.model;

        let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
        for i in 0..=spec.hidden.len() {
            let last = i == spec.hidden.len();
            let (activation, dropout) = if last {
                (Activation::None, spec.embedding_dropout)
            } else {
                (Activation::Relu, spec.hidden_dropout)
            };
            layers.push(read_layer(&mut r, activation, dropout, &format!("layer {i}"))?);
        }
        let head = match spec.head_classes {
            Some(_) => Some(read_layer(&mut r, Activation::None, 0.0, "softmax head")?),
            None => None,
        };
        let model = MlpModel::from_layers(layers, head)?;

        let m = r.read_u64::<LittleEndian>()? as usize;
        let d = r.read_u64::<LittleEndian>()? as usize;
        let centres = read_f32s(&mut r, m * d)?;
        let mut labels = Vec::with_capacity(m);
        for _ in 0..m {
            labels.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let weights = read_f32s(&mut r, m)?;
        let bank_version = r.read_u64::<LittleEndian>()?;
        let num_classes = labels.iter().map(|&l| l + 1).max().unwrap_or(0);
        let centres = Array2::from_shape_vec((m, d), centres).map_err(|e| Error::format("bank", e.to_string()))?;
        let bank = CentreBank::new(centres, labels, weights, num_classes)?.with_version(bank_version);
        if bank.dim() != model.embedding_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.embedding_dim(),
                found: bank.dim(),
            });
        }
        Ok(Self { config, model, bank })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn write_tensor<'a>(w: &mut impl Write, shape: &[usize], data: impl Iterator<Item = &'a f64>) -> Result<()> {
    w.write_u8(shape.len() as u8)?;
    for &d in shape {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in data {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count.min(1 << 28));
    for _ in 0..count {
        out.push(r.read_f32::<LittleEndian>()? as f64);
    }
    Ok(out)
}

fn read_tensor(r: &mut impl Read, what: &str) -> Result<ArrayD<f64>> {
    let rank = r.read_u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let count = dims.iter().product();
    let data = read_f32s(r, count)?;
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::format(what.to_string(), e.to_string()))
}

fn read_layer(r: &mut impl Read, activation: Activation, dropout: f64, what: &str) -> Result<Layer> {
    let weight = read_tensor(r, what)?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::format(what.to_string(), "weight tensor must have rank 2"))?;
    let bias: Array1<f64> = read_tensor(r, what)?
        .into_dimensionality::<ndarray::Ix1>()
        .map_err(|_| Error::format(what.to_string(), "bias tensor must have rank 1"))?;
    Ok(Layer {
        weight,
        bias,
        activation,
        dropout,
    })
}
