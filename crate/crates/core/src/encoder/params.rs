use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DCRB";
const FORMAT_VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8192,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            feedforward_dim: 128,
            max_len: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("feedforward_dim", self.feedforward_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("encoder {name} must be positive")));
        }
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v > u32::MAX as usize) {
            return Err(Error::InvalidArgument(format!("encoder {name} is too large")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Names and shapes of every tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (self.embed_dim, self.feedforward_dim);
        let mut out = vec![
            ("token_embedding".to_string(), vec![self.vocab_size, d]),
            ("position_embedding".to_string(), vec![self.max_len, d]),
        ];
        for l in 0..self.num_layers {
            let shapes: [(&str, Vec<usize>); PER_LAYER] = [
                ("ln1.gamma", vec![d]),
                ("ln1.beta", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.bq", vec![d]),
                ("attn.wk", vec![d, d]),
                ("attn.bk", vec![d]),
                ("attn.wv", vec![d, d]),
                ("attn.bv", vec![d]),
                ("attn.wo", vec![d, d]),
                ("attn.bo", vec![d]),
                ("ln2.gamma", vec![d]),
                ("ln2.beta", vec![d]),
                ("ffn.w1", vec![d, ff]),
                ("ffn.b1", vec![ff]),
                ("ffn.w2", vec![ff, d]),
                ("ffn.b2", vec![d]),
            ];
            out.extend(
                shapes
                    .into_iter()
                    .map(|(n, s)| (format!("layers.{l}.{n}"), s)),
            );
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

pub(crate) const PER_LAYER: usize = 16;

/// A named, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Encoder weights, double precision throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: EncoderConfig,
    tensors: Vec<Tensor<f64>>,
}

fn is_gain(name: &str) -> bool {
    name.ends_with(".gamma")
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".beta") || name.rsplit('.').next().is_some_and(|n| n.starts_with('b'))
}

impl Parameters {
    /// Gaussian(0, 0.02) weights and embeddings, zero biases, unit gains.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let data = if is_gain(&name) {
                    vec![1.0; n]
                } else if is_bias(&name) {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(rng)).collect()
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor<f64>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if &t.name != name || &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch {
                    name: t.name.clone(),
                });
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor `{}`", t.name)));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f64>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn check_congruent(&self, other: &Parameters) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch {
                name: "<parameter count>".into(),
            });
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::ShapeMismatch { name: a.name.clone() });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, FORMAT_VERSION);
        let c = &self.config;
        for v in [
            c.vocab_size,
            c.embed_dim,
            c.num_layers,
            c.num_heads,
            c.feedforward_dim,
            c.max_len,
        ] {
            w.u32(v as u32);
        }
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.str(&t.name);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u32(d as u32);
            }
            w.f64s(&t.data);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, FORMAT_VERSION)?;
        let mut fields = [0usize; 6];
        for f in &mut fields {
            *f = r.u32("config field")? as usize;
        }
        let config = EncoderConfig {
            vocab_size: fields[0],
            embed_dim: fields[1],
            num_layers: fields[2],
            num_heads: fields[3],
            feedforward_dim: fields[4],
            max_len: fields[5],
        };
        config.validate()?;
        let count = r.u32("tensor count")? as usize;
        if count != config.layout().len() {
            return Err(Error::Format(format!("unexpected tensor count {count}")));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            if rank > 4 {
                return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32("tensor dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let data = r.f64s(n, &name)?;
            tensors.push(Tensor { name, shape, data });
        }
        r.finish()?;
        Self::from_tensors(config, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Gradients with the same named-tensor structure as [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor<f64>>,
}

impl Gradients {
    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            tensors: config
                .layout()
                .into_iter()
                .map(|(name, shape)| {
                    let n = shape.iter().product();
                    Tensor {
                        name,
                        shape,
                        data: vec![0.0; n],
                    }
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f64>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn data_mut(&mut self) -> Vec<&mut [f64]> {
        self.tensors.iter_mut().map(|t| t.data.as_mut_slice()).collect()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|&v| v == 0.0))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_congruent(&self, params: &Parameters) -> Result<()> {
        if self.tensors.len() != params.tensors().len() {
            return Err(Error::ShapeMismatch {
                name: "<gradient count>".into(),
            });
        }
        for (g, p) in self.tensors.iter().zip(params.tensors()) {
            if g.name != p.name || g.shape != p.shape {
                return Err(Error::ShapeMismatch { name: g.name.clone() });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            feedforward_dim: 12,
            max_len: 16,
        }
    }

    #[test]
    fn layout_and_count() {
        let c = tiny();
        let p = Parameters::init(c, &mut seeded_rng(0)).unwrap();
        assert_eq!(p.tensors().len(), 2 + 2 * PER_LAYER);
        let per_layer = 4 * 8 + 4 * (8 * 8 + 8) + 8 * 12 + 12 + 12 * 8 + 8;
        assert_eq!(p.num_parameters(), 20 * 8 + 16 * 8 + 2 * per_layer);
        assert_eq!(p.num_parameters(), c.num_parameters());
        assert!(p.tensor("layers.1.ln2.gamma").unwrap().data.iter().all(|&v| v == 1.0));
        assert!(p.tensor("layers.0.attn.bq").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(p.tensor("layers.0.ln1.beta").unwrap().data.iter().all(|&v| v == 0.0));
        let w = &p.tensor("layers.0.ffn.w1").unwrap().data;
        let std = (w.iter().map(|&v| v.powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((0.01..0.03).contains(&std));
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let p = Parameters::init(tiny(), &mut seeded_rng(4)).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"DCRB");
        let q = Parameters::from_bytes(&bytes).unwrap();
        assert_eq!(q.to_bytes(), bytes);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = Parameters::init(tiny(), &mut seeded_rng(4)).unwrap().to_bytes();
        assert!(matches!(
            Parameters::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Parameters::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Parameters::from_bytes(&bad), Err(Error::UnsupportedVersion(9))));
    }
}
