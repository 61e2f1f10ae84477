//! The full trainable parameter set: both encoders, the propagation layers and
//! the matching head. Gradients and optimizer moments reuse the same type.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Dense, EncoderDims, EncoderParams, Mlp};
use crate::error::{Error, Result};
use crate::graph::{self, GnnLayerParams};
use crate::losses::MatchingHead;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub encoder: EncoderDims,
    pub gnn_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoders: EncoderParams,
    pub gnn: Vec<GnnLayerParams>,
    pub head: MatchingHead,
}

impl ModelParams {
    pub fn init(seed: u64, dims: ModelDims) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoders = EncoderParams::init_with(&mut rng, dims.encoder)?;
        let head = MatchingHead::init(dims.encoder.embed, &mut rng)?;
        Ok(Self {
            encoders,
            gnn: graph::init_layers(dims.encoder.embed, dims.gnn_layers),
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoders: self.encoders.zeros_like(),
            gnn: self
                .gnn
                .iter()
                .map(|l| Dense::zeros(l.d_in(), l.d_out()))
                .collect(),
            head: MatchingHead {
                mlp: self.head.mlp.zeros_like(),
            },
        }
    }

    fn dense_layers(&self) -> impl Iterator<Item = (&'static str, usize, &Dense)> {
        fn tag<'a>(name: &'static str, mlp: &'a Mlp) -> impl Iterator<Item = (&'static str, usize, &'a Dense)> {
            mlp.layers.iter().enumerate().map(move |(i, l)| (name, i, l))
        }
        tag("image", &self.encoders.image)
            .chain(tag("text", &self.encoders.text))
            .chain(self.gnn.iter().enumerate().map(|(i, l)| ("gnn", i, l)))
            .chain(tag("head", &self.head.mlp))
    }

    /// Every parameter tensor in a fixed order, with a readable name.
    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, i, l) in self.dense_layers() {
            out.push((format!("{name}.{i}.weight"), l.weight.data()));
            out.push((format!("{name}.{i}.bias"), l.bias.as_slice()));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let mlps = [&mut self.encoders.image, &mut self.encoders.text];
        for mlp in mlps {
            for l in &mut mlp.layers {
                out.push(l.weight.data_mut());
                out.push(l.bias.as_mut_slice());
            }
        }
        for l in &mut self.gnn {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        for l in &mut self.head.mlp.layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Shape signature: the length of every tensor plus every layer shape.
    pub fn shape_signature(&self) -> Vec<(usize, usize)> {
        self.dense_layers()
            .map(|(_, _, l)| (l.d_in(), l.d_out()))
            .chain(std::iter::once((self.encoders.image.layers.len(), self.gnn.len())))
            .collect()
    }

    pub fn check_same_structure(&self, other: &ModelParams) -> Result<()> {
        if self.shape_signature() != other.shape_signature()
            || self.encoders.text.layers.len() != other.encoders.text.layers.len()
            || self.head.mlp.layers.len() != other.head.mlp.layers.len()
        {
            return Err(Error::Structural("parameter sets have different shapes".into()));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.encoders.embed_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Reads the `i`-th scalar in flattened order.
    pub fn get_flat(&self, mut i: usize) -> f64 {
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("flat index out of range")
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("flat index out of range")
    }

    /// `self += scale * other`, elementwise.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
