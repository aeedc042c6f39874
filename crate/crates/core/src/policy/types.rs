use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Camera image plus proprioceptive state at one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Channel-major `C×S×S` pixels in `[0, 1]`.
    pub image: Vec<f64>,
    /// Gripper x, gripper y, closed flag, heading.
    pub proprio: Vec<f64>,
}

impl Observation {
    pub fn validate(&self, channels: usize, size: usize, proprio_dim: usize) -> Result<()> {
        if self.image.len() != channels * size * size {
            return Err(Error::shape(
                "observation",
                format!("image has {} values, expected {channels}x{size}x{size}", self.image.len()),
            ));
        }
        if self.proprio.len() != proprio_dim {
            return Err(Error::shape(
                "observation",
                format!("proprio has {} values, expected {proprio_dim}", self.proprio.len()),
            ));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("image values must lie in [0, 1]".into()));
        }
        if self.proprio.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("proprio".into()));
        }
        Ok(())
    }
}

/// Symbolic instruction: verb, object and target ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub verb: usize,
    pub object: usize,
    pub target: usize,
}

/// Horizon-`H` block of `D_a`-dimensional actions, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub horizon: usize,
    pub action_dim: usize,
    pub data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, action_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != horizon * action_dim {
            return Err(Error::shape(
                "action_chunk",
                format!("{} values for {horizon}x{action_dim}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action chunk".into()));
        }
        Ok(Self {
            horizon,
            action_dim,
            data,
        })
    }

    pub fn zeros(horizon: usize, action_dim: usize) -> Self {
        Self {
            horizon,
            action_dim,
            data: vec![0.0; horizon * action_dim],
        }
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.data[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
        self
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.horizon, self.action_dim], self.data.clone())
    }

    /// Euclidean distance between two chunks of the same shape.
    pub fn l2_distance(&self, other: &ActionChunk) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Fused representation tapped from the cross-attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPair {
    pub z_v: Vec<f64>,
    pub z_l: Vec<f64>,
    pub z_fused: Vec<f64>,
    /// Attention weights over image patches; sums to one.
    pub attn: Vec<f64>,
}
