//! Parameter and FLOP accounting.
//!
//! FLOPs count convolutions, transposed convolutions and matrix-vector
//! products only, at two FLOPs per multiply-accumulate. Activations,
//! pooling, resampling, attention gating and bias additions are excluded.

use serde::{Deserialize, Serialize};

use crate::adversary::{critic_features_on, Critic};
use crate::error::Result;
use crate::graph::{Graph, LayerCost, LayerKind};
use crate::segnet::SegNet;
use crate::tensor::Tensor;

/// FLOPs per multiply-accumulate.
pub const FLOPS_PER_MAC: u64 = 2;

/// Reference figures for the full segmentation network.
pub const REFERENCE_PARAMS: f64 = 18.84e6;
pub const REFERENCE_FLOPS: f64 = 17.02e9;
pub const REFERENCE_FPS: f64 = 30.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub conv: u64,
    pub transposed_conv: u64,
    pub linear: u64,
    pub layers: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.conv + self.transposed_conv + self.linear
    }

    pub fn from_costs(costs: &[LayerCost]) -> Self {
        let mut b = FlopBreakdown::default();
        for c in costs {
            let f = c.macs * FLOPS_PER_MAC;
            match c.kind {
                LayerKind::Conv => b.conv += f,
                LayerKind::TransposedConv => b.transposed_conv += f,
                LayerKind::Linear => b.linear += f,
            }
            b.layers += 1;
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub height: usize,
    pub width: usize,
    pub params: u64,
    pub flops: FlopBreakdown,
    pub critic_params: Option<u64>,
    pub critic_flops: Option<FlopBreakdown>,
}

impl ComplexityReport {
    /// Relative deviation of the parameter count from [`REFERENCE_PARAMS`].
    pub fn params_deviation(&self) -> f64 {
        (self.params as f64 - REFERENCE_PARAMS) / REFERENCE_PARAMS
    }
}

/// FLOPs of one segmentation forward pass at `height x width`.
pub fn segnet_flops(net: &SegNet, height: usize, width: usize) -> Result<FlopBreakdown> {
    let image = Tensor::zeros(&[net.config().in_channels, height, width]);
    let mut g = Graph::new();
    net.forward(&mut g, &image, false)?;
    Ok(FlopBreakdown::from_costs(&g.layer_costs()))
}

/// FLOPs of one critic pass over a single masked image.
pub fn critic_flops(critic: &Critic, height: usize, width: usize) -> Result<FlopBreakdown> {
    let image = Tensor::zeros(&[critic.config().in_channels, height, width]);
    let mut g = Graph::new();
    let h = g.attach(critic.params(), false);
    let x = g.input(image);
    critic_features_on(&mut g, h, critic, x)?;
    Ok(FlopBreakdown::from_costs(&g.layer_costs()))
}

pub fn report(net: &SegNet, critic: Option<&Critic>, height: usize, width: usize) -> Result<ComplexityReport> {
    Ok(ComplexityReport {
        height,
        width,
        params: net.num_params() as u64,
        flops: segnet_flops(net, height, width)?,
        critic_params: critic.map(|c| c.params().num_scalars() as u64),
        critic_flops: critic.map(|c| critic_flops(c, height, width)).transpose()?,
    })
}
