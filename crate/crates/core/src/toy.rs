//! A small plain conv stack, used to exercise the trainer with a model that
//! has no side outputs.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::graph::Graph;
use crate::params::{kaiming_normal, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::{Backbone, BackboneOutput};

/// `3x3 conv + ReLU` layers followed by a `3x3 conv + sigmoid` to one
/// channel. Any input size works.
#[derive(Clone, Debug)]
pub struct ConvStack {
    in_channels: usize,
    params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl ConvStack {
    /// `widths` lists the hidden layer widths; the output layer is added.
    pub fn new(in_channels: usize, widths: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        let gain = libm::sqrt(2.0);
        for (i, &c) in widths.iter().chain([&1]).enumerate() {
            let g = if i == widths.len() { 1.0 } else { gain };
            let w = params.add(
                &format!("conv{}.w", i + 1),
                kaiming_normal(&[c, c_in, 3, 3], c_in * 9, g, &mut rng),
            )?;
            let b = params.add(&format!("conv{}.b", i + 1), Tensor::zeros(&[c]))?;
            layers.push((w, b));
            c_in = c;
        }
        Ok(ConvStack {
            in_channels,
            params,
            layers,
        })
    }

    /// Number of conv layers including the output layer.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

impl Backbone for ConvStack {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn validate_input(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.dims3()?;
        if c != self.in_channels || h == 0 || w == 0 {
            return Err(contract!(
                "expected a non-empty [{}, H, W] image, got {:?}",
                self.in_channels,
                image.shape()
            ));
        }
        Ok(())
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, image: &Tensor, trainable: bool) -> Result<BackboneOutput> {
        self.validate_input(image)?;
        let h = g.attach(&self.params, trainable);
        let mut x = g.input(image.clone());
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = g.param(h, w);
            let b = g.param(h, b);
            let z = g.conv2d(x, w, Some(b), 1, 1)?;
            x = if i == last { g.sigmoid(z) } else { g.relu(z) };
        }
        Ok(BackboneOutput {
            handle: h,
            sides: Vec::new(),
            fused: x,
        })
    }
}
