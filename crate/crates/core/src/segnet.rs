//! The U-shaped segmentation network.
//!
//! Five encoder stages (two 3x3 conv + ReLU each, 2x2 max pooling between
//! stages), four UCBAM decoder stages fed by the encoder skips, and a deeply
//! supervised head: the bottleneck and every decoder output are reduced to one
//! channel, resized to the input resolution and squashed, and a 1x1 conv over
//! the five side logits gives the fused map.
//!
//! A side head is a 1x1 conv followed by bilinear resizing. Both are linear
//! and the bilinear weights of every output pixel sum to one, so the conv is
//! evaluated at the tap's own resolution first.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, Fusion, UcbamParams};
use crate::error::{contract, Error, Result};
use crate::graph::{Graph, StoreHandle, Var};
use crate::mask::{BinaryMask, ProbabilityMap};
use crate::params::{kaiming_normal, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::{Backbone, BackboneOutput};

/// Number of encoder stages; the decoder has one fewer.
pub const STAGES: usize = 5;
/// Side outputs: the bottleneck plus every decoder stage.
pub const SIDES: usize = STAGES;
/// Inputs must be divisible by this (four 2x poolings).
pub const DIVISOR: usize = 1 << (STAGES - 1);
/// Initial weight of each side logit in the fused head.
pub const FUSE_INIT: f64 = 1.0 / SIDES as f64;

/// Optional per-channel standardisation applied after scaling to `[0,1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub reduction_ratio: usize,
    pub side_count: usize,
    pub fusion: Fusion,
    pub normalization: Option<Normalization>,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            in_channels: 3,
            stage_channels: vec![64, 128, 256, 512, 1024],
            reduction_ratio: 16,
            side_count: SIDES,
            fusion: Fusion::Add,
            normalization: None,
        }
    }
}

impl SegNetConfig {
    /// A small ladder starting at `base` channels.
    pub fn tiny(base: usize, reduction_ratio: usize) -> Self {
        SegNetConfig {
            stage_channels: (0..STAGES).map(|k| base << k).collect(),
            reduction_ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.stage_channels.len() != STAGES {
            return bad(format!(
                "stage_channels needs {} entries, got {}",
                STAGES,
                self.stage_channels.len()
            ));
        }
        if self.stage_channels[0] == 0 {
            return bad("stage_channels must be positive".into());
        }
        for pair in self.stage_channels.windows(2) {
            if pair[1] != 2 * pair[0] {
                return bad(format!(
                    "stage_channels must double per stage, got {:?}",
                    self.stage_channels
                ));
            }
        }
        if self.side_count != SIDES {
            return bad(format!("side_count must be {}, got {}", SIDES, self.side_count));
        }
        let r = self.reduction_ratio;
        if r == 0 || !self.stage_channels[0].is_multiple_of(r) {
            return bad(format!(
                "reduction_ratio {} must divide every decoder width {:?}",
                r,
                &self.stage_channels[..STAGES - 1]
            ));
        }
        if let Some(n) = &self.normalization {
            if n.mean.len() != self.in_channels || n.std.len() != self.in_channels {
                return bad(format!("normalization needs {} means and stds", self.in_channels));
            }
            if n.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
                return bad("normalization std must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

fn conv_ids(store: &mut ParamStore, name: &str, co: usize, ci: usize, k: usize) -> Result<ConvIds> {
    Ok(ConvIds {
        w: store.add(&format!("{name}.w"), Tensor::zeros(&[co, ci, k, k]))?,
        b: store.add(&format!("{name}.b"), Tensor::zeros(&[co]))?,
    })
}

/// Probability maps produced by one forward pass, all at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SideOutputs {
    pub sides: Vec<ProbabilityMap>,
    pub fused: ProbabilityMap,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct SegNetOutput {
    pub handle: StoreHandle,
    /// Side probabilities, bottleneck first.
    pub sides: Vec<Var>,
    pub fused: Var,
    /// Named intermediate activations: `encoder1..5`, `ucbam1..4`
    /// (in order of application), `side1..5` and `fused`.
    pub features: Vec<(String, Var)>,
}

#[derive(Clone, Debug)]
pub struct SegNet {
    config: SegNetConfig,
    params: ParamStore,
    encoder: Vec<[ConvIds; 2]>,
    decoder: Vec<UcbamParams>,
    side_heads: Vec<ConvIds>,
    fuse: ConvIds,
}

impl SegNet {
    /// Builds the layout with every parameter zero.
    pub fn zeroed(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ch = &config.stage_channels;
        let mut encoder = Vec::with_capacity(STAGES);
        let mut c_in = config.in_channels;
        for (k, &c) in ch.iter().enumerate() {
            encoder.push([
                conv_ids(&mut store, &format!("encoder{}.conv1", k + 1), c, c_in, 3)?,
                conv_ids(&mut store, &format!("encoder{}.conv2", k + 1), c, c, 3)?,
            ]);
            c_in = c;
        }
        let mut decoder = Vec::with_capacity(STAGES - 1);
        for (i, &c) in ch[..STAGES - 1].iter().rev().enumerate() {
            decoder.push(UcbamParams::new(
                &mut store,
                &format!("ucbam{}", i + 1),
                c,
                config.reduction_ratio,
                config.fusion,
            )?);
        }
        let mut side_heads = Vec::with_capacity(SIDES);
        side_heads.push(conv_ids(&mut store, "side1", 1, ch[STAGES - 1], 1)?);
        for (i, d) in decoder.iter().enumerate() {
            side_heads.push(conv_ids(&mut store, &format!("side{}", i + 2), 1, d.channels, 1)?);
        }
        let fuse = conv_ids(&mut store, "fuse", 1, SIDES, 1)?;
        Ok(SegNet {
            config,
            params: store,
            encoder,
            decoder,
            side_heads,
            fuse,
        })
    }

    /// He-normal initialisation from `seed`; the fused head starts as the
    /// average of the side logits.
    pub fn new(config: SegNetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = libm::sqrt(2.0);
        let store = &mut net.params;
        for stage in &net.encoder {
            for conv in stage {
                let shape = store.get(conv.w).shape().to_vec();
                let fan_in = shape[1] * 9;
                *store.get_mut(conv.w) = kaiming_normal(&shape, fan_in, gain, &mut rng);
            }
        }
        for d in &net.decoder {
            d.init(store, &mut rng);
        }
        for head in &net.side_heads {
            let shape = store.get(head.w).shape().to_vec();
            *store.get_mut(head.w) = kaiming_normal(&shape, shape[1], 1.0, &mut rng);
        }
        store.get_mut(net.fuse.w).fill(FUSE_INIT);
        Ok(net)
    }

    /// Rebuilds a network from stored parameters, which must match the
    /// layout implied by `config` exactly.
    pub fn from_params(config: SegNetConfig, params: &ParamStore) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        net.params.load_from(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Checks an input image: `in_channels` channels, height and width
    /// positive multiples of 16.
    pub fn validate_input(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.dims3()?;
        if c != self.config.in_channels {
            return Err(contract!(
                "network expects {} input channels, got {}",
                self.config.in_channels,
                c
            ));
        }
        if h == 0 || w == 0 || h % DIVISOR != 0 || w % DIVISOR != 0 {
            return Err(contract!(
                "input {}x{} is not a positive multiple of {} in both dimensions",
                h,
                w,
                DIVISOR
            ));
        }
        Ok(())
    }

    fn normalized(&self, image: &Tensor) -> Tensor {
        match &self.config.normalization {
            None => image.clone(),
            Some(n) => {
                let plane = image.shape()[1] * image.shape()[2];
                Tensor::from_fn(image.shape(), |i| {
                    let c = i / plane;
                    (image.data()[i] - n.mean[c]) / n.std[c]
                })
            }
        }
    }

    /// Records a forward pass. With `trainable` the network's parameters
    /// receive gradients.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, image: &Tensor, trainable: bool) -> Result<SegNetOutput> {
        self.validate_input(image)?;
        let (_, height, width) = image.dims3()?;
        let h = g.attach(&self.params, trainable);
        let mut features = Vec::new();
        let mut x = g.input(self.normalized(image));
        let mut skips = Vec::with_capacity(STAGES);
        for (k, convs) in self.encoder.iter().enumerate() {
            if k > 0 {
                x = g.max_pool2(x)?;
            }
            x = conv_pair(g, h, convs, x)?;
            features.push((format!("encoder{}", k + 1), x));
            skips.push(x);
        }
        let mut taps = vec![x];
        for (i, d) in self.decoder.iter().enumerate() {
            let skip = skips[STAGES - 2 - i];
            x = attention::ucbam(g, h, d, skip, x)?;
            features.push((format!("ucbam{}", i + 1), x));
            taps.push(x);
        }
        let mut logits = Vec::with_capacity(SIDES);
        let mut sides = Vec::with_capacity(SIDES);
        for (i, (&tap, head)) in taps.iter().zip(&self.side_heads).enumerate() {
            let w = g.param(h, head.w);
            let b = g.param(h, head.b);
            let z = g.conv2d(tap, w, Some(b), 1, 0)?;
            let z = if g.shape(z)[1..] == [height, width] {
                z
            } else {
                g.upsample_bilinear(z, height, width)?
            };
            let s = g.sigmoid(z);
            features.push((format!("side{}", i + 1), s));
            logits.push(z);
            sides.push(s);
        }
        let cat = g.concat(&logits)?;
        let w = g.param(h, self.fuse.w);
        let b = g.param(h, self.fuse.b);
        let z = g.conv2d(cat, w, Some(b), 1, 0)?;
        let fused = g.sigmoid(z);
        features.push(("fused".into(), fused));
        Ok(SegNetOutput {
            handle: h,
            sides,
            fused,
            features,
        })
    }

    /// Side and fused probability maps for one image.
    pub fn infer(&self, image: &Tensor) -> Result<SideOutputs> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, false)?;
        let sides = out
            .sides
            .iter()
            .map(|&s| ProbabilityMap::new(g.value(s).clone()))
            .collect::<Result<Vec<_>>>()?;
        let fused = ProbabilityMap::new(g.value(out.fused).clone())?;
        Ok(SideOutputs { sides, fused })
    }

    /// The fused map thresholded with `>=`.
    pub fn predict(&self, image: &Tensor, threshold: f64) -> Result<BinaryMask> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(contract!("threshold {} outside (0, 1)", threshold));
        }
        Ok(self.infer(image)?.fused.threshold(threshold))
    }
}

/// Two padded 3x3 conv + ReLU layers.
fn conv_pair(g: &mut Graph<'_>, h: StoreHandle, convs: &[ConvIds; 2], x: Var) -> Result<Var> {
    let mut x = x;
    for conv in convs {
        let w = g.param(h, conv.w);
        let b = g.param(h, conv.b);
        let z = g.conv2d(x, w, Some(b), 1, 1)?;
        x = g.relu(z);
    }
    Ok(x)
}

/// Parameters of a stand-alone encoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    convs: [ConvIds; 2],
}

impl EncoderBlock {
    /// Registers `{prefix}.conv1.{w,b}` and `{prefix}.conv2.{w,b}`, zeroed.
    pub fn new(store: &mut ParamStore, prefix: &str, in_channels: usize, out_channels: usize) -> Result<Self> {
        Ok(EncoderBlock {
            convs: [
                conv_ids(store, &format!("{prefix}.conv1"), out_channels, in_channels, 3)?,
                conv_ids(store, &format!("{prefix}.conv2"), out_channels, out_channels, 3)?,
            ],
        })
    }

    pub fn conv_ids(&self, layer: usize) -> (ParamId, ParamId) {
        (self.convs[layer].w, self.convs[layer].b)
    }
}

/// Two padded 3x3 conv + ReLU layers, then 2x2 max pooling. Returns
/// `(pre_pool, pooled)`.
pub fn encoder_block(g: &mut Graph<'_>, h: StoreHandle, block: &EncoderBlock, f: Var) -> Result<(Var, Var)> {
    let (_, height, width) = g.value(f).dims3()?;
    if height % 2 != 0 || width % 2 != 0 {
        return Err(contract!("encoder input {}x{} has an odd side", height, width));
    }
    let pre = conv_pair(g, h, &block.convs, f)?;
    let pooled = g.max_pool2(pre)?;
    Ok((pre, pooled))
}

impl Backbone for SegNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn validate_input(&self, image: &Tensor) -> Result<()> {
        SegNet::validate_input(self, image)
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, image: &Tensor, trainable: bool) -> Result<BackboneOutput> {
        let out = SegNet::forward(self, g, image, trainable)?;
        Ok(BackboneOutput {
            handle: out.handle,
            sides: out.sides,
            fused: out.fused,
        })
    }
}
