//! The critic and the multi-scale L1 feature-matching loss.
//!
//! The input image is masked once by the predicted crack map and once by the
//! ground truth. Both products go through the same stack of stride-2 conv
//! blocks, and the loss is the mean absolute difference of the features,
//! averaged per layer and then over layers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::graph::{Graph, StoreHandle, Var};
use crate::mask::{BinaryMask, ProbabilityMap};
use crate::params::{kaiming_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Where each block's features are read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureTap {
    /// After the leaky ReLU.
    #[default]
    Post,
    /// Before the leaky ReLU.
    Pre,
}

/// Default critic parameter bound. The critic maximises an L1 distance that
/// grows linearly with its weights, so some bound is required.
pub const DEFAULT_WEIGHT_CLIP: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub in_channels: usize,
    pub block_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub tap: FeatureTap,
    /// After every critic update, parameters are clamped to `[-c, c]`.
    /// Serialized as a number, or `false` when disabled.
    #[serde(with = "clip_format")]
    pub weight_clip: Option<f64>,
}

mod clip_format {
    use core::fmt;

    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(c) => s.serialize_f64(*c),
            None => s.serialize_bool(false),
        }
    }

    struct Clip;

    impl<'de> Visitor<'de> for Clip {
        type Value = Option<f64>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a positive number or `false`")
        }
        fn visit_bool<E: de::Error>(self, v: bool) -> Result<Self::Value, E> {
            if v {
                Err(E::invalid_value(de::Unexpected::Bool(true), &self))
            } else {
                Ok(None)
            }
        }
        fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
            Ok(Some(v))
        }
        fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
            Ok(Some(v as f64))
        }
        fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
            Ok(Some(v as f64))
        }
        fn visit_none<E: de::Error>(self) -> Result<Self::Value, E> {
            Ok(None)
        }
        fn visit_unit<E: de::Error>(self) -> Result<Self::Value, E> {
            Ok(None)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        d.deserialize_any(Clip)
    }
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            in_channels: 3,
            block_channels: vec![64, 128, 256, 512],
            kernel: 3,
            stride: 2,
            leaky_slope: 0.2,
            tap: FeatureTap::Post,
            weight_clip: Some(DEFAULT_WEIGHT_CLIP),
        }
    }
}

impl CriticConfig {
    /// Number of feature layers, one per block.
    pub fn feature_layers(&self) -> usize {
        self.block_channels.len()
    }

    /// Inputs must be divisible by this.
    pub fn divisor(&self) -> usize {
        self.stride.pow(self.block_channels.len() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.block_channels.len() < 2 {
            return bad(format!(
                "the critic needs at least 2 blocks, got {}",
                self.block_channels.len()
            ));
        }
        if self.in_channels == 0 || self.block_channels.contains(&0) {
            return bad("critic channel counts must be positive".into());
        }
        if self.kernel.is_multiple_of(2) || self.kernel == 0 {
            return bad(format!("critic kernel must be odd, got {}", self.kernel));
        }
        if self.stride == 0 {
            return bad("critic stride must be positive".into());
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!(
                "leaky slope {} must be finite and non-negative",
                self.leaky_slope
            ));
        }
        if let Some(c) = self.weight_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("weight_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Per-layer critic features.
pub type HierarchicalFeatures = Vec<Tensor>;

#[derive(Clone, Debug)]
pub struct Critic {
    config: CriticConfig,
    params: ParamStore,
    blocks: Vec<(ParamId, ParamId)>,
}

impl Critic {
    pub fn zeroed(config: CriticConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut blocks = Vec::new();
        let mut c_in = config.in_channels;
        let k = config.kernel;
        for (i, &c) in config.block_channels.iter().enumerate() {
            let w = params.add(&format!("block{}.w", i + 1), Tensor::zeros(&[c, c_in, k, k]))?;
            let b = params.add(&format!("block{}.b", i + 1), Tensor::zeros(&[c]))?;
            blocks.push((w, b));
            c_in = c;
        }
        Ok(Critic { config, params, blocks })
    }

    /// He-normal weights (leaky-ReLU gain), zero biases.
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        let mut critic = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = critic.config.leaky_slope;
        let gain = libm::sqrt(2.0 / (1.0 + a * a));
        for &(w, _) in &critic.blocks {
            let shape = critic.params.get(w).shape().to_vec();
            let fan_in = shape[1] * shape[2] * shape[3];
            *critic.params.get_mut(w) = kaiming_normal(&shape, fan_in, gain, &mut rng);
        }
        critic.clip();
        Ok(critic)
    }

    /// Applies [`CriticConfig::weight_clip`].
    pub fn clip(&mut self) {
        if let Some(c) = self.config.weight_clip {
            let ids: Vec<ParamId> = self.params.ids().collect();
            for id in ids {
                self.params
                    .get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = v.clamp(-c, c));
            }
        }
    }

    pub fn from_params(config: CriticConfig, params: &ParamStore) -> Result<Self> {
        let mut critic = Self::zeroed(config)?;
        critic.params.load_from(params)?;
        Ok(critic)
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn validate_input(&self, shape: &[usize]) -> Result<()> {
        let d = self.config.divisor();
        match *shape {
            [c, h, w] if c == self.config.in_channels && h > 0 && w > 0 && h % d == 0 && w % d == 0 => Ok(()),
            _ => Err(contract!(
                "critic expects [{}, H, W] with H and W positive multiples of {}, got {:?}",
                self.config.in_channels,
                d,
                shape
            )),
        }
    }
}

/// `x * m`, with the one-channel map broadcast over the channels of `x`.
pub fn mask_input_on(g: &mut Graph<'_>, x: Var, m: Var) -> Result<Var> {
    g.mul_spatial(x, m)
}

/// Features after every critic block.
pub fn critic_features_on(g: &mut Graph<'_>, h: StoreHandle, critic: &Critic, img: Var) -> Result<Vec<Var>> {
    critic.validate_input(g.shape(img))?;
    let cfg = &critic.config;
    let mut x = img;
    let mut out = Vec::with_capacity(critic.blocks.len());
    for &(w, b) in &critic.blocks {
        let w = g.param(h, w);
        let b = g.param(h, b);
        let z = g.conv2d(x, w, Some(b), cfg.stride, cfg.kernel / 2)?;
        x = g.leaky_relu(z, cfg.leaky_slope);
        out.push(match cfg.tap {
            FeatureTap::Post => x,
            FeatureTap::Pre => z,
        });
    }
    Ok(out)
}

/// Mean over layers of the per-layer mean absolute difference.
pub fn multiscale_l1_on(g: &mut Graph<'_>, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.len() != b.len() || a.is_empty() {
        return Err(contract!("feature stacks of {} and {} layers", a.len(), b.len()));
    }
    let per_layer = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| g.mean_abs_diff(x, y))
        .collect::<Result<Vec<_>>>()?;
    let total = g.sum(&per_layer)?;
    Ok(g.scale(total, 1.0 / a.len() as f64))
}

/// Multi-scale L1 distance between the critic's view of `x * s_pred` and
/// of `x * y`.
pub fn adversarial_loss_on(
    g: &mut Graph<'_>,
    h: StoreHandle,
    critic: &Critic,
    x: Var,
    s_pred: Var,
    y: Var,
) -> Result<Var> {
    let fake = mask_input_on(g, x, s_pred)?;
    let real = mask_input_on(g, x, y)?;
    let fa = critic_features_on(g, h, critic, fake)?;
    let fb = critic_features_on(g, h, critic, real)?;
    multiscale_l1_on(g, &fa, &fb)
}

pub fn mask_input(x: &Tensor, m: &ProbabilityMap) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let mv = g.input(m.tensor().clone());
    let out = mask_input_on(&mut g, xv, mv)?;
    Ok(g.value(out).clone())
}

pub fn critic_features(critic: &Critic, img: &Tensor) -> Result<HierarchicalFeatures> {
    let mut g = Graph::new();
    let h = g.attach(&critic.params, false);
    let x = g.input(img.clone());
    let feats = critic_features_on(&mut g, h, critic, x)?;
    Ok(feats.into_iter().map(|v| g.value(v).clone()).collect())
}

pub fn multiscale_l1(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let av: Vec<Var> = a.iter().map(|t| g.input(t.clone())).collect();
    let bv: Vec<Var> = b.iter().map(|t| g.input(t.clone())).collect();
    let out = multiscale_l1_on(&mut g, &av, &bv)?;
    Ok(g.value(out).item())
}

pub fn adversarial_loss(critic: &Critic, x: &Tensor, s_pred: &ProbabilityMap, y: &BinaryMask) -> Result<f64> {
    let mut g = Graph::new();
    let h = g.attach(&critic.params, false);
    let xv = g.input(x.clone());
    let sv = g.input(s_pred.tensor().clone());
    let yv = g.input(y.to_tensor());
    let out = adversarial_loss_on(&mut g, h, critic, xv, sv, yv)?;
    Ok(g.value(out).item())
}
