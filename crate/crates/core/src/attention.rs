//! Global attention pooling, the CBAM+ channel/spatial attention pair and the
//! UCBAM decoder block.
//!
//! Every function records its computation on a [`Graph`] so it can be
//! differentiated. Parameters are looked up in a [`ParamStore`] attached to
//! the graph; [`AttentionParams`] and [`UcbamParams`] only hold their ids.

use alloc::format;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::graph::{Graph, StoreHandle, Var};
use crate::params::{kaiming_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

/// How a UCBAM block merges the upsampled decoder map with its skip input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Elementwise sum.
    #[default]
    Add,
    /// Channel concatenation followed by a 1x1 projection back to `C`.
    Concat,
}

/// Parameter ids of one CBAM+ module over `channels` channels.
///
/// * `w_k`: `[1, C, 1, 1]`, the pooling logit map.
/// * `w0`: `[C/r, C]`, `w1`: `[C, C/r]`, the shared channel MLP (no bias).
/// * `sa_w`: `[1, 2, 3, 3]`, `sa_b`: `[1]`, the spatial attention conv.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub channels: usize,
    pub reduction: usize,
    pub w_k: ParamId,
    pub w0: ParamId,
    pub w1: ParamId,
    pub sa_w: ParamId,
    pub sa_b: ParamId,
}

impl AttentionParams {
    /// Registers zero-initialised parameters under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::InvalidConfig(format!(
                "reduction ratio {} must divide channel count {}",
                reduction, channels
            )));
        }
        let hidden = channels / reduction;
        Ok(AttentionParams {
            channels,
            reduction,
            w_k: store.add(&format!("{prefix}.gap.w_k"), Tensor::zeros(&[1, channels, 1, 1]))?,
            w0: store.add(&format!("{prefix}.ca.w0"), Tensor::zeros(&[hidden, channels]))?,
            w1: store.add(&format!("{prefix}.ca.w1"), Tensor::zeros(&[channels, hidden]))?,
            sa_w: store.add(&format!("{prefix}.sa.w"), Tensor::zeros(&[1, 2, 3, 3]))?,
            sa_b: store.add(&format!("{prefix}.sa.b"), Tensor::zeros(&[1]))?,
        })
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.channels;
        let hidden = c / self.reduction;
        let gain = libm::sqrt(2.0);
        *store.get_mut(self.w_k) = kaiming_normal(&[1, c, 1, 1], c, 1.0, rng);
        *store.get_mut(self.w0) = kaiming_normal(&[hidden, c], c, gain, rng);
        *store.get_mut(self.w1) = kaiming_normal(&[c, hidden], hidden, 1.0, rng);
        *store.get_mut(self.sa_w) = kaiming_normal(&[1, 2, 3, 3], 18, 1.0, rng);
        store.get_mut(self.sa_b).fill(0.0);
    }

    fn check(&self, g: &Graph<'_>, f: Var) -> Result<()> {
        let (c, _, _) = g.value(f).dims3()?;
        if c != self.channels {
            return Err(contract!(
                "attention module built for {} channels applied to {}",
                self.channels,
                c
            ));
        }
        Ok(())
    }
}

/// Softmax-weighted spatial pooling: `sum_j alpha_j x_j` with
/// `alpha = softmax_j(w_k . x_j)`. Returns a `[C]` descriptor.
pub fn global_attention_pooling(g: &mut Graph<'_>, h: StoreHandle, p: &AttentionParams, f: Var) -> Result<Var> {
    let alpha = gap_weights(g, h, p, f)?;
    g.weighted_sum(f, alpha)
}

/// The pooling weights `alpha` as a `[1,H,W]` map summing to one.
pub fn gap_weights(g: &mut Graph<'_>, h: StoreHandle, p: &AttentionParams, f: Var) -> Result<Var> {
    p.check(g, f)?;
    let w_k = g.param(h, p.w_k);
    let logits = g.conv2d(f, w_k, None, 1, 0)?;
    Ok(g.softmax_all(logits))
}

fn shared_mlp(g: &mut Graph<'_>, h: StoreHandle, p: &AttentionParams, v: Var) -> Result<Var> {
    let w0 = g.param(h, p.w0);
    let w1 = g.param(h, p.w1);
    let hidden = g.matvec(w0, v)?;
    let hidden = g.relu(hidden);
    g.matvec(w1, hidden)
}

/// Channel weights `sigmoid(mlp(gap(f)) + mlp(maxpool(f)))`, shape `[C]`.
pub fn channel_attention(g: &mut Graph<'_>, h: StoreHandle, p: &AttentionParams, f: Var) -> Result<Var> {
    let gap = global_attention_pooling(g, h, p, f)?;
    let max = g.spatial_max(f)?;
    let a = shared_mlp(g, h, p, gap)?;
    let b = shared_mlp(g, h, p, max)?;
    let logits = g.add(a, b)?;
    Ok(g.sigmoid(logits))
}

/// Spatial weights `sigmoid(conv3x3([mean_c f; max_c f]))`, shape `[1,H,W]`.
pub fn spatial_attention(g: &mut Graph<'_>, h: StoreHandle, p: &AttentionParams, f: Var) -> Result<Var> {
    g.value(f).dims3()?;
    let avg = g.channel_mean(f)?;
    let max = g.channel_max(f)?;
    let pooled = g.concat(&[avg, max])?;
    let w = g.param(h, p.sa_w);
    let b = g.param(h, p.sa_b);
    let logits = g.conv2d(pooled, w, Some(b), 1, 1)?;
    Ok(g.sigmoid(logits))
}

/// Channel attention, then spatial attention on the re-weighted map.
pub fn cbam_plus(g: &mut Graph<'_>, h: StoreHandle, p: &AttentionParams, f: Var) -> Result<Var> {
    let ca = channel_attention(g, h, p, f)?;
    let refined = g.mul_channel(f, ca)?;
    let sa = spatial_attention(g, h, p, refined)?;
    g.mul_spatial(refined, sa)
}

/// Parameter ids of one UCBAM decoder block producing `channels` channels.
///
/// `up_w` is the transposed-conv kernel `[2C, C, 2, 2]` (stride 2). With
/// [`Fusion::Concat`] a 1x1 projection `[C, 2C, 1, 1]` follows the concat.
#[derive(Clone, Debug, PartialEq)]
pub struct UcbamParams {
    pub channels: usize,
    pub fusion: Fusion,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub proj: Option<(ParamId, ParamId)>,
    pub attention: AttentionParams,
}

impl UcbamParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        fusion: Fusion,
    ) -> Result<Self> {
        let c = channels;
        let up_w = store.add(&format!("{prefix}.up.w"), Tensor::zeros(&[2 * c, c, 2, 2]))?;
        let up_b = store.add(&format!("{prefix}.up.b"), Tensor::zeros(&[c]))?;
        let proj = match fusion {
            Fusion::Add => None,
            Fusion::Concat => Some((
                store.add(&format!("{prefix}.proj.w"), Tensor::zeros(&[c, 2 * c, 1, 1]))?,
                store.add(&format!("{prefix}.proj.b"), Tensor::zeros(&[c]))?,
            )),
        };
        let attention = AttentionParams::new(store, prefix, c, reduction)?;
        Ok(UcbamParams {
            channels,
            fusion,
            up_w,
            up_b,
            proj,
            attention,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.channels;
        // Each output pixel of a 2x2 stride-2 transposed conv sees one tap per input channel.
        *store.get_mut(self.up_w) = kaiming_normal(&[2 * c, c, 2, 2], 2 * c, 1.0, rng);
        store.get_mut(self.up_b).fill(0.0);
        if let Some((w, b)) = self.proj {
            *store.get_mut(w) = kaiming_normal(&[c, 2 * c, 1, 1], 2 * c, 1.0, rng);
            store.get_mut(b).fill(0.0);
        }
        self.attention.init(store, rng);
    }
}

/// Upsamples `below` (`[2C, H/2, W/2]`) to the skip's shape (`[C, H, W]`),
/// fuses the two and applies CBAM+.
pub fn ucbam(g: &mut Graph<'_>, h: StoreHandle, p: &UcbamParams, skip: Var, below: Var) -> Result<Var> {
    let (c, sh, sw) = g.value(skip).dims3()?;
    let (bc, bh, bw) = g.value(below).dims3()?;
    if c != p.channels || bc != 2 * c || 2 * bh != sh || 2 * bw != sw {
        return Err(contract!(
            "ucbam({}) needs skip [{c}, H, W] and below [{}, H/2, W/2], got skip {:?} and below {:?}",
            p.channels,
            2 * p.channels,
            g.shape(skip),
            g.shape(below)
        ));
    }
    let up = upsample(g, h, p, below)?;
    let fused = fuse(g, h, p, skip, up)?;
    cbam_plus(g, h, &p.attention, fused)
}

/// The transposed-conv stage of [`ucbam`].
pub fn upsample(g: &mut Graph<'_>, h: StoreHandle, p: &UcbamParams, below: Var) -> Result<Var> {
    let w = g.param(h, p.up_w);
    let b = g.param(h, p.up_b);
    g.conv_transpose2d(below, w, Some(b), 2, 0)
}

/// The skip-fusion stage of [`ucbam`].
pub fn fuse(g: &mut Graph<'_>, h: StoreHandle, p: &UcbamParams, skip: Var, up: Var) -> Result<Var> {
    match p.proj {
        None => g.add(up, skip),
        Some((w, b)) => {
            let cat = g.concat(&[up, skip])?;
            let w = g.param(h, w);
            let b = g.param(h, b);
            g.conv2d(cat, w, Some(b), 1, 0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize, r: usize) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", c, r).unwrap();
        (store, p)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gap_two_pixel_example() {
        let (mut store, p) = setup(1, 1);
        store.get_mut(p.w_k).fill(1.0);
        let mut g = Graph::new();
        let h = g.attach(&store, false);
        let f = g.input(Tensor::from_vec(&[1, 1, 2], alloc::vec![1.0, 3.0]).unwrap());
        let out = global_attention_pooling(&mut g, h, &p, f).unwrap();
        let e1 = libm::exp(1.0);
        let e3 = libm::exp(3.0);
        let expected = (e1 * 1.0 + e3 * 3.0) / (e1 + e3);
        assert!((g.value(out).item() - expected).abs() < 1e-12);
        assert!((g.value(out).item() - 2.7616).abs() < 1e-4);
    }

    #[test]
    fn gap_with_zero_logits_is_average_pooling() {
        let (store, p) = setup(3, 1);
        let x = random(&[3, 4, 5], 1);
        let mut g = Graph::new();
        let h = g.attach(&store, false);
        let f = g.input(x.clone());
        let out = global_attention_pooling(&mut g, h, &p, f).unwrap();
        for c in 0..3 {
            let mean = x.channel(c).iter().sum::<f64>() / 20.0;
            assert!((g.value(out).data()[c] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_params_gate_by_one_quarter() {
        let (store, p) = setup(4, 2);
        let x = random(&[4, 3, 3], 2);
        let mut g = Graph::new();
        let h = g.attach(&store, false);
        let f = g.input(x.clone());
        let out = cbam_plus(&mut g, h, &p, f).unwrap();
        assert_eq!(g.value(out), &x.map(|v| 0.25 * v));
    }

    #[test]
    fn reduction_must_divide_channels() {
        let mut store = ParamStore::new();
        assert!(AttentionParams::new(&mut store, "a", 6, 4).is_err());
    }

    #[test]
    fn ucbam_rejects_bad_shapes() {
        let mut store = ParamStore::new();
        let p = UcbamParams::new(&mut store, "d", 2, 1, Fusion::Add).unwrap();
        let mut g = Graph::new();
        let h = g.attach(&store, false);
        let skip = g.input(Tensor::zeros(&[2, 4, 4]));
        let below = g.input(Tensor::zeros(&[4, 3, 2]));
        assert!(ucbam(&mut g, h, &p, skip, below).is_err());
    }

    #[test]
    fn concat_fusion_keeps_shape() {
        let mut store = ParamStore::new();
        let p = UcbamParams::new(&mut store, "d", 2, 1, Fusion::Concat).unwrap();
        p.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new();
        let h = g.attach(&store, false);
        let skip = g.input(random(&[2, 4, 4], 4));
        let below = g.input(random(&[4, 2, 2], 5));
        let out = ucbam(&mut g, h, &p, skip, below).unwrap();
        assert_eq!(g.shape(out), &[2, 4, 4]);
    }
}
