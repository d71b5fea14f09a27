//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the computed value. [`Graph::backward`] walks the tape once in reverse
//! and returns the gradient of a scalar root with respect to every node that
//! requires one. Parameter stores are attached by reference, so building a
//! graph never copies weights.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreHandle(usize);

/// Probability clamp used by [`Graph::weighted_bce`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    /// `[C,H,W] * [C]`, broadcast over pixels.
    MulChannel(Var, Var),
    /// `[C,H,W] * [1,H,W]`, broadcast over channels.
    MulSpatial(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample(Var),
    Concat(Vec<Var>),
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    SpatialMax {
        x: Var,
        argmax: Vec<u32>,
    },
    SoftmaxAll(Var),
    WeightedSum {
        x: Var,
        alpha: Var,
    },
    MatVec {
        w: Var,
        v: Var,
    },
    WeightedBce {
        pred: Var,
        target: Tensor,
        beta: f64,
        gamma: f64,
    },
    MeanAbsDiff(Var, Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

struct Binding<'p> {
    store: &'p ParamStore,
    trainable: bool,
    vars: Vec<Option<Var>>,
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    bindings: Vec<Binding<'p>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter of an attached store, in store order.
    /// Parameters that did not influence the root get zeros.
    pub fn take_store(&mut self, graph: &Graph<'_>, handle: StoreHandle) -> Vec<Tensor> {
        let binding = &graph.bindings[handle.0];
        binding
            .vars
            .iter()
            .enumerate()
            .map(|(i, var)| {
                var.and_then(|v| self.grads[v.0].take())
                    .unwrap_or_else(|| Tensor::zeros(binding.store.get(ParamId(i)).shape()))
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// A free variable whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Makes the parameters of `store` available to this graph. Parameters
    /// of a non-trainable store behave as constants.
    pub fn attach(&mut self, store: &'p ParamStore, trainable: bool) -> StoreHandle {
        self.bindings.push(Binding {
            store,
            trainable,
            vars: vec![None; store.len()],
        });
        StoreHandle(self.bindings.len() - 1)
    }

    /// The node for parameter `id` of an attached store, created on first use.
    pub fn param(&mut self, handle: StoreHandle, id: ParamId) -> Var {
        if let Some(v) = self.bindings[handle.0].vars[id.0] {
            return v;
        }
        let binding = &self.bindings[handle.0];
        let (store, trainable) = (binding.store, binding.trainable);
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf, trainable);
        self.bindings[handle.0].vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims3(&self, v: Var) -> Result<(usize, usize, usize)> {
        self.value(v).dims3()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(Error::shape(op, self.shape(a), self.shape(b)))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push_op(out, Op::Scale(a, factor), &[a])
    }

    /// Sum of same-shaped nodes, accumulated left to right.
    pub fn sum(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or_else(|| contract!("sum of zero terms"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push_op(out, Op::LeakyRelu(a, slope), &[a])
    }

    /// Scales channel `c` of a `[C,H,W]` map by `w[c]`.
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c, h, wd) = self.dims3(x)?;
        if self.shape(w) != [c] {
            return Err(Error::shape("mul_channel", &[c], self.shape(w)));
        }
        let plane = h * wd;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let data = xs
            .chunks(plane)
            .zip(ws)
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let out = Tensor::from_vec(&[c, h, wd], data)?;
        Ok(self.push_op(out, Op::MulChannel(x, w), &[x, w]))
    }

    /// Scales every channel of a `[C,H,W]` map by a `[1,H,W]` map.
    pub fn mul_spatial(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, wd) = self.dims3(x)?;
        if self.shape(s) != [1, h, wd] {
            return Err(Error::shape("mul_spatial", &[1, h, wd], self.shape(s)));
        }
        let plane = h * wd;
        let ss = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .flat_map(|row| row.iter().zip(ss).map(|(a, b)| a * b))
            .collect();
        let out = Tensor::from_vec(&[c, h, wd], data)?;
        Ok(self.push_op(out, Op::MulSpatial(x, s), &[x, s]))
    }

    /// 2-D convolution; `w` is `[C_out, C_in, kH, kW]`, `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let dims = self.dims3(x)?;
        let geom = match self.shape(w) {
            &[co, ci, kh, kw] if ci == dims.0 => ConvGeom::conv(dims, (co, kh, kw), stride, pad)?,
            other => {
                return Err(Error::shape(
                    "conv2d weight",
                    &[self.shape(w).first().copied().unwrap_or(0), dims.0, 0, 0],
                    other,
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape("conv2d bias", &[geom.c_out], self.shape(b)));
            }
        }
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_vec(&[geom.c_out, geom.h_out, geom.w_out], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed 2-D convolution; `w` is `[C_in, C_out, kH, kW]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let dims = self.dims3(x)?;
        let geom = match self.shape(w) {
            &[ci, co, kh, kw] if ci == dims.0 => ConvGeom::transposed(dims, (co, kh, kw), stride, pad)?,
            other => {
                return Err(Error::shape(
                    "conv_transpose2d weight",
                    &[dims.0, self.shape(w).get(1).copied().unwrap_or(0), 0, 0],
                    other,
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape("conv_transpose2d bias", &[geom.c_out], self.shape(b)));
            }
        }
        let data = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_vec(&[geom.c_out, geom.h_out, geom.w_out], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(out, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    /// 2x2 max pooling, stride 2. Height and width must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(contract!("max_pool2 needs even height and width, got {}x{}", h, w));
        }
        let (data, argmax) = kernels::max_pool2_forward(self.value(x).data(), (c, h, w));
        let out = Tensor::from_vec(&[c, h / 2, w / 2], data)?;
        Ok(self.push_op(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Bilinear resampling (half-pixel centres) to `height x width`.
    pub fn upsample_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if height == 0 || width == 0 {
            return Err(contract!("cannot resample to an empty map"));
        }
        let data = kernels::bilinear_forward(self.value(x).data(), (c, h, w), (height, width));
        let out = Tensor::from_vec(&[c, height, width], data)?;
        Ok(self.push_op(out, Op::Upsample(x), &[x]))
    }

    /// Channel-wise concatenation of `[C_i,H,W]` maps.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| contract!("concat of zero maps"))?;
        let (_, h, w) = self.dims3(*first)?;
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.dims3(p)?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape("concat", &[c, h, w], self.shape(p)));
            }
            channels += c;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[channels, h, w], data)?;
        Ok(self.push_op(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Mean over channels: `[C,H,W] -> [1,H,W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        let plane = h * w;
        let xs = self.value(x).data();
        let mut data = vec![0.0; plane];
        for row in xs.chunks(plane) {
            data.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        data.iter_mut().for_each(|v| *v /= c as f64);
        let out = Tensor::from_vec(&[1, h, w], data)?;
        Ok(self.push_op(out, Op::ChannelMean(x), &[x]))
    }

    /// Max over channels: `[C,H,W] -> [1,H,W]`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = self.dims3(x)?;
        let plane = h * w;
        let xs = self.value(x).data();
        let mut data = xs[..plane].to_vec();
        let mut argmax: Vec<u32> = (0..plane as u32).collect();
        for (ci, row) in xs.chunks(plane).enumerate().skip(1) {
            for (j, &v) in row.iter().enumerate() {
                if v > data[j] {
                    data[j] = v;
                    argmax[j] = (ci * plane + j) as u32;
                }
            }
        }
        let out = Tensor::from_vec(&[1, h, w], data)?;
        Ok(self.push_op(out, Op::ChannelMax { x, argmax }, &[x]))
    }

    /// Max over pixels per channel: `[C,H,W] -> [C]`.
    pub fn spatial_max(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        let plane = h * w;
        let mut data = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for (ci, row) in self.value(x).data().chunks(plane).enumerate() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            data.push(row[best]);
            argmax.push((ci * plane + best) as u32);
        }
        let out = Tensor::from_vec(&[c], data)?;
        Ok(self.push_op(out, Op::SpatialMax { x, argmax }, &[x]))
    }

    /// Softmax over every element of `x` (shape preserved).
    pub fn softmax_all(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let m = xs.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = xs.map(|v| libm::exp(v - m));
        let z = out.sum();
        out.scale_in_place(1.0 / z);
        self.push_op(out, Op::SoftmaxAll(x), &[x])
    }

    /// `out[c] = sum_j alpha[j] * x[c, j]` for `x: [C,H,W]`, `alpha: [1,H,W]`.
    pub fn weighted_sum(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x)?;
        if self.shape(alpha) != [1, h, w] {
            return Err(Error::shape("weighted_sum", &[1, h, w], self.shape(alpha)));
        }
        let a = self.value(alpha).data();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|row| row.iter().zip(a).map(|(p, q)| p * q).sum())
            .collect();
        let out = Tensor::from_vec(&[c], data)?;
        Ok(self.push_op(out, Op::WeightedSum { x, alpha }, &[x, alpha]))
    }

    /// Matrix-vector product `w [O, I] * v [I] -> [O]`.
    pub fn matvec(&mut self, w: Var, v: Var) -> Result<Var> {
        let (o, i) = match *self.shape(w) {
            [o, i] => (o, i),
            _ => return Err(contract!("matvec weight must be a matrix, got {:?}", self.shape(w))),
        };
        if self.shape(v) != [i] {
            return Err(Error::shape("matvec", &[i], self.shape(v)));
        }
        let vs = self.value(v).data();
        let data = self
            .value(w)
            .data()
            .chunks(i)
            .map(|row| row.iter().zip(vs).map(|(a, b)| a * b).sum())
            .collect();
        let out = Tensor::from_vec(&[o], data)?;
        Ok(self.push_op(out, Op::MatVec { w, v }, &[w, v]))
    }

    /// Class-weighted binary cross-entropy, as a negative log-likelihood:
    /// `-(1/N) sum_i [beta*y_i*ln p_i + gamma*(1-y_i)*ln(1-p_i)]`
    /// with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn weighted_bce(&mut self, pred: Var, target: &Tensor, beta: f64, gamma: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("weighted_bce", target.shape(), self.shape(pred)));
        }
        let value = weighted_bce_value(self.value(pred).data(), target.data(), beta, gamma);
        Ok(self.push_op(
            Tensor::scalar(value),
            Op::WeightedBce {
                pred,
                target: target.clone(),
                beta,
                gamma,
            },
            &[pred],
        ))
    }

    /// Mean absolute elementwise difference, a scalar.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mean_abs_diff", a, b)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| libm::fabs(x - y))
            .sum();
        Ok(self.push_op(Tensor::scalar(s / n), Op::MeanAbsDiff(a, b), &[a, b]))
    }

    /// Gradients of the scalar `root` with respect to every node on the tape
    /// that requires one.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(contract!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        let mut keep = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            keep[i] = matches!(node.op, Op::Leaf) && node.requires_grad;
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = if keep[i] {
                match &grads[i] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backprop_node(Var(i), &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[out.0];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |d| add_into(d, gd));
                self.accumulate(grads, b, |d| add_into(d, gd));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |d| add_into(d, gd));
                self.accumulate(grads, b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |d| {
                    d.iter_mut().zip(gd).zip(bv).for_each(|((x, g), y)| *x += g * y)
                });
                self.accumulate(grads, b, |d| {
                    d.iter_mut().zip(gd).zip(av).for_each(|((x, g), y)| *x += g * y)
                });
            }
            &Op::Scale(a, f) => {
                self.accumulate(grads, a, |d| d.iter_mut().zip(gd).for_each(|(x, g)| *x += g * f));
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, a, |d| {
                    d.iter_mut()
                        .zip(gd)
                        .zip(y)
                        .for_each(|((x, g), s)| *x += g * s * (1.0 - s))
                });
            }
            &Op::Relu(a) => {
                let xv = self.value(a).data();
                self.accumulate(grads, a, |d| {
                    d.iter_mut().zip(gd).zip(xv).for_each(|((x, g), v)| {
                        if *v > 0.0 {
                            *x += g
                        }
                    })
                });
            }
            &Op::LeakyRelu(a, slope) => {
                let xv = self.value(a).data();
                self.accumulate(grads, a, |d| {
                    d.iter_mut()
                        .zip(gd)
                        .zip(xv)
                        .for_each(|((x, g), v)| *x += if *v > 0.0 { *g } else { slope * g })
                });
            }
            &Op::MulChannel(x, w) => {
                let plane = node.value.shape()[1] * node.value.shape()[2];
                let (xv, wv) = (self.value(x).data(), self.value(w).data());
                self.accumulate(grads, x, |d| {
                    for ((dr, gr), &s) in d.chunks_mut(plane).zip(gd.chunks(plane)).zip(wv) {
                        dr.iter_mut().zip(gr).for_each(|(a, b)| *a += b * s);
                    }
                });
                self.accumulate(grads, w, |d| {
                    for ((dc, gr), xr) in d.iter_mut().zip(gd.chunks(plane)).zip(xv.chunks(plane)) {
                        *dc += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            &Op::MulSpatial(x, s) => {
                let plane = node.value.shape()[1] * node.value.shape()[2];
                let (xv, sv) = (self.value(x).data(), self.value(s).data());
                self.accumulate(grads, x, |d| {
                    for (dr, gr) in d.chunks_mut(plane).zip(gd.chunks(plane)) {
                        dr.iter_mut().zip(gr).zip(sv).for_each(|((a, b), c)| *a += b * c);
                    }
                });
                self.accumulate(grads, s, |d| {
                    for (gr, xr) in gd.chunks(plane).zip(xv.chunks(plane)) {
                        d.iter_mut().zip(gr).zip(xr).for_each(|((a, b), c)| *a += b * c);
                    }
                });
            }
            &Op::Conv2d { x, w, b, ref geom } => {
                let (mut dx, mut dw, mut db) = self.take_three(grads, x, w, b);
                kernels::conv2d_backward(
                    self.value(x).data(),
                    geom,
                    self.value(w).data(),
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                self.put_three(grads, (x, dx), (w, dw), b.zip(db));
            }
            &Op::ConvTranspose2d { x, w, b, ref geom } => {
                let (mut dx, mut dw, mut db) = self.take_three(grads, x, w, b);
                kernels::conv_transpose2d_backward(
                    self.value(x).data(),
                    geom,
                    self.value(w).data(),
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                self.put_three(grads, (x, dx), (w, dw), b.zip(db));
            }
            Op::MaxPool2 { x, argmax } | Op::ChannelMax { x, argmax } | Op::SpatialMax { x, argmax } => {
                self.accumulate(grads, *x, |d| {
                    for (&idx, g) in argmax.iter().zip(gd) {
                        d[idx as usize] += g;
                    }
                });
            }
            &Op::Upsample(x) => {
                let dims = self.dims3(x)?;
                let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
                self.accumulate(grads, x, |d| kernels::bilinear_backward(gd, dims, (ho, wo), d));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |d| add_into(d, &gd[offset..offset + n]));
                    offset += n;
                }
            }
            &Op::ChannelMean(x) => {
                let (c, h, w) = self.dims3(x)?;
                let plane = h * w;
                let inv = 1.0 / c as f64;
                self.accumulate(grads, x, |d| {
                    for dr in d.chunks_mut(plane) {
                        dr.iter_mut().zip(gd).for_each(|(a, b)| *a += b * inv);
                    }
                });
            }
            &Op::SoftmaxAll(x) => {
                let a = node.value.data();
                let dot: f64 = a.iter().zip(gd).map(|(p, q)| p * q).sum();
                self.accumulate(grads, x, |d| {
                    d.iter_mut()
                        .zip(a)
                        .zip(gd)
                        .for_each(|((dv, p), q)| *dv += p * (q - dot))
                });
            }
            &Op::WeightedSum { x, alpha } => {
                let (_, h, w) = self.dims3(x)?;
                let plane = h * w;
                let (xv, av) = (self.value(x).data(), self.value(alpha).data());
                self.accumulate(grads, x, |d| {
                    for (dr, &gc) in d.chunks_mut(plane).zip(gd) {
                        dr.iter_mut().zip(av).for_each(|(a, b)| *a += gc * b);
                    }
                });
                self.accumulate(grads, alpha, |d| {
                    for (xr, &gc) in xv.chunks(plane).zip(gd) {
                        d.iter_mut().zip(xr).for_each(|(a, b)| *a += gc * b);
                    }
                });
            }
            &Op::MatVec { w, v } => {
                let i = self.shape(w)[1];
                let (wv, vv) = (self.value(w).data(), self.value(v).data());
                self.accumulate(grads, w, |d| {
                    for (dr, &go) in d.chunks_mut(i).zip(gd) {
                        dr.iter_mut().zip(vv).for_each(|(a, b)| *a += go * b);
                    }
                });
                self.accumulate(grads, v, |d| {
                    for (wr, &go) in wv.chunks(i).zip(gd) {
                        d.iter_mut().zip(wr).for_each(|(a, b)| *a += go * b);
                    }
                });
            }
            Op::WeightedBce {
                pred,
                target,
                beta,
                gamma,
            } => {
                let pv = self.value(*pred).data();
                let n = pv.len() as f64;
                let scale = gd[0] / n;
                self.accumulate(grads, *pred, |d| {
                    for ((dv, &p), &y) in d.iter_mut().zip(pv).zip(target.data()) {
                        if (BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                            *dv -= scale * (beta * y / p - gamma * (1.0 - y) / (1.0 - p));
                        }
                    }
                });
            }
            &Op::MeanAbsDiff(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let scale = gd[0] / av.len() as f64;
                let sign = |x: f64, y: f64| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.accumulate(grads, a, |d| {
                    for ((dv, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *dv += scale * sign(x, y);
                    }
                });
                self.accumulate(grads, b, |d| {
                    for ((dv, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *dv -= scale * sign(x, y);
                    }
                });
            }
        }
        Ok(())
    }

    /// Runs `f` on the gradient buffer of `v` (zero-initialised on first use)
    /// if `v` takes part in differentiation.
    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        if let Some(t) = slot.as_mut() {
            f(t.data_mut());
        }
    }

    fn take_slot(&self, grads: &mut [Option<Tensor>], v: Var) -> Option<Tensor> {
        if !self.wants(v) {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(v))))
    }

    fn take_three(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        w: Var,
        b: Option<Var>,
    ) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
        (
            self.take_slot(grads, x),
            self.take_slot(grads, w),
            b.and_then(|b| self.take_slot(grads, b)),
        )
    }

    fn put_three(
        &self,
        grads: &mut [Option<Tensor>],
        x: (Var, Option<Tensor>),
        w: (Var, Option<Tensor>),
        b: Option<(Var, Tensor)>,
    ) {
        for (v, t) in [x, w].into_iter().chain(b.map(|(v, t)| (v, Some(t)))) {
            if let Some(t) = t {
                grads[v.0] = Some(t);
            }
        }
    }
}

/// Kind of a layer counted by [`Graph::layer_costs`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Conv,
    TransposedConv,
    Linear,
}

/// Multiply-accumulate count of one recorded conv, transposed conv or
/// matrix-vector product. Bias additions are not counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub kind: LayerKind,
    pub macs: u64,
}

impl Graph<'_> {
    /// Costs of every linear layer on the tape, in recording order.
    pub fn layer_costs(&self) -> Vec<LayerCost> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Conv2d { geom, .. } => Some(LayerCost {
                    kind: LayerKind::Conv,
                    macs: (geom.c_out * geom.h_out * geom.w_out * geom.c_in * geom.kh * geom.kw) as u64,
                }),
                Op::ConvTranspose2d { geom, .. } => Some(LayerCost {
                    kind: LayerKind::TransposedConv,
                    macs: (geom.c_in * geom.h * geom.w * geom.c_out * geom.kh * geom.kw) as u64,
                }),
                Op::MatVec { w, .. } => Some(LayerCost {
                    kind: LayerKind::Linear,
                    macs: self.value(*w).len() as u64,
                }),
                _ => None,
            })
            .collect()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Scalar value of [`Graph::weighted_bce`] on plain slices.
pub(crate) fn weighted_bce_value(pred: &[f64], target: &[f64], beta: f64, gamma: f64) -> f64 {
    let n = pred.len() as f64;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            beta * y * libm::log(p) + gamma * (1.0 - y) * libm::log(1.0 - p)
        })
        .sum();
    -s / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    /// Central differences of `f` around `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let eps = 1e-5;
        Tensor::from_fn(x.shape(), |i| {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            (f(&p) - f(&m)) / (2.0 * eps)
        })
    }

    fn check(x: Tensor, build: impl Fn(&mut Graph<'_>, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let root = build(&mut g, v);
        let grads = g.backward(root).unwrap();
        let analytic = grads.get(v).unwrap().clone();
        let numeric = numeric_grad(&x, |t| {
            let mut g = Graph::new();
            let v = g.leaf(t.clone());
            let r = build(&mut g, v);
            g.value(r).item()
        });
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(close(*a, *n, 1e-6), "analytic {a} numeric {n}");
        }
    }

    fn probe(n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| libm::sin(i as f64 * 1.3 + phase) * 0.8).collect()
    }

    /// Reduces any node to a scalar through a fixed random projection.
    fn project(g: &mut Graph<'_>, v: Var) -> Var {
        let shape = g.shape(v).to_vec();
        let n: usize = shape.iter().product();
        let proj = g.input(Tensor::from_vec(&shape, probe(n, 0.4)).unwrap());
        let m = g.mul(v, proj).unwrap();
        let s = g.sigmoid(m);
        let target = Tensor::from_fn(&shape, |i| (i % 2) as f64);
        g.weighted_bce(s, &target, 0.7, 0.3).unwrap()
    }

    #[test]
    fn elementwise_ops_backprop() {
        let x = Tensor::from_vec(&[2, 2, 3], probe(12, 0.1)).unwrap();
        check(x.clone(), |g, v| {
            let r = g.leaky_relu(v, 0.2);
            let s = g.scale(r, -1.7);
            project(g, s)
        });
        check(x.clone(), |g, v| {
            let w = g.input(Tensor::from_vec(&[2], vec![0.3, -1.2]).unwrap());
            let a = g.mul_channel(v, w).unwrap();
            let m = g.channel_max(a).unwrap();
            let c = g.channel_mean(v).unwrap();
            let s = g.add(m, c).unwrap();
            let out = g.mul_spatial(v, s).unwrap();
            project(g, out)
        });
        check(x, |g, v| {
            let logits = g.channel_mean(v).unwrap();
            let a = g.softmax_all(logits);
            let ws = g.weighted_sum(v, a).unwrap();
            let mx = g.spatial_max(v).unwrap();
            let sum = g.add(ws, mx).unwrap();
            let wmat = g.input(Tensor::from_vec(&[3, 2], probe(6, 2.0)).unwrap());
            let o = g.matvec(wmat, sum).unwrap();
            let o = g.relu(o);
            project(g, o)
        });
    }

    #[test]
    fn conv_ops_backprop() {
        let x = Tensor::from_vec(&[2, 4, 4], probe(32, 0.5)).unwrap();
        check(x.clone(), |g, v| {
            let w = g.input(Tensor::from_vec(&[3, 2, 3, 3], probe(54, 1.0)).unwrap());
            let b = g.input(Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap());
            let c = g.conv2d(v, w, Some(b), 2, 1).unwrap();
            let u = g.upsample_bilinear(c, 5, 3).unwrap();
            project(g, u)
        });
        check(x.clone(), |g, v| {
            let w = g.input(Tensor::from_vec(&[2, 3, 2, 2], probe(24, 1.0)).unwrap());
            let c = g.conv_transpose2d(v, w, None, 2, 0).unwrap();
            let p = g.max_pool2(c).unwrap();
            let cat = g.concat(&[p, v]).unwrap();
            project(g, cat)
        });
        // weight gradients
        let wt = Tensor::from_vec(&[3, 2, 3, 3], probe(54, 1.0)).unwrap();
        check(wt, |g, w| {
            let xv = g.input(Tensor::from_vec(&[2, 4, 4], probe(32, 0.5)).unwrap());
            let c = g.conv2d(xv, w, None, 1, 1).unwrap();
            project(g, c)
        });
        let wt = Tensor::from_vec(&[2, 3, 2, 2], probe(24, 0.2)).unwrap();
        check(wt, |g, w| {
            let xv = g.input(Tensor::from_vec(&[2, 4, 4], probe(32, 0.5)).unwrap());
            let c = g.conv_transpose2d(xv, w, None, 2, 0).unwrap();
            project(g, c)
        });
    }

    #[test]
    fn mean_abs_diff_value_and_grad() {
        let a = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut g = Graph::new();
        let va = g.leaf(a);
        let vb = g.input(Tensor::from_vec(&[3], vec![0.0, 0.0, 0.5]).unwrap());
        let l = g.mean_abs_diff(va, vb).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(va).unwrap().data(), &[1.0 / 3.0, -1.0 / 3.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.input(Tensor::full(&[2], 1.0));
        let l = g.leaf(Tensor::full(&[2], 2.0));
        let m = g.mul(c, l).unwrap();
        let t = Tensor::full(&[2], 1.0);
        let s = g.sigmoid(m);
        let r = g.weighted_bce(s, &t, 1.0, 1.0).unwrap();
        let grads = g.backward(r).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(l).is_some());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::full(&[2], 2.0));
        assert!(g.backward(l).is_err());
    }
}
