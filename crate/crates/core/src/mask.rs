//! Crack probability maps and binary masks.

use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// A `{0,1}` mask of `height x width` pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(contract!(
                "mask of {}x{} needs {} pixels, got {}",
                height,
                width,
                height * width,
                data.len()
            ));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: alloc::vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        BinaryMask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// As a `[1,H,W]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, self.height, self.width], |i| if self.data[i] { 1.0 } else { 0.0 })
    }

    /// Reads a `[1,H,W]` tensor, treating values `>= 0.5` as crack.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 1 {
            return Err(contract!("a mask has one channel, got {}", c));
        }
        Ok(BinaryMask {
            height: h,
            width: w,
            data: t.data().iter().map(|&v| v >= 0.5).collect(),
        })
    }
}

/// A `[1,H,W]` map of crack probabilities in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap(Tensor);

impl ProbabilityMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.dims3()?;
        if c != 1 {
            return Err(contract!("a probability map has one channel, got {}", c));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(contract!("probability {} outside [0, 1]", v));
        }
        Ok(ProbabilityMap(t))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Pixels with probability `>= threshold` are crack.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: self.height(),
            width: self.width(),
            data: self.0.data().iter().map(|&p| p >= threshold).collect(),
        }
    }
}

impl From<&BinaryMask> for ProbabilityMap {
    fn from(m: &BinaryMask) -> Self {
        ProbabilityMap(m.to_tensor())
    }
}
