use crate::autodiff::{Tensor, TensorError};

/// Planar `[channels, height, width]` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Tensor<f32>);

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Tensor::new(vec![channels, height, width], data).map(Self)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self(Tensor::full(&[channels, height, width], value))
    }

    /// Accepts `[C,H,W]` or `[1,C,H,W]`.
    pub fn from_tensor(t: Tensor<f32>) -> Result<Self, TensorError> {
        match *t.shape() {
            [c, h, w] => Ok(Self(t.reshape(&[c, h, w])?)),
            [1, c, h, w] => Ok(Self(t.reshape(&[c, h, w])?)),
            _ => Err(TensorError::ShapeMismatch { expected: vec![3, 0, 0], found: t.shape().to_vec() }),
        }
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.0.data_mut()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.0.data()[channel * n..(channel + 1) * n]
    }

    /// `[1, C, H, W]` copy for graph inputs.
    pub fn batched(&self) -> Tensor<f32> {
        self.0.clone().reshape(&[1, self.channels(), self.height(), self.width()]).expect("same size")
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.0.cast()
    }

    pub fn clamp01(mut self) -> Self {
        for v in self.0.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }
}
