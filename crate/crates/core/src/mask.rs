use thiserror::Error;

/// Pixel value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask value {value} at pixel {index} is not a class id below {classes}")]
    ClassOutOfRange { index: usize, value: u8, classes: usize },
    #[error("mask is {found_h}x{found_w}, expected {expected_h}x{expected_w}")]
    SizeMismatch {
        expected_h: usize,
        expected_w: usize,
        found_h: usize,
        found_w: usize,
    },
    #[error("mask data length {found} does not match {height}x{width}")]
    Length { height: usize, width: usize, found: usize },
}

/// Integer class-id map; `IGNORE` marks pixels without a label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self, MaskError> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(MaskError::Length { height, width, found: values.len() });
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    /// Every non-ignored value must be a class id below `classes`.
    pub fn validate(&self, classes: usize) -> Result<(), MaskError> {
        match self
            .values
            .iter()
            .enumerate()
            .find(|(_, &v)| v != IGNORE && v as usize >= classes)
        {
            Some((index, &value)) => Err(MaskError::ClassOutOfRange { index, value, classes }),
            None => Ok(()),
        }
    }

    pub fn check_size(&self, height: usize, width: usize) -> Result<(), MaskError> {
        if self.height != height || self.width != width {
            return Err(MaskError::SizeMismatch {
                expected_h: height,
                expected_w: width,
                found_h: self.height,
                found_w: self.width,
            });
        }
        Ok(())
    }

    pub fn labeled_pixels(&self) -> usize {
        self.values.iter().filter(|&&v| v != IGNORE).count()
    }
}
