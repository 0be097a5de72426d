//! Dense integer label maps.

use crate::error::{Error, Result};

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Nearest-neighbour resampling using pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                labels.push(self.get(sy, sx));
            }
        }
        Self {
            height,
            width,
            labels,
        }
    }

    /// Per-pixel flag for labels other than [`IGNORE_LABEL`].
    pub fn valid(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != IGNORE_LABEL).collect()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.labels.iter().any(|&l| l as usize == class && l != IGNORE_LABEL)
    }

    /// Checks that every label is below `num_classes` or ignored.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            Some(l) => Err(Error::Input(format!(
                "label {l} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn mask_of(&self, class: usize) -> Vec<bool> {
        self.labels
            .iter()
            .map(|&l| l != IGNORE_LABEL && l as usize == class)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_downsample_picks_block_centres() {
        let labels = (0..16).map(|i| i as u8).collect();
        let m = LabelMap::new(4, 4, labels).unwrap();
        let d = m.resize_nearest(2, 2);
        assert_eq!(d.labels, vec![5, 7, 13, 15]);
        assert_eq!(m.resize_nearest(4, 4), m);
    }

    #[test]
    fn validation_and_masks() {
        let m = LabelMap::new(1, 3, vec![0, IGNORE_LABEL, 2]).unwrap();
        assert!(m.validate(3).is_ok());
        assert!(m.validate(2).is_err());
        assert_eq!(m.valid(), vec![true, false, true]);
        assert_eq!(m.mask_of(2), vec![false, false, true]);
        assert!(!m.contains(1));
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
    }
}
