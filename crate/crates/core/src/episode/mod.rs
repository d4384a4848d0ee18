//! Episode data model: feature pyramids, masks and few-shot episodes.

mod container;
mod manifest;
mod resample;
mod synth;

pub use container::{load_tensor, write_tensor, Storable, Tensor, TensorKind, HEADER_FIXED_BYTES, MAGIC};
pub use manifest::{load_episode, save_episode, EpisodeManifest, MANIFEST_FILE};
pub use resample::{resample_grid, resample_mask, ResampleMap, ResampleMode};
pub use synth::{synth_episode, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Encoder pyramid level a feature map was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    L1,
    L2,
    L3,
    L4,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::L1 => "l1",
            Level::L2 => "l2",
            Level::L3 => "l3",
            Level::L4 => "l4",
        }
    }
}

/// Spatial dims of the stride-2 level below `(h, w)`.
pub fn half_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(2), w.div_ceil(2))
}

/// `C x H x W` feature grid, channel-major, `f32` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub level: Level,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(level: Level, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let fm = FeatureMap {
            level,
            channels,
            height,
            width,
            data,
        };
        fm.validate()?;
        Ok(fm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(HpanError::shape("feature map dims must be positive"));
        }
        if self.data.len() != self.channels * self.height * self.width {
            return Err(HpanError::shape(format!(
                "feature map {}x{}x{} holds {} values",
                self.channels,
                self.height,
                self.width,
                self.data.len()
            )));
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(HpanError::NonFinite { index });
        }
        Ok(())
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Pixel vectors as rows: an `HW x C` token matrix.
    pub fn tokens<T: Scalar>(&self) -> Matrix<T> {
        let hw = self.pixels();
        let mut m = Matrix::zeros(hw, self.channels);
        for c in 0..self.channels {
            let plane = &self.data[c * hw..(c + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                m[(p, c)] = T::of(v as f64);
            }
        }
        m
    }

    /// Inverse of [`FeatureMap::tokens`].
    pub fn from_tokens<T: Scalar>(level: Level, height: usize, width: usize, tokens: &Matrix<T>) -> Result<Self> {
        if tokens.rows() != height * width {
            return Err(HpanError::shape(format!(
                "{} tokens do not tile a {height}x{width} grid",
                tokens.rows()
            )));
        }
        let hw = height * width;
        let c = tokens.cols();
        let mut data = vec![0.0f32; c * hw];
        for p in 0..hw {
            for (ch, &v) in tokens.row(p).iter().enumerate() {
                data[ch * hw + p] = v.to_f32_lossy();
            }
        }
        FeatureMap::new(level, c, height, width, data)
    }
}

/// `H x W` grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let m = Mask { height, width, data };
        m.validate()?;
        Ok(m)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Mask::new(height, width, vec![value; height * width])
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(HpanError::shape("mask dims must be positive"));
        }
        if self.data.len() != self.height * self.width {
            return Err(HpanError::shape(format!(
                "mask {}x{} holds {} values",
                self.height,
                self.width,
                self.data.len()
            )));
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(HpanError::NonFinite { index });
        }
        if let Some(i) = self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(HpanError::Invariant(format!(
                "mask value {} at index {i} outside [0, 1]",
                self.data[i]
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    /// Threshold at 0.5 (values `>= 0.5` become foreground).
    pub fn binarized(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// The mask as an `H x W` matrix.
    pub fn to_grid<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_fn(self.height, self.width, |y, x| T::of(self.at(y, x) as f64))
    }

    /// Builds a mask from a grid, rejecting values outside `[0, 1]`.
    pub fn from_grid<T: Scalar>(grid: &Matrix<T>) -> Result<Self> {
        Mask::new(
            grid.rows(),
            grid.cols(),
            grid.as_slice().iter().map(|v| v.to_f32_lossy()).collect(),
        )
    }
}

/// The two feature levels consumed by the attention modules.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub l3: FeatureMap,
    pub l4: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportItem {
    pub features: FeatureSet,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryItem {
    pub features: FeatureSet,
    pub mask: Option<Mask>,
}

/// One few-shot task: `K` annotated support images and `T` query frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<SupportItem>,
    pub query: Vec<QueryItem>,
    pub class_id: String,
    pub seed: u64,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn t(&self) -> usize {
        self.query.len()
    }

    /// `(C, H, W)` of the first l3 map; valid after [`Episode::validate`].
    pub fn l3_shape(&self) -> (usize, usize, usize) {
        let f = &self.support[0].features.l3;
        (f.channels, f.height, f.width)
    }

    pub fn l4_shape(&self) -> (usize, usize, usize) {
        let f = &self.support[0].features.l4;
        (f.channels, f.height, f.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() || self.query.is_empty() {
            return Err(HpanError::Invariant("episode needs K >= 1 and T >= 1".into()));
        }
        let sets = self
            .support
            .iter()
            .map(|s| &s.features)
            .chain(self.query.iter().map(|q| &q.features));
        let s0 = &self.support[0].features;
        for fs in sets {
            fs.l3.validate()?;
            fs.l4.validate()?;
            if fs.l3.level != Level::L3 || fs.l4.level != Level::L4 {
                return Err(HpanError::Invariant("feature set levels must be l3/l4".into()));
            }
            let same =
                |a: &FeatureMap, b: &FeatureMap| (a.channels, a.height, a.width) == (b.channels, b.height, b.width);
            if !same(&fs.l3, &s0.l3) || !same(&fs.l4, &s0.l4) {
                return Err(HpanError::Invariant(
                    "feature maps within an episode must share channels and per-level dims".into(),
                ));
            }
            if (fs.l4.height, fs.l4.width) != half_dims(fs.l3.height, fs.l3.width) {
                return Err(HpanError::Invariant(format!(
                    "l4 grid {}x{} is not half of l3 grid {}x{}",
                    fs.l4.height, fs.l4.width, fs.l3.height, fs.l3.width
                )));
            }
        }
        for (i, s) in self.support.iter().enumerate() {
            s.mask.validate()?;
            if !s.mask.is_binary() {
                return Err(HpanError::Invariant(format!("support mask {i} is not binary")));
            }
            if s.mask.foreground_count() == 0 {
                return Err(HpanError::Invariant(format!("support mask {i} has no foreground")));
            }
        }
        for (t, q) in self.query.iter().enumerate() {
            if let Some(m) = &q.mask {
                m.validate()?;
                if !m.is_binary() {
                    return Err(HpanError::Invariant(format!("query mask {t} is not binary")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_round_trip_through_feature_map() {
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let fm = FeatureMap::new(Level::L3, 2, 3, 4, data).unwrap();
        let tok = fm.tokens::<f64>();
        assert_eq!(tok.shape(), (12, 2));
        assert_eq!(tok[(5, 1)], 17.0);
        assert_eq!(FeatureMap::from_tokens(Level::L3, 3, 4, &tok).unwrap(), fm);
    }

    #[test]
    fn mask_rejects_out_of_range() {
        assert!(Mask::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(Mask::new(1, 2, vec![0.0, f32::NAN]).is_err());
        assert!(Mask::new(1, 2, vec![0.0, 0.25]).is_ok());
    }

    #[test]
    fn half_dims_round_up() {
        assert_eq!(half_dims(16, 28), (8, 14));
        assert_eq!(half_dims(31, 54), (16, 27));
    }
}
