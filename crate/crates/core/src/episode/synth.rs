//! Synthetic episodes with planted ground truth.
//!
//! Stands in for a frozen encoder: foreground pixels carry features near a
//! class direction, background pixels near one of several distractor
//! directions orthogonal to it, plus isotropic Gaussian noise. Query blobs
//! drift a fixed step per frame and bounce off the image border.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{half_dims, Episode, FeatureMap, FeatureSet, Level, Mask, QueryItem, ResampleMode, SupportItem};
use crate::error::{HpanError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub k: usize,
    pub t: usize,
    pub channels_l3: usize,
    pub channels_l4: usize,
    pub l3_height: usize,
    pub l3_width: usize,
    /// Image resolution is `l3 dims * mask_scale`.
    pub mask_scale: usize,
    pub n_blobs: usize,
    /// Disc radius in image pixels.
    pub blob_radius: f64,
    /// Signal magnitude `s` along the class / distractor directions.
    pub separation: f64,
    /// Per-channel noise standard deviation.
    pub noise: f64,
    pub n_distractors: usize,
    /// Query blob displacement per frame, in image pixels.
    pub drift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k: 5,
            t: 5,
            channels_l3: 256,
            channels_l4: 256,
            l3_height: 16,
            l3_width: 28,
            mask_scale: 2,
            n_blobs: 1,
            blob_radius: 9.0,
            separation: 10.0,
            noise: 1.0,
            n_distractors: 3,
            drift: 1.5,
        }
    }
}

impl SynthConfig {
    pub fn image_dims(&self) -> (usize, usize) {
        (self.l3_height * self.mask_scale, self.l3_width * self.mask_scale)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(HpanError::Config(m.to_string()));
        if self.k == 0 || self.t == 0 {
            return cfg("K and T must be >= 1");
        }
        if self.channels_l3 == 0 || self.channels_l4 == 0 {
            return cfg("channel counts must be >= 1");
        }
        if self.l3_height == 0 || self.l3_width == 0 || self.mask_scale == 0 {
            return cfg("grid dims and mask_scale must be >= 1");
        }
        if self.n_blobs == 0 {
            return cfg("need at least one blob");
        }
        if !(self.blob_radius >= 0.0) || !(self.separation >= 0.0) || !(self.noise >= 0.0) {
            return cfg("radius, separation and noise must be non-negative");
        }
        if self.n_distractors == 0 {
            return cfg("need at least one distractor direction");
        }
        let (ih, iw) = self.image_dims();
        let span = 2.0 * self.blob_radius + 1.0;
        if span > ih as f64 || span > iw as f64 {
            return Err(HpanError::Config(format!(
                "blob diameter {span} does not fit the {ih}x{iw} image"
            )));
        }
        Ok(())
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    vy: f64,
    vx: f64,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Class direction followed by distractors, Gram-Schmidt orthogonalised when
/// the dimension allows it.
fn directions(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = unit_vector(rng, dim);
        if out.len() < dim {
            for b in &out {
                let d: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                v.iter_mut().for_each(|a| *a /= n);
            }
        }
        out.push(v);
    }
    out
}

fn paint(ih: usize, iw: usize, r: f64, blobs: &[(f64, f64)]) -> Mask {
    let mut data = vec![0.0f32; ih * iw];
    for y in 0..ih {
        for x in 0..iw {
            let inside = blobs.iter().any(|&(cy, cx)| {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                dy * dy + dx * dx <= r * r
            });
            if inside {
                data[y * iw + x] = 1.0;
            }
        }
    }
    Mask {
        height: ih,
        width: iw,
        data,
    }
}

fn level_features(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    level: Level,
    dims: (usize, usize),
    dirs: &[Vec<f64>],
    image_mask: &Mask,
) -> Result<FeatureMap> {
    let (h, w) = dims;
    let c = dirs[0].len();
    let fg = super::resample_mask(image_mask, h, w, ResampleMode::Nearest)?;
    let mut data = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let base = if fg.at(y, x) > 0.0 {
                &dirs[0]
            } else {
                &dirs[1 + x * cfg.n_distractors / w]
            };
            for ch in 0..c {
                let n: f64 = rng.sample(StandardNormal);
                data[(ch * h + y) * w + x] = (cfg.separation * base[ch] + cfg.noise * n) as f32;
            }
        }
    }
    FeatureMap::new(level, c, h, w, data)
}

fn feature_set(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    dirs3: &[Vec<f64>],
    dirs4: &[Vec<f64>],
    mask: &Mask,
) -> Result<FeatureSet> {
    let l3_dims = (cfg.l3_height, cfg.l3_width);
    Ok(FeatureSet {
        l3: level_features(rng, cfg, Level::L3, l3_dims, dirs3, mask)?,
        l4: level_features(rng, cfg, Level::L4, half_dims(l3_dims.0, l3_dims.1), dirs4, mask)?,
    })
}

fn bounce(pos: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let mut p = (pos - lo).rem_euclid(2.0 * span);
    if p > span {
        p = 2.0 * span - p;
    }
    lo + p
}

/// Generates an episode; a pure function of `(cfg, seed)`.
pub fn synth_episode(cfg: &SynthConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs3 = directions(&mut rng, cfg.channels_l3, 1 + cfg.n_distractors);
    let dirs4 = directions(&mut rng, cfg.channels_l4, 1 + cfg.n_distractors);
    let (ih, iw) = cfg.image_dims();
    let r = cfg.blob_radius;
    let (ylo, yhi) = (r, ih as f64 - 1.0 - r);
    let (xlo, xhi) = (r, iw as f64 - 1.0 - r);

    let mut support = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let centres: Vec<(f64, f64)> = (0..cfg.n_blobs)
            .map(|_| (rng.random_range(ylo..=yhi), rng.random_range(xlo..=xhi)))
            .collect();
        let mask = paint(ih, iw, r, &centres);
        let features = feature_set(&mut rng, cfg, &dirs3, &dirs4, &mask)?;
        support.push(SupportItem { features, mask });
    }

    let blobs: Vec<Blob> = (0..cfg.n_blobs)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Blob {
                cy: rng.random_range(ylo..=yhi),
                cx: rng.random_range(xlo..=xhi),
                vy: cfg.drift * angle.sin(),
                vx: cfg.drift * angle.cos(),
            }
        })
        .collect();
    let mut query = Vec::with_capacity(cfg.t);
    for frame in 0..cfg.t {
        let f = frame as f64;
        let centres: Vec<(f64, f64)> = blobs
            .iter()
            .map(|b| (bounce(b.cy + f * b.vy, ylo, yhi), bounce(b.cx + f * b.vx, xlo, xhi)))
            .collect();
        let mask = paint(ih, iw, r, &centres);
        let features = feature_set(&mut rng, cfg, &dirs3, &dirs4, &mask)?;
        query.push(QueryItem {
            features,
            mask: Some(mask),
        });
    }

    let ep = Episode {
        support,
        query,
        class_id: "synthetic".to_string(),
        seed,
    };
    ep.validate()?;
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            k: 2,
            t: 3,
            channels_l3: 16,
            channels_l4: 12,
            l3_height: 8,
            l3_width: 12,
            blob_radius: 4.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_episode() {
        let a = synth_episode(&small(), 7).unwrap();
        let b = synth_episode(&small(), 7).unwrap();
        assert_eq!(a, b);
        let bits = |e: &Episode| -> Vec<u32> {
            e.query
                .iter()
                .flat_map(|q| q.features.l3.data.iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, synth_episode(&small(), 8).unwrap());
    }

    #[test]
    fn shapes_follow_config() {
        let e = synth_episode(&small(), 1).unwrap();
        assert_eq!(e.k(), 2);
        assert_eq!(e.t(), 3);
        assert_eq!(e.l3_shape(), (16, 8, 12));
        assert_eq!(e.l4_shape(), (12, 4, 6));
        let m = e.query[0].mask.as_ref().unwrap();
        assert_eq!((m.height, m.width), (16, 24));
    }

    #[test]
    fn oversized_blob_is_a_config_error() {
        let cfg = SynthConfig {
            blob_radius: 20.0,
            ..small()
        };
        assert!(matches!(synth_episode(&cfg, 0), Err(HpanError::Config(_))));
    }

    #[test]
    fn zero_separation_gives_pure_noise() {
        let cfg = SynthConfig {
            separation: 0.0,
            noise: 1.0,
            ..small()
        };
        let e = synth_episode(&cfg, 3).unwrap();
        // With s = 0 every value is a N(0,1) draw regardless of the mask.
        let vals: Vec<f64> = e
            .support
            .iter()
            .flat_map(|s| s.features.l3.data.iter().map(|&v| v as f64))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - 1.0).abs() < 0.15, "var {var}");
    }

    #[test]
    fn query_blob_moves_smoothly() {
        let cfg = SynthConfig { t: 5, ..small() };
        let e = synth_episode(&cfg, 11).unwrap();
        let centroid = |m: &Mask| {
            let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
            for y in 0..m.height {
                for x in 0..m.width {
                    if m.at(y, x) > 0.0 {
                        sy += y as f64;
                        sx += x as f64;
                        n += 1.0;
                    }
                }
            }
            (sy / n, sx / n)
        };
        let cs: Vec<_> = e.query.iter().map(|q| centroid(q.mask.as_ref().unwrap())).collect();
        for w in cs.windows(2) {
            let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
            assert!(d <= 2.0 * cfg.drift + 1.0, "jump {d}");
        }
    }

    #[test]
    fn bounce_reflects_into_range() {
        assert_eq!(bounce(5.0, 0.0, 10.0), 5.0);
        assert_eq!(bounce(12.0, 0.0, 10.0), 8.0);
        assert_eq!(bounce(-3.0, 0.0, 10.0), 3.0);
    }
}
