//! Linear per-pixel read-out of holistic attention, sigmoid, and bilinear
//! upsampling to the output grid.

use rand::Rng;

use crate::bpam::HolisticAttention;
use crate::episode::{Mask, ResampleMap, ResampleMode};
use crate::error::{HpanError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// One weight per holistic channel (`2C`).
    pub proj: Vec<T>,
    pub bias: T,
}

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(channels: usize) -> Self {
        HeadParams {
            proj: vec![T::zero(); channels],
            bias: T::zero(),
        }
    }

    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        HeadParams {
            proj: crate::uniform_init(1, channels, channels, rng).into_vec(),
            bias: T::zero(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeCache<T> {
    input: HolisticAttention<T>,
    /// Sigmoid outputs on the input grid, per frame.
    sig: Vec<Vec<T>>,
    map: ResampleMap,
}

#[derive(Debug, Clone)]
pub struct HeadGrads<T> {
    pub params: HeadParams<T>,
    pub input: HolisticAttention<T>,
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Foreground probabilities per frame, each `out_h * out_w` row-major.
pub fn decode_forward<T: Scalar>(
    a_h: &HolisticAttention<T>,
    params: &HeadParams<T>,
    out_h: usize,
    out_w: usize,
) -> Result<(Vec<Vec<T>>, DecodeCache<T>)> {
    if params.proj.len() != a_h.channels {
        return Err(HpanError::shape(format!(
            "head has {} weights for {} channels",
            params.proj.len(),
            a_h.channels
        )));
    }
    if out_h < a_h.height || out_w < a_h.width {
        return Err(HpanError::shape(format!(
            "decode target {out_h}x{out_w} is smaller than the {}x{} attention grid",
            a_h.height, a_h.width
        )));
    }
    let hw = a_h.height * a_h.width;
    let map = ResampleMap::new((a_h.height, a_h.width), (out_h, out_w), ResampleMode::Bilinear)?;
    let mut sig = Vec::with_capacity(a_h.frames);
    let mut probs = Vec::with_capacity(a_h.frames);
    for t in 0..a_h.frames {
        let frame = a_h.frame(t);
        let mut logits = vec![params.bias; hw];
        for (c, &w) in params.proj.iter().enumerate() {
            for (l, &v) in logits.iter_mut().zip(&frame[c * hw..(c + 1) * hw]) {
                *l += w * v;
            }
        }
        let s: Vec<T> = logits.into_iter().map(sigmoid).collect();
        probs.push(map.apply(&s));
        sig.push(s);
    }
    Ok((
        probs,
        DecodeCache {
            input: a_h.clone(),
            sig,
            map,
        },
    ))
}

/// Decoded probability masks.
pub fn decode<T: Scalar>(
    a_h: &HolisticAttention<T>,
    params: &HeadParams<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<Mask>> {
    let (probs, _) = decode_forward(a_h, params, out_h, out_w)?;
    probs
        .iter()
        .map(|p| {
            Mask::new(
                out_h,
                out_w,
                p.iter().map(|v| v.to_f32_lossy().clamp(0.0, 1.0)).collect(),
            )
        })
        .collect()
}

pub fn decode_backward<T: Scalar>(cache: &DecodeCache<T>, params: &HeadParams<T>, d_probs: &[Vec<T>]) -> HeadGrads<T> {
    let a = &cache.input;
    let hw = a.height * a.width;
    let mut d_proj = vec![T::zero(); params.proj.len()];
    let mut d_bias = T::zero();
    let mut d_input = vec![T::zero(); a.data.len()];
    for t in 0..a.frames {
        let d_sig = cache.map.apply_transpose(&d_probs[t]);
        let d_logit: Vec<T> = d_sig
            .iter()
            .zip(&cache.sig[t])
            .map(|(&g, &s)| g * s * (T::one() - s))
            .collect();
        d_bias += d_logit.iter().copied().sum::<T>();
        let frame = a.frame(t);
        let base = t * a.channels * hw;
        for (c, &w) in params.proj.iter().enumerate() {
            let block = &frame[c * hw..(c + 1) * hw];
            d_proj[c] += block.iter().zip(&d_logit).map(|(&v, &g)| v * g).sum::<T>();
            for (d, &g) in d_input[base + c * hw..base + (c + 1) * hw].iter_mut().zip(&d_logit) {
                *d = w * g;
            }
        }
    }
    HeadGrads {
        params: HeadParams {
            proj: d_proj,
            bias: d_bias,
        },
        input: HolisticAttention {
            frames: a.frames,
            channels: a.channels,
            height: a.height,
            width: a.width,
            data: d_input,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::fd::{finite_diff_grad, max_rel_error};
    use crate::verify::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_holistic(frames: usize, channels: usize, h: usize, w: usize, seed: u64) -> HolisticAttention<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HolisticAttention {
            frames,
            channels,
            height: h,
            width: w,
            data: (0..frames * channels * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        }
    }

    #[test]
    fn zero_params_give_one_half() {
        let a = random_holistic(2, 4, 3, 3, 1);
        let m = decode(&a, &HeadParams::zeros(4), 6, 6).unwrap();
        assert!(m.iter().all(|f| f.data.iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn large_bias_saturates() {
        let a = random_holistic(1, 4, 2, 2, 2);
        let mut p = HeadParams::zeros(4);
        p.bias = 50.0;
        let (probs, _) = decode_forward(&a, &p, 4, 4).unwrap();
        assert!(probs[0].iter().all(|&v| v >= 1.0 - 1e-9));
    }

    #[test]
    fn matches_per_pixel_oracle() {
        let a = random_holistic(2, 6, 3, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = HeadParams::<f64>::init(6, &mut rng);
        p.bias = 0.3;
        let (probs, _) = decode_forward(&a, &p, 7, 9).unwrap();
        for t in 0..2 {
            let hw = 12;
            let channels: Vec<Vec<f64>> = (0..6).map(|c| a.frame(t)[c * hw..(c + 1) * hw].to_vec()).collect();
            let want = oracle::decode_oracle(&channels, &p.proj, p.bias, 3, 4, 7, 9);
            for (g, w) in probs[t].iter().zip(&want) {
                assert!((g - w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn too_small_target_is_rejected() {
        let a = random_holistic(1, 2, 4, 4, 5);
        assert!(decode(&a, &HeadParams::zeros(2), 3, 8).is_err());
        assert!(decode(&a, &HeadParams::zeros(3), 8, 8).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let a = random_holistic(2, 4, 2, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = HeadParams::<f64>::init(4, &mut rng);
        let w: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..20).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let loss = |a: &HolisticAttention<f64>, p: &HeadParams<f64>| {
            let (probs, _) = decode_forward(a, p, 4, 5).unwrap();
            probs
                .iter()
                .flatten()
                .zip(w.iter().flatten())
                .map(|(x, y)| x * y)
                .sum::<f64>()
        };
        let (_, cache) = decode_forward(&a, &p, 4, 5).unwrap();
        let g = decode_backward(&cache, &p, &w);
        let fd = finite_diff_grad(
            |x| {
                let mut q = p.clone();
                q.proj = x.to_vec();
                loss(&a, &q)
            },
            &p.proj,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&g.params.proj, &fd) < 1e-7);
        let fd = finite_diff_grad(
            |x| {
                let mut q = p.clone();
                q.bias = x[0];
                loss(&a, &q)
            },
            &[p.bias],
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&[g.params.bias], &fd) < 1e-7);
        let fd = finite_diff_grad(
            |x| {
                let mut b = a.clone();
                b.data = x.to_vec();
                loss(&b, &p)
            },
            &a.data,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&g.input.data, &fd) < 1e-7);
    }
}
