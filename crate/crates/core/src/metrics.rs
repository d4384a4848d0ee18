//! Region similarity J and contour accuracy F.
//!
//! Soft masks are binarized at 0.5. Boundary pixels are foreground pixels
//! with at least one 4-neighbour that is background or off the grid.

use serde::{Deserialize, Serialize};

use crate::episode::Mask;
use crate::error::{HpanError, Result};

fn check_shapes(pred: &Mask, gt: &Mask) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(HpanError::shape(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

fn binary(m: &Mask) -> Vec<bool> {
    m.data.iter().map(|&v| v >= 0.5).collect()
}

/// Intersection over union; 1 when both masks are empty.
pub fn region_similarity(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (p, g) = (binary(pred), binary(gt));
    let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
    let union = p.iter().zip(&g).filter(|(a, b)| **a || **b).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Default matching radius: `ceil(0.008 * diagonal)`.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

pub fn boundary(fg: &[bool], height: usize, width: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && fg[y as usize * width + x as usize]
    };
    let mut out = vec![false; fg.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

/// Chebyshev dilation by `r`, separable as a row pass then a column pass.
fn dilate(b: &[bool], height: usize, width: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return b.to_vec();
    }
    let mut rows = vec![false; b.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(width - 1);
            rows[y * width + x] = (lo..=hi).any(|xx| b[y * width + xx]);
        }
    }
    let mut out = vec![false; b.len()];
    for y in 0..height {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(height - 1);
        for x in 0..width {
            out[y * width + x] = (lo..=hi).any(|yy| rows[yy * width + x]);
        }
    }
    out
}

/// Boundary F-measure with Chebyshev matching radius `tolerance_px`.
pub fn contour_accuracy(pred: &Mask, gt: &Mask, tolerance_px: usize) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (h, w) = (gt.height, gt.width);
    let bp = boundary(&binary(pred), h, w);
    let bg = boundary(&binary(gt), h, w);
    let np = bp.iter().filter(|&&v| v).count();
    let ng = bg.iter().filter(|&&v| v).count();
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let dg = dilate(&bg, h, w, tolerance_px);
    let dp = dilate(&bp, h, w, tolerance_px);
    let hit_p = bp.iter().zip(&dg).filter(|(a, b)| **a && **b).count();
    let hit_g = bg.iter().zip(&dp).filter(|(a, b)| **a && **b).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub j_per_frame: Vec<f64>,
    pub f_per_frame: Vec<f64>,
    pub j_mean: f64,
    pub f_mean: f64,
}

impl EvalResult {
    /// `frame,j,f` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,j,f\n");
        for (t, (j, f)) in self.j_per_frame.iter().zip(&self.f_per_frame).enumerate() {
            s.push_str(&format!("{t},{j:.9},{f:.9}\n"));
        }
        s
    }
}

/// Per-frame J and F at the default tolerance, plus their means.
pub fn evaluate_episode(preds: &[Mask], gts: &[Mask]) -> Result<EvalResult> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(HpanError::shape(format!(
            "{} predictions for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    let mut j = Vec::with_capacity(preds.len());
    let mut f = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        j.push(region_similarity(p, g)?);
        f.push(contour_accuracy(p, g, default_tolerance(g.height, g.width))?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalResult {
        j_mean: mean(&j),
        f_mean: mean(&f),
        j_per_frame: j,
        f_per_frame: f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::oracle::boundary_f_oracle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Mask {
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Mask::new(h, w, data).unwrap()
    }

    fn grid(m: &Mask) -> Vec<Vec<bool>> {
        (0..m.height)
            .map(|y| (0..m.width).map(|x| m.at(y, x) >= 0.5).collect())
            .collect()
    }

    #[test]
    fn j_examples() {
        let a = rect(8, 8, 2, 2, 6, 6);
        assert_eq!(region_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(
            region_similarity(&rect(8, 8, 0, 0, 3, 3), &rect(8, 8, 5, 5, 8, 8)).unwrap(),
            0.0
        );
        assert_eq!(
            region_similarity(&rect(8, 8, 0, 0, 8, 4), &rect(8, 8, 0, 0, 8, 8)).unwrap(),
            0.5
        );
        let empty = Mask::filled(4, 4, 0.0).unwrap();
        assert_eq!(region_similarity(&empty, &empty).unwrap(), 1.0);
        assert!(region_similarity(&empty, &Mask::filled(4, 5, 0.0).unwrap()).is_err());
    }

    #[test]
    fn f_examples() {
        let a = rect(20, 20, 4, 4, 14, 14);
        assert_eq!(contour_accuracy(&a, &a, 0).unwrap(), 1.0);
        let shifted = rect(20, 20, 4, 5, 14, 15);
        assert_eq!(contour_accuracy(&a, &shifted, 1).unwrap(), 1.0);
        assert!(contour_accuracy(&a, &shifted, 0).unwrap() < 1.0);
        let far = contour_accuracy(&rect(30, 30, 1, 1, 4, 4), &rect(30, 30, 20, 20, 23, 23), 2).unwrap();
        assert_eq!(far, 0.0);
        let empty = Mask::filled(6, 6, 0.0).unwrap();
        assert_eq!(contour_accuracy(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(contour_accuracy(&empty, &rect(6, 6, 1, 1, 3, 3), 1).unwrap(), 0.0);
    }

    #[test]
    fn default_tolerance_values() {
        assert_eq!(default_tolerance(32, 56), 1);
        assert_eq!(default_tolerance(480, 854), 8);
    }

    #[test]
    fn evaluate_means() {
        let a = rect(10, 10, 2, 2, 6, 6);
        let b = rect(10, 10, 7, 7, 9, 9);
        let r = evaluate_episode(&[a.clone(), a.clone()], &[a.clone(), a.clone()]).unwrap();
        assert_eq!((r.j_mean, r.f_mean), (1.0, 1.0));
        let r = evaluate_episode(&[a.clone(), a.clone()], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(r.j_mean, 0.5);
        let one = [a.clone()];
        assert!(evaluate_episode(&one, &[a, b]).is_err());
    }

    #[test]
    fn evaluate_matches_per_frame_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<(Mask, Mask)> = (0..4)
            .map(|_| {
                let y = rng.random_range(0..10);
                let x = rng.random_range(0..10);
                (rect(24, 24, y, x, y + 8, x + 9), rect(24, 24, 5, 5, 15, 14))
            })
            .collect();
        let preds: Vec<Mask> = frames.iter().map(|f| f.0.clone()).collect();
        let gts: Vec<Mask> = frames.iter().map(|f| f.1.clone()).collect();
        let r = evaluate_episode(&preds, &gts).unwrap();
        for (t, (p, g)) in frames.iter().enumerate() {
            assert_eq!(r.j_per_frame[t], region_similarity(p, g).unwrap());
            assert_eq!(r.f_per_frame[t], contour_accuracy(p, g, 1).unwrap());
        }
        let mean = r.j_per_frame.iter().sum::<f64>() / 4.0;
        assert!((r.j_mean - mean).abs() < 1e-12);
    }

    #[test]
    fn zero_tolerance_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let h = rng.random_range(1..=32);
            let w = rng.random_range(1..=32);
            let density = rng.random_range(0.1..0.9);
            let mk = |rng: &mut ChaCha8Rng| {
                Mask::new(
                    h,
                    w,
                    (0..h * w)
                        .map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 })
                        .collect(),
                )
                .unwrap()
            };
            let p = mk(&mut rng);
            let g = mk(&mut rng);
            assert_eq!(
                contour_accuracy(&p, &g, 0).unwrap(),
                boundary_f_oracle(&grid(&p), &grid(&g), 0)
            );
        }
    }

    proptest! {
        #[test]
        fn j_is_translation_invariant(y in 2usize..8, x in 2usize..8, dy in 0usize..6, dx in 0usize..6) {
            let a = rect(30, 30, y, x, y + 6, x + 7);
            let b = rect(30, 30, y + 2, x + 1, y + 9, x + 5);
            let a2 = rect(30, 30, y + dy, x + dx, y + dy + 6, x + dx + 7);
            let b2 = rect(30, 30, y + dy + 2, x + dx + 1, y + dy + 9, x + dx + 5);
            prop_assert_eq!(region_similarity(&a, &b).unwrap(), region_similarity(&a2, &b2).unwrap());
        }

        #[test]
        fn metrics_are_bounded(seed in 0u64..1000, tol in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| Mask::new(12, 12, (0..144).map(|_| rng.random_range(0.0..1.0f32)).collect()).unwrap();
            let (p, g) = (mk(&mut rng), mk(&mut rng));
            let j = region_similarity(&p, &g).unwrap();
            let f = contour_accuracy(&p, &g, tol).unwrap();
            prop_assert!((0.0..=1.0).contains(&j) && (0.0..=1.0).contains(&f));
            prop_assert_eq!(j, region_similarity(&g, &p).unwrap());
            prop_assert_eq!(f, contour_accuracy(&g, &p, tol).unwrap());
        }
    }
}
