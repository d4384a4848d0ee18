//! Property batteries shared by the `selftest` command and the acceptance
//! suite. Each returns raw measurements; callers decide the thresholds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bpam::{attention, AttentionBlockParams};
use crate::episode::{synth_episode, Episode, FeatureMap, Mask, SynthConfig};
use crate::error::Result;
use crate::head::{ce_loss, iou_loss, proto_loss};
use crate::matrix::Matrix;
use crate::metrics::{contour_accuracy, region_similarity};
use crate::pgam::{compute_pseudo_masks, graph_attention, kmeans, masks_at_level, GraphAttentionParams};
use crate::verify::fd::max_rel_error;
use crate::verify::gradcheck::gradcheck;
use crate::verify::oracle;

type Rows = Vec<Vec<f64>>;

fn rows(m: &Matrix<f64>) -> Rows {
    m.row_iter().map(|r| r.to_vec()).collect()
}

fn uniform(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn scalar_rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Worst relative disagreement with the dense oracles, per formula.
#[derive(Debug, Clone, Default, Serialize)]
pub struct OracleAgreement {
    pub instances: usize,
    pub graph_attention: f64,
    pub attention: f64,
    pub ce: f64,
    pub iou: f64,
    pub proto: f64,
}

impl OracleAgreement {
    pub fn worst(&self) -> f64 {
        [self.graph_attention, self.attention, self.ce, self.iou, self.proto]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

pub fn oracle_agreement(instances: usize, seed: u64) -> Result<OracleAgreement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleAgreement {
        instances,
        ..OracleAgreement::default()
    };
    for _ in 0..instances {
        let c = rng.random_range(1..=6);
        let (n_t, n_s) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let tgt = uniform(n_t, c, &mut rng);
        let src = uniform(n_s, c, &mut rng);
        let lambda = rng.random_range(0.0..1.0);
        let gp = GraphAttentionParams {
            w_k: uniform(c, c, &mut rng),
            w_q: uniform(c, c, &mut rng),
            w_v: uniform(c, c, &mut rng),
        };
        let got = graph_attention(&tgt, &src, lambda, &gp)?;
        let want = oracle::dense_graph_attention(
            &rows(&tgt),
            &rows(&src),
            lambda,
            &rows(&gp.w_k),
            &rows(&gp.w_q),
            &rows(&gp.w_v),
        );
        out.graph_attention = out.graph_attention.max(max_rel_error(got.as_slice(), &want.concat()));

        let (n_q, n_k) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let q = uniform(n_q, c, &mut rng);
        let k = uniform(n_k, c, &mut rng);
        let v = uniform(n_k, c, &mut rng);
        let ap = AttentionBlockParams::<f64>::init(c, &mut rng);
        let got = attention(&q, &k, &v, &ap)?;
        let want = oracle::dense_attention(
            &rows(&q),
            &rows(&k),
            &rows(&v),
            &rows(&ap.w_q),
            &rows(&ap.w_k),
            &rows(&ap.w_v),
        );
        out.attention = out.attention.max(max_rel_error(got.as_slice(), &want.concat()));

        let (frames, px) = (rng.random_range(1..=4), rng.random_range(1..=20));
        let pred: Rows = (0..frames)
            .map(|_| (0..px).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let gt: Rows = (0..frames)
            .map(|_| (0..px).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect())
            .collect();
        out.ce = out
            .ce
            .max(scalar_rel(ce_loss(&pred, &gt)?, oracle::ce_oracle(&pred, &gt)));
        out.iou = out
            .iou
            .max(scalar_rel(iou_loss(&pred, &gt)?, oracle::iou_oracle(&pred, &gt)));

        let protos = uniform(rng.random_range(2..=8), c, &mut rng);
        let lambda = rng.random_range(0.1..2.0);
        out.proto = out.proto.max(scalar_rel(
            proto_loss(&protos, lambda)?,
            oracle::proto_oracle(&rows(&protos), lambda),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PseudoMaskStats {
    pub episodes: usize,
    pub frames: usize,
    /// Frames whose raw similarity had zero range.
    pub degenerate_frames: usize,
    pub out_of_range: usize,
    /// Non-degenerate frames missing an exact 0 or an exact 1.
    pub missing_extremes: usize,
    /// Largest change after rescaling each support map by a positive factor.
    pub max_rescale_diff: f64,
}

fn pseudo_masks_of(ep: &Episode) -> Result<Vec<Mask>> {
    let support: Vec<FeatureMap> = ep.support.iter().map(|s| s.features.l4.clone()).collect();
    let masks: Vec<Mask> = ep.support.iter().map(|s| s.mask.clone()).collect();
    let query: Vec<FeatureMap> = ep.query.iter().map(|q| q.features.l4.clone()).collect();
    let masks_l4 = masks_at_level(&support, &masks)?;
    compute_pseudo_masks::<f64>(&query, &support, &masks_l4)
}

/// Runs pseudo-mask generation on small random synthetic episodes.
pub fn pseudo_mask_properties(episodes: usize, seed: u64) -> Result<PseudoMaskStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = PseudoMaskStats {
        episodes,
        ..PseudoMaskStats::default()
    };
    for _ in 0..episodes {
        let l3_height = rng.random_range(4..=8);
        let l3_width = rng.random_range(4..=8);
        let cfg = SynthConfig {
            k: rng.random_range(1..=3),
            t: rng.random_range(1..=3),
            channels_l3: 4,
            channels_l4: rng.random_range(8..=64),
            l3_height,
            l3_width,
            mask_scale: 2,
            blob_radius: rng.random_range(3.0..=(l3_height.min(l3_width) as f64 - 0.5)),
            separation: rng.random_range(0.0..12.0),
            drift: rng.random_range(0.0..2.0),
            ..SynthConfig::default()
        };
        let mut ep = synth_episode(&cfg, rng.random())?;
        let base = pseudo_masks_of(&ep)?;
        for m in &base {
            st.frames += 1;
            st.out_of_range += m.data.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
            let has0 = m.data.contains(&0.0);
            let has1 = m.data.contains(&1.0);
            if m.data.iter().all(|&v| v == 0.0) {
                st.degenerate_frames += 1;
            } else if !(has0 && has1) {
                st.missing_extremes += 1;
            }
        }
        for s in &mut ep.support {
            let a: f32 = rng.random_range(0.05..20.0);
            s.features.l4.data.iter_mut().for_each(|v| *v *= a);
        }
        for (a, b) in base.iter().zip(pseudo_masks_of(&ep)?) {
            for (x, y) in a.data.iter().zip(&b.data) {
                st.max_rescale_diff = st.max_rescale_diff.max((x - y).abs() as f64);
            }
        }
    }
    Ok(st)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct KMeansStats {
    pub point_sets: usize,
    /// Largest `objective - best point-pair objective` seen; negative when
    /// the implementation always did at least as well.
    pub worst_gap: f64,
    /// Objective increases along any kept run's trace.
    pub trace_increases: usize,
}

/// `k = 2` on every size from 2 to 8 points in the plane, for each seed.
pub fn kmeans_battery(seeds: usize) -> Result<KMeansStats> {
    let mut st = KMeansStats {
        worst_gap: f64::NEG_INFINITY,
        ..KMeansStats::default()
    };
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in 2..=8 {
            let pts: Rows = (0..n)
                .map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
                .collect();
            let m = Matrix::from_rows(&pts)?;
            let r = kmeans(&m, 2, seed)?;
            st.point_sets += 1;
            st.worst_gap = st.worst_gap.max(r.objective - oracle::best_point_pair_objective(&pts));
            st.trace_increases += r.objective_trace.windows(2).filter(|w| w[1] > w[0]).count();
        }
    }
    Ok(st)
}

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
    Mask {
        height: h,
        width: w,
        data,
    }
}

/// The worked J and F examples: `(name, got, expected)`.
pub fn metric_examples() -> Result<Vec<(&'static str, f64, f64)>> {
    let sq = rect(20, 20, 4, 4, 14, 14);
    Ok(vec![
        ("J identical", region_similarity(&sq, &sq)?, 1.0),
        (
            "J disjoint",
            region_similarity(&rect(8, 8, 0, 0, 3, 3), &rect(8, 8, 5, 5, 8, 8))?,
            0.0,
        ),
        (
            "J left half",
            region_similarity(&rect(8, 8, 0, 0, 8, 4), &rect(8, 8, 0, 0, 8, 8))?,
            0.5,
        ),
        ("F identical", contour_accuracy(&sq, &sq, 0)?, 1.0),
        (
            "F one-pixel shift",
            contour_accuracy(&sq, &rect(20, 20, 4, 5, 14, 15), 1)?,
            1.0,
        ),
        (
            "F far apart",
            contour_accuracy(&rect(30, 30, 1, 1, 4, 4), &rect(30, 30, 20, 20, 23, 23), 2)?,
            0.0,
        ),
    ])
}

/// Random masks on which tolerance-0 F differs from the pairwise oracle.
pub fn f_oracle_mismatches(masks: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..masks {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let density = rng.random_range(0.1..0.9);
        let mut mk = || -> Vec<Vec<bool>> {
            (0..h)
                .map(|_| (0..w).map(|_| rng.random_bool(density)).collect())
                .collect()
        };
        let (p, g) = (mk(), mk());
        let to_mask = |b: &Vec<Vec<bool>>| Mask {
            height: h,
            width: w,
            data: b.concat().into_iter().map(|v| if v { 1.0 } else { 0.0 }).collect(),
        };
        if contour_accuracy(&to_mask(&p), &to_mask(&g), 0)? != oracle::boundary_f_oracle(&p, &g, 0) {
            bad += 1;
        }
    }
    Ok(bad)
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfTestReport {
    pub checks: Vec<Check>,
}

impl SelfTestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// A fast battery: seconds, not minutes.
pub fn selftest(seed: u64) -> Result<SelfTestReport> {
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        })
    };

    let oa = oracle_agreement(20, seed)?;
    push(
        "oracles",
        oa.worst() <= 1e-6,
        format!("worst rel err {:.2e}", oa.worst()),
    );

    let gc = gradcheck(seed)?;
    let worst = gc.groups.values().map(|e| e.max_rel_err).fold(0.0, f64::max);
    push(
        "gradients",
        gc.failed().is_empty(),
        format!("{} groups, worst rel err {worst:.2e}", gc.groups.len()),
    );

    let pm = pseudo_mask_properties(50, seed)?;
    push(
        "pseudo-masks",
        pm.out_of_range == 0 && pm.missing_extremes == 0 && pm.max_rescale_diff <= 1e-6,
        format!("{} frames, rescale diff {:.2e}", pm.frames, pm.max_rescale_diff),
    );

    let km = kmeans_battery(10)?;
    push(
        "k-means",
        km.worst_gap <= 1e-9 && km.trace_increases == 0,
        format!("{} sets, worst gap {:.2e}", km.point_sets, km.worst_gap),
    );

    let ex = metric_examples()?;
    let bad_ex = ex.iter().filter(|(_, g, e)| g != e).count();
    let bad_f = f_oracle_mismatches(10, seed)?;
    push(
        "metrics",
        bad_ex == 0 && bad_f == 0,
        format!("{} examples, {bad_f} oracle mismatches", ex.len()),
    );

    Ok(SelfTestReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        let r = selftest(0).unwrap();
        assert!(r.all_passed(), "{r:?}");
        assert_eq!(r.checks.len(), 5);
    }

    #[test]
    fn examples_have_expected_values() {
        for (name, got, want) in metric_examples().unwrap() {
            assert_eq!(got, want, "{name}");
        }
    }
}
