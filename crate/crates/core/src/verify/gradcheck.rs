//! Central-difference check of every analytic gradient of the pipeline.
//!
//! Runs on a reduced synthetic episode so each coordinate can be probed.
//! Raw prototypes are clustered once and held fixed, which excludes the
//! k-means assignment from the check.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::episode::{synth_episode, SynthConfig};
use crate::error::{HpanError, Result};
use crate::head::{ce_loss, ce_loss_grad, iou_loss, iou_loss_grad, proto_loss, proto_loss_grad, GradCheckEntry};
use crate::matrix::Matrix;
use crate::model::{
    backward, cluster_prototypes, forward_with_prototypes, project_episode, HpanConfig, HpanParams, PreparedEpisode,
};
use crate::verify::fd::{finite_diff_grad, max_rel_error};

/// Central-difference steps tried per group; the best agreement counts.
/// Near-cancelling edge normalisers make the graph attention sharply curved,
/// so no single step is both small enough and above round-off everywhere.
pub const GRADCHECK_STEPS: &[f64] = &[1e-4, 1e-5, 1e-6, 1e-7];
pub const GRADCHECK_TOL: f64 = 1e-3;

/// Not differentiable, left out on purpose.
pub const EXCLUDED: &[&str] = &["kmeans.assignment"];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: BTreeMap<String, GradCheckEntry>,
}

impl GradCheckReport {
    pub fn failed(&self) -> Vec<String> {
        self.groups
            .iter()
            .filter(|(_, e)| !e.passed)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn into_result(self) -> Result<Self> {
        let failed = self.failed();
        if failed.is_empty() {
            Ok(self)
        } else {
            Err(HpanError::GradCheck { groups: failed })
        }
    }
}

/// Adds `delta` to the first analytic coordinate of one group before
/// comparison; used to confirm the checker catches a wrong gradient.
#[derive(Debug, Clone)]
pub struct Fault {
    pub group: String,
    pub delta: f64,
}

fn entry(analytic: &[f64], numeric: &[Vec<f64>]) -> GradCheckEntry {
    let e = numeric
        .iter()
        .map(|n| max_rel_error(analytic, n))
        .fold(f64::INFINITY, f64::min);
    GradCheckEntry {
        passed: e <= GRADCHECK_TOL,
        max_rel_err: e,
    }
}

fn sweep(f: impl Fn(&[f64]) -> f64, x0: &[f64]) -> Result<Vec<Vec<f64>>> {
    GRADCHECK_STEPS.iter().map(|&h| finite_diff_grad(&f, x0, h)).collect()
}

fn reduced_setup() -> (SynthConfig, HpanConfig) {
    let synth = SynthConfig {
        k: 2,
        t: 2,
        channels_l3: 6,
        channels_l4: 6,
        l3_height: 4,
        l3_width: 6,
        mask_scale: 2,
        blob_radius: 3.0,
        drift: 1.0,
        ..SynthConfig::default()
    };
    let cfg = HpanConfig {
        n_p: 2,
        c: 5,
        ..HpanConfig::default()
    };
    (synth, cfg)
}

pub fn gradcheck(seed: u64) -> Result<GradCheckReport> {
    gradcheck_with(seed, None)
}

pub fn gradcheck_with(seed: u64, fault: Option<&Fault>) -> Result<GradCheckReport> {
    let (synth, cfg) = reduced_setup();
    let ep = synth_episode(&synth, seed)?;
    let prep = PreparedEpisode::<f64>::new(&ep)?;
    let params = HpanParams::<f64>::init(synth.channels_l3, &cfg, seed);
    let tokens = project_episode(&prep, &params.projection)?;
    let raw = cluster_prototypes(&prep, &tokens, &cfg, seed)?;
    let fwd = forward_with_prototypes(&prep, &raw, &params, &cfg)?;
    let grads = backward(&prep, &fwd, &params, &cfg)?;

    let mut analytic: Vec<(String, Vec<f64>)> = grads.groups().into_iter().map(|(n, s)| (n, s.to_vec())).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (gi, (_, x0)) in params.groups().iter().enumerate() {
        let f = |x: &[f64]| {
            let mut p = params.clone();
            p.groups_mut()[gi].1.copy_from_slice(x);
            forward_with_prototypes(&prep, &raw, &p, &cfg)
                .ok()
                .and_then(|f| f.report)
                .map_or(f64::NAN, |r| r.total)
        };
        numeric.push(sweep(f, x0)?);
    }

    // Losses with respect to their direct inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let pred: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..16).map(|_| rng.random_range(0.05..0.95)).collect())
        .collect();
    let gt: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..16).map(|_| rng.random_range(0..2) as f64).collect())
        .collect();
    let flat: Vec<f64> = pred.concat();
    let unflat = |x: &[f64]| x.chunks(16).map(|c| c.to_vec()).collect::<Vec<_>>();
    analytic.push(("loss.ce".into(), ce_loss_grad(&pred, &gt)?.concat()));
    numeric.push(sweep(|x| ce_loss(&unflat(x), &gt).unwrap_or(f64::NAN), &flat)?);
    analytic.push(("loss.iou".into(), iou_loss_grad(&pred, &gt)?.concat()));
    numeric.push(sweep(|x| iou_loss(&unflat(x), &gt).unwrap_or(f64::NAN), &flat)?);
    let protos = Matrix::from_fn(6, 5, |_, _| rng.random_range(-1.0..1.0));
    analytic.push(("loss.proto".into(), proto_loss_grad(&protos, 1.0)?.into_vec()));
    numeric.push(sweep(
        |x| {
            Matrix::from_vec(6, 5, x.to_vec())
                .and_then(|m| proto_loss(&m, 1.0))
                .unwrap_or(f64::NAN)
        },
        protos.as_slice(),
    )?);

    if let Some(f) = fault {
        let slot = analytic
            .iter_mut()
            .find(|(n, _)| *n == f.group)
            .ok_or_else(|| HpanError::Config(format!("unknown gradient group {}", f.group)))?;
        slot.1[0] += f.delta;
    }

    let groups = analytic
        .iter()
        .zip(&numeric)
        .map(|((name, a), n)| (name.clone(), entry(a, n)))
        .collect();
    Ok(GradCheckReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_groups_pass() {
        let r = gradcheck(0).unwrap();
        assert_eq!(r.groups.len(), 25 + 3);
        assert!(r.failed().is_empty(), "{:?}", r.groups);
        assert!(!r.groups.contains_key(EXCLUDED[0]));
    }

    #[test]
    fn passes_across_seeds() {
        for seed in 1..6 {
            let r = gradcheck(seed).unwrap();
            assert!(r.failed().is_empty(), "seed {seed}: {:?}", r.failed());
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let fault = Fault {
            group: "bpam.co.outer.w_v".into(),
            delta: 1.0,
        };
        let r = gradcheck_with(0, Some(&fault)).unwrap();
        assert_eq!(r.failed(), vec!["bpam.co.outer.w_v".to_string()]);
        assert!(matches!(r.into_result(), Err(HpanError::GradCheck { .. })));
    }
}
