//! Desk-scale training loop: plain gradient descent on the weighted total
//! loss, averaged over a fixed list of episodes.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::loss::LossReport;
use crate::episode::Episode;
use crate::error::{HpanError, Result};
use crate::model::{
    backward, cluster_prototypes, forward_with_prototypes, mean_pairwise_cosine, project_episode, HpanConfig,
    HpanParams, PreparedEpisode,
};

pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Episode-averaged losses before each update.
    pub trajectory: Vec<LossReport>,
    pub params: HpanParams<f64>,
}

fn step_seed(seed: u64, step: usize, episode: usize) -> u64 {
    seed.wrapping_add((step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((episode as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// Per-episode loss and gradient at `params`; clustering reruns with a seed
/// derived from `(seed, step, episode)`.
fn evaluate(
    preps: &[PreparedEpisode<f64>],
    params: &HpanParams<f64>,
    cfg: &HpanConfig,
    seed: u64,
    step: usize,
) -> Result<Vec<(LossReport, HpanParams<f64>)>> {
    preps
        .par_iter()
        .enumerate()
        .map(|(e, prep)| {
            let tokens = project_episode(prep, &params.projection)?;
            let raw = cluster_prototypes(prep, &tokens, cfg, step_seed(seed, step, e))?;
            let fwd = forward_with_prototypes(prep, &raw, params, cfg)?;
            let grads = backward(prep, &fwd, params, cfg)?;
            let report = fwd.report.expect("prepared episodes carry ground truth");
            Ok((report, grads))
        })
        .collect()
}

fn prepare(episodes: &[Episode]) -> Result<Vec<PreparedEpisode<f64>>> {
    if episodes.is_empty() {
        return Err(HpanError::Config("training needs at least one episode".into()));
    }
    episodes
        .iter()
        .map(|ep| {
            let prep = PreparedEpisode::new(ep)?;
            if prep.gt.is_none() {
                return Err(HpanError::Config("training episodes need query masks".into()));
            }
            Ok(prep)
        })
        .collect()
}

/// Trains from parameters initialised with `seed`. Deterministic given its
/// inputs regardless of the rayon pool size.
pub fn train_demo(episodes: &[Episode], cfg: &HpanConfig, steps: usize, lr: f64, seed: u64) -> Result<TrainResult> {
    let c_in = episodes.first().map(|e| e.l3_shape().0).unwrap_or(0);
    train_from(episodes, cfg, HpanParams::init(c_in, cfg, seed), steps, lr, seed)
}

pub fn train_from(
    episodes: &[Episode],
    cfg: &HpanConfig,
    mut params: HpanParams<f64>,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainResult> {
    cfg.validate()?;
    if steps == 0 {
        return Err(HpanError::Config("steps must be >= 1".into()));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(HpanError::Config(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    let preps = prepare(episodes)?;
    let scale = 1.0 / preps.len() as f64;
    let mut trajectory = Vec::with_capacity(steps);
    for step in 0..steps {
        // Non-finite weights make every later loss non-finite.
        if !params.is_finite() {
            return Err(HpanError::NonFiniteLoss { step });
        }
        let results = evaluate(&preps, &params, cfg, seed, step)?;
        let mut mean = LossReport::default();
        let mut grad = params.zeros_like();
        for (r, g) in &results {
            mean.ce += r.ce * scale;
            mean.iou += r.iou * scale;
            mean.proto += r.proto * scale;
            mean.total += r.total * scale;
            grad.axpy(scale, g);
        }
        if !mean.total.is_finite() || !grad.is_finite() {
            return Err(HpanError::NonFiniteLoss { step });
        }
        log::debug!("step {step}: total {:.6}", mean.total);
        trajectory.push(mean);
        params.axpy(-lr, &grad);
    }
    Ok(TrainResult { trajectory, params })
}

/// Mean pairwise cosine of the prototypes the attention runs on, averaged
/// over episodes.
pub fn mean_prototype_cosine(
    episodes: &[Episode],
    params: &HpanParams<f64>,
    cfg: &HpanConfig,
    seed: u64,
) -> Result<f64> {
    let preps = prepare(episodes)?;
    let mut sum = 0.0;
    for (e, prep) in preps.iter().enumerate() {
        let tokens = project_episode(prep, &params.projection)?;
        let raw = cluster_prototypes(prep, &tokens, cfg, step_seed(seed, usize::MAX, e))?;
        let fwd = forward_with_prototypes(prep, &raw, params, cfg)?;
        sum += mean_pairwise_cosine(&fwd.prototypes);
    }
    Ok(sum / preps.len() as f64)
}

/// `step,ce,iou,proto,total` with 9 significant digits.
pub fn write_trajectory_csv(path: impl AsRef<Path>, trajectory: &[LossReport]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,ce,iou,proto,total\n");
    for (i, r) in trajectory.iter().enumerate() {
        out.push_str(&format!(
            "{i},{:.8e},{:.8e},{:.8e},{:.8e}\n",
            r.ce, r.iou, r.proto, r.total
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| HpanError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{synth_episode, SynthConfig};

    fn setup() -> (Vec<Episode>, HpanConfig) {
        let synth = SynthConfig {
            k: 2,
            t: 2,
            channels_l3: 8,
            channels_l4: 8,
            l3_height: 4,
            l3_width: 6,
            blob_radius: 3.0,
            drift: 1.0,
            ..SynthConfig::default()
        };
        let cfg = HpanConfig {
            n_p: 2,
            c: 6,
            ..HpanConfig::default()
        };
        (
            vec![synth_episode(&synth, 1).unwrap(), synth_episode(&synth, 2).unwrap()],
            cfg,
        )
    }

    #[test]
    fn zero_learning_rate_keeps_the_loss_constant() {
        let (eps, cfg) = setup();
        let r = train_demo(&eps, &cfg, 4, 0.0, 3).unwrap();
        let first = r.trajectory[0].total;
        assert!(r.trajectory.iter().all(|x| (x.total - first).abs() < 1e-9));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (eps, cfg) = setup();
        let a = train_demo(&eps, &cfg, 5, 1e-2, 7).unwrap();
        let b = train_demo(&eps, &cfg, 5, 1e-2, 7).unwrap();
        let bits = |r: &TrainResult| r.trajectory.iter().map(|x| x.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn non_finite_weights_report_the_step() {
        let (eps, cfg) = setup();
        let mut p = HpanParams::init(8, &cfg, 1);
        p.head.bias = f64::NAN;
        match train_from(&eps, &cfg, p, 5, 1e-3, 1) {
            Err(HpanError::NonFiniteLoss { step: 0 }) => {}
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn csv_has_header_and_one_row_per_step() {
        let (eps, cfg) = setup();
        let r = train_demo(&eps, &cfg, 3, 1e-3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trajectory_csv(&path, &r.trajectory).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,ce,iou,proto,total");
        assert_eq!(lines.len(), 4);
        let v: f64 = lines[1].split(',').nth(4).unwrap().parse().unwrap();
        assert!((v - r.trajectory[0].total).abs() <= 1e-8 * v.abs());
    }
}
