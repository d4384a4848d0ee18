use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hpan_core::episode::SynthConfig;
use hpan_core::head::{LossWeights, DEFAULT_LR};
use hpan_core::model::HpanConfig;
use hpan_core::pgam::{DEFAULT_LAMBDA_CO, DEFAULT_LAMBDA_SELF, DEFAULT_TAU_FG};
use serde::{Deserialize, Serialize};

/// Channel width used by `train-demo` unless set explicitly.
pub const DEMO_CHANNELS: usize = 64;
pub const FULL_CHANNELS: usize = 256;

/// Flat run configuration; any field may be omitted from the JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k: usize,
    pub t: usize,
    pub n_p: usize,
    /// Model width. Unset means 256, or 64 for `train-demo`.
    pub c: Option<usize>,
    pub lambda_self: f64,
    pub lambda_co: f64,
    pub lambda_ce: f64,
    pub lambda_iou: f64,
    pub lambda_proto: f64,
    pub tau_fg: f64,
    pub seed: u64,
    pub l3_height: usize,
    pub l3_width: usize,
    /// Synthetic feature channels at both levels; unset follows `c`.
    pub channels: Option<usize>,
    pub separation: f64,
    pub noise: f64,
    pub episodes: usize,
    pub steps: usize,
    pub lr: f64,
    pub reps: usize,
    pub baseline: bool,
    pub episode_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let loss = LossWeights::default();
        RunConfig {
            k: synth.k,
            t: synth.t,
            n_p: 5,
            c: None,
            lambda_self: DEFAULT_LAMBDA_SELF,
            lambda_co: DEFAULT_LAMBDA_CO,
            lambda_ce: loss.lambda_ce,
            lambda_iou: loss.lambda_iou,
            lambda_proto: loss.lambda_proto,
            tau_fg: DEFAULT_TAU_FG,
            seed: 0,
            l3_height: synth.l3_height,
            l3_width: synth.l3_width,
            channels: None,
            separation: synth.separation,
            noise: synth.noise,
            episodes: 1,
            steps: 200,
            lr: DEFAULT_LR,
            reps: 15,
            baseline: false,
            episode_dir: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn width(&self, fallback: usize) -> usize {
        self.c.unwrap_or(fallback)
    }

    pub fn model(&self, c: usize) -> HpanConfig {
        HpanConfig {
            n_p: self.n_p,
            c,
            lambda_self: self.lambda_self,
            lambda_co: self.lambda_co,
            tau_fg: self.tau_fg,
            loss: LossWeights {
                lambda_ce: self.lambda_ce,
                lambda_iou: self.lambda_iou,
                lambda_proto: self.lambda_proto,
            },
            shared_bpam: false,
            baseline: self.baseline,
        }
    }

    pub fn synth(&self, c: usize) -> SynthConfig {
        let ch = self.channels.unwrap_or(c);
        SynthConfig {
            k: self.k,
            t: self.t,
            channels_l3: ch,
            channels_l4: ch,
            l3_height: self.l3_height,
            l3_width: self.l3_width,
            separation: self.separation,
            noise: self.noise,
            ..SynthConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"n_p": 3, "c": 32}"#).unwrap();
        assert_eq!(cfg.n_p, 3);
        assert_eq!(cfg.c, Some(32));
        assert_eq!(cfg.k, 5);
        assert_eq!((cfg.lambda_self, cfg.lambda_co), (0.8, 0.2));
        assert_eq!((cfg.lambda_ce, cfg.lambda_iou, cfg.lambda_proto), (5.0, 1.0, 1.0));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"np": 3}"#).is_err());
    }

    #[test]
    fn width_fallback() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.width(FULL_CHANNELS), 256);
        assert_eq!(cfg.synth(DEMO_CHANNELS).channels_l3, 64);
        assert!(cfg.model(cfg.width(FULL_CHANNELS)).validate().is_ok());
    }
}
