use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hpan_core::episode::{
    load_episode, load_tensor, resample_mask, synth_episode, write_tensor, Episode, Mask, ResampleMode, Tensor,
    TensorKind,
};
use hpan_core::head::{train_demo as train, write_trajectory_csv, LossReport};
use hpan_core::metrics::{evaluate_episode, region_similarity};
use hpan_core::model::{run_episode as forward, EpisodeOutput, HpanParams};
use hpan_core::verify::{self, bench_csv, default_grid, run_bench, BenchConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{RunConfig, DEMO_CHANNELS, FULL_CHANNELS};

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.out_dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating output dir {}", dir.display()))?;
    Ok(dir)
}

fn frame_file(t: usize) -> String {
    format!("frame_{t:03}.hptn")
}

fn write_masks(dir: &Path, masks: &[Mask]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (t, m) in masks.iter().enumerate() {
        write_tensor(dir.join(frame_file(t)), m)?;
    }
    Ok(())
}

fn synth_episodes(cfg: &RunConfig, c: usize) -> Result<Vec<Episode>> {
    ensure!(cfg.episodes > 0, "config: episodes must be >= 1");
    let synth = cfg.synth(c);
    (0..cfg.episodes as u64)
        .map(|i| synth_episode(&synth, cfg.seed.wrapping_add(i)).context("synth"))
        .collect()
}

pub fn selftest(cfg: &RunConfig) -> Result<bool> {
    let report = verify::selftest(cfg.seed).context("selftest")?;
    for c in &report.checks {
        println!("{} {:<13} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(report.all_passed())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<bool> {
    let report = verify::gradcheck(cfg.seed).context("gradcheck")?;
    for (name, e) in &report.groups {
        println!(
            "{} {name:<26} {:.3e}",
            if e.passed { "ok  " } else { "FAIL" },
            e.max_rel_err
        );
    }
    println!("excluded: {}", verify::gradcheck::EXCLUDED.join(", "));
    report.into_result().context("gradcheck")?;
    Ok(true)
}

#[derive(Serialize)]
struct EpisodeSummary {
    episode: usize,
    seed: u64,
    frames: usize,
    duplicated_prototypes: bool,
    j_mean: Option<f64>,
    f_mean: Option<f64>,
    pseudo_j_mean: Option<f64>,
    loss: Option<LossReport>,
}

fn pseudo_j(ep: &Episode, pseudo: &[Mask]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    for (q, pm) in ep.query.iter().zip(pseudo) {
        let Some(gt) = &q.mask else { return Ok(None) };
        let gt = resample_mask(gt, pm.height, pm.width, ResampleMode::Nearest)?;
        sum += region_similarity(pm, &gt)?;
    }
    Ok(Some(sum / pseudo.len() as f64))
}

fn write_episode(
    dir: &Path,
    index: usize,
    seed: u64,
    ep: &Episode,
    out: &EpisodeOutput<f64>,
) -> Result<EpisodeSummary> {
    write_masks(&dir.join("pred"), &out.probs)?;
    write_masks(&dir.join("pseudo"), &out.pseudo_masks)?;
    write_tensor(dir.join("prototypes.hptn"), &out.prototypes.cast::<f32>())?;
    let gts: Option<Vec<Mask>> = ep.query.iter().map(|q| q.mask.clone()).collect();
    let (mut j_mean, mut f_mean) = (None, None);
    if let Some(gts) = gts {
        write_masks(&dir.join("gt"), &gts)?;
        let eval = evaluate_episode(&out.probs, &gts).context("metrics")?;
        fs::write(dir.join("metrics.csv"), eval.to_csv()).with_context(|| format!("writing {}", dir.display()))?;
        j_mean = Some(eval.j_mean);
        f_mean = Some(eval.f_mean);
    }
    Ok(EpisodeSummary {
        episode: index,
        seed,
        frames: out.probs.len(),
        duplicated_prototypes: out.duplicated,
        j_mean,
        f_mean,
        pseudo_j_mean: pseudo_j(ep, &out.pseudo_masks)?,
        loss: out.report.clone(),
    })
}

pub fn run_episode(cfg: &RunConfig, synth: bool) -> Result<bool> {
    let c = cfg.width(FULL_CHANNELS);
    let episodes = match (&cfg.episode_dir, synth) {
        (Some(_), true) => bail!("pass either an episode directory or --synth, not both"),
        (Some(dir), false) => vec![load_episode(dir).with_context(|| format!("episode {}", dir.display()))?],
        (None, true) => synth_episodes(cfg, c)?,
        (None, false) => bail!("no episode: pass an episode directory or --synth"),
    };
    let model = cfg.model(c);
    let params = HpanParams::<f64>::init(episodes[0].l3_shape().0, &model, cfg.seed);
    let outputs: Vec<EpisodeOutput<f64>> = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| forward(ep, &params, &model, cfg.seed.wrapping_add(i as u64)))
        .collect::<hpan_core::error::Result<_>>()
        .context("pipeline")?;

    let root = out_dir(cfg)?;
    let mut summaries = Vec::with_capacity(episodes.len());
    for (i, (ep, out)) in episodes.iter().zip(&outputs).enumerate() {
        let s = write_episode(&root.join(format!("episode_{i:03}")), i, ep.seed, ep, out)?;
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "episode {i}: J {} F {} pseudo-mask J {}",
            fmt(s.j_mean),
            fmt(s.f_mean),
            fmt(s.pseudo_j_mean)
        );
        summaries.push(s);
    }
    let path = root.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summaries)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(true)
}

pub fn bench(cfg: &RunConfig) -> Result<bool> {
    let bc = BenchConfig {
        c: cfg.width(FULL_CHANNELS),
        height: cfg.l3_height,
        width: cfg.l3_width,
        reps: cfg.reps,
        seed: cfg.seed,
        factored_only: false,
    };
    let rows = run_bench(&default_grid(), &bc).context("bench")?;
    let csv = bench_csv(&rows);
    print!("{csv}");
    let path = out_dir(cfg)?.join("bench.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(true)
}

fn mask_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "hptn"));
    files.sort();
    Ok(files)
}

fn load_mask(path: &Path) -> Result<Mask> {
    match load_tensor(path, TensorKind::Mask)? {
        Tensor::Mask(m) => Ok(m),
        _ => bail!("{} is not a mask", path.display()),
    }
}

pub fn metrics(cfg: &RunConfig, pred: &Path, gt: &Path) -> Result<bool> {
    let pf = mask_files(pred)?;
    let gf = mask_files(gt)?;
    let names = |v: &[PathBuf]| {
        v.iter()
            .map(|p| p.file_name().map(|n| n.to_owned()))
            .collect::<Vec<_>>()
    };
    ensure!(
        names(&pf) == names(&gf),
        "metrics: {} and {} hold different mask files",
        pred.display(),
        gt.display()
    );
    ensure!(!pf.is_empty(), "metrics: no .hptn masks in {}", pred.display());
    let preds = pf.iter().map(|p| load_mask(p)).collect::<Result<Vec<_>>>()?;
    let gts = gf.iter().map(|p| load_mask(p)).collect::<Result<Vec<_>>>()?;
    let eval = evaluate_episode(&preds, &gts).context("metrics")?;
    print!("{}", eval.to_csv());
    println!("mean J {:.4} F {:.4}", eval.j_mean, eval.f_mean);
    let path = out_dir(cfg)?.join("metrics.csv");
    fs::write(&path, eval.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    Ok(true)
}

pub fn train_demo(cfg: &RunConfig) -> Result<bool> {
    let c = cfg.width(DEMO_CHANNELS);
    let episodes = synth_episodes(cfg, c)?;
    let result = train(&episodes, &cfg.model(c), cfg.steps, cfg.lr, cfg.seed).context("train-demo")?;
    let path = out_dir(cfg)?.join("trajectory.csv");
    write_trajectory_csv(&path, &result.trajectory)?;
    if let (Some(first), Some(last)) = (result.trajectory.first(), result.trajectory.last()) {
        println!(
            "total loss {:.4} -> {:.4} over {} steps (ratio {:.3})",
            first.total,
            last.total,
            result.trajectory.len(),
            last.total / first.total
        );
    }
    Ok(true)
}
