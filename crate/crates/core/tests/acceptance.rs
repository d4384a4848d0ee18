//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hpan_core::bpam::AttentionBlockParams;
use hpan_core::episode::{resample_mask, synth_episode, Episode, ResampleMode, SynthConfig};
use hpan_core::head::{mean_prototype_cosine, train_demo, DEFAULT_LR};
use hpan_core::matrix::Matrix;
use hpan_core::metrics::region_similarity;
use hpan_core::model::{HpanConfig, PreparedEpisode};
use hpan_core::verify::selftest::{
    f_oracle_mismatches, kmeans_battery, metric_examples, oracle_agreement, pseudo_mask_properties,
};
use hpan_core::verify::{cost_model, full_attention_oracle, gradcheck, run_bench, BenchConfig, BenchPoint, BenchRow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn(&mut Shared) -> Outcome,
}

/// Training runs reused between criteria.
#[derive(Default)]
struct Shared {
    cosine_after: Vec<((u64, u64), f64)>,
}

const TRAIN_STEPS: usize = 200;
const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];

fn formula_fidelity(_: &mut Shared) -> Outcome {
    let a = oracle_agreement(200, 7).expect("oracle battery");
    (
        a.worst() <= 1e-6,
        format!(
            "{} instances, worst rel err graph {:.1e} attention {:.1e} ce {:.1e} iou {:.1e} proto {:.1e} (tol 1e-6)",
            a.instances, a.graph_attention, a.attention, a.ce, a.iou, a.proto
        ),
    )
}

fn gradient_suite(_: &mut Shared) -> Outcome {
    let r = gradcheck(0).expect("gradcheck");
    let (worst_name, worst) = r
        .groups
        .iter()
        .map(|(n, e)| (n.clone(), e.max_rel_err))
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failed = r.failed();
    (
        failed.is_empty(),
        format!(
            "{} groups, worst {worst:.2e} at {worst_name} (tol 1e-3){}",
            r.groups.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join(" "))
            }
        ),
    )
}

fn pseudo_mask_props(_: &mut Shared) -> Outcome {
    let s = pseudo_mask_properties(1000, 3).expect("pseudo-mask battery");
    (
        s.out_of_range == 0 && s.missing_extremes == 0 && s.max_rescale_diff <= 1e-6,
        format!(
            "{} episodes, {} frames ({} degenerate), out of range {}, missing 0/1 {}, rescale diff {:.1e} (tol 1e-6)",
            s.episodes, s.frames, s.degenerate_frames, s.out_of_range, s.missing_extremes, s.max_rescale_diff
        ),
    )
}

fn kmeans_optimality(_: &mut Shared) -> Outcome {
    let s = kmeans_battery(100).expect("k-means battery");
    (
        s.worst_gap <= 1e-9 && s.trace_increases == 0,
        format!(
            "{} point sets, worst objective - oracle {:.1e} (tol 1e-9), trace increases {}",
            s.point_sets, s.worst_gap, s.trace_increases
        ),
    )
}

fn strictly_increasing(rows: &[&BenchRow]) -> bool {
    rows.windows(2)
        .all(|w| w[1].factored.median_ns > w[0].factored.median_ns)
}

fn cost_scaling(_: &mut Shared) -> Outcome {
    let (k, t, h, w, n_p, c) = (5, 5, 16, 28, 5, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t_q = Matrix::<f32>::from_fn(t * h * w, c, |_, _| rng.random_range(-1.0..1.0));
    let t_s = Matrix::<f32>::from_fn(k * h * w, c, |_, _| rng.random_range(-1.0..1.0));
    let block = AttentionBlockParams::<f32>::init(c, &mut rng);
    let (_, full) = full_attention_oracle(&t_q, &t_s, &block).expect("full attention at defaults");

    let kt_grid: Vec<(String, BenchPoint)> = [5, 10, 20]
        .into_iter()
        .map(|kt| ("kt".to_string(), BenchPoint { k: kt, t: kt, n_p }))
        .collect();
    let np_grid: Vec<(String, BenchPoint)> = [1, 5, 10, 15, 20]
        .into_iter()
        .map(|p| ("np".to_string(), BenchPoint { k, t, n_p: p }))
        .collect();
    let cfg = BenchConfig {
        c,
        height: h,
        width: w,
        reps: 31,
        seed: 1,
        factored_only: true,
    };
    let mut rows = run_bench(&kt_grid, &cfg).expect("bench");
    rows.extend(run_bench(&np_grid, &cfg).expect("bench"));
    let fac = rows
        .iter()
        .find(|r| r.config == "np" && r.point.n_p == n_p)
        .expect("default point");
    let predicted = cost_model(k, t, h, w, n_p, c);
    let counters_exact = fac.mac_factored == predicted.factored.total
        && fac.interaction_factored == predicted.factored.interaction
        && full.mac_count == predicted.full.total
        && full.interaction_macs == predicted.full.interaction;
    let ratio_inter = full.interaction_macs as f64 / fac.interaction_factored as f64;
    let ratio_total = full.mac_count as f64 / fac.mac_factored as f64;

    let kt: Vec<&BenchRow> = rows.iter().filter(|r| r.config == "kt").collect();
    let np: Vec<&BenchRow> = rows.iter().filter(|r| r.config == "np").collect();
    let ms = |v: &[&BenchRow]| {
        v.iter()
            .map(|r| format!("{:.1}", r.factored.median_ns as f64 / 1e6))
            .collect::<Vec<_>>()
            .join("<")
    };
    (
        counters_exact && ratio_inter >= 10.0 && strictly_increasing(&kt) && strictly_increasing(&np),
        format!(
            "interaction MACs full/factored {ratio_inter:.1}x (>= 10x), all MACs {ratio_total:.2}x, counters match model: {counters_exact}; median ms over (K,T) {}; over N_p {}",
            ms(&kt),
            ms(&np)
        ),
    )
}

fn desk_synth(seed: u64) -> Episode {
    let cfg = SynthConfig {
        channels_l3: 64,
        channels_l4: 64,
        separation: 10.0,
        ..SynthConfig::default()
    };
    synth_episode(&cfg, seed).expect("synth episode")
}

fn desk_model(lambda_proto: f64) -> HpanConfig {
    let mut cfg = HpanConfig {
        c: 64,
        ..HpanConfig::default()
    };
    cfg.loss.lambda_proto = lambda_proto;
    cfg
}

/// Trains on the fixed episode for `seed`; returns the loss ratio and the
/// mean prototype cosine after training.
fn train(seed: u64, lambda_proto: f64, shared: &mut Shared) -> (f64, f64) {
    let eps = vec![desk_synth(seed)];
    let cfg = desk_model(lambda_proto);
    let r = train_demo(&eps, &cfg, TRAIN_STEPS, DEFAULT_LR, seed).expect("training");
    let ratio = r.trajectory.last().unwrap().total / r.trajectory[0].total;
    let cos = mean_prototype_cosine(&eps, &r.params, &cfg, seed).expect("cosine");
    shared.cosine_after.push(((seed, lambda_proto.to_bits()), cos));
    (ratio, cos)
}

fn synthetic_recovery(shared: &mut Shared) -> Outcome {
    let ep = synth_episode(&SynthConfig::default(), 0).expect("synth episode");
    let prep = PreparedEpisode::<f64>::new(&ep).expect("prepare");
    let mut j = 0.0;
    for (pm, q) in prep.pseudo_masks.iter().zip(&ep.query) {
        let gt = resample_mask(q.mask.as_ref().unwrap(), pm.height, pm.width, ResampleMode::Nearest).unwrap();
        j += region_similarity(pm, &gt).unwrap();
    }
    j /= ep.t() as f64;
    let (ratio, _) = train(0, 1.0, shared);
    (
        j >= 0.5 && ratio <= 0.5,
        format!("pseudo-mask J {j:.4} (>= 0.5), total loss final/initial {ratio:.3} over {TRAIN_STEPS} steps (<= 0.5)"),
    )
}

fn prototype_loss_direction(shared: &mut Shared) -> Outcome {
    let mut per_seed = Vec::new();
    for seed in TRAIN_SEEDS {
        let get = |lp: f64, shared: &mut Shared| {
            let key = (seed, lp.to_bits());
            match shared.cosine_after.iter().find(|(k, _)| *k == key) {
                Some((_, c)) => *c,
                None => train(seed, lp, shared).1,
            }
        };
        let with = get(1.0, shared);
        let without = get(0.0, shared);
        per_seed.push((seed, with, without));
    }
    let n = per_seed.len() as f64;
    let mean_with = per_seed.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_without = per_seed.iter().map(|p| p.2).sum::<f64>() / n;
    let detail = per_seed
        .iter()
        .map(|(s, a, b)| format!("seed {s}: {a:.4} vs {b:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    (
        mean_with < mean_without,
        format!("mean pairwise cosine with proto loss {mean_with:.4} vs without {mean_without:.4} ({detail})"),
    )
}

fn metrics_correctness(_: &mut Shared) -> Outcome {
    let ex = metric_examples().expect("examples");
    let bad: Vec<&str> = ex.iter().filter(|(_, g, e)| g != e).map(|(n, _, _)| *n).collect();
    let mism = f_oracle_mismatches(50, 11).expect("F oracle");
    (
        bad.is_empty() && mism == 0,
        format!(
            "{} worked examples ({} wrong), tolerance-0 F vs pairwise oracle: {mism}/50 mismatches",
            ex.len(),
            bad.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "formula fidelity",
            budget: Some(Duration::from_secs(10)),
            run: formula_fidelity,
        },
        Criterion {
            name: "gradient suite",
            budget: Some(Duration::from_secs(60)),
            run: gradient_suite,
        },
        Criterion {
            name: "pseudo-mask properties",
            budget: None,
            run: pseudo_mask_props,
        },
        Criterion {
            name: "k-means optimality",
            budget: None,
            run: kmeans_optimality,
        },
        Criterion {
            name: "cost scaling",
            budget: Some(Duration::from_secs(300)),
            run: cost_scaling,
        },
        Criterion {
            name: "synthetic recovery",
            budget: Some(Duration::from_secs(120)),
            run: synthetic_recovery,
        },
        Criterion {
            name: "prototype loss direction",
            budget: None,
            run: prototype_loss_direction,
        },
        Criterion {
            name: "metrics correctness",
            budget: None,
            run: metrics_correctness,
        },
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let (ok, detail) = (c.run)(&mut shared);
        let took = start.elapsed();
        let in_budget = c.budget.is_none_or(|b| took < b);
        let budget = c.budget.map_or(String::new(), |b| format!(" < {}s", b.as_secs()));
        let pass = ok && in_budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {}: {detail}; {:.1}s{budget}",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            took.as_secs_f64()
        );
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
