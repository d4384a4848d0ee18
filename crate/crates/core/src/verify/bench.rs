//! Cost-scaling benchmark of prototype co-attention against full-rank
//! attention over grids of `(K, T)` and `N_p`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpam::{factored_attention_forward, AttentionBlockParams, FactoredParams};
use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::verify::counter::measure;
use crate::verify::full_attention::{check_guard, full_attention_oracle};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub c: usize,
    pub height: usize,
    pub width: usize,
    pub reps: usize,
    pub seed: u64,
    /// Skip the full-rank timings entirely.
    pub factored_only: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            c: 256,
            height: 16,
            width: 28,
            reps: 15,
            seed: 0,
            factored_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchPoint {
    pub k: usize,
    pub t: usize,
    pub n_p: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub median_ns: u64,
    pub std_ns: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub config: String,
    pub point: BenchPoint,
    pub c: usize,
    pub hw: usize,
    pub mac_factored: u64,
    pub interaction_factored: u64,
    pub factored: Timing,
    /// `None` when the full-rank guard refused the size.
    pub mac_full: Option<u64>,
    pub interaction_full: Option<u64>,
    pub full: Option<Timing>,
}

/// `kt` sweeps `K = T` at `N_p = 5`; `np` sweeps `N_p` at `K = T = 5`.
pub fn default_grid() -> Vec<(String, BenchPoint)> {
    let mut g: Vec<(String, BenchPoint)> = [5, 10, 20, 40]
        .into_iter()
        .map(|kt| ("kt".to_string(), BenchPoint { k: kt, t: kt, n_p: 5 }))
        .collect();
    g.extend(
        [1, 5, 10, 15, 20]
            .into_iter()
            .map(|n_p| ("np".to_string(), BenchPoint { k: 5, t: 5, n_p })),
    );
    g
}

fn timing(mut samples: Vec<u64>) -> Timing {
    samples.sort_unstable();
    let n = samples.len();
    let median_ns = if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    };
    let mean = samples.iter().sum::<u64>() as f64 / n as f64;
    let var = samples.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    Timing {
        median_ns,
        std_ns: var.sqrt(),
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0f32..1.0))
}

struct Inputs {
    t_q: Matrix<f32>,
    t_s: Matrix<f32>,
    protos: Matrix<f32>,
    params: FactoredParams<f32>,
}

impl Inputs {
    fn new(p: BenchPoint, cfg: &BenchConfig, rng: &mut ChaCha8Rng) -> Self {
        let hw = cfg.height * cfg.width;
        Inputs {
            t_q: random_matrix(p.t * hw, cfg.c, rng),
            t_s: random_matrix(p.k * hw, cfg.c, rng),
            protos: random_matrix(p.n_p * p.k, cfg.c, rng),
            params: FactoredParams::init(cfg.c, rng),
        }
    }
}

pub fn bench_point(config: &str, p: BenchPoint, cfg: &BenchConfig) -> Result<BenchRow> {
    let mut rows = run_bench(&[(config.to_string(), p)], cfg)?;
    Ok(rows.remove(0))
}

/// Times `reps` runs of each attention at 32-bit precision after one
/// untimed warm-up pass. Factored runs are interleaved across the grid so
/// slow drift of the machine is shared by every point instead of biasing
/// whichever ran last.
pub fn run_bench(grid: &[(String, BenchPoint)], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.reps == 0 {
        return Err(HpanError::Config("bench needs at least one repetition".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inputs: Vec<Inputs> = grid.iter().map(|(_, p)| Inputs::new(*p, cfg, &mut rng)).collect();

    for x in &inputs {
        factored_attention_forward(&x.t_q, &x.t_s, &x.protos, &x.params)?;
    }
    let mut samples = vec![Vec::with_capacity(cfg.reps); grid.len()];
    let mut counted = vec![None; grid.len()];
    for rep in 0..cfg.reps {
        log::debug!("bench repetition {rep}");
        for (i, x) in inputs.iter().enumerate() {
            let (r, cost) = measure(|| factored_attention_forward(&x.t_q, &x.t_s, &x.protos, &x.params));
            r?;
            samples[i].push(cost.wall_ns);
            counted[i].get_or_insert(cost);
        }
    }

    let mut rows = Vec::with_capacity(grid.len());
    for (((name, p), x), (s, fc)) in grid.iter().zip(&inputs).zip(samples.into_iter().zip(counted)) {
        let fc = fc.expect("reps >= 1");
        let (mut mac_full, mut interaction_full, mut full) = (None, None, None);
        if !cfg.factored_only && check_guard(x.t_q.rows(), x.t_s.rows(), cfg.c).is_ok() {
            log::info!("full attention K={} T={} Np={}", p.k, p.t, p.n_p);
            let block = AttentionBlockParams::<f32>::init(cfg.c, &mut rng);
            let mut fs = Vec::with_capacity(cfg.reps);
            for _ in 0..cfg.reps {
                let (_, cost) = full_attention_oracle(&x.t_q, &x.t_s, &block)?;
                fs.push(cost.wall_ns);
                mac_full.get_or_insert(cost.mac_count);
                interaction_full.get_or_insert(cost.interaction_macs);
            }
            full = Some(timing(fs));
        } else if !cfg.factored_only {
            log::info!("full attention skipped by the guard at K={} T={}", p.k, p.t);
        }
        rows.push(BenchRow {
            config: name.clone(),
            point: *p,
            c: cfg.c,
            hw: cfg.height * cfg.width,
            mac_factored: fc.mac_count,
            interaction_factored: fc.interaction_macs,
            factored: timing(s),
            mac_full,
            interaction_full,
            full,
        });
    }
    Ok(rows)
}

pub const BENCH_HEADER: &str = "config,K,T,Np,C,HW,mac_factored,mac_full,ns_factored,ns_full";

/// One row per point; refused full-rank runs read `skipped`.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let opt = |v: Option<u64>| v.map_or("skipped".to_string(), |x| x.to_string());
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.config,
            r.point.k,
            r.point.t,
            r.point.n_p,
            r.c,
            r.hw,
            r.mac_factored,
            opt(r.mac_full),
            r.factored.median_ns,
            opt(r.full.as_ref().map(|t| t.median_ns)),
        ));
    }
    s
}
