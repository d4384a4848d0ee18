//! End-to-end episode pipeline: pseudo-masks, projection, clustering,
//! prototype enhancement, factored attention, head and losses, with the
//! matching backward pass.
//!
//! Raw prototypes come out of k-means and are constants for the backward
//! pass; gradients reach the projection only through the token paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpam::{
    factored_attention_backward, factored_attention_forward, holistic_attention, split_holistic_grad, BpamParams,
    FactoredCache, TokenLayout,
};
use crate::episode::{resample_mask, Episode, Mask, ResampleMode};
use crate::error::{HpanError, Result};
use crate::head::{
    ce_loss, ce_loss_grad, decode_backward, decode_forward, iou_loss, iou_loss_grad, proto_loss, proto_loss_grad,
    total_loss, DecodeCache, HeadParams, LossReport, LossWeights,
};
use crate::matrix::Matrix;
use crate::pgam::{
    cluster_query_prototypes, cluster_support_prototypes, compute_pseudo_masks, cosine_matrix,
    enhance_prototypes_backward, enhance_prototypes_forward, masks_at_level, project_tokens, project_tokens_backward,
    EnhanceCache, GraphAttentionParams, PgamParams, ProjectionParams, PrototypeSet, DEFAULT_LAMBDA_CO,
    DEFAULT_LAMBDA_SELF, DEFAULT_TAU_FG,
};
use crate::scalar::Scalar;

/// Model hyperparameters shared by inference and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HpanConfig {
    pub n_p: usize,
    pub c: usize,
    pub lambda_self: f64,
    pub lambda_co: f64,
    pub tau_fg: f64,
    pub loss: LossWeights,
    /// Self-attention reuses the co-attention blocks.
    pub shared_bpam: bool,
    /// Middle-frame prototypes, no enhancement, no self-attention.
    pub baseline: bool,
}

impl Default for HpanConfig {
    fn default() -> Self {
        HpanConfig {
            n_p: 5,
            c: 256,
            lambda_self: DEFAULT_LAMBDA_SELF,
            lambda_co: DEFAULT_LAMBDA_CO,
            tau_fg: DEFAULT_TAU_FG,
            loss: LossWeights::default(),
            shared_bpam: false,
            baseline: false,
        }
    }
}

impl HpanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 || self.c == 0 {
            return Err(HpanError::Config("n_p and c must be positive".into()));
        }
        if !(self.lambda_self >= 0.0 && self.lambda_co >= 0.0)
            || !self.lambda_self.is_finite()
            || !self.lambda_co.is_finite()
        {
            return Err(HpanError::Config(
                "lambda_self and lambda_co must be finite and >= 0".into(),
            ));
        }
        if !(self.tau_fg >= 0.0 && self.tau_fg <= 1.0) {
            return Err(HpanError::Config(format!(
                "tau_fg must lie in [0, 1], got {}",
                self.tau_fg
            )));
        }
        self.loss.validate()
    }
}

/// Every learnable parameter of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct HpanParams<T> {
    pub projection: ProjectionParams<T>,
    pub pgam: PgamParams<T>,
    pub bpam: BpamParams<T>,
    pub head: HeadParams<T>,
}

fn graph_slices<'a, T: Scalar>(prefix: &str, g: &'a GraphAttentionParams<T>, out: &mut Vec<(String, &'a [T])>) {
    out.push((format!("{prefix}.w_k"), g.w_k.as_slice()));
    out.push((format!("{prefix}.w_q"), g.w_q.as_slice()));
    out.push((format!("{prefix}.w_v"), g.w_v.as_slice()));
}

fn graph_slices_mut<'a, T: Scalar>(
    prefix: &str,
    g: &'a mut GraphAttentionParams<T>,
    out: &mut Vec<(String, &'a mut [T])>,
) {
    out.push((format!("{prefix}.w_k"), g.w_k.as_mut_slice()));
    out.push((format!("{prefix}.w_q"), g.w_q.as_mut_slice()));
    out.push((format!("{prefix}.w_v"), g.w_v.as_mut_slice()));
}

impl<T: Scalar> HpanParams<T> {
    pub fn init(c_in: usize, cfg: &HpanConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = ProjectionParams::init(c_in, cfg.c, &mut rng);
        let mut pgam = PgamParams::init(cfg.c, &mut rng);
        pgam.lambda_self = T::of(cfg.lambda_self);
        pgam.lambda_co = T::of(cfg.lambda_co);
        let bpam = if cfg.shared_bpam {
            BpamParams::init_shared(cfg.c, &mut rng)
        } else {
            BpamParams::init(cfg.c, &mut rng)
        };
        let head = HeadParams::init(2 * cfg.c, &mut rng);
        HpanParams {
            projection,
            pgam,
            bpam,
            head,
        }
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, s) in z.groups_mut() {
            s.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Named parameter groups in a fixed order.
    pub fn groups(&self) -> Vec<(String, &[T])> {
        let mut out = vec![
            ("projection.weight".to_string(), self.projection.weight.as_slice()),
            ("projection.bias".to_string(), self.projection.bias.as_slice()),
        ];
        graph_slices("pgam.support_self", &self.pgam.support_self, &mut out);
        graph_slices("pgam.query_self", &self.pgam.query_self, &mut out);
        graph_slices("pgam.co", &self.pgam.co, &mut out);
        for (name, f) in [("bpam.co", &self.bpam.co), ("bpam.self", &self.bpam.self_)] {
            for (part, b) in [("inner", &f.inner), ("outer", &f.outer)] {
                out.push((format!("{name}.{part}.w_q"), b.w_q.as_slice()));
                out.push((format!("{name}.{part}.w_k"), b.w_k.as_slice()));
                out.push((format!("{name}.{part}.w_v"), b.w_v.as_slice()));
            }
        }
        out.push(("head.proj".to_string(), self.head.proj.as_slice()));
        out.push(("head.bias".to_string(), std::slice::from_ref(&self.head.bias)));
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = vec![
            ("projection.weight".to_string(), self.projection.weight.as_mut_slice()),
            ("projection.bias".to_string(), self.projection.bias.as_mut_slice()),
        ];
        graph_slices_mut("pgam.support_self", &mut self.pgam.support_self, &mut out);
        graph_slices_mut("pgam.query_self", &mut self.pgam.query_self, &mut out);
        graph_slices_mut("pgam.co", &mut self.pgam.co, &mut out);
        for (name, f) in [("bpam.co", &mut self.bpam.co), ("bpam.self", &mut self.bpam.self_)] {
            for (part, b) in [("inner", &mut f.inner), ("outer", &mut f.outer)] {
                out.push((format!("{name}.{part}.w_q"), b.w_q.as_mut_slice()));
                out.push((format!("{name}.{part}.w_k"), b.w_k.as_mut_slice()));
                out.push((format!("{name}.{part}.w_v"), b.w_v.as_mut_slice()));
            }
        }
        out.push(("head.proj".to_string(), self.head.proj.as_mut_slice()));
        out.push(("head.bias".to_string(), std::slice::from_mut(&mut self.head.bias)));
        out
    }

    /// `self += alpha * other`, group by group.
    pub fn axpy(&mut self, alpha: T, other: &HpanParams<T>) {
        for ((_, dst), (_, src)) in self.groups_mut().into_iter().zip(other.groups()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

/// Parameter-independent inputs derived from an episode: l3 tokens, masks
/// at l3 and the l4 pseudo-masks.
#[derive(Debug, Clone)]
pub struct PreparedEpisode<T> {
    pub support_tokens: Vec<Matrix<T>>,
    pub support_masks: Vec<Vec<T>>,
    pub query_tokens: Vec<Matrix<T>>,
    /// Pseudo-masks bilinearly resampled to l3.
    pub query_masks: Vec<Vec<T>>,
    pub pseudo_masks: Vec<Mask>,
    /// Ground truth per query frame at output resolution, if every frame has one.
    pub gt: Option<Vec<Vec<T>>>,
    pub l3_dims: (usize, usize),
    pub out_dims: (usize, usize),
}

impl<T: Scalar> PreparedEpisode<T> {
    pub fn new(ep: &Episode) -> Result<Self> {
        ep.validate()?;
        let (_, h3, w3) = ep.l3_shape();
        let support_l4: Vec<_> = ep.support.iter().map(|s| s.features.l4.clone()).collect();
        let query_l4: Vec<_> = ep.query.iter().map(|q| q.features.l4.clone()).collect();
        let masks: Vec<Mask> = ep.support.iter().map(|s| s.mask.clone()).collect();
        let masks_l4 = masks_at_level(&support_l4, &masks)?;
        let pseudo_masks = compute_pseudo_masks::<T>(&query_l4, &support_l4, &masks_l4)?;
        let to_vec = |m: &Mask| m.data.iter().map(|&v| T::of(v as f64)).collect::<Vec<T>>();
        let support_masks = masks
            .iter()
            .map(|m| resample_mask(m, h3, w3, ResampleMode::Nearest).map(|r| to_vec(&r)))
            .collect::<Result<Vec<_>>>()?;
        let query_masks = pseudo_masks
            .iter()
            .map(|m| resample_mask(m, h3, w3, ResampleMode::Bilinear).map(|r| to_vec(&r)))
            .collect::<Result<Vec<_>>>()?;
        let out_dims = (masks[0].height, masks[0].width);
        let gt = ep
            .query
            .iter()
            .map(|q| q.mask.as_ref())
            .collect::<Option<Vec<_>>>()
            .map(|ms| {
                ms.iter()
                    .map(|m| {
                        if (m.height, m.width) != out_dims {
                            return Err(HpanError::shape("query and support masks differ in size"));
                        }
                        Ok(to_vec(m))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        Ok(PreparedEpisode {
            support_tokens: ep.support.iter().map(|s| s.features.l3.tokens()).collect(),
            support_masks,
            query_tokens: ep.query.iter().map(|q| q.features.l3.tokens()).collect(),
            query_masks,
            pseudo_masks,
            gt,
            l3_dims: (h3, w3),
            out_dims,
        })
    }

    pub fn k(&self) -> usize {
        self.support_tokens.len()
    }

    pub fn t(&self) -> usize {
        self.query_tokens.len()
    }
}

/// Projected and masked l3 tokens, one matrix per image or frame.
#[derive(Debug, Clone)]
pub struct ProjectedTokens<T> {
    pub support: Vec<Matrix<T>>,
    pub query: Vec<Matrix<T>>,
}

pub fn project_episode<T: Scalar>(
    prep: &PreparedEpisode<T>,
    params: &ProjectionParams<T>,
) -> Result<ProjectedTokens<T>> {
    let proj = |tokens: &[Matrix<T>], masks: &[Vec<T>]| {
        tokens
            .iter()
            .zip(masks)
            .map(|(x, m)| project_tokens(x, m, params))
            .collect::<Result<Vec<_>>>()
    };
    Ok(ProjectedTokens {
        support: proj(&prep.support_tokens, &prep.support_masks)?,
        query: proj(&prep.query_tokens, &prep.query_masks)?,
    })
}

/// Prototypes produced by clustering; constants for the backward pass.
#[derive(Debug, Clone)]
pub enum RawPrototypes<T> {
    Full {
        support: PrototypeSet<T>,
        query: PrototypeSet<T>,
    },
    /// `N_p K` prototypes clustered from the middle query frame.
    Baseline(PrototypeSet<T>),
}

const QUERY_SEED_SALT: u64 = 0xA5A5_5A5A_0F0F_F0F0;

pub fn cluster_prototypes<T: Scalar>(
    prep: &PreparedEpisode<T>,
    tokens: &ProjectedTokens<T>,
    cfg: &HpanConfig,
    seed: u64,
) -> Result<RawPrototypes<T>> {
    let tau = T::of(cfg.tau_fg);
    if cfg.baseline {
        let mid = prep.t() / 2;
        let set = cluster_query_prototypes(
            &tokens.query[mid..=mid],
            &prep.query_masks[mid..=mid],
            cfg.n_p * prep.k(),
            tau,
            seed ^ QUERY_SEED_SALT,
        )?;
        return Ok(RawPrototypes::Baseline(set));
    }
    Ok(RawPrototypes::Full {
        support: cluster_support_prototypes(&tokens.support, &prep.support_masks, cfg.n_p, seed)?,
        query: cluster_query_prototypes(&tokens.query, &prep.query_masks, cfg.n_p, tau, seed ^ QUERY_SEED_SALT)?,
    })
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    enhance: Option<EnhanceCache<T>>,
    co: FactoredCache<T>,
    self_: Option<FactoredCache<T>>,
    decode: DecodeCache<T>,
}

/// Forward result for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeForward<T> {
    /// Foreground probabilities per query frame at output resolution.
    pub probs: Vec<Vec<T>>,
    /// Prototypes the attention ran on (`P_h`, or the raw baseline set).
    pub prototypes: Matrix<T>,
    /// Present when the episode carries query ground truth.
    pub report: Option<LossReport>,
    pub cache: ForwardCache<T>,
}

fn stack_rows<T: Scalar>(parts: &[Matrix<T>]) -> Result<Matrix<T>> {
    Matrix::vstack(parts)
}

pub fn forward_with_prototypes<T: Scalar>(
    prep: &PreparedEpisode<T>,
    raw: &RawPrototypes<T>,
    params: &HpanParams<T>,
    cfg: &HpanConfig,
) -> Result<EpisodeForward<T>> {
    let tokens = project_episode(prep, &params.projection)?;
    let t_q = stack_rows(&tokens.query)?;
    let t_s = stack_rows(&tokens.support)?;
    let (prototypes, enhance) = match raw {
        RawPrototypes::Full { support, query } => {
            let (h, cache) = enhance_prototypes_forward(support, query, &params.pgam)?;
            (h.prototypes, Some(cache))
        }
        RawPrototypes::Baseline(set) => (set.prototypes.clone(), None),
    };
    let (a_co, co) = factored_attention_forward(&t_q, &t_s, &prototypes, &params.bpam.co)?;
    let (a_self, self_) = if cfg.baseline {
        (Matrix::zeros(a_co.rows(), a_co.cols()), None)
    } else {
        let (a, c) = factored_attention_forward(&t_q, &t_q, &prototypes, &params.bpam.self_)?;
        (a, Some(c))
    };
    let (h3, w3) = prep.l3_dims;
    let layout = TokenLayout {
        units: prep.t(),
        height: h3,
        width: w3,
    };
    let a_h = holistic_attention(&a_co, &a_self, layout)?;
    let (probs, decode) = decode_forward(&a_h, &params.head, prep.out_dims.0, prep.out_dims.1)?;
    let report = match &prep.gt {
        Some(gt) => {
            let ce = ce_loss(&probs, gt)?.to_f64_lossy();
            let iou = iou_loss(&probs, gt)?.to_f64_lossy();
            let proto = if prototypes.rows() >= 2 {
                proto_loss(&prototypes, T::one())?.to_f64_lossy()
            } else {
                0.0
            };
            Some(total_loss(ce, iou, proto, &cfg.loss))
        }
        None => None,
    };
    Ok(EpisodeForward {
        probs,
        prototypes,
        report,
        cache: ForwardCache {
            enhance,
            co,
            self_,
            decode,
        },
    })
}

/// Gradient of the weighted total loss for every parameter group.
pub fn backward<T: Scalar>(
    prep: &PreparedEpisode<T>,
    fwd: &EpisodeForward<T>,
    params: &HpanParams<T>,
    cfg: &HpanConfig,
) -> Result<HpanParams<T>> {
    let gt = prep
        .gt
        .as_ref()
        .ok_or_else(|| HpanError::Invariant("backward needs query ground truth".into()))?;
    let w = &cfg.loss;
    let d_ce = ce_loss_grad(&fwd.probs, gt)?;
    let d_iou = iou_loss_grad(&fwd.probs, gt)?;
    let (lce, liou) = (T::of(w.lambda_ce), T::of(w.lambda_iou));
    let d_probs: Vec<Vec<T>> = d_ce
        .iter()
        .zip(&d_iou)
        .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| lce * x + liou * y).collect())
        .collect();

    let cache = &fwd.cache;
    let mut grads = params.zeros_like();
    let head = decode_backward(&cache.decode, &params.head, &d_probs);
    grads.head = head.params;
    let (d_co, d_self) = split_holistic_grad(&head.input);

    let co = factored_attention_backward(&cache.co, &params.bpam.co, &d_co);
    grads.bpam.co = co.params;
    let mut d_tq = co.query;
    let d_ts = co.context;
    let mut d_protos = co.prototypes;
    if let Some(self_cache) = &cache.self_ {
        let sf = factored_attention_backward(self_cache, &params.bpam.self_, &d_self);
        grads.bpam.self_ = sf.params;
        d_tq.add_assign(&sf.query);
        d_tq.add_assign(&sf.context);
        d_protos.add_assign(&sf.prototypes);
    }

    if let Some(enhance) = &cache.enhance {
        if fwd.prototypes.rows() >= 2 && w.lambda_proto != 0.0 {
            d_protos.add_assign(&proto_loss_grad(&fwd.prototypes, T::of(w.lambda_proto))?);
        }
        // Raw prototype gradients stop here.
        let g = enhance_prototypes_backward(enhance, &params.pgam, &d_protos);
        grads.pgam.support_self = g.support_self;
        grads.pgam.query_self = g.query_self;
        grads.pgam.co = g.co;
    }

    let hw = prep.l3_dims.0 * prep.l3_dims.1;
    let units = prep
        .support_tokens
        .iter()
        .zip(&prep.support_masks)
        .enumerate()
        .map(|(k, (x, m))| (x, m, d_ts.slice_rows(k * hw, hw)))
        .chain(
            prep.query_tokens
                .iter()
                .zip(&prep.query_masks)
                .enumerate()
                .map(|(t, (x, m))| (x, m, d_tq.slice_rows(t * hw, hw))),
        );
    for (x, m, d) in units {
        let g = project_tokens_backward(x, m, &params.projection, &d);
        grads.projection.weight.add_assign(&g.weight);
        for (b, gb) in grads.projection.bias.iter_mut().zip(&g.bias) {
            *b += *gb;
        }
    }
    Ok(grads)
}

/// Output of [`run_episode`].
#[derive(Debug, Clone)]
pub struct EpisodeOutput<T> {
    pub probs: Vec<Mask>,
    pub pseudo_masks: Vec<Mask>,
    pub prototypes: Matrix<T>,
    pub duplicated: bool,
    pub report: Option<LossReport>,
}

/// Full forward pass on one episode.
pub fn run_episode<T: Scalar>(
    ep: &Episode,
    params: &HpanParams<T>,
    cfg: &HpanConfig,
    seed: u64,
) -> Result<EpisodeOutput<T>> {
    cfg.validate()?;
    let prep = PreparedEpisode::new(ep)?;
    let tokens = project_episode(&prep, &params.projection)?;
    let raw = cluster_prototypes(&prep, &tokens, cfg, seed)?;
    let duplicated = match &raw {
        RawPrototypes::Full { support, query } => support.duplicated || query.duplicated,
        RawPrototypes::Baseline(s) => s.duplicated,
    };
    let fwd = forward_with_prototypes(&prep, &raw, params, cfg)?;
    let (oh, ow) = prep.out_dims;
    let probs = fwd
        .probs
        .iter()
        .map(|p| Mask::new(oh, ow, p.iter().map(|v| v.to_f32_lossy().clamp(0.0, 1.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeOutput {
        probs,
        pseudo_masks: prep.pseudo_masks,
        prototypes: fwd.prototypes,
        duplicated,
        report: fwd.report,
    })
}

/// Mean cosine similarity over ordered pairs of distinct prototype rows.
pub fn mean_pairwise_cosine<T: Scalar>(p: &Matrix<T>) -> f64 {
    let n = p.rows();
    if n < 2 {
        return 0.0;
    }
    let s = cosine_matrix(p, p);
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += s[(i, j)].to_f64_lossy();
            }
        }
    }
    sum / (n * (n - 1)) as f64
}
