//! Reference evaluations written with plain nested loops over `Vec<Vec<f64>>`.
//!
//! None of these call into the modules they check; each restates its formula
//! directly so that agreement is evidence rather than tautology.

type Rows = Vec<Vec<f64>>;

fn linear(x: &Rows, w: &Rows) -> Rows {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|d| row.iter().enumerate().map(|(c, v)| v * w[c][d]).sum())
                .collect()
        })
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    dot / (aa.sqrt() * bb.sqrt() + 1e-8)
}

/// Row `p` of the result is `(x_p W + b) * m_p`.
pub fn dense_projection(x: &Rows, m: &[f64], w: &Rows, b: &[f64]) -> Rows {
    let mut out = Vec::new();
    for (p, row) in x.iter().enumerate() {
        let mut o = vec![0.0; b.len()];
        for d in 0..b.len() {
            let mut acc = b[d];
            for c in 0..row.len() {
                acc += row[c] * w[c][d];
            }
            o[d] = acc * m[p];
        }
        out.push(o);
    }
    out
}

/// Graph attention with source-side values.
pub fn dense_graph_attention(tgt: &Rows, src: &Rows, lambda: f64, wk: &Rows, wq: &Rows, wv: &Rows) -> Rows {
    let key = linear(src, wk);
    let query = linear(tgt, wq);
    let value = linear(src, wv);
    let mut out = query.clone();
    for i in 0..key.len() {
        let sims: Vec<f64> = query.iter().map(|q| cos(&key[i], q)).collect();
        let den: f64 = sims.iter().sum::<f64>() + 1e-8;
        for j in 0..query.len() {
            let phi = sims[j] / den;
            for d in 0..out[j].len() {
                out[j][d] += lambda * phi * value[i][d];
            }
        }
    }
    out
}

/// Skip-connected scaled dot-product attention.
pub fn dense_attention(q: &Rows, k: &Rows, v: &Rows, wq: &Rows, wk: &Rows, wv: &Rows) -> Rows {
    let qq = linear(q, wq);
    let kk = linear(k, wk);
    let vv = linear(v, wv);
    let scale = 1.0 / (wq[0].len() as f64).sqrt();
    let mut out = qq.clone();
    for i in 0..qq.len() {
        let s: Vec<f64> = kk
            .iter()
            .map(|kr| qq[i].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..kk.len() {
            for d in 0..out[i].len() {
                out[i][d] += e[j] / z * vv[j][d];
            }
        }
    }
    out
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn ce_oracle(pred: &Rows, gt: &Rows) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (pf, gf) in pred.iter().zip(gt) {
        for (&p, &y) in pf.iter().zip(gf) {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            n += 1;
        }
    }
    total / n as f64
}

/// One minus the mean soft IoU; an empty union counts as IoU 1.
pub fn iou_oracle(pred: &Rows, gt: &Rows) -> f64 {
    let mut sum = 0.0;
    for (pf, gf) in pred.iter().zip(gt) {
        let inter: f64 = pf.iter().zip(gf).map(|(p, y)| p * y).sum();
        let union: f64 = pf.iter().zip(gf).map(|(p, y)| p + y - p * y).sum();
        sum += if union == 0.0 { 1.0 } else { inter / union };
    }
    1.0 - sum / pred.len() as f64
}

/// `lambda / (N (N - 1)) * sum_{i != j} cos(p_i, p_j)`.
pub fn proto_oracle(protos: &Rows, lambda: f64) -> f64 {
    let n = protos.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += cos(&protos[i], &protos[j]);
            }
        }
    }
    lambda * s / (n * (n - 1)) as f64
}

/// Decoder reference: per-pixel logit over `channels` (`2C` rows of `h*w`
/// values), sigmoid, then separable half-pixel bilinear upsampling.
pub fn decode_oracle(
    channels: &Rows,
    proj: &[f64],
    bias: f64,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut prob = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let mut z = bias;
            for c in 0..proj.len() {
                z += proj[c] * channels[c][y * w + x];
            }
            prob[y][x] = 1.0 / (1.0 + (-z).exp());
        }
    }
    let taps = |dst: usize, n_in: usize, n_out: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
            .max(0.0)
            .min((n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = if lo + 1 < n_in { lo + 1 } else { lo };
        (lo, hi, s - lo as f64)
    };
    // Along x first, then along y.
    let mut rows = vec![vec![0.0; out_w]; h];
    for y in 0..h {
        for x in 0..out_w {
            let (a, b, f) = taps(x, w, out_w);
            rows[y][x] = prob[y][a] * (1.0 - f) + prob[y][b] * f;
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let (a, b, f) = taps(y, h, out_h);
        for x in 0..out_w {
            out[y * out_w + x] = rows[a][x] * (1.0 - f) + rows[b][x] * f;
        }
    }
    out
}

/// Nearest-centroid assignment (ties to the lowest index) and the summed
/// squared distance.
pub fn kmeans_oracle(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let mut total = 0.0;
    let mut assignment = Vec::with_capacity(points.len());
    for p in points {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, cent) in centroids.iter().enumerate() {
            let d: f64 = p.iter().zip(cent).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        total += best_d;
        assignment.push(best);
    }
    (total, assignment)
}

/// Best k=2 objective over every pair of data points used as centroids,
/// each pair followed by Lloyd iterations to convergence.
pub fn best_point_pair_objective(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut cents = vec![points[i].clone(), points[j].clone()];
            let (mut obj, mut assign) = kmeans_oracle(points, &cents);
            best = best.min(obj);
            for _ in 0..100 {
                for (c, cent) in cents.iter_mut().enumerate() {
                    let members: Vec<&Vec<f64>> = points
                        .iter()
                        .zip(&assign)
                        .filter(|(_, &a)| a == c)
                        .map(|(p, _)| p)
                        .collect();
                    if members.is_empty() {
                        continue;
                    }
                    for d in 0..cent.len() {
                        cent[d] = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                    }
                }
                let (o, a) = kmeans_oracle(points, &cents);
                obj = o;
                best = best.min(obj);
                if a == assign {
                    break;
                }
                assign = a;
            }
        }
    }
    best
}

/// Foreground pixels with at least one 4-neighbour that is background or
/// off the grid.
pub fn boundary_pixels(mask: &[Vec<bool>]) -> Vec<(usize, usize)> {
    let h = mask.len();
    let w = if h == 0 { 0 } else { mask[0].len() };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y][x] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask[y - 1][x]
                || !mask[y + 1][x]
                || !mask[y][x - 1]
                || !mask[y][x + 1];
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Boundary F-measure by pairwise Chebyshev distances between boundary sets.
pub fn boundary_f_oracle(pred: &[Vec<bool>], gt: &[Vec<bool>], tol: usize) -> f64 {
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let near = |a: &(usize, usize), b: &(usize, usize)| a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) <= tol;
    let hit_p = bp.iter().filter(|p| bg.iter().any(|g| near(p, g))).count();
    let hit_g = bg.iter().filter(|g| bp.iter().any(|p| near(g, p))).count();
    let precision = hit_p as f64 / bp.len() as f64;
    let recall = hit_g as f64 / bg.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmeans_oracle_ties_go_low() {
        let (obj, a) = kmeans_oracle(&[vec![0.0, 0.0]], &[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert_eq!(a, vec![0]);
        assert_eq!(obj, 1.0);
        let (obj, a) = kmeans_oracle(&[vec![2.0, 3.0]], &[vec![2.0, 3.0]]);
        assert_eq!((obj, a), (0.0, vec![0]));
    }

    #[test]
    fn attention_single_key_is_sum() {
        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = dense_attention(
            &vec![vec![1.0, 2.0]],
            &vec![vec![5.0, 5.0]],
            &vec![vec![-1.0, 3.0]],
            &id,
            &id,
            &id,
        );
        assert_eq!(out, vec![vec![0.0, 5.0]]);
    }

    #[test]
    fn closed_form_losses() {
        let half = vec![vec![0.5; 4]];
        let gt = vec![vec![1.0, 0.0, 1.0, 0.0]];
        assert!((ce_oracle(&half, &gt) - 2f64.ln()).abs() < 1e-12);
        assert!((iou_oracle(&vec![vec![1.0; 4]], &gt) - 0.5).abs() < 1e-12);
        assert!((proto_oracle(&vec![vec![1.0, 2.0], vec![-1.0, -2.0]], 1.0) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn boundary_of_a_square() {
        let m: Vec<Vec<bool>> = (0..5)
            .map(|y| (0..5).map(|x| (1..4).contains(&y) && (1..4).contains(&x)).collect())
            .collect();
        assert_eq!(boundary_pixels(&m).len(), 8);
        assert_eq!(boundary_f_oracle(&m, &m, 0), 1.0);
    }
}
