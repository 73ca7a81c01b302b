// Scalar reference implementations, written as plain loops over f64 so they
// share no code with the library.
#![allow(dead_code)]

use pulse_core::autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(r: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn to_tensor(rows: &[Vec<f64>], shape: &[usize]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), rows.iter().flatten().copied().collect()).unwrap()
}

pub fn value(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

// ---- losses --------------------------------------------------------------

/// In-batch hinge over every unordered modality pair, both directions.
pub fn hinge(mods: &[Mat], alpha: f64) -> f64 {
    let b = mods[0].len();
    let mut total = 0.0;
    let mut pairs = 0;
    for m in 0..mods.len() {
        for n in m + 1..mods.len() {
            for i in 0..b {
                pairs += 1;
                let pos = cos(&mods[m][i], &mods[n][i]);
                let (mut fwd, mut back) = (0.0, 0.0);
                for j in 0..b {
                    if j == i {
                        continue;
                    }
                    fwd += (cos(&mods[m][i], &mods[n][j]) - pos + alpha).max(0.0);
                    back += (cos(&mods[m][j], &mods[n][i]) - pos + alpha).max(0.0);
                }
                total += (fwd + back) / (b - 1) as f64;
            }
        }
    }
    total / pairs as f64
}

/// Squared error over masked patches, averaged per element.
pub fn masked_mse(x: &Mat, x_hat: &Mat, masked: &[usize], patch: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for (row, row_hat) in x.iter().zip(x_hat) {
        for &p in masked {
            for k in p * patch..(p + 1) * patch {
                sum += (row_hat[k] - row[k]).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub fn layer_norm(row: &[f64], gamma: Option<&[f64]>, beta: Option<&[f64]>) -> Vec<f64> {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let sd = (var + 1e-5).sqrt();
    (0..row.len())
        .map(|j| {
            let y = (row[j] - mean) / sd;
            y * gamma.map_or(1.0, |g| g[j]) + beta.map_or(0.0, |b| b[j])
        })
        .collect()
}

/// `x W + b` with `W` stored row-major as `[in, out]`.
pub fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, v)| v * w[i * out + o]).sum::<f64>())
        .collect()
}

/// Tokens `[batch][token][dim]`.
pub type Tokens = Vec<Mat>;

/// Mean over layers of `1 − mean token cosine`.
pub fn hidden_kd(fused: &[Tokens], teacher: &[Tokens]) -> f64 {
    let mut acc = 0.0;
    for (f, t) in fused.iter().zip(teacher) {
        let mut s = 0.0;
        let mut n = 0;
        for (fb, tb) in f.iter().zip(t) {
            for (ft, tt) in fb.iter().zip(tb) {
                s += cos(ft, tt);
                n += 1;
            }
        }
        acc += 1.0 - s / n as f64;
    }
    acc / fused.len() as f64
}

fn pool(tokens: &Mat) -> Vec<f64> {
    let d = tokens[0].len();
    (0..d).map(|j| tokens.iter().map(|t| t[j]).sum::<f64>() / tokens.len() as f64).collect()
}

/// `1 − cos` of time-pooled tokens, averaged over the batch.
pub fn final_kd(fused: &Tokens, teacher: &Tokens) -> f64 {
    let b = fused.len();
    fused.iter().zip(teacher).map(|(f, t)| 1.0 - cos(&pool(f), &pool(t))).sum::<f64>() / b as f64
}

/// Mean squared entry of the unbiased cross-covariance.
pub fn decorrelation(shared: &Mat, private: &Mat) -> f64 {
    let b = shared.len();
    if b < 2 {
        return 0.0;
    }
    let (d, e) = (shared[0].len(), private[0].len());
    let ms: Vec<f64> = (0..d).map(|j| shared.iter().map(|r| r[j]).sum::<f64>() / b as f64).collect();
    let mp: Vec<f64> = (0..e).map(|k| private.iter().map(|r| r[k]).sum::<f64>() / b as f64).collect();
    let mut acc = 0.0;
    for j in 0..d {
        for k in 0..e {
            let mut c = 0.0;
            for i in 0..b {
                c += (shared[i][j] - ms[j]) * (private[i][k] - mp[k]);
            }
            c /= (b - 1) as f64;
            acc += c * c;
        }
    }
    acc / (d * e) as f64
}

pub fn anchored(mods: &[Mat], anchor: usize) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for (m, rows) in mods.iter().enumerate() {
        if m == anchor {
            continue;
        }
        for (r, a) in rows.iter().zip(&mods[anchor]) {
            s += 1.0 - cos(r, a);
            n += 1;
        }
    }
    s / n as f64
}

// ---- metrics ---------------------------------------------------------------

pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Average precision, recounting precision and recall from scratch at every
/// distinct score used as a threshold.
pub fn ap_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thr: Vec<f64> = scores.to_vec();
    thr.sort_by(|a, b| b.total_cmp(a));
    thr.dedup();
    let np = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev = 0.0;
    for t in thr {
        let (mut tp, mut pp) = (0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                pp += 1.0;
                if l {
                    tp += 1.0;
                }
            }
        }
        let r = tp / np;
        ap += (r - prev) * tp / pp;
        prev = r;
    }
    ap
}

pub fn accuracy_count(scores: &[f64], labels: &[bool], thr: f64) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| (s >= thr) == l).count();
    hits as f64 / scores.len() as f64
}

/// Exhaustive sweep over midpoints and ±∞; the lowest best candidate wins.
pub fn best_threshold_sweep(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut u: Vec<f64> = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut cands = vec![f64::NEG_INFINITY];
    for w in u.windows(2) {
        cands.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    cands.push(f64::INFINITY);
    let mut best = (f64::NAN, -1.0);
    for c in cands {
        let a = accuracy_count(scores, labels, c);
        if a > best.1 {
            best = (c, a);
        }
    }
    best
}

/// `(macro AUROC, macro AUPRC, argmax accuracy)` from per-class oracles.
pub fn macro_oracle(scores: &[f64], classes: &[usize], k: usize) -> (f64, f64, f64) {
    let n = classes.len();
    let (mut ar, mut ap) = (0.0, 0.0);
    for c in 0..k {
        let s: Vec<f64> = (0..n).map(|i| scores[i * k + c]).collect();
        let l: Vec<bool> = classes.iter().map(|&y| y == c).collect();
        ar += auroc_pairs(&s, &l);
        ap += ap_sweep(&s, &l);
    }
    let mut hits = 0;
    for i in 0..n {
        let row = &scores[i * k..(i + 1) * k];
        let mut arg = 0;
        for c in 1..k {
            if row[c] > row[arg] {
                arg = c;
            }
        }
        hits += (arg == classes[i]) as usize;
    }
    (ar / k as f64, ap / k as f64, hits as f64 / n as f64)
}

/// `(mean pairwise cosine over all unordered pairs, mean per-feature
/// population variance)`.
pub fn collapse_pairs(rows: &Mat) -> (f64, f64) {
    let n = rows.len();
    let d = rows[0].len();
    let (mut s, mut pairs) = (0.0, 0);
    for i in 0..n {
        for j in i + 1..n {
            s += cos(&rows[i], &rows[j]);
            pairs += 1;
        }
    }
    let mut var = 0.0;
    for k in 0..d {
        let m = rows.iter().map(|r| r[k]).sum::<f64>() / n as f64;
        var += rows.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / n as f64;
    }
    (s / pairs as f64, var / d as f64)
}

/// Random binary instance with both classes present; scores drawn from a
/// coarse grid half of the time so ties are common.
pub fn binary_instance(r: &mut impl Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    let n = r.gen_range(2..=max_n);
    let coarse = r.gen_bool(0.5);
    let scores: Vec<f64> = (0..n)
        .map(|_| if coarse { r.gen_range(0..6) as f64 / 5.0 } else { r.gen::<f64>() })
        .collect();
    let mut labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
    let i = r.gen_range(0..n);
    let j = (i + 1 + r.gen_range(0..n - 1)) % n;
    labels[i] = true;
    labels[j] = false;
    (scores, labels)
}
