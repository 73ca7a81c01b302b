//! Ranking metrics, thresholded accuracy, fold aggregation and collapse
//! diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};

fn check_len(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(PulseError::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PulseError::NonFinite("scores".into()));
    }
    Ok(())
}

/// Ascending order of `scores` with midranks (1-based) for ties.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-sum AUROC; ties count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores, labels)?;
    let np = labels.iter().filter(|&&l| l).count();
    let nn = labels.len() - np;
    if np == 0 || nn == 0 {
        return Err(PulseError::InvalidArgument("AUROC needs both classes".into()));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (np * (np + 1)) as f64 / 2.0;
    Ok(u / (np as f64 * nn as f64))
}

/// Step-wise average precision over descending distinct score thresholds.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores, labels)?;
    let np = labels.iter().filter(|&&l| l).count();
    if np == 0 {
        return Err(PulseError::InvalidArgument("AUPRC needs a positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            tp += labels[idx[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / np as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Fraction of samples where `score ≥ thr` agrees with the label.
pub fn accuracy_at_threshold(scores: &[f64], labels: &[bool], thr: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= thr) == l)
        .count();
    hits as f64 / scores.len() as f64
}

/// Accuracy-maximising threshold among midpoints of sorted distinct scores
/// and ±∞; ties go to the lowest candidate.
pub fn best_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores, labels)?;
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut cands = Vec::with_capacity(uniq.len() + 1);
    cands.push(f64::NEG_INFINITY);
    cands.extend(uniq.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    cands.push(f64::INFINITY);

    // sweep: predictions flip from positive to negative as thr passes each score
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut correct = labels.iter().filter(|&&l| l).count();
    let (mut best, mut best_thr) = (correct, cands[0]);
    let mut p = 0;
    for &thr in &cands[1..] {
        while p < idx.len() && scores[idx[p]] < thr {
            if labels[idx[p]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            p += 1;
        }
        if correct > best {
            best = correct;
            best_thr = thr;
        }
    }
    Ok(best_thr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub accuracy: f64,
    pub threshold: f64,
}

/// Ranking metrics plus accuracy at `thr`.
pub fn binary_metrics(scores: &[f64], labels: &[bool], thr: f64) -> Result<BinaryMetrics> {
    Ok(BinaryMetrics {
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        accuracy: accuracy_at_threshold(scores, labels, thr),
        threshold: thr,
    })
}

/// One-vs-rest macro AUROC/AUPRC and argmax accuracy. `scores` is row-major
/// `[n, k]`, `classes` holds indices in `0..k`.
pub fn macro_multiclass(scores: &[f64], classes: &[usize], k: usize) -> Result<BinaryMetrics> {
    if scores.len() != classes.len() * k {
        return Err(PulseError::Shape(format!(
            "score matrix of {} values is not [{}, {k}]",
            scores.len(),
            classes.len()
        )));
    }
    for c in 0..k {
        if !classes.contains(&c) {
            return Err(PulseError::InvalidArgument(format!("class {c} missing")));
        }
    }
    let n = classes.len();
    let (mut roc, mut pr) = (0.0, 0.0);
    for c in 0..k {
        let col: Vec<f64> = (0..n).map(|i| scores[i * k + c]).collect();
        let lab: Vec<bool> = classes.iter().map(|&y| y == c).collect();
        roc += auroc(&col, &lab)?;
        pr += auprc(&col, &lab)?;
    }
    let hits = (0..n)
        .filter(|&i| {
            let row = &scores[i * k..(i + 1) * k];
            let arg = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            arg == classes[i]
        })
        .count();
    Ok(BinaryMetrics {
        auroc: roc / k as f64,
        auprc: pr / k as f64,
        accuracy: hits as f64 / n as f64,
        threshold: f64::NAN,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    #[serde(rename = "3-class")]
    ThreeClass,
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::Binary => 2,
            Task::ThreeClass => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: u32,
    pub subject: String,
    #[serde(flatten)]
    pub metrics: BinaryMetrics,
}

/// Sample mean and standard deviation (n − 1); sd is 0 for one value.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub task: Task,
    pub folds: Vec<FoldMetrics>,
}

impl MetricsReport {
    pub fn column(&self, f: impl Fn(&BinaryMetrics) -> f64) -> Vec<f64> {
        self.folds.iter().map(|x| f(&x.metrics)).collect()
    }

    pub fn auroc(&self) -> (f64, f64) {
        mean_sd(&self.column(|m| m.auroc))
    }

    pub fn auprc(&self) -> (f64, f64) {
        mean_sd(&self.column(|m| m.auprc))
    }

    pub fn accuracy(&self) -> (f64, f64) {
        mean_sd(&self.column(|m| m.accuracy))
    }

    pub fn validate(&self) -> Result<()> {
        for f in &self.folds {
            let m = &f.metrics;
            for v in [m.auroc, m.auprc, m.accuracy] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(PulseError::Invariant(format!("metric {v} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// Per-fold rows followed by a `mean ± sd` summary block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} ({:?}, {} folds)", self.name, self.task, self.folds.len());
        for f in &self.folds {
            let m = &f.metrics;
            let _ = writeln!(
                out,
                "  fold {:>2} {:<6} AUROC {:.4}  AUPRC {:.4}  ACC {:.4}",
                f.fold, f.subject, m.auroc, m.auprc, m.accuracy
            );
        }
        for (name, (m, s)) in [("AUROC", self.auroc()), ("AUPRC", self.auprc()), ("ACC", self.accuracy())] {
            let _ = writeln!(out, "  {name:<5} {m:.4} ± {s:.4}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,fold,subject,auroc,auprc,accuracy,threshold\n");
        for f in &self.folds {
            let m = &f.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{:.10},{:.10},{:.10},{}",
                self.name, f.fold, f.subject, m.auroc, m.auprc, m.accuracy, m.threshold
            );
        }
        for (name, (m, s)) in [("auroc", self.auroc()), ("auprc", self.auprc()), ("accuracy", self.accuracy())] {
            let _ = writeln!(out, "{},summary,{name},{m:.4} ± {s:.4},,,", self.name);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseEntry {
    pub modality: String,
    pub mean_pairwise_cosine: f64,
    pub mean_feature_variance: f64,
    /// Sample pairs skipped because one row was the zero vector.
    pub excluded_pairs: usize,
}

/// Collapse statistics of pooled embeddings `[n, d]` (row-major).
/// Variance is the population variance across samples.
pub fn collapse_diagnostics(modality: &str, emb: &[f32], n: usize, d: usize) -> Result<CollapseEntry> {
    if n < 2 || emb.len() != n * d {
        return Err(PulseError::InvalidArgument(format!(
            "collapse diagnostics need [n >= 2, d] rows, got {} values for n={n}, d={d}",
            emb.len()
        )));
    }
    let rows: Vec<&[f32]> = emb.chunks(d).collect();
    let mut var = 0.0;
    for j in 0..d {
        let m = rows.iter().map(|r| r[j] as f64).sum::<f64>() / n as f64;
        var += rows.iter().map(|r| (r[j] as f64 - m).powi(2)).sum::<f64>() / n as f64;
    }
    // mean over pairs of u_i·u_j = (|Σu|² − Σ|u|²) / (m(m−1)) for unit rows
    let mut sum = vec![0.0f64; d];
    let mut m = 0usize;
    for r in &rows {
        let norm = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        m += 1;
        for (s, &v) in sum.iter_mut().zip(r.iter()) {
            *s += v as f64 / norm;
        }
    }
    let excluded = n * (n - 1) / 2 - m * m.saturating_sub(1) / 2;
    let cos = if m < 2 {
        f64::NAN
    } else {
        let s2: f64 = sum.iter().map(|v| v * v).sum();
        ((s2 - m as f64) / (m * (m - 1)) as f64).clamp(-1.0, 1.0)
    };
    Ok(CollapseEntry {
        modality: modality.to_string(),
        mean_pairwise_cosine: cos,
        mean_feature_variance: var / d as f64,
        excluded_pairs: excluded,
    })
}
