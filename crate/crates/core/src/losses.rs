//! Training objectives expressed as graph computations.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{PulseError, Result};
use crate::mae::MaskPlan;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_align: f64,
    pub lambda_rec_pre: f64,
    pub lambda_hid: f64,
    pub lambda_emb: f64,
    pub lambda_rec_kd: f64,
    pub lambda_perp: f64,
    pub margin_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_align: 1.0,
            lambda_rec_pre: 1.0,
            lambda_hid: 1.0,
            lambda_emb: 1.0,
            lambda_rec_kd: 0.1,
            lambda_perp: 0.0,
            margin_alpha: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_align,
            self.lambda_rec_pre,
            self.lambda_hid,
            self.lambda_emb,
            self.lambda_rec_kd,
            self.lambda_perp,
            self.margin_alpha,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(PulseError::Config("loss weights and margin must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn pretrain_total(&self, align: f64, rec: f64) -> f64 {
        self.lambda_align * align + self.lambda_rec_pre * rec
    }

    pub fn kd_total(&self, hid: f64, emb: f64, rec: f64, perp: f64) -> f64 {
        self.lambda_hid * hid + self.lambda_emb * emb + self.lambda_rec_kd * rec + self.lambda_perp * perp
    }
}

/// `Σ wᵢ·termᵢ`, skipping zero weights.
pub fn weighted_sum<T: Real>(g: &mut Graph<T>, terms: &[(Option<Var>, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(t, w) in terms {
        let Some(t) = t else { continue };
        if w == 0.0 {
            continue;
        }
        let s = g.scale(t, w);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero())))
}

#[derive(Clone, Copy, Debug)]
pub struct AlignOutput {
    pub loss: Var,
    /// Set when the batch has a single instance, so no negatives exist.
    pub no_negatives: bool,
}

/// Row-pair cosine matrix `[B, B]` with entry `(b, b') = cos(a[b], c[b'])`.
fn cosine_matrix<T: Real>(g: &mut Graph<T>, a: Var, c: Var) -> Var {
    let b = g.shape(a)[0];
    let ia: Vec<usize> = (0..b * b).map(|k| k / b).collect();
    let ic: Vec<usize> = (0..b * b).map(|k| k % b).collect();
    let ra = g.gather(a, 0, &ia);
    let rc = g.gather(c, 0, &ic);
    g.cosine(ra, rc)
}

/// Hinge alignment with exhaustive in-batch negatives over all unordered
/// modality pairs. Each input is `[B, d]` pooled shared embeddings.
pub fn alignment_hinge<T: Real>(g: &mut Graph<T>, shared: &[Var], alpha: f64) -> Result<AlignOutput> {
    if shared.len() < 2 {
        return Err(PulseError::InvalidArgument("alignment needs at least 2 modalities".into()));
    }
    let b = g.shape(shared[0])[0];
    if shared.iter().any(|&s| g.shape(s)[0] != b) {
        return Err(PulseError::Shape("alignment batch sizes differ".into()));
    }
    if b < 2 {
        log::warn!("alignment loss skipped: batch of 1 has no in-batch negatives");
        return Ok(AlignOutput {
            loss: g.constant(Tensor::scalar(T::zero())),
            no_negatives: true,
        });
    }
    let mut off = Vec::with_capacity(b * (b - 1));
    let mut off_t = Vec::with_capacity(b * (b - 1));
    let mut diag = Vec::with_capacity(b * (b - 1));
    for i in 0..b {
        for j in 0..b {
            if i != j {
                off.push(i * b + j);
                off_t.push(j * b + i);
                diag.push(i * b + i);
            }
        }
    }
    let mut terms = Vec::new();
    let mut n_pairs = 0usize;
    for m in 0..shared.len() {
        for n in m + 1..shared.len() {
            n_pairs += 1;
            let c = cosine_matrix(g, shared[m], shared[n]);
            let pos = g.gather(c, 0, &diag);
            for idx in [&off, &off_t] {
                let neg = g.gather(c, 0, idx);
                let d = g.sub(neg, pos);
                let d = g.add_scalar(d, alpha);
                let h = g.relu(d);
                terms.push(g.sum_all(h));
            }
        }
    }
    let total = if terms.len() == 1 { terms[0] } else {
        let cat: Vec<Var> = terms.iter().map(|&t| g.reshape(t, &[1])).collect();
        let c = g.concat(&cat, 0);
        g.sum_all(c)
    };
    let loss = g.scale(total, 1.0 / ((b - 1) * b * n_pairs) as f64);
    Ok(AlignOutput {
        loss,
        no_negatives: false,
    })
}

/// Mean squared error over the masked patches, normalised per element.
/// `x` and `x_hat` are `[B, L]`; an empty Ω gives 0.
pub fn reconstruction_mse<T: Real>(g: &mut Graph<T>, x: Var, x_hat: Var, plan: &MaskPlan, patch_len: usize) -> Var {
    if plan.masked.is_empty() {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let s = g.shape(x).to_vec();
    assert_eq!(s, g.shape(x_hat), "reconstruction shapes");
    let n = s[1] / patch_len;
    let xp = g.reshape(x, &[s[0], n, patch_len]);
    let hp = g.reshape(x_hat, &[s[0], n, patch_len]);
    let xm = g.gather(xp, 1, &plan.masked);
    let hm = g.gather(hp, 1, &plan.masked);
    let d = g.sub(hm, xm);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Mean over layers of the token-wise `1 − cos` between fused student tokens
/// and teacher tokens, each `[B, S, d]`.
pub fn hidden_kd<T: Real>(g: &mut Graph<T>, fused: &[Var], teacher: &[Var]) -> Result<Var> {
    if fused.is_empty() || fused.len() != teacher.len() {
        return Err(PulseError::InvalidArgument(format!(
            "{} student layers matched against {} teacher layers",
            fused.len(),
            teacher.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(fused.len());
    for (&s, &t) in fused.iter().zip(teacher) {
        if g.shape(s) != g.shape(t) {
            return Err(PulseError::Shape(format!(
                "student tokens {:?} vs teacher tokens {:?}",
                g.shape(s),
                g.shape(t)
            )));
        }
        let c = g.cosine(s, t);
        let m = g.mean_all(c);
        per_layer.push(g.reshape(m, &[1]));
    }
    let cat = if per_layer.len() == 1 { per_layer[0] } else { g.concat(&per_layer, 0) };
    let mean_cos = g.mean_all(cat);
    let neg = g.scale(mean_cos, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// `1 − cos(mean_t fused, mean_t teacher)`, averaged over the batch.
pub fn final_embedding_kd<T: Real>(g: &mut Graph<T>, fused: Var, teacher: Var) -> Result<Var> {
    let ps = g.mean(fused, 1);
    let pt = g.mean(teacher, 1);
    for (name, v) in [("student", ps), ("teacher", pt)] {
        let d = *g.shape(v).last().unwrap();
        if g.value(v).data().chunks(d).any(|r| r.iter().all(|x| *x == T::zero())) {
            return Err(PulseError::InvalidArgument(format!(
                "{name} pooled embedding is the zero vector; cosine undefined"
            )));
        }
    }
    if g.shape(ps) != g.shape(pt) {
        return Err(PulseError::Shape("pooled student/teacher shapes differ".into()));
    }
    let c = g.cosine(ps, pt);
    let m = g.mean_all(c);
    let neg = g.scale(m, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean squared entry of the `1/(B−1)` cross-covariance between pooled
/// shared `[B, d]` and private `[B, e]` embeddings; 0 for a single sample.
pub fn decorrelation<T: Real>(g: &mut Graph<T>, shared: Var, private: Var) -> Var {
    let b = g.shape(shared)[0];
    if b < 2 {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let center = |g: &mut Graph<T>, v: Var| {
        let m = g.mean(v, 0);
        g.sub(v, m)
    };
    let sc = center(g, shared);
    let pc = center(g, private);
    let st = g.transpose(sc);
    let c = g.matmul(st, pc);
    let c = g.scale(c, 1.0 / (b - 1) as f64);
    let sq = g.mul(c, c);
    g.mean_all(sq)
}

/// Mean over non-anchor modalities and batch of `1 − cos(s_m, s_anchor)`.
pub fn anchored_contrastive<T: Real>(g: &mut Graph<T>, shared: &[Var], anchor: usize) -> Result<Var> {
    if anchor >= shared.len() {
        return Err(PulseError::InvalidArgument("anchor modality missing".into()));
    }
    if shared.len() < 2 {
        return Err(PulseError::InvalidArgument("anchored loss needs a non-anchor modality".into()));
    }
    let mut parts = Vec::new();
    for (m, &s) in shared.iter().enumerate() {
        if m != anchor {
            parts.push(g.cosine(s, shared[anchor]));
        }
    }
    let cat = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0) };
    let m = g.mean_all(cat);
    let neg = g.scale(m, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::make_mask_plan;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn align(vals: &[&[f64]], b: usize, d: usize, alpha: f64) -> (f64, bool) {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.constant(t(&[b, d], v))).collect();
        let out = alignment_hinge(&mut g, &vars, alpha).unwrap();
        (g.value(out.loss).item(), out.no_negatives)
    }

    #[test]
    fn hinge_examples() {
        let a = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(align(&[&a, &a], 2, 2, 0.2).0, 0.0);
        let swapped = [0.0, 1.0, 1.0, 0.0];
        let (v, _) = align(&[&a, &swapped], 2, 2, 0.2);
        assert!((v - 2.4).abs() < 1e-12, "{v}");
        let same = [0.3, 0.4, 0.3, 0.4];
        assert_eq!(align(&[&same, &same], 2, 2, 0.0).0, 0.0);
        let (v, flag) = align(&[&[1.0, 0.0], &[0.0, 1.0]], 1, 2, 0.2);
        assert!(v == 0.0 && flag);
    }

    #[test]
    fn mse_examples() {
        let plan = make_mask_plan(4, 0.5, 0);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 8], |i| i as f64));
        let y = g.add_scalar(x, 1.0);
        let l = reconstruction_mse(&mut g, x, y, &plan, 2);
        assert_eq!(g.value(l).item(), 1.0);
        let l = reconstruction_mse(&mut g, x, x, &plan, 2);
        assert_eq!(g.value(l).item(), 0.0);
        let l = reconstruction_mse(&mut g, x, y, &make_mask_plan(4, 0.0, 0), 2);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert!((w.pretrain_total(0.3, 0.7) - 1.0).abs() < 1e-12);
        let w2 = LossWeights { lambda_align: 2.0, lambda_rec_pre: 0.5, ..w };
        assert!((w2.pretrain_total(0.3, 0.7) - 0.95).abs() < 1e-12);
        let w3 = LossWeights { lambda_align: 0.0, ..w };
        assert!((w3.pretrain_total(0.3, 0.7) - 0.7).abs() < 1e-12);
        assert!((w.kd_total(0.2, 0.3, 1.0, 0.5) - 0.6).abs() < 1e-12);
        assert_eq!(w.kd_total(0.0, 0.0, 0.0, 0.0), 0.0);
        let w4 = LossWeights { lambda_perp: 1.0, ..w };
        assert!((w4.kd_total(0.2, 0.3, 1.0, 0.5) - 1.1).abs() < 1e-12);
        assert!(LossWeights { lambda_hid: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn kd_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(vec![2, 3, 4], |i| (i as f64 * 0.37).sin() + 0.1));
        let na = g.scale(a, -1.0);
        let l = hidden_kd(&mut g, &[a, a], &[a, a]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let l = hidden_kd(&mut g, &[a], &[na]).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 1e-12);
        assert!(hidden_kd(&mut g, &[a, a], &[a]).is_err());

        let l = final_embedding_kd(&mut g, a, a).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let e1 = g.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let e2 = g.constant(t(&[1, 1, 2], &[0.0, 3.0]));
        let l = final_embedding_kd(&mut g, e1, e2).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
        let z = g.constant(t(&[1, 1, 2], &[0.0, 0.0]));
        assert!(final_embedding_kd(&mut g, z, e2).is_err());
    }

    #[test]
    fn decorrelation_examples() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_fn(vec![4, 2], |i| (i * i) as f64));
        let p = g.constant(Tensor::full(vec![4, 3], 2.0));
        let l = decorrelation(&mut g, s, p);
        assert_eq!(g.value(l).item(), 0.0);
        let l = decorrelation(&mut g, s, s);
        assert!(g.value(l).item() > 0.0);
        let one = g.constant(Tensor::full(vec![1, 2], 1.0));
        let l = decorrelation(&mut g, one, one);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn anchored_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let l = anchored_contrastive(&mut g, &[a, a, a], 0).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let o = g.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let l = anchored_contrastive(&mut g, &[a, o], 0).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
        assert!(anchored_contrastive(&mut g, &[a, o], 2).is_err());
    }
}
