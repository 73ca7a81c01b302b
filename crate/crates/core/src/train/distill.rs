use crate::autodiff::{Graph, Real, Var};
use crate::dataset::FoldArchive;
use crate::error::{PulseError, Result};
use crate::losses::{decorrelation, final_embedding_kd, hidden_kd, reconstruction_mse, weighted_sum};
use crate::mae::{make_mask_plan, split_shared_private, PhysioMae, TokenSplit};
use crate::metrics::{collapse_diagnostics, CollapseEntry};
use crate::nn::{Adam, Binding};

use super::heads::KdHeads;
use super::pretrain::{check_compatible, scalar};
use super::{batch, check_fold, epoch_batches, holdout_split, stream_seed, History, Part, StageConfig, StepLosses, Stream};

type Grads = Vec<Option<Vec<f32>>>;

/// Teacher block matched to 0-based student block `l`: identity for equal
/// depths, proportional rounding otherwise.
pub fn layer_map(student_depth: usize, teacher_depth: usize, l: usize) -> usize {
    if student_depth == teacher_depth {
        return l;
    }
    let r = ((l + 1) as f64 * teacher_depth as f64 / student_depth as f64).round() as usize;
    r.clamp(1, teacher_depth) - 1
}

#[derive(Clone, Debug)]
pub struct DistillOutput {
    pub history: History,
    pub heads: KdHeads,
    /// Post-hoc diagnostics of each student's pooled shared head output on
    /// the held-out windows.
    pub collapse: Vec<CollapseEntry>,
    pub teacher_fingerprint: String,
}

struct Ctx<'a> {
    fold: &'a FoldArchive,
    teacher: &'a PhysioMae,
    matched: Vec<usize>,
    cfg: &'a StageConfig,
}

/// Graph nodes of the distillation objective; unused terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct KdTerms {
    pub total: Var,
    pub hid: Option<Var>,
    pub emb: Option<Var>,
    pub rec: Option<Var>,
    pub perp: Option<Var>,
}

/// Builds the weighted KD objective for one batch: `xs` are the students'
/// inputs, `xt` the teacher's, `matched` the student blocks used for the
/// hidden-token term. `seed` and `t` pick the token split and KD mask.
#[allow(clippy::too_many_arguments)]
pub fn kd_objective<T: Real>(
    g: &mut Graph<T>,
    teacher: (&PhysioMae, &Binding),
    students: &[PhysioMae],
    sb: &[Binding],
    heads: (&KdHeads, &Binding),
    xs: &[Var],
    xt: Var,
    matched: &[usize],
    cfg: &StageConfig,
    seed: u64,
    t: u64,
) -> Result<KdTerms> {
    let (teacher, tp) = teacher;
    let (heads, hb) = heads;
    let w = &cfg.weights;
    let n = teacher.cfg.n_patches();
    let pr = students[0].cfg.private_ratio;

    let (mut hid, mut emb, mut perp) = (None, None, None);
    if w.lambda_hid > 0.0 || w.lambda_emb > 0.0 || w.lambda_perp > 0.0 {
        let full = make_mask_plan(n, 0.0, 0);
        let split = split_shared_private(n, pr, stream_seed(seed, Stream::Split, t));
        if split.shared.is_empty() {
            return Err(PulseError::Config("private_ratio leaves no shared tokens to distil".into()));
        }
        let tb = teacher.encode(g, tp, xt, &full, &TokenSplit::all_private(n))?;
        let off = tb.has_cls as usize;
        let t_shared: Vec<usize> = split.shared.iter().map(|i| i + off).collect();
        let t_depth = tb.layers.len();
        let s_depth = students[0].cfg.enc_depth;

        let bundles = students
            .iter()
            .zip(sb)
            .zip(xs)
            .map(|((s, p), &x)| s.encode(g, p, x, &full, &split))
            .collect::<Result<Vec<_>>>()?;
        let shared_at = |g: &mut Graph<T>, layer: usize| -> Vec<Var> {
            bundles
                .iter()
                .zip(&heads.heads)
                .map(|(b, h)| {
                    let tok = g.gather(b.layers[layer], 1, &b.shared_idx);
                    h.shared_tokens(g, hb, tok)
                })
                .collect()
        };
        if w.lambda_hid > 0.0 {
            let (mut fused, mut teach) = (Vec::new(), Vec::new());
            for &l in matched {
                let parts = shared_at(g, l);
                fused.push(heads.fusion.forward(g, hb, &parts)?);
                let tl = g.gather(tb.layers[layer_map(s_depth, t_depth, l)], 1, &t_shared);
                teach.push(g.layer_norm(tl, None, None));
            }
            hid = Some(hidden_kd(g, &fused, &teach)?);
        }
        let last = s_depth - 1;
        let finals = shared_at(g, last);
        if w.lambda_emb > 0.0 {
            let fused = heads.fusion.forward(g, hb, &finals)?;
            let tl = g.gather(tb.layers[t_depth - 1], 1, &t_shared);
            let teach = g.layer_norm(tl, None, None);
            emb = Some(final_embedding_kd(g, fused, teach)?);
        }
        if w.lambda_perp > 0.0 && !split.private.is_empty() {
            let mut terms = Vec::new();
            for ((b, h), &f) in bundles.iter().zip(&heads.heads).zip(&finals) {
                let tok = g.gather(b.layers[last], 1, &b.private_idx);
                let pv = h.private_tokens(g, hb, tok);
                let ps = g.mean(f, 1);
                let pp = g.mean(pv, 1);
                let d = decorrelation(g, ps, pp);
                terms.push(g.reshape(d, &[1]));
            }
            let cat = if terms.len() == 1 { terms[0] } else { g.concat(&terms, 0) };
            perp = Some(g.mean_all(cat));
        }
    }

    // reconstruction through each student's own head outputs, no fusion
    let mut rec = None;
    if w.lambda_rec_kd > 0.0 {
        let plan = make_mask_plan(n, cfg.kd_mask_ratio, stream_seed(seed, Stream::Mask, t));
        let split = split_shared_private(plan.visible.len(), pr, stream_seed(seed ^ 1, Stream::Split, t));
        let mut terms = Vec::new();
        for ((s, p), (&x, h)) in students.iter().zip(sb).zip(xs.iter().zip(&heads.heads)) {
            let b = s.encode(g, p, x, &plan, &split)?;
            let top = *b.layers.last().unwrap();
            let sh = (!b.shared_idx.is_empty()).then(|| {
                let tok = g.gather(top, 1, &b.shared_idx);
                h.shared_tokens(g, hb, tok)
            });
            let pv = (!b.private_idx.is_empty()).then(|| {
                let tok = g.gather(top, 1, &b.private_idx);
                h.private_tokens(g, hb, tok)
            });
            let x_hat = s.decode(g, p, sh, pv, &plan, &split)?;
            let r = reconstruction_mse(g, x, x_hat, &plan, s.cfg.patch_len);
            terms.push(g.reshape(r, &[1]));
        }
        let cat = if terms.len() == 1 { terms[0] } else { g.concat(&terms, 0) };
        rec = Some(g.mean_all(cat));
    }

    let total = weighted_sum(
        g,
        &[
            (hid, w.lambda_hid),
            (emb, w.lambda_emb),
            (rec, w.lambda_rec_kd),
            (perp, w.lambda_perp),
        ],
    );
    Ok(KdTerms {
        total,
        hid,
        emb,
        rec,
        perp,
    })
}

fn step(
    ctx: &Ctx,
    students: &[PhysioMae],
    heads: &KdHeads,
    idx: &[usize],
    seed: u64,
    t: u64,
) -> Result<(StepLosses, Vec<Grads>, Grads)> {
    let mut g = Graph::<f32>::new();
    let sb: Vec<Binding> = students.iter().map(|s| s.params.bind(&mut g, true)).collect();
    let hb = heads.params.bind(&mut g, true);
    let tp = ctx.teacher.params.bind(&mut g, false);
    let xs: Vec<Var> = students
        .iter()
        .map(|s| g.constant(batch(ctx.fold, Part::Train, s.modality, idx)))
        .collect();
    let xt = g.constant(batch(ctx.fold, Part::Train, ctx.teacher.modality, idx));
    let k = kd_objective(
        &mut g,
        (ctx.teacher, &tp),
        students,
        &sb,
        (heads, &hb),
        &xs,
        xt,
        &ctx.matched,
        ctx.cfg,
        seed,
        t,
    )?;
    let total = k.total;
    let losses = StepLosses {
        total: scalar(&g, total),
        hid: k.hid.map(|v| scalar(&g, v)),
        emb: k.emb.map(|v| scalar(&g, v)),
        rec: k.rec.map(|v| scalar(&g, v)),
        perp: k.perp.map(|v| scalar(&g, v)),
        align: None,
    };
    if !losses.total.is_finite() || !g.requires_grad(total) {
        return Ok((losses, Vec::new(), Vec::new()));
    }
    g.backward(total);
    Ok((losses, sb.iter().map(|b| b.grads(&g)).collect(), hb.grads(&g)))
}

/// Pooled shared embedding `[n, D]` of every student over `idx`: the
/// transfer-head projection when `heads` is given, else the encoder output.
pub(crate) fn pooled_shared(
    fold: &FoldArchive,
    part: Part,
    students: &[PhysioMae],
    heads: Option<&KdHeads>,
    idx: &[usize],
    split: &TokenSplit,
    chunk: usize,
) -> Result<Vec<Vec<f32>>> {
    let n = students[0].cfg.n_patches();
    let full = make_mask_plan(n, 0.0, 0);
    let mut out = vec![Vec::new(); students.len()];
    for ids in idx.chunks(chunk.max(1)) {
        let mut g = Graph::<f32>::new();
        let hb = heads.map(|h| h.params.bind(&mut g, false));
        for (i, s) in students.iter().enumerate() {
            let p = s.params.bind(&mut g, false);
            let x = g.constant(batch(fold, part, s.modality, ids));
            let b = s.encode(&mut g, &p, x, &full, split)?;
            let sh = match (heads, &hb) {
                (Some(h), Some(hb)) => {
                    let tok = g.gather(*b.layers.last().unwrap(), 1, &b.shared_idx);
                    h.heads[i].shared_tokens(&mut g, hb, tok)
                }
                _ => g.gather(b.last, 1, &b.shared_idx),
            };
            let pooled = g.mean(sh, 1);
            out[i].extend_from_slice(g.value(pooled).data());
        }
    }
    Ok(out)
}

/// Mean pairwise cosine and feature variance of each student's pooled
/// shared embedding over the windows `idx` of `part`.
pub fn collapse_report(
    fold: &FoldArchive,
    part: Part,
    students: &[PhysioMae],
    heads: Option<&KdHeads>,
    idx: &[usize],
    seed: u64,
) -> Result<Vec<CollapseEntry>> {
    if students.is_empty() || idx.len() < 2 {
        return Err(PulseError::InvalidArgument("collapse diagnostics need students and at least two windows".into()));
    }
    if let Some(s) = students.iter().find(|s| s.private_only) {
        return Err(PulseError::Config(format!("{} emits no shared tokens", s.modality)));
    }
    if let Some(h) = heads {
        if h.modalities() != students.iter().map(|s| s.modality).collect::<Vec<_>>() {
            return Err(PulseError::Config("heads do not match the students".into()));
        }
    }
    let c = &students[0].cfg;
    let split = split_shared_private(c.n_patches(), c.private_ratio, stream_seed(seed, Stream::Features, 0));
    if split.shared.is_empty() {
        return Err(PulseError::Config("private_ratio leaves no shared tokens".into()));
    }
    let pooled = pooled_shared(fold, part, students, heads, idx, &split, 64)?;
    let dim = heads.map_or(c.enc_dim, |h| h.teacher_dim);
    students
        .iter()
        .zip(&pooled)
        .map(|(s, e)| collapse_diagnostics(s.modality.name(), e, idx.len(), dim))
        .collect()
}

/// Trains students, transfer heads and (unless frozen) fusion against a
/// frozen teacher on 90% of the fold's training windows.
pub fn distill(
    fold: &FoldArchive,
    teacher: &PhysioMae,
    students: &mut [PhysioMae],
    cfg: &StageConfig,
    seed: u64,
) -> Result<DistillOutput> {
    cfg.validate()?;
    if students.is_empty() {
        return Err(PulseError::InvalidArgument("distill needs at least one student".into()));
    }
    check_compatible(&students.iter().collect::<Vec<_>>())?;
    check_fold(fold, teacher.cfg.signal_len)?;
    let s0 = students[0].cfg.clone();
    if teacher.cfg.n_patches() != s0.n_patches() || teacher.cfg.signal_len != s0.signal_len {
        return Err(PulseError::Shape(format!(
            "teacher has {} tokens, students have {}",
            teacher.cfg.n_patches(),
            s0.n_patches()
        )));
    }
    if let Some(s) = students.iter().find(|s| s.private_only) {
        return Err(PulseError::Config(format!("student {} emits no shared tokens", s.modality)));
    }
    if cfg.weights.lambda_rec_kd > 0.0 && teacher.cfg.enc_dim != s0.enc_dim {
        return Err(PulseError::Config(
            "distillation reconstruction needs teacher and student widths to match".into(),
        ));
    }
    let matched = cfg.matched_layers.resolve(s0.enc_depth)?;
    let teacher_fp = teacher.params.fingerprint();
    let refs: Vec<&PhysioMae> = students.iter().collect();
    let mut heads = KdHeads::new(&refs, teacher.cfg.enc_dim, stream_seed(seed, Stream::Init, 0))?;
    heads.set_fusion_schedule(cfg.fusion_frozen, cfg.unfreeze_epoch);

    let all: Vec<usize> = (0..fold.n_train()).collect();
    let (train, val) = holdout_split(&all, cfg.val_fraction, seed);
    let ctx = Ctx {
        fold,
        teacher,
        matched,
        cfg,
    };
    let per_epoch = epoch_batches(&train, cfg.batch_size, seed, 0, cfg.steps_per_epoch).len();
    let total_steps = cfg.epochs * per_epoch;
    let mut opts: Vec<Adam> = students.iter().map(|s| Adam::new(&s.params)).collect();
    let mut head_opt = Adam::new(&heads.params);
    let mut hist = History::default();
    let mut t = 0usize;
    for epoch in 0..cfg.epochs {
        let first = hist.steps.len();
        let fusion_on = heads.fusion.trainable_at(epoch);
        for idx in epoch_batches(&train, cfg.batch_size, seed, epoch, cfg.steps_per_epoch) {
            let diverged = || PulseError::Diverged(format!("distill epoch {epoch} step {t}"));
            let (losses, sg, hg) = match step(&ctx, students, &heads, &idx, seed, t as u64) {
                Err(PulseError::NonFinite(_)) => return Err(diverged()),
                r => r?,
            };
            if !losses.total.is_finite() {
                return Err(diverged());
            }
            let lr = cfg.scheduler.lr(cfg.learning_rate, t, total_steps);
            if !sg.is_empty() {
                let backup = (students.to_vec(), heads.params.clone());
                for ((s, opt), gr) in students.iter_mut().zip(&mut opts).zip(&sg) {
                    opt.step(&mut s.params, gr, lr, |_| true);
                }
                let fusion = heads.fusion.clone();
                head_opt.step(&mut heads.params, &hg, lr, |i| fusion_on || !fusion.owns(i));
                if students.iter().any(|s| !s.params.all_finite()) || !heads.params.all_finite() {
                    students.clone_from_slice(&backup.0);
                    heads.params = backup.1;
                    return Err(diverged());
                }
            }
            hist.steps.push(losses);
            t += 1;
        }
        let r = hist.close_epoch(epoch, first);
        log::info!(
            "distill epoch {epoch}: total {:.5} hid {:?} emb {:?} rec {:?}",
            r.loss_total,
            r.loss_hid,
            r.loss_emb,
            r.loss_rec
        );
    }
    if teacher.params.fingerprint() != teacher_fp {
        return Err(PulseError::Invariant("teacher parameters changed during distillation".into()));
    }

    let probe = if val.len() >= 2 { val } else { train };
    let collapse = collapse_report(fold, Part::Train, students, Some(&heads), &probe, seed)?;
    Ok(DistillOutput {
        history: hist,
        heads,
        collapse,
        teacher_fingerprint: teacher_fp,
    })
}
