use crate::autodiff::{Graph, Var};
use crate::dataset::FoldArchive;
use crate::error::{PulseError, Result};
use crate::losses::{alignment_hinge, reconstruction_mse, weighted_sum, LossWeights};
use crate::mae::{make_mask_plan, split_shared_private, MaskPlan, PhysioMae, TokenSplit};
use crate::nn::Adam;

use super::{batch, check_fold, epoch_batches, stream_seed, History, Part, StageConfig, StepLosses, Stream};

type Grads = Vec<Option<Vec<f32>>>;

/// Elementwise mean of same-shape nodes.
pub(crate) fn mean_of(g: &mut Graph<f32>, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    if vars.len() == 1 {
        acc
    } else {
        g.scale(acc, 1.0 / vars.len() as f64)
    }
}

pub(crate) fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).data()[0] as f64
}

pub(crate) fn check_compatible(models: &[&PhysioMae]) -> Result<()> {
    let c0 = &models[0].cfg;
    for m in &models[1..] {
        let c = &m.cfg;
        if c.signal_len != c0.signal_len
            || c.patch_len != c0.patch_len
            || c.enc_dim != c0.enc_dim
            || c.mask_ratio != c0.mask_ratio
            || c.private_ratio != c0.private_ratio
        {
            return Err(PulseError::Config(format!(
                "{} and {} models differ in window, patch, width or ratio settings",
                models[0].modality, m.modality
            )));
        }
    }
    Ok(())
}

/// One joint step. Shared tokens of every non-private-only model are
/// averaged and handed to each such decoder; alignment runs over their
/// pooled shared embeddings.
fn step(
    fold: &FoldArchive,
    models: &[PhysioMae],
    idx: &[usize],
    plan: &MaskPlan,
    split: &TokenSplit,
    w: &LossWeights,
) -> Result<(StepLosses, Vec<Grads>)> {
    let mut g = Graph::<f32>::new();
    let binds: Vec<_> = models.iter().map(|m| m.params.bind(&mut g, true)).collect();
    let mut bundles = Vec::new();
    let mut xs = Vec::new();
    for (m, p) in models.iter().zip(&binds) {
        let x = g.constant(batch(fold, Part::Train, m.modality, idx));
        bundles.push(m.encode(&mut g, p, x, plan, split)?);
        xs.push(x);
    }
    let shared: Vec<Option<Var>> = bundles.iter().map(|b| b.shared(&mut g)).collect();
    let present: Vec<Var> = shared.iter().flatten().copied().collect();
    let fused = (!present.is_empty()).then(|| mean_of(&mut g, &present));

    let mut recs = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let private = bundles[i].private(&mut g);
        let sh = shared[i].and(fused);
        let x_hat = m.decode(&mut g, &binds[i], sh, private, plan, split)?;
        let r = reconstruction_mse(&mut g, xs[i], x_hat, plan, m.cfg.patch_len);
        recs.push(g.reshape(r, &[1]));
    }
    let rec = if recs.len() == 1 { recs[0] } else { g.concat(&recs, 0) };
    let rec = g.mean_all(rec);

    let align = if present.len() >= 2 && w.lambda_align > 0.0 {
        let pooled: Vec<Var> = present.iter().map(|&s| g.mean(s, 1)).collect();
        Some(alignment_hinge(&mut g, &pooled, w.margin_alpha)?.loss)
    } else {
        None
    };
    let total = weighted_sum(&mut g, &[(align, w.lambda_align), (Some(rec), w.lambda_rec_pre)]);
    let losses = StepLosses {
        total: scalar(&g, total),
        align: align.map(|a| scalar(&g, a)),
        rec: Some(scalar(&g, rec)),
        ..Default::default()
    };
    if !losses.total.is_finite() {
        return Ok((losses, Vec::new()));
    }
    if g.requires_grad(total) {
        g.backward(total);
    }
    Ok((losses, binds.iter().map(|b| b.grads(&g)).collect()))
}

/// Trains `models` together on the fold's training windows with a common
/// mask plan and token split per step. A single private-only model (EDA)
/// gets reconstruction only. On a non-finite loss or update the models are
/// left at their last finite state and `Diverged` is returned.
pub fn pretrain(fold: &FoldArchive, models: &mut [PhysioMae], cfg: &StageConfig, seed: u64) -> Result<History> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(PulseError::InvalidArgument("pretrain needs at least one model".into()));
    }
    check_compatible(&models.iter().collect::<Vec<_>>())?;
    let mcfg = models[0].cfg.clone();
    check_fold(fold, mcfg.signal_len)?;
    let train: Vec<usize> = (0..fold.n_train()).collect();
    let per_epoch = epoch_batches(&train, cfg.batch_size, seed, 0, cfg.steps_per_epoch).len();
    let total_steps = cfg.epochs * per_epoch;
    let mut opts: Vec<Adam> = models.iter().map(|m| Adam::new(&m.params)).collect();
    let mut hist = History::default();
    let mut t = 0usize;
    for epoch in 0..cfg.epochs {
        let first = hist.steps.len();
        for idx in epoch_batches(&train, cfg.batch_size, seed, epoch, cfg.steps_per_epoch) {
            let plan = make_mask_plan(mcfg.n_patches(), mcfg.mask_ratio, stream_seed(seed, Stream::Mask, t as u64));
            let split = split_shared_private(
                plan.visible.len(),
                mcfg.private_ratio,
                stream_seed(seed, Stream::Split, t as u64),
            );
            let diverged = || PulseError::Diverged(format!("pretrain epoch {epoch} step {t}"));
            let (losses, grads) = match step(fold, models, &idx, &plan, &split, &cfg.weights) {
                Err(PulseError::NonFinite(_)) => return Err(diverged()),
                r => r?,
            };
            if !losses.total.is_finite() {
                return Err(diverged());
            }
            let lr = cfg.scheduler.lr(cfg.learning_rate, t, total_steps);
            let backup: Vec<_> = models.iter().map(|m| m.params.clone()).collect();
            for ((m, opt), gr) in models.iter_mut().zip(&mut opts).zip(&grads) {
                opt.step(&mut m.params, gr, lr, |_| true);
            }
            if models.iter().any(|m| !m.params.all_finite()) {
                for (m, b) in models.iter_mut().zip(backup) {
                    m.params = b;
                }
                return Err(diverged());
            }
            hist.steps.push(losses);
            t += 1;
        }
        let rec = hist.close_epoch(epoch, first);
        log::info!(
            "pretrain epoch {epoch}: total {:.5} rec {:.5} align {:?}",
            rec.loss_total,
            rec.loss_rec.unwrap_or(f64::NAN),
            rec.loss_align
        );
    }
    Ok(hist)
}
