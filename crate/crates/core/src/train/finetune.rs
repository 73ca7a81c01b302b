use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Tensor, Var};
use crate::container::{ArrayData, Container, NamedArray};
use crate::dataset::{FoldArchive, Modality};
use crate::error::{PulseError, Result};
use crate::mae::{make_mask_plan, split_shared_private, PhysioMae, TokenSplit};
use crate::metrics::{accuracy_at_threshold, auprc, best_threshold, binary_metrics, macro_multiclass, BinaryMetrics, Task};
use crate::nn::{Adam, Binding, Linear, ParamSet};

use super::heads::KdHeads;
use super::pretrain::mean_of;
use super::{batch, epoch_batches, holdout_split, stream_seed, History, Part, StageConfig, StepLosses, Stream};

pub const CLASSIFIER_FORMAT: &str = "pulse-clf/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Fused (averaged) shared embedding only.
    #[default]
    Average,
    /// Fused shared embedding followed by every modality's private one.
    Concat,
}

/// Stride subsampling: every `factor`-th index starting at a seed-chosen
/// offset, `ceil(n / factor)` outputs in the original order.
pub fn subsample_uniform(idx: &[usize], factor: usize, seed: u64) -> Vec<usize> {
    let n = idx.len();
    if factor <= 1 || n == 0 {
        return idx.to_vec();
    }
    let k = n.div_ceil(factor);
    let room = n - (k - 1) * factor;
    let offset = (stream_seed(seed, Stream::Subsample, 0) % room as u64) as usize;
    (0..k).map(|j| idx[offset + j * factor]).collect()
}

/// How frozen encoders turn a window into one feature vector.
pub struct FeatureSpec<'a> {
    pub models: Vec<&'a PhysioMae>,
    pub heads: Option<&'a KdHeads>,
    pub fusion: FusionMode,
    pub split: TokenSplit,
}

impl<'a> FeatureSpec<'a> {
    pub fn new(models: Vec<&'a PhysioMae>, heads: Option<&'a KdHeads>, fusion: FusionMode, seed: u64) -> Result<Self> {
        let Some(first) = models.first() else {
            return Err(PulseError::InvalidArgument("no encoders for finetuning".into()));
        };
        let n = first.cfg.n_patches();
        if models.iter().any(|m| m.cfg.n_patches() != n) {
            return Err(PulseError::Config("encoders disagree on token count".into()));
        }
        if let Some(h) = heads {
            let mods: Vec<Modality> = models.iter().map(|m| m.modality).collect();
            if h.modalities() != mods {
                return Err(PulseError::Config(format!(
                    "heads cover {:?} but encoders are {:?}",
                    h.modalities(),
                    mods
                )));
            }
        }
        let split = split_shared_private(n, first.cfg.private_ratio, stream_seed(seed, Stream::Features, 0));
        Ok(Self {
            models,
            heads,
            fusion,
            split,
        })
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.models.iter().map(|m| m.modality).collect()
    }

    /// Rows of `[fused shared | private…]` for `idx`, computed without
    /// gradients in chunks.
    pub fn features(&self, fold: &FoldArchive, part: Part, idx: &[usize], chunk: usize) -> Result<Vec<Vec<f32>>> {
        let n = self.models[0].cfg.n_patches();
        let full = make_mask_plan(n, 0.0, 0);
        let mut rows = Vec::with_capacity(idx.len());
        for ids in idx.chunks(chunk.max(1)) {
            let mut g = Graph::<f32>::new();
            let hb = self.heads.map(|h| h.params.bind(&mut g, false));
            let mut shared_tok = Vec::new();
            let mut shared_pool = Vec::new();
            let mut private_pool = Vec::new();
            for (i, m) in self.models.iter().enumerate() {
                let p = m.params.bind(&mut g, false);
                let x = g.constant(batch(fold, part, m.modality, ids));
                let b = m.encode(&mut g, &p, x, &full, &self.split)?;
                let (sh, pv) = match (self.heads, &hb) {
                    (Some(h), Some(hb)) => {
                        let head = &h.heads[i];
                        let top = *b.layers.last().unwrap();
                        let sh = (!b.shared_idx.is_empty()).then(|| {
                            let t = g.gather(top, 1, &b.shared_idx);
                            head.shared_tokens(&mut g, hb, t)
                        });
                        let pv = (!b.private_idx.is_empty()).then(|| {
                            let t = g.gather(top, 1, &b.private_idx);
                            head.private_tokens(&mut g, hb, t)
                        });
                        (sh, pv)
                    }
                    _ => (b.shared(&mut g), b.private(&mut g)),
                };
                if let Some(s) = sh {
                    shared_tok.push(s);
                    shared_pool.push(g.mean(s, 1));
                }
                if let Some(v) = pv {
                    private_pool.push(g.mean(v, 1));
                }
            }
            let fused = match (self.heads, &hb) {
                (Some(h), Some(hb)) if shared_tok.len() == self.models.len() => {
                    let f = h.fusion.forward(&mut g, hb, &shared_tok)?;
                    Some(g.mean(f, 1))
                }
                _ => (!shared_pool.is_empty()).then(|| mean_of(&mut g, &shared_pool)),
            };
            let mut parts: Vec<Var> = fused.into_iter().collect();
            if self.fusion == FusionMode::Concat || parts.is_empty() {
                parts.extend(private_pool);
            }
            let feat = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1) };
            let d = g.shape(feat)[1];
            rows.extend(g.value(feat).data().chunks(d).map(<[f32]>::to_vec));
        }
        Ok(rows)
    }
}

/// Standardisation plus a two-layer MLP over pooled features.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub params: ParamSet,
    fc1: Linear,
    fc2: Linear,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub task: Task,
    /// Validation-selected threshold on the positive-class probability.
    pub threshold: f64,
}

impl Classifier {
    pub fn new(n_features: usize, hidden: usize, task: Task, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let out = match task {
            Task::Binary => 1,
            Task::ThreeClass => 3,
        };
        let fc1 = Linear::new(&mut ps, "clf.fc1", n_features, hidden, &mut rng);
        let fc2 = Linear::new(&mut ps, "clf.fc2", hidden, out, &mut rng);
        Self {
            params: ps,
            fc1,
            fc2,
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
            task,
            threshold: 0.0,
        }
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    fn fit_scaler(&mut self, rows: &[Vec<f32>]) {
        let d = self.n_features();
        let n = rows.len().max(1) as f64;
        for j in 0..d {
            let m = rows.iter().map(|r| r[j] as f64).sum::<f64>() / n;
            let v = rows.iter().map(|r| (r[j] as f64 - m).powi(2)).sum::<f64>() / n;
            self.mean[j] = m as f32;
            self.std[j] = v.sqrt().max(1e-6) as f32;
        }
    }

    fn input(&self, rows: &[&Vec<f32>]) -> Tensor<f32> {
        let d = self.n_features();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            data.extend(r.iter().enumerate().map(|(j, &v)| (v - self.mean[j]) / self.std[j]));
        }
        Tensor::new(vec![rows.len(), d], data).expect("feature rows")
    }

    fn forward(&self, g: &mut Graph<f32>, p: &Binding, x: Var) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.relu(h);
        self.fc2.forward(g, p, h)
    }

    /// Raw logits, row-major `[n, outputs]`.
    pub fn logits(&self, rows: &[Vec<f32>]) -> Vec<f64> {
        if rows.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let refs: Vec<&Vec<f32>> = rows.iter().collect();
        let x = g.constant(self.input(&refs));
        let z = self.forward(&mut g, &p, x);
        g.value(z).data().iter().map(|&v| v as f64).collect()
    }

    /// Binary: positive-class probability per row. Multiclass: softmax
    /// probabilities, row-major.
    pub fn scores(&self, rows: &[Vec<f32>]) -> Vec<f64> {
        let z = self.logits(rows);
        match self.task {
            Task::Binary => z.into_iter().map(sigmoid).collect(),
            Task::ThreeClass => z
                .chunks(3)
                .flat_map(|r| {
                    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(move |v| v / s)
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "task": self.task,
            "n_features": self.n_features(),
            "hidden": self.fc1.fan_out,
            "threshold": self.threshold,
        });
        let mut c = Container::new(CLASSIFIER_FORMAT, meta);
        c.push(NamedArray::f32("scaler.mean", vec![self.mean.len()], self.mean.clone()));
        c.push(NamedArray::f32("scaler.std", vec![self.std.len()], self.std.clone()));
        for (name, t) in self.params.iter() {
            c.push(NamedArray::f32(name, t.shape().to_vec(), t.data().to_vec()));
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::read(path, CLASSIFIER_FORMAT)?;
        let task: Task = serde_json::from_value(c.meta["task"].clone())?;
        let field = |k: &str| {
            c.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| PulseError::Format(format!("classifier meta lacks `{k}`")))
        };
        let (nf, hidden) = (field("n_features")?, field("hidden")?);
        let mut clf = Self::new(nf, hidden, task, 0);
        clf.threshold = c.meta["threshold"].as_f64().unwrap_or(0.0);
        clf.mean = c.take_f32("scaler.mean")?.1;
        clf.std = c.take_f32("scaler.std")?.1;
        let named = c
            .arrays
            .into_iter()
            .map(|a| match a.data {
                ArrayData::F32(v) => Ok((a.name, Tensor::new(a.shape, v)?)),
                _ => Err(PulseError::Format(format!("parameter `{}` is not f32", a.name))),
            })
            .collect::<Result<Vec<_>>>()?;
        clf.params.load(named)?;
        Ok(clf)
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub classifier: Classifier,
    pub history: History,
    pub best_epoch: Option<usize>,
    pub test_scores: Vec<f64>,
    pub test_metrics: BinaryMetrics,
}

fn targets(labels: &[i32], task: Task) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| match (task, l) {
            (Task::Binary, 2) => Ok(1),
            (Task::Binary, 1 | 3) => Ok(0),
            (Task::ThreeClass, 1..=3) => Ok(l as usize - 1),
            _ => Err(PulseError::InvalidArgument(format!("label {l} outside the task's classes"))),
        })
        .collect()
}

/// (AUPRC, accuracy at the accuracy-maximising threshold, that threshold).
fn evaluate(task: Task, scores: &[f64], y: &[usize]) -> Option<(f64, f64, f64)> {
    match task {
        Task::Binary => {
            let pos: Vec<bool> = y.iter().map(|&c| c == 1).collect();
            let ap = auprc(scores, &pos).ok()?;
            let thr = best_threshold(scores, &pos).ok()?;
            Some((ap, accuracy_at_threshold(scores, &pos, thr), thr))
        }
        Task::ThreeClass => {
            let m = macro_multiclass(scores, y, 3).ok()?;
            Some((m.auprc, m.accuracy, f64::NAN))
        }
    }
}

/// Stratified holdout: `frac` of every class goes to validation.
fn stratified_split(idx: &[usize], y: &[usize], frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    let classes = y.iter().copied().max().map_or(0, |m| m + 1);
    for c in 0..classes {
        let members: Vec<usize> = idx.iter().zip(y).filter(|(_, &k)| k == c).map(|(&i, _)| i).collect();
        if members.is_empty() {
            continue;
        }
        let (t, v) = holdout_split(&members, frac, seed.wrapping_add(c as u64));
        train.extend(t);
        val.extend(v);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains the MLP head on cached features of the frozen encoders, keeps
/// the epoch with the best validation AUPRC (ties: validation accuracy)
/// and scores the fold's test windows.
pub fn finetune(fold: &FoldArchive, spec: &FeatureSpec, cfg: &StageConfig, task: Task, seed: u64) -> Result<FinetuneOutput> {
    cfg.validate()?;
    let fingerprints: Vec<String> = spec.models.iter().map(|m| m.params.fingerprint()).collect();
    let head_fp = spec.heads.map(|h| h.params.fingerprint());
    let labels_all = targets(fold.l_train.as_slice().expect("contiguous labels"), task)?;
    let test_y = targets(fold.l_test.as_slice().expect("contiguous labels"), task)?;

    let all: Vec<usize> = (0..fold.n_train()).collect();
    let kept = subsample_uniform(&all, cfg.subsample_factor, seed);
    let kept_y: Vec<usize> = kept.iter().map(|&i| labels_all[i]).collect();
    let (train, val) = stratified_split(&kept, &kept_y, cfg.val_fraction, seed);
    let chunk = 64;
    let train_x = spec.features(fold, Part::Train, &train, chunk)?;
    let val_x = spec.features(fold, Part::Train, &val, chunk)?;
    let test_idx: Vec<usize> = (0..fold.n_test()).collect();
    let test_x = spec.features(fold, Part::Test, &test_idx, chunk)?;
    let train_y: Vec<usize> = train.iter().map(|&i| labels_all[i]).collect();
    let val_y: Vec<usize> = val.iter().map(|&i| labels_all[i]).collect();

    let d = train_x.first().map_or(0, Vec::len);
    let mut clf = Classifier::new(d, cfg.head_hidden, task, stream_seed(seed, Stream::Init, 7));
    clf.fit_scaler(&train_x);
    let mut opt = Adam::new(&clf.params);
    let rows: Vec<usize> = (0..train_x.len()).collect();
    let per_epoch = epoch_batches(&rows, cfg.batch_size, seed, 0, cfg.steps_per_epoch).len();
    let total_steps = cfg.epochs * per_epoch;
    let mut hist = History::default();
    let mut best: Option<(f64, f64, usize, ParamSet, f64)> = None;
    let mut t = 0usize;
    for epoch in 0..cfg.epochs {
        let first = hist.steps.len();
        for b in epoch_batches(&rows, cfg.batch_size, seed, epoch, cfg.steps_per_epoch) {
            let mut g = Graph::<f32>::new();
            let p = clf.params.bind(&mut g, true);
            let refs: Vec<&Vec<f32>> = b.iter().map(|&i| &train_x[i]).collect();
            let x = g.constant(clf.input(&refs));
            let z = clf.forward(&mut g, &p, x);
            let loss = match task {
                Task::Binary => {
                    let y: Vec<f64> = b.iter().map(|&i| train_y[i] as f64).collect();
                    g.bce_with_logits(z, &y)
                }
                Task::ThreeClass => {
                    let y: Vec<usize> = b.iter().map(|&i| train_y[i]).collect();
                    g.cross_entropy(z, &y)
                }
            };
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(PulseError::Diverged(format!("finetune epoch {epoch} step {t}")));
            }
            g.backward(loss);
            let lr = cfg.scheduler.lr(cfg.learning_rate, t, total_steps);
            opt.step(&mut clf.params, &p.grads(&g), lr, |_| true);
            hist.steps.push(StepLosses {
                total: value,
                ..Default::default()
            });
            t += 1;
        }
        let vs = clf.scores(&val_x);
        let ev = evaluate(task, &vs, &val_y);
        let rec = hist.close_epoch(epoch, first);
        rec.val_auprc = ev.map(|e| e.0);
        rec.val_acc = ev.map(|e| e.1);
        let (ap, acc, thr) = ev.unwrap_or((f64::NEG_INFINITY, f64::NEG_INFINITY, 0.5));
        let better = match &best {
            None => true,
            Some((bap, bacc, ..)) => ap > *bap || (ap == *bap && acc > *bacc),
        };
        if better {
            best = Some((ap, acc, epoch, clf.params.clone(), thr));
        }
    }
    let best_epoch = best.as_ref().map(|b| b.2);
    clf.threshold = 0.5;
    if let Some((.., params, thr)) = best {
        clf.params = params;
        clf.threshold = thr;
    }

    if spec.models.iter().map(|m| m.params.fingerprint()).ne(fingerprints.iter().cloned())
        || spec.heads.map(|h| h.params.fingerprint()) != head_fp
    {
        return Err(PulseError::Invariant("finetuning modified a frozen encoder".into()));
    }

    let test_scores = clf.scores(&test_x);
    let test_metrics = match task {
        Task::Binary => {
            let pos: Vec<bool> = test_y.iter().map(|&c| c == 1).collect();
            binary_metrics(&test_scores, &pos, clf.threshold)?
        }
        Task::ThreeClass => macro_multiclass(&test_scores, &test_y, 3)?,
    };
    Ok(FinetuneOutput {
        classifier: clf,
        history: hist,
        best_epoch,
        test_scores,
        test_metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, SyntheticConfig};
    use crate::mae::MaeConfig;
    use crate::signal::{build_fold, process_all, PreprocessConfig, WindowSpec};
    use crate::train::testutil::small_fold;

    #[test]
    fn subsample_examples() {
        let idx: Vec<usize> = (0..400).collect();
        assert_eq!(subsample_uniform(&idx, 1, 3), idx);
        let s = subsample_uniform(&idx, 40, 3);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        for n in 1..100 {
            let idx: Vec<usize> = (0..n).collect();
            for seed in 0..5 {
                assert_eq!(subsample_uniform(&idx, 7, seed).len(), n.div_ceil(7));
            }
        }
    }

    fn cfg(epochs: usize) -> StageConfig {
        StageConfig {
            epochs,
            batch_size: 32,
            subsample_factor: 2,
            ..StageConfig::finetune()
        }
    }

    #[test]
    fn zero_epochs_gives_empty_history() {
        let m = PhysioMae::new(MaeConfig::toy(8, 1), Modality::Temp, 1).unwrap();
        let spec = FeatureSpec::new(vec![&m], None, FusionMode::Average, 0).unwrap();
        let out = finetune(small_fold(), &spec, &cfg(0), Task::Binary, 1).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, None);
        assert_eq!(out.test_scores.len(), small_fold().n_test());
    }

    // Single held-out subjects swing widely with random features, so the
    // check is on the LOSO mean over six subjects.
    #[test]
    fn random_frozen_encoders_beat_chance() {
        let recs = generate_synthetic_dataset(&SyntheticConfig {
            n_subjects: 6,
            duration_s: 600.0,
            seed: 3,
            coupling: 0.8,
            three_class: false,
        })
        .unwrap();
        let pc = PreprocessConfig {
            window: WindowSpec {
                stride_samples: 320,
                ..WindowSpec::default()
            },
            ..PreprocessConfig::default()
        };
        let subjects = process_all(&recs, &pc).unwrap();
        let models: Vec<PhysioMae> = Modality::CHEAP
            .iter()
            .map(|&m| PhysioMae::new(MaeConfig::toy(16, 1), m, 3).unwrap())
            .collect();
        let spec = FeatureSpec::new(models.iter().collect(), None, FusionMode::Concat, 0).unwrap();
        let mut aurocs = vec![];
        for f in 0..6 {
            let fold = build_fold(&subjects, f).unwrap();
            let out = finetune(&fold, &spec, &cfg(100), Task::Binary, 2).unwrap();
            assert_eq!(out.history.epochs.len(), 100);
            let e = &out.history.epochs[out.best_epoch.unwrap()];
            assert!(out.history.epochs.iter().all(|r| r.val_auprc.unwrap() <= e.val_auprc.unwrap()));
            aurocs.push(out.test_metrics.auroc);
        }
        let mean = aurocs.iter().sum::<f64>() / 6.0;
        assert!(mean >= 0.6, "LOSO AUROC {mean} ({aurocs:?})");
    }

    #[test]
    fn eda_only_features_use_private_tokens() {
        let m = PhysioMae::new(MaeConfig::toy(8, 1), Modality::Eda, 1).unwrap();
        let spec = FeatureSpec::new(vec![&m], None, FusionMode::Average, 0).unwrap();
        let f = spec.features(small_fold(), Part::Test, &[0, 1], 8).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].len(), 8);
    }

    #[test]
    fn concat_appends_private_blocks() {
        let a = PhysioMae::new(MaeConfig::toy(8, 1), Modality::Ecg, 1).unwrap();
        let b = PhysioMae::new(MaeConfig::toy(8, 1), Modality::Bvp, 2).unwrap();
        let avg = FeatureSpec::new(vec![&a, &b], None, FusionMode::Average, 0).unwrap();
        let cat = FeatureSpec::new(vec![&a, &b], None, FusionMode::Concat, 0).unwrap();
        let fa = avg.features(small_fold(), Part::Train, &[3], 8).unwrap();
        let fc = cat.features(small_fold(), Part::Train, &[3], 8).unwrap();
        assert_eq!((fa[0].len(), fc[0].len()), (8, 24));
        assert_eq!(fa[0][..], fc[0][..8]);
    }

    #[test]
    fn classifier_round_trip() {
        let mut c = Classifier::new(5, 4, Task::ThreeClass, 1);
        c.mean = vec![0.5; 5];
        c.threshold = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clf.pulse");
        c.save(&p).unwrap();
        let back = Classifier::load(&p).unwrap();
        assert_eq!(back.params, c.params);
        assert_eq!(back.mean, c.mean);
        assert_eq!(back.threshold, 0.25);
        let rows = vec![vec![0.1, 0.2, 0.3, 0.4, 0.5]];
        let s = back.scores(&rows);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn label_mapping() {
        assert_eq!(targets(&[1, 2, 3], Task::Binary).unwrap(), vec![0, 1, 0]);
        assert_eq!(targets(&[1, 2, 3], Task::ThreeClass).unwrap(), vec![0, 1, 2]);
        assert!(targets(&[0], Task::Binary).is_err());
    }
}
