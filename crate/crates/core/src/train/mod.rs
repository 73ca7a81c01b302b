//! Pretraining, distillation and finetuning stages plus the A–E presets.

mod distill;
mod finetune;
mod heads;
mod preset;
mod pretrain;

pub use distill::{collapse_report, distill, kd_objective, layer_map, DistillOutput, KdTerms};
pub use finetune::{finetune, subsample_uniform, Classifier, FeatureSpec, FinetuneOutput, FusionMode};
pub use heads::{FusionLayer, KdHeads, TransferHead, HEADS_FORMAT};
pub use preset::{init_seed, run_fold, run_preset, stage_seed, FoldOutcome, PresetId, RunConfig};
pub use pretrain::pretrain;

use std::fmt::Write as _;

use ndarray::{s, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{FoldArchive, Modality};
use crate::error::{PulseError, Result};
use crate::losses::LossWeights;
use crate::nn::Schedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Pretrain,
    Distill,
    Finetune,
}

/// Which student blocks are matched in the hidden-state loss. Config
/// values are `"all"` or a list of 1-based block numbers.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum LayerSelection {
    #[default]
    All,
    List(Vec<usize>),
}

impl LayerSelection {
    /// 0-based student block indices.
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        match self {
            LayerSelection::All => Ok((0..depth).collect()),
            LayerSelection::List(v) => {
                if v.is_empty() {
                    return Err(PulseError::Config("matched_layers list is empty".into()));
                }
                let mut out = Vec::new();
                for &l in v {
                    if l == 0 || l > depth {
                        return Err(PulseError::Config(format!(
                            "matched layer {l} outside 1..={depth}"
                        )));
                    }
                    if !out.contains(&(l - 1)) {
                        out.push(l - 1);
                    }
                }
                out.sort_unstable();
                Ok(out)
            }
        }
    }
}

impl Serialize for LayerSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerSelection::All => s.serialize_str("all"),
            LayerSelection::List(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for LayerSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            List(Vec<usize>),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) if w == "all" => Ok(LayerSelection::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "matched_layers must be \"all\" or a list, got \"{w}\""
            ))),
            Raw::List(v) => Ok(LayerSelection::List(v)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scheduler: Schedule,
    /// Mixed with the run seed; lets stages draw independent streams.
    pub seed: u64,
    /// Optional cap on batches per epoch (desk-scale budgets).
    pub steps_per_epoch: Option<usize>,
    pub modalities: Vec<Modality>,
    pub teacher: Modality,
    pub matched_layers: LayerSelection,
    pub weights: LossWeights,
    /// Held-out fraction of training windows (distill and finetune).
    pub val_fraction: f64,
    /// Mask ratio of the distillation reconstruction pass.
    pub kd_mask_ratio: f64,
    pub fusion_frozen: bool,
    pub unfreeze_epoch: Option<usize>,
    pub subsample_factor: usize,
    pub head_hidden: usize,
    pub fusion: FusionMode,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl StageConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            epochs: 300,
            batch_size: 128,
            learning_rate: 1e-4,
            scheduler: Schedule::None,
            seed: 0,
            steps_per_epoch: None,
            modalities: Modality::CHEAP.to_vec(),
            teacher: Modality::Eda,
            matched_layers: LayerSelection::All,
            weights: LossWeights::default(),
            val_fraction: 0.1,
            kd_mask_ratio: 0.5,
            fusion_frozen: false,
            unfreeze_epoch: None,
            subsample_factor: 40,
            head_hidden: 4,
            fusion: FusionMode::Average,
        }
    }

    pub fn distill() -> Self {
        Self {
            stage: Stage::Distill,
            epochs: 100,
            seed: 1,
            ..Self::pretrain()
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            epochs: 300,
            learning_rate: 1e-3,
            scheduler: Schedule::Cosine,
            seed: 2,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PulseError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.kd_mask_ratio) {
            return bad("kd_mask_ratio must lie in [0, 1)".into());
        }
        if self.subsample_factor == 0 {
            return bad("subsample_factor must be at least 1".into());
        }
        if self.head_hidden == 0 {
            return bad("head_hidden must be at least 1".into());
        }
        if self.modalities.is_empty() {
            return bad("modalities must not be empty".into());
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return bad("modalities contain duplicates".into());
        }
        self.weights.validate()
    }
}

/// Independent RNG streams per purpose.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub(crate) enum Stream {
    Init = 1,
    Shuffle,
    Mask,
    Split,
    Val,
    Subsample,
    Features,
}

/// SplitMix64 finaliser over (seed, purpose, counter).
pub(crate) fn stream_seed(seed: u64, purpose: Stream, counter: u64) -> u64 {
    let mut z = seed
        .wrapping_add((purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(counter.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, purpose: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, purpose, counter))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Test,
}

/// One window of one modality; EDA comes from the `Y` target.
pub fn window(fold: &FoldArchive, part: Part, m: Modality, i: usize) -> ArrayView1<'_, f32> {
    match (part, m.x_channel()) {
        (Part::Train, Some(c)) => fold.x_train.slice(s![i, c, ..]),
        (Part::Test, Some(c)) => fold.x_test.slice(s![i, c, ..]),
        (Part::Train, None) => fold.y_train.slice(s![i, ..]),
        (Part::Test, None) => fold.y_test.slice(s![i, ..]),
    }
}

/// `[B, L]` batch of windows.
pub fn batch(fold: &FoldArchive, part: Part, m: Modality, idx: &[usize]) -> Tensor<f32> {
    let l = fold.x_train.shape()[2];
    let mut data = Vec::with_capacity(idx.len() * l);
    for &i in idx {
        data.extend(window(fold, part, m, i).iter());
    }
    Tensor::new(vec![idx.len(), l], data).expect("batch shape")
}

/// Shuffled batches of `idx`; a trailing batch smaller than 2 is dropped.
pub(crate) fn epoch_batches(idx: &[usize], batch_size: usize, seed: u64, epoch: usize, cap: Option<usize>) -> Vec<Vec<usize>> {
    let mut order = idx.to_vec();
    order.shuffle(&mut rng_for(seed, Stream::Shuffle, epoch as u64));
    let mut out: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2 || idx.len() < 2)
        .map(<[usize]>::to_vec)
        .collect();
    if let Some(cap) = cap {
        out.truncate(cap);
    }
    out
}

/// Random `(train, val)` partition of `idx` with `round(frac·n)` held out,
/// both sorted.
pub(crate) fn holdout_split(idx: &[usize], frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = idx.to_vec();
    order.shuffle(&mut rng_for(seed, Stream::Val, 0));
    let n_val = ((frac * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Per-epoch averages. Terms a stage does not compute stay `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_align: Option<f64>,
    pub loss_rec: Option<f64>,
    pub loss_hid: Option<f64>,
    pub loss_emb: Option<f64>,
    pub loss_perp: Option<f64>,
    pub val_auprc: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Loss terms of a single optimisation step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub align: Option<f64>,
    pub rec: Option<f64>,
    pub hid: Option<f64>,
    pub emb: Option<f64>,
    pub perp: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepLosses>,
}

pub const HISTORY_HEADER: &str = "epoch,loss_total,loss_align,loss_rec,loss_hid,loss_emb,loss_perp,val_auprc,val_acc";

impl History {
    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Closes an epoch by averaging the steps recorded since `first_step`.
    pub(crate) fn close_epoch(&mut self, epoch: usize, first_step: usize) -> &mut EpochRecord {
        let steps = &self.steps[first_step..];
        let n = steps.len().max(1) as f64;
        let avg = |f: fn(&StepLosses) -> Option<f64>| {
            let v: Vec<f64> = steps.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        self.epochs.push(EpochRecord {
            epoch,
            loss_total: steps.iter().map(|s| s.total).sum::<f64>() / n,
            loss_align: avg(|s| s.align),
            loss_rec: avg(|s| s.rec),
            loss_hid: avg(|s| s.hid),
            loss_emb: avg(|s| s.emb),
            loss_perp: avg(|s| s.perp),
            val_auprc: None,
            val_acc: None,
        });
        self.epochs.last_mut().unwrap()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        let f = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.8},{},{},{},{},{},{},{}",
                e.epoch,
                e.loss_total,
                f(e.loss_align),
                f(e.loss_rec),
                f(e.loss_hid),
                f(e.loss_emb),
                f(e.loss_perp),
                f(e.val_auprc),
                f(e.val_acc)
            );
        }
        out
    }
}

/// Checks the fold can serve every requested modality.
pub(crate) fn check_fold(fold: &FoldArchive, signal_len: usize) -> Result<()> {
    let l = fold.x_train.shape()[2];
    if l != signal_len {
        return Err(PulseError::Shape(format!(
            "fold windows have {l} samples, model expects {signal_len}"
        )));
    }
    if fold.n_train() < 2 {
        return Err(PulseError::InvalidArgument("fold has fewer than 2 training windows".into()));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::sync::OnceLock;

    use crate::dataset::{generate_synthetic_dataset, FoldArchive, SyntheticConfig};
    use crate::signal::{build_fold, process_all, PreprocessConfig, WindowSpec};

    /// Small shared synthetic fold (5 s stride, 4 subjects).
    pub fn small_fold() -> &'static FoldArchive {
        static FOLD: OnceLock<FoldArchive> = OnceLock::new();
        FOLD.get_or_init(|| {
            let recs = generate_synthetic_dataset(&SyntheticConfig {
                n_subjects: 4,
                duration_s: 600.0,
                seed: 3,
                coupling: 0.8,
                three_class: false,
            })
            .unwrap();
            let cfg = PreprocessConfig {
                window: WindowSpec {
                    stride_samples: 320,
                    ..WindowSpec::default()
                },
                ..PreprocessConfig::default()
            };
            let subjects = process_all(&recs, &cfg).unwrap();
            build_fold(&subjects, 0).unwrap()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_selection_parses_both_forms() {
        #[derive(Deserialize)]
        struct W {
            l: LayerSelection,
        }
        let a: W = toml::from_str("l = \"all\"").unwrap();
        assert_eq!(a.l, LayerSelection::All);
        let b: W = toml::from_str("l = [3, 5, 7]").unwrap();
        assert_eq!(b.l.resolve(8).unwrap(), vec![2, 4, 6]);
        assert!(toml::from_str::<W>("l = \"some\"").is_err());
        assert!(LayerSelection::List(vec![9]).resolve(8).is_err());
    }

    #[test]
    fn stage_config_rejects_bad_values() {
        assert!(StageConfig::pretrain().validate().is_ok());
        let mut c = StageConfig::finetune();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = StageConfig::distill();
        c.modalities = vec![Modality::Ecg, Modality::Ecg];
        assert!(c.validate().is_err());
    }

    #[test]
    fn batches_cover_without_repeats() {
        let idx: Vec<usize> = (0..23).collect();
        let b = epoch_batches(&idx, 5, 1, 0, None);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, idx);
        assert_eq!(epoch_batches(&idx, 5, 1, 0, Some(2)).len(), 2);
        assert_ne!(epoch_batches(&idx, 5, 1, 0, None), epoch_batches(&idx, 5, 1, 1, None));
    }

    #[test]
    fn holdout_is_a_partition() {
        let idx: Vec<usize> = (10..60).collect();
        let (tr, va) = holdout_split(&idx, 0.1, 4);
        assert_eq!(va.len(), 5);
        let mut all = [tr, va].concat();
        all.sort_unstable();
        assert_eq!(all, idx);
    }

    #[test]
    fn history_csv_header_and_blanks() {
        let mut h = History::default();
        h.steps.push(StepLosses {
            total: 2.0,
            rec: Some(1.0),
            ..Default::default()
        });
        h.steps.push(StepLosses {
            total: 4.0,
            rec: Some(3.0),
            ..Default::default()
        });
        h.close_epoch(0, 0);
        let csv = h.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), HISTORY_HEADER);
        assert_eq!(lines.next().unwrap(), "0,3.00000000,,2.00000000,,,,,");
    }
}
