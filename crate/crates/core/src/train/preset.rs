use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FoldArchive, Modality, SyntheticConfig};
use crate::error::{PulseError, Result};
use crate::mae::{MaeConfig, PhysioMae};
use crate::metrics::{CollapseEntry, FoldMetrics, MetricsReport, Task};
use crate::signal::PreprocessConfig;

use super::distill::distill;
use super::finetune::{finetune, Classifier, FeatureSpec};
use super::heads::KdHeads;
use super::pretrain::pretrain;
use super::{stream_seed, History, Stage, StageConfig, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PresetId {
    /// Cheap sensors only, never EDA.
    A,
    /// Joint pretraining with EDA in the alignment; tested without EDA.
    B,
    /// A's pretraining, distillation from a frozen EDA teacher, cheap-only test.
    C,
    /// B's training, tested with EDA.
    D,
    /// EDA encoder alone, frozen, with a classifier on top.
    E,
}

impl PresetId {
    pub const ALL: [PresetId; 5] = [PresetId::A, PresetId::B, PresetId::C, PresetId::D, PresetId::E];

    pub fn uses_eda_at_test(self) -> bool {
        matches!(self, PresetId::D | PresetId::E)
    }

    pub fn describe(self) -> &'static str {
        match self {
            PresetId::A => "no-EDA baseline",
            PresetId::B => "symmetric alignment",
            PresetId::C => "privileged transfer from a frozen EDA teacher",
            PresetId::D => "full-sensor baseline",
            PresetId::E => "EDA-only baseline",
        }
    }
}

impl fmt::Display for PresetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for PresetId {
    type Err = PulseError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| PulseError::Config(format!("unknown preset `{s}`; valid presets are A, B, C, D, E")))
    }
}

/// Everything a preset run needs, loadable from one TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: MaeConfig,
    pub task: Task,
    pub pretrain: StageConfig,
    pub distill: StageConfig,
    pub finetune: StageConfig,
    pub preprocess: PreprocessConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: MaeConfig::desk(),
            task: Task::Binary,
            pretrain: StageConfig::pretrain(),
            distill: StageConfig::distill(),
            finetune: StageConfig::finetune(),
            preprocess: PreprocessConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a TOML document layered over `base`; keys not given keep
    /// `base`'s values (so each stage table keeps its own defaults).
    pub fn from_toml_over(base: &RunConfig, text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| PulseError::Config(e.to_string()))?;
        let mut v = toml::Value::try_from(base).map_err(|e| PulseError::Config(e.to_string()))?;
        merge(&mut v, over);
        let cfg: RunConfig = v.try_into().map_err(|e: toml::de::Error| PulseError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_over(&Self::default(), text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| PulseError::Config(e.to_string()))
    }

    /// A small model and short schedules for synthetic smoke runs.
    pub fn quick() -> Self {
        let stage = |s: StageConfig, epochs, steps| StageConfig {
            epochs,
            batch_size: 16,
            learning_rate: 1e-3,
            steps_per_epoch: steps,
            ..s
        };
        let mut cfg = Self {
            model: MaeConfig {
                enc_heads: 2,
                ..MaeConfig::toy(16, 2)
            },
            pretrain: stage(StageConfig::pretrain(), 4, Some(25)),
            distill: stage(StageConfig::distill(), 4, Some(25)),
            finetune: stage(StageConfig::finetune(), 150, None),
            ..Self::default()
        };
        cfg.finetune.subsample_factor = 2;
        cfg.preprocess.window.stride_samples = 320;
        cfg.synthetic.duration_s = 900.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (want, s) in [
            (Stage::Pretrain, &self.pretrain),
            (Stage::Distill, &self.distill),
            (Stage::Finetune, &self.finetune),
        ] {
            if s.stage != want {
                return Err(PulseError::Config(format!("[{want:?}] table declares stage {:?}", s.stage)));
            }
            s.validate()?;
        }
        if self.pretrain.modalities.contains(&Modality::Eda) {
            return Err(PulseError::Config(
                "pretrain.modalities lists cheap sensors only; presets add EDA themselves".into(),
            ));
        }
        self.preprocess.window.validate()?;
        Ok(())
    }
}

/// Initialisation seed of a fresh `m` encoder in a run seeded with `seed`.
pub fn init_seed(seed: u64, m: Modality) -> u64 {
    stream_seed(seed, Stream::Init, 100 + m.stats_row() as u64)
}

/// Seed handed to a stage of a run seeded with `seed`.
pub fn stage_seed(seed: u64, s: &StageConfig) -> u64 {
    let tag = match s.stage {
        Stage::Pretrain => 1,
        Stage::Distill => 2,
        Stage::Finetune => 3,
    };
    stream_seed(seed, Stream::Init, tag * 1000 + s.seed)
}

/// Result of one preset on one fold for one seed.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub preset: PresetId,
    pub seed: u64,
    pub metrics: FoldMetrics,
    pub test_scores: Vec<f64>,
    pub histories: Vec<(String, History)>,
    pub collapse: Vec<CollapseEntry>,
    pub models: Vec<PhysioMae>,
    pub heads: Option<KdHeads>,
    pub classifier: Classifier,
    pub test_modalities: Vec<Modality>,
}

struct Trained {
    models: Vec<PhysioMae>,
    history: History,
}

/// Stage results shared between presets of one (fold, seed).
struct Cache<'a> {
    fold: &'a FoldArchive,
    cfg: &'a RunConfig,
    seed: u64,
    cheap: Option<Trained>,
    joint: Option<Trained>,
    eda: Option<Trained>,
}

impl<'a> Cache<'a> {
    fn init(&self, m: Modality) -> Result<PhysioMae> {
        PhysioMae::new(self.cfg.model.clone(), m, init_seed(self.seed, m))
    }

    fn train(&self, mut models: Vec<PhysioMae>) -> Result<Trained> {
        let history = pretrain(self.fold, &mut models, &self.cfg.pretrain, stage_seed(self.seed, &self.cfg.pretrain))?;
        Ok(Trained { models, history })
    }

    fn cheap(&mut self) -> Result<&Trained> {
        if self.cheap.is_none() {
            let models = self.cfg.pretrain.modalities.iter().map(|&m| self.init(m)).collect::<Result<_>>()?;
            self.cheap = Some(self.train(models)?);
        }
        Ok(self.cheap.as_ref().unwrap())
    }

    fn joint(&mut self) -> Result<&Trained> {
        if self.joint.is_none() {
            let mut models: Vec<PhysioMae> =
                self.cfg.pretrain.modalities.iter().map(|&m| self.init(m)).collect::<Result<_>>()?;
            let mut eda = self.init(Modality::Eda)?;
            eda.private_only = false;
            models.push(eda);
            self.joint = Some(self.train(models)?);
        }
        Ok(self.joint.as_ref().unwrap())
    }

    fn eda(&mut self) -> Result<&Trained> {
        if self.eda.is_none() {
            let models = vec![self.init(Modality::Eda)?];
            self.eda = Some(self.train(models)?);
        }
        Ok(self.eda.as_ref().unwrap())
    }

    fn run(&mut self, preset: PresetId) -> Result<FoldOutcome> {
        let cfg = self.cfg;
        let ft_seed = stage_seed(self.seed, &cfg.finetune);
        let mut histories = Vec::new();
        let mut collapse = Vec::new();
        let (models, heads): (Vec<PhysioMae>, Option<KdHeads>) = match preset {
            PresetId::A => {
                let t = self.cheap()?;
                histories.push(("pretrain".to_string(), t.history.clone()));
                (t.models.clone(), None)
            }
            PresetId::B | PresetId::D => {
                let t = self.joint()?;
                histories.push(("pretrain".to_string(), t.history.clone()));
                let keep = |m: &&PhysioMae| preset == PresetId::D || m.modality != Modality::Eda;
                (t.models.iter().filter(keep).cloned().collect(), None)
            }
            PresetId::E => {
                let t = self.eda()?;
                histories.push(("pretrain_eda".to_string(), t.history.clone()));
                (t.models.clone(), None)
            }
            PresetId::C => {
                let teacher_mod = cfg.distill.teacher;
                let teacher = if teacher_mod == Modality::Eda {
                    let t = self.eda()?;
                    histories.push(("pretrain_eda".to_string(), t.history.clone()));
                    t.models[0].clone()
                } else {
                    let t = self.cheap()?;
                    t.models
                        .iter()
                        .find(|m| m.modality == teacher_mod)
                        .cloned()
                        .ok_or_else(|| PulseError::Config(format!("teacher {teacher_mod} was not pretrained")))?
                };
                let t = self.cheap()?;
                histories.push(("pretrain".to_string(), t.history.clone()));
                let mut students: Vec<PhysioMae> =
                    t.models.iter().filter(|m| m.modality != teacher_mod).cloned().collect();
                let out = distill(self.fold, &teacher, &mut students, &cfg.distill, stage_seed(self.seed, &cfg.distill))?;
                histories.push(("distill".to_string(), out.history));
                collapse = out.collapse;
                (students, Some(out.heads))
            }
        };
        let refs: Vec<&PhysioMae> = models.iter().collect();
        let spec = FeatureSpec::new(refs, heads.as_ref(), cfg.finetune.fusion, ft_seed)?;
        let test_modalities = spec.modalities();
        if test_modalities.contains(&Modality::Eda) != preset.uses_eda_at_test() {
            return Err(PulseError::Invariant(format!(
                "preset {preset} test inputs {test_modalities:?} disagree with its EDA policy"
            )));
        }
        let ft = finetune(self.fold, &spec, &cfg.finetune, cfg.task, ft_seed)?;
        histories.push(("finetune".to_string(), ft.history));
        Ok(FoldOutcome {
            preset,
            seed: self.seed,
            metrics: FoldMetrics {
                fold: self.fold.fold_id,
                subject: self.fold.subjects[self.fold.test_subject].clone(),
                metrics: ft.test_metrics,
            },
            test_scores: ft.test_scores,
            histories,
            collapse,
            models,
            heads,
            classifier: ft.classifier,
            test_modalities,
        })
    }
}

/// Runs each preset on one fold, sharing pretraining between presets that
/// use the same stage (A and C; B and D; C's teacher and E).
pub fn run_fold(presets: &[PresetId], fold: &FoldArchive, cfg: &RunConfig, seed: u64) -> Result<Vec<FoldOutcome>> {
    cfg.validate()?;
    let mut cache = Cache {
        fold,
        cfg,
        seed,
        cheap: None,
        joint: None,
        eda: None,
    };
    presets.iter().map(|&p| cache.run(p)).collect()
}

/// All folds × seeds for each preset; one report per (preset, seed).
/// Folds run in parallel on the current rayon pool; results do not depend
/// on scheduling.
pub fn run_preset(
    presets: &[PresetId],
    folds: &[FoldArchive],
    cfg: &RunConfig,
    seeds: &[u64],
) -> Result<BTreeMap<PresetId, Vec<MetricsReport>>> {
    let jobs: Vec<(usize, u64)> = seeds.iter().flat_map(|&s| (0..folds.len()).map(move |f| (f, s))).collect();
    let results: Vec<Vec<FoldOutcome>> = jobs
        .par_iter()
        .map(|&(f, s)| run_fold(presets, &folds[f], cfg, s))
        .collect::<Result<_>>()?;
    let mut out: BTreeMap<PresetId, Vec<MetricsReport>> = BTreeMap::new();
    for &p in presets {
        let reports = seeds
            .iter()
            .map(|&s| MetricsReport {
                name: format!("{p}/seed{s}"),
                task: cfg.task,
                folds: results
                    .iter()
                    .flatten()
                    .filter(|o| o.preset == p && o.seed == s)
                    .map(|o| o.metrics.clone())
                    .collect(),
            })
            .collect();
        out.insert(p, reports);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::testutil::small_fold;
    use ndarray::Array2;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::quick();
        c.model = MaeConfig::toy(8, 1);
        c.pretrain.epochs = 1;
        c.pretrain.steps_per_epoch = Some(2);
        c.distill.epochs = 1;
        c.distill.steps_per_epoch = Some(2);
        c.finetune.epochs = 5;
        c
    }

    #[test]
    fn preset_names_parse() {
        assert_eq!("c".parse::<PresetId>().unwrap(), PresetId::C);
        let err = "F".parse::<PresetId>().unwrap_err().to_string();
        assert!(err.contains("A, B, C, D, E"));
    }

    #[test]
    fn config_layers_over_stage_defaults() {
        let c = RunConfig::from_toml("[distill]\nepochs = 7\n[model]\nenc_dim = 32\n").unwrap();
        assert_eq!(c.distill.epochs, 7);
        assert_eq!(c.distill.learning_rate, 1e-4);
        assert_eq!(c.finetune.learning_rate, 1e-3);
        assert_eq!(c.model.enc_dim, 32);
        assert!(RunConfig::from_toml("[distill]\nepoch = 7\n").is_err());
        assert!(RunConfig::from_toml("[pretrain]\nmodalities = [\"EDA\"]\n").is_err());
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_preset_runs_and_respects_its_inputs() {
        let out = run_fold(&PresetId::ALL, small_fold(), &tiny(), 1).unwrap();
        for o in &out {
            assert_eq!(o.test_modalities.contains(&Modality::Eda), o.preset.uses_eda_at_test());
            assert_eq!(o.test_scores.len(), small_fold().n_test());
        }
        assert!(out[2].heads.is_some() && !out[2].collapse.is_empty());
        assert_eq!(out[4].test_modalities, vec![Modality::Eda]);
        // A and C share the cheap pretraining
        assert_eq!(out[0].histories[0].1, out[2].histories[1].1);
    }

    #[test]
    fn b_ignores_test_time_eda() {
        let cfg = tiny();
        let mut zeroed = small_fold().clone();
        zeroed.y_test = Array2::zeros(zeroed.y_test.raw_dim());
        let a = run_fold(&[PresetId::B], small_fold(), &cfg, 2).unwrap();
        let b = run_fold(&[PresetId::B], &zeroed, &cfg, 2).unwrap();
        assert_eq!(a[0].metrics, b[0].metrics);
        assert_eq!(a[0].test_scores, b[0].test_scores);
    }
}
