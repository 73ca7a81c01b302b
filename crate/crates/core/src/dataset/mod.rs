//! On-disk dataset formats: per-subject signal records and LOSO fold
//! archives, plus the synthetic dataset generator.

mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Container, NamedArray};
use crate::error::{PulseError, Result};

pub use synthetic::{generate_synthetic_dataset, SyntheticConfig};

pub const FOLD_FORMAT: &str = "pulse-fold/1";
pub const RECORD_FORMAT: &str = "pulse-record/1";
pub const DATASET_FORMAT: &str = "pulse-dataset/1";

/// Samples per window (60 s at 64 Hz).
pub const WINDOW_LEN: usize = 3840;

/// Raw channel names accepted in a [`SignalRecord`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "ECG")]
    Ecg,
    #[serde(rename = "BVP")]
    Bvp,
    #[serde(rename = "ACC_x")]
    AccX,
    #[serde(rename = "ACC_y")]
    AccY,
    #[serde(rename = "ACC_z")]
    AccZ,
    #[serde(rename = "TEMP")]
    Temp,
    #[serde(rename = "EDA")]
    Eda,
}

impl Channel {
    pub const ALL: [Channel; 7] = [
        Channel::Ecg,
        Channel::Bvp,
        Channel::AccX,
        Channel::AccY,
        Channel::AccZ,
        Channel::Temp,
        Channel::Eda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Ecg => "ECG",
            Channel::Bvp => "BVP",
            Channel::AccX => "ACC_x",
            Channel::AccY => "ACC_y",
            Channel::AccZ => "ACC_z",
            Channel::Temp => "TEMP",
            Channel::Eda => "EDA",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Model input modalities after preprocessing. The first four are the
/// archive's `X` channels in order; EDA is the `Y` target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "ECG")]
    Ecg,
    #[serde(rename = "BVP")]
    Bvp,
    #[serde(rename = "TEMP")]
    Temp,
    #[serde(rename = "ACC")]
    Acc,
    #[serde(rename = "EDA")]
    Eda,
}

impl Modality {
    /// Archive `X` channel order.
    pub const CHEAP: [Modality; 4] = [Modality::Ecg, Modality::Bvp, Modality::Temp, Modality::Acc];
    pub const ALL: [Modality; 5] = [
        Modality::Ecg,
        Modality::Bvp,
        Modality::Temp,
        Modality::Acc,
        Modality::Eda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Ecg => "ECG",
            Modality::Bvp => "BVP",
            Modality::Temp => "TEMP",
            Modality::Acc => "ACC",
            Modality::Eda => "EDA",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
    }

    /// Index into the archive's `X` channel axis; `None` for EDA.
    pub fn x_channel(self) -> Option<usize> {
        Self::CHEAP.iter().position(|&m| m == self)
    }

    /// Row in the per-subject stats table (X channels then EDA).
    pub fn stats_row(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).unwrap()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStream {
    pub samples: Vec<f32>,
    pub rate_hz: f64,
}

impl ChannelStream {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz
    }
}

/// One subject's synchronized raw streams and label stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    pub subject_id: String,
    pub channels: BTreeMap<Channel, ChannelStream>,
    /// Protocol labels, 0 = transient, 1 = baseline, 2 = stress, 3 = amusement.
    pub labels: Vec<i32>,
    pub label_rate_hz: f64,
}

impl SignalRecord {
    pub fn channel(&self, c: Channel) -> Result<&ChannelStream> {
        self.channels
            .get(&c)
            .ok_or_else(|| PulseError::MissingChannel(c.name().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_rate_hz > 0.0) {
            return Err(PulseError::Invariant("label rate must be positive".into()));
        }
        if let Some(l) = self.labels.iter().find(|l| !(0..=3).contains(*l)) {
            return Err(PulseError::Invariant(format!("label {l} outside 0..=3")));
        }
        let label_dur = self.labels.len() as f64 / self.label_rate_hz;
        for (c, s) in &self.channels {
            if !(s.rate_hz > 0.0) {
                return Err(PulseError::Invariant(format!("channel {c} has non-positive rate")));
            }
            let tol = (1.0 / s.rate_hz).max(1.0 / self.label_rate_hz) + 1e-9;
            if (s.duration_s() - label_dur).abs() > tol {
                return Err(PulseError::Invariant(format!(
                    "channel {c} lasts {:.4} s but labels last {:.4} s",
                    s.duration_s(),
                    label_dur
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let channels: Vec<_> = self
            .channels
            .iter()
            .map(|(c, s)| json!({"name": c.name(), "rate_hz": s.rate_hz}))
            .collect();
        let mut c = Container::new(
            RECORD_FORMAT,
            json!({
                "subject_id": self.subject_id,
                "label_rate_hz": self.label_rate_hz,
                "channels": channels,
            }),
        );
        for (ch, s) in &self.channels {
            c.push(NamedArray::f32(ch.name(), vec![s.samples.len()], s.samples.clone()));
        }
        c.push(NamedArray::i32("labels", vec![self.labels.len()], self.labels.clone()));
        c.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut c = Container::read(path, RECORD_FORMAT)?;
        let meta = c.meta.clone();
        let subject_id = meta["subject_id"]
            .as_str()
            .ok_or_else(|| PulseError::Format("record meta lacks subject_id".into()))?
            .to_string();
        let label_rate_hz = meta["label_rate_hz"]
            .as_f64()
            .ok_or_else(|| PulseError::Format("record meta lacks label_rate_hz".into()))?;
        let mut channels = BTreeMap::new();
        for entry in meta["channels"].as_array().cloned().unwrap_or_default() {
            let name = entry["name"].as_str().unwrap_or_default();
            let ch = Channel::from_name(name)
                .ok_or_else(|| PulseError::Format(format!("unknown channel `{name}`")))?;
            let rate_hz = entry["rate_hz"]
                .as_f64()
                .ok_or_else(|| PulseError::Format(format!("channel `{name}` lacks rate")))?;
            let (_, samples) = c.take_f32(name)?;
            channels.insert(ch, ChannelStream { samples, rate_hz });
        }
        let (_, labels) = c.take_i32("labels")?;
        let rec = Self {
            subject_id,
            channels,
            labels,
            label_rate_hz,
        };
        rec.validate()?;
        Ok(rec)
    }
}

/// Subject list written next to per-subject record files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format: String,
    pub subjects: Vec<String>,
}

pub fn record_path(dir: &Path, subject: &str) -> PathBuf {
    dir.join(format!("{subject}.rec"))
}

/// Writes records plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, records: &[SignalRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in records {
        r.write(&record_path(dir, &r.subject_id))?;
    }
    let m = DatasetManifest {
        format: DATASET_FORMAT.into(),
        subjects: records.iter().map(|r| r.subject_id.clone()).collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

/// Reads every record listed in `dir/manifest.json`, or every `*.rec`
/// file in name order when no manifest exists.
pub fn read_dataset(dir: &Path) -> Result<Vec<SignalRecord>> {
    let manifest = dir.join("manifest.json");
    let paths: Vec<PathBuf> = if manifest.exists() {
        let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest)?)?;
        if m.format != DATASET_FORMAT {
            return Err(PulseError::Version {
                expected: DATASET_FORMAT.into(),
                found: m.format,
            });
        }
        m.subjects.iter().map(|s| record_path(dir, s)).collect()
    } else {
        let mut p: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "rec"))
            .collect();
        p.sort();
        p
    };
    paths.iter().map(|p| SignalRecord::read(p)).collect()
}

/// Per-subject per-channel baseline statistics for de-normalisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: f32,
    pub std: f32,
}

/// One leave-one-subject-out fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldArchive {
    /// 1-based fold index.
    pub fold_id: u32,
    /// All subjects, in stats-table order.
    pub subjects: Vec<String>,
    /// Index into `subjects` of the held-out subject.
    pub test_subject: usize,
    /// `[windows, 4, WINDOW_LEN]`, channels (ECG, BVP, TEMP, ACC).
    pub x_train: Array3<f32>,
    pub x_test: Array3<f32>,
    /// `[windows, WINDOW_LEN]` phasic EDA target.
    pub y_train: Array2<f32>,
    pub y_test: Array2<f32>,
    pub l_train: Array1<i32>,
    pub l_test: Array1<i32>,
    /// Subject index of each training window.
    pub s_train: Array1<i32>,
    /// `[subjects, 5, 2]` (mean, std) per modality in [`Modality::ALL`] order.
    pub stats: Array3<f32>,
}

impl FoldArchive {
    pub fn n_train(&self) -> usize {
        self.l_train.len()
    }

    pub fn n_test(&self) -> usize {
        self.l_test.len()
    }

    pub fn stats_for(&self, subject: usize, m: Modality) -> ChannelStats {
        let r = m.stats_row();
        ChannelStats {
            mean: self.stats[[subject, r, 0]],
            std: self.stats[[subject, r, 1]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nc = Modality::CHEAP.len();
        let check3 = |name: &str, a: &Array3<f32>, n: usize| -> Result<()> {
            let s = a.shape();
            if s[1] != nc || s[2] != WINDOW_LEN || s[0] != n {
                return Err(PulseError::Shape(format!(
                    "{name} has shape {s:?}, expected [{n}, {nc}, {WINDOW_LEN}]"
                )));
            }
            Ok(())
        };
        let check2 = |name: &str, a: &Array2<f32>, n: usize| -> Result<()> {
            let s = a.shape();
            if s[1] != WINDOW_LEN || s[0] != n {
                return Err(PulseError::Shape(format!(
                    "{name} has shape {s:?}, expected [{n}, {WINDOW_LEN}]"
                )));
            }
            Ok(())
        };
        let (ntr, nte) = (self.l_train.len(), self.l_test.len());
        check3("X_train", &self.x_train, ntr)?;
        check3("X_test", &self.x_test, nte)?;
        check2("Y_train", &self.y_train, ntr)?;
        check2("Y_test", &self.y_test, nte)?;
        if self.s_train.len() != ntr {
            return Err(PulseError::Shape("S_train length differs from L_train".into()));
        }
        for l in self.l_train.iter().chain(self.l_test.iter()) {
            if !(1..=3).contains(l) {
                return Err(PulseError::Invariant(format!("window label {l} not in {{1,2,3}}")));
            }
        }
        let ns = self.subjects.len();
        if self.test_subject >= ns {
            return Err(PulseError::Invariant("test subject index out of range".into()));
        }
        if self.fold_id == 0 || self.fold_id as usize > ns {
            return Err(PulseError::Invariant(format!(
                "fold id {} outside 1..={ns}",
                self.fold_id
            )));
        }
        for &s in self.s_train.iter() {
            if s < 0 || s as usize >= ns {
                return Err(PulseError::Invariant(format!("train subject index {s} out of range")));
            }
            if s as usize == self.test_subject {
                return Err(PulseError::Invariant(
                    "test subject also appears in the training windows".into(),
                ));
            }
        }
        if self.stats.shape() != [ns, Modality::ALL.len(), 2] {
            return Err(PulseError::Shape(format!(
                "stats shape {:?}, expected [{ns}, 5, 2]",
                self.stats.shape()
            )));
        }
        for sd in self.stats.slice(ndarray::s![.., .., 1]).iter() {
            if !(*sd > 0.0) || !sd.is_finite() {
                return Err(PulseError::Invariant(format!("non-positive stats std {sd}")));
            }
        }
        Ok(())
    }
}

fn arr3(shape: Vec<usize>, data: Vec<f32>, name: &str) -> Result<Array3<f32>> {
    if shape.len() != 3 {
        return Err(PulseError::Shape(format!("{name} must be rank 3, got {shape:?}")));
    }
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
        .map_err(|e| PulseError::Shape(format!("{name}: {e}")))
}

fn arr2(shape: Vec<usize>, data: Vec<f32>, name: &str) -> Result<Array2<f32>> {
    if shape.len() != 2 {
        return Err(PulseError::Shape(format!("{name} must be rank 2, got {shape:?}")));
    }
    Array2::from_shape_vec((shape[0], shape[1]), data)
        .map_err(|e| PulseError::Shape(format!("{name}: {e}")))
}

fn arr1(shape: Vec<usize>, data: Vec<i32>, name: &str) -> Result<Array1<i32>> {
    if shape.len() != 1 {
        return Err(PulseError::Shape(format!("{name} must be rank 1, got {shape:?}")));
    }
    Ok(Array1::from_vec(data))
}

fn std_vec<A: Clone, D: ndarray::Dimension>(a: &ndarray::Array<A, D>) -> Vec<A> {
    a.as_standard_layout().iter().cloned().collect()
}

pub fn fold_to_container(fold: &FoldArchive) -> Result<Container> {
    fold.validate()?;
    let mut c = Container::new(
        FOLD_FORMAT,
        json!({
            "fold_id": fold.fold_id,
            "subjects": fold.subjects,
            "test_subject": fold.test_subject,
            "x_channels": Modality::CHEAP.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "target": "EDA",
            "window_len": WINDOW_LEN,
        }),
    );
    c.push(NamedArray::f32("X_train", fold.x_train.shape().to_vec(), std_vec(&fold.x_train)));
    c.push(NamedArray::f32("X_test", fold.x_test.shape().to_vec(), std_vec(&fold.x_test)));
    c.push(NamedArray::f32("Y_train", fold.y_train.shape().to_vec(), std_vec(&fold.y_train)));
    c.push(NamedArray::f32("Y_test", fold.y_test.shape().to_vec(), std_vec(&fold.y_test)));
    c.push(NamedArray::i32("L_train", vec![fold.l_train.len()], fold.l_train.to_vec()));
    c.push(NamedArray::i32("L_test", vec![fold.l_test.len()], fold.l_test.to_vec()));
    c.push(NamedArray::i32("S_train", vec![fold.s_train.len()], fold.s_train.to_vec()));
    c.push(NamedArray::f32("stats", fold.stats.shape().to_vec(), std_vec(&fold.stats)));
    Ok(c)
}

pub fn fold_from_container(mut c: Container) -> Result<FoldArchive> {
    let meta = c.meta.clone();
    let fold_id = meta["fold_id"]
        .as_u64()
        .ok_or_else(|| PulseError::Format("fold meta lacks fold_id".into()))? as u32;
    let subjects: Vec<String> = serde_json::from_value(meta["subjects"].clone())?;
    let test_subject = meta["test_subject"]
        .as_u64()
        .ok_or_else(|| PulseError::Format("fold meta lacks test_subject".into()))?
        as usize;
    let (s, d) = c.take_f32("X_train")?;
    let x_train = arr3(s, d, "X_train")?;
    let (s, d) = c.take_f32("X_test")?;
    let x_test = arr3(s, d, "X_test")?;
    let (s, d) = c.take_f32("Y_train")?;
    let y_train = arr2(s, d, "Y_train")?;
    let (s, d) = c.take_f32("Y_test")?;
    let y_test = arr2(s, d, "Y_test")?;
    let (s, d) = c.take_i32("L_train")?;
    let l_train = arr1(s, d, "L_train")?;
    let (s, d) = c.take_i32("L_test")?;
    let l_test = arr1(s, d, "L_test")?;
    let (s, d) = c.take_i32("S_train")?;
    let s_train = arr1(s, d, "S_train")?;
    let (s, d) = c.take_f32("stats")?;
    let stats = arr3(s, d, "stats")?;
    let fold = FoldArchive {
        fold_id,
        subjects,
        test_subject,
        x_train,
        x_test,
        y_train,
        y_test,
        l_train,
        l_test,
        s_train,
        stats,
    };
    fold.validate()?;
    Ok(fold)
}

/// Validates and writes a fold; nothing is written when validation fails.
pub fn write_fold_archive(fold: &FoldArchive, path: &Path) -> Result<()> {
    fold_to_container(fold)?.write(path)
}

pub fn read_fold_archive(path: &Path) -> Result<FoldArchive> {
    fold_from_container(Container::read(path, FOLD_FORMAT)?)
}

pub fn fold_path(dir: &Path, fold_id: u32) -> PathBuf {
    dir.join(format!("fold_{fold_id:02}.pfold"))
}

/// Reads every `fold_*.pfold` in `dir`, ordered by fold id.
pub fn read_fold_dir(dir: &Path) -> Result<Vec<FoldArchive>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pfold"))
        .collect();
    paths.sort();
    let mut folds: Vec<FoldArchive> = paths.iter().map(|p| read_fold_archive(p)).collect::<Result<_>>()?;
    folds.sort_by_key(|f| f.fold_id);
    Ok(folds)
}
