//! Raw recordings to normalised, label-pure windows and LOSO folds.

pub mod filter;
pub mod resample;
pub mod windows;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    fold_path, write_fold_archive, Channel, ChannelStats, FoldArchive, Modality, SignalRecord,
};
use crate::error::{PulseError, Result};

pub use filter::{apply_filter, FilterKind, FilterSpec};
pub use resample::{resample, ResampleMethod};
pub use windows::{
    baseline_zscore, net_magnitude, reject_low_variance, segment_windows, WindowSet, WindowSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub window: WindowSpec,
    pub std_threshold: f64,
    pub bandpass_order: usize,
    pub eda_highpass_order: usize,
    pub zero_phase: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window: WindowSpec::default(),
            std_threshold: 0.02,
            bandpass_order: 4,
            eda_highpass_order: 1,
            zero_phase: true,
        }
    }
}

/// Counts reported per subject.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowCounts {
    pub candidates: usize,
    pub pure: usize,
    pub rejected: usize,
    pub kept: usize,
}

/// One subject after preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectWindows {
    pub subject_id: String,
    /// Normalised 64 Hz streams in [`Modality::ALL`] order.
    pub streams: Vec<Vec<f32>>,
    pub windows: WindowSet,
    /// Baseline statistics in [`Modality::ALL`] order.
    pub stats: Vec<ChannelStats>,
    pub counts: WindowCounts,
}

impl SubjectWindows {
    pub fn window(&self, m: Modality, i: usize) -> &[f32] {
        let s = self.windows.starts[i];
        &self.streams[m.stats_row()][s..s + self.windows.length]
    }
}

fn to_rate(rec: &SignalRecord, c: Channel, dst: f64, method: ResampleMethod) -> Result<Vec<f32>> {
    let s = rec.channel(c)?;
    resample(&s.samples, s.rate_hz, dst, method)
}

/// resample → filter → net ACC → segment → purity → baseline z-score →
/// variance rejection.
///
/// ECG is band-passed at its native rate because its 40 Hz upper cutoff is
/// above the 32 Hz Nyquist limit of the target rate; the polyphase
/// anti-alias stage then band-limits it further.
pub fn process_subject(rec: &SignalRecord, cfg: &PreprocessConfig) -> Result<SubjectWindows> {
    rec.validate()?;
    let rate = cfg.window.target_rate_hz;
    let order = cfg.bandpass_order;
    let zp = cfg.zero_phase;

    let ecg_raw = rec.channel(Channel::Ecg)?;
    let ecg = apply_filter(
        &ecg_raw.samples,
        &FilterSpec::bandpass(0.5, 40.0, order, ecg_raw.rate_hz),
        zp,
    )?;
    let ecg = resample(&ecg, ecg_raw.rate_hz, rate, ResampleMethod::Polyphase)?;

    let bvp = to_rate(rec, Channel::Bvp, rate, ResampleMethod::Polyphase)?;
    let bvp = apply_filter(&bvp, &FilterSpec::bandpass(0.5, 2.0, order, rate), zp)?;

    let temp = to_rate(rec, Channel::Temp, rate, ResampleMethod::Linear)?;

    let eda = to_rate(rec, Channel::Eda, rate, ResampleMethod::Linear)?;
    let eda = apply_filter(&eda, &FilterSpec::highpass(0.05, cfg.eda_highpass_order, rate), zp)?;
    let eda = apply_filter(&eda, &FilterSpec::bandpass(0.05, 1.0, order, rate), zp)?;

    let ax = to_rate(rec, Channel::AccX, rate, ResampleMethod::Polyphase)?;
    let ay = to_rate(rec, Channel::AccY, rate, ResampleMethod::Polyphase)?;
    let az = to_rate(rec, Channel::AccZ, rate, ResampleMethod::Polyphase)?;
    let n_acc = ax.len().min(ay.len()).min(az.len());
    let acc = net_magnitude(&ax[..n_acc], &ay[..n_acc], &az[..n_acc])?;

    let labels: Vec<i32> = if rec.label_rate_hz == rate {
        rec.labels.clone()
    } else {
        let m = resample::output_len(rec.labels.len(), rec.label_rate_hz, rate);
        (0..m)
            .map(|j| {
                let i = (j as f64 * rec.label_rate_hz / rate).round() as usize;
                rec.labels[i.min(rec.labels.len() - 1)]
            })
            .collect()
    };

    // Rounding can leave streams a sample apart; align on the shortest.
    let mut streams = vec![ecg, bvp, temp, acc, eda];
    let len = streams.iter().map(Vec::len).min().unwrap().min(labels.len());
    streams.iter_mut().for_each(|s| s.truncate(len));
    let labels = &labels[..len];

    let views: Vec<&[f32]> = streams.iter().map(Vec::as_slice).collect();
    let mut windows = segment_windows(&views, labels, &cfg.window)?;
    let pure = windows.len();

    let names: Vec<&str> = Modality::ALL.iter().map(|m| m.name()).collect();
    let (streams, stats) = baseline_zscore(&streams, &names, &windows, &rec.subject_id)?;

    let keep = reject_low_variance(
        &[
            &streams[Modality::Ecg.stats_row()],
            &streams[Modality::Bvp.stats_row()],
        ],
        &windows,
        cfg.std_threshold,
    );
    windows.retain(&keep);
    let kept = windows.len();
    Ok(SubjectWindows {
        subject_id: rec.subject_id.clone(),
        counts: WindowCounts {
            candidates: windows.candidates,
            pure,
            rejected: pure - kept,
            kept,
        },
        streams,
        windows,
        stats,
    })
}

/// Processes every record, in parallel over subjects; output order follows
/// the input.
pub fn process_all(records: &[SignalRecord], cfg: &PreprocessConfig) -> Result<Vec<SubjectWindows>> {
    cfg.window.validate()?;
    records.par_iter().map(|r| process_subject(r, cfg)).collect()
}

fn gather(subjects: &[SubjectWindows], idx: &[usize]) -> (Array3<f32>, Array2<f32>, Array1<i32>, Array1<i32>) {
    let n: usize = idx.iter().map(|&s| subjects[s].windows.len()).sum();
    let len = subjects.first().map_or(0, |s| s.windows.length);
    let nc = Modality::CHEAP.len();
    let mut x = Vec::with_capacity(n * nc * len);
    let mut y = Vec::with_capacity(n * len);
    let mut l = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for &si in idx {
        let sw = &subjects[si];
        for w in 0..sw.windows.len() {
            for m in Modality::CHEAP {
                x.extend_from_slice(sw.window(m, w));
            }
            y.extend_from_slice(sw.window(Modality::Eda, w));
            l.push(sw.windows.labels[w]);
            s.push(si as i32);
        }
    }
    (
        Array3::from_shape_vec((n, nc, len), x).expect("window buffer"),
        Array2::from_shape_vec((n, len), y).expect("target buffer"),
        Array1::from_vec(l),
        Array1::from_vec(s),
    )
}

/// The fold holding out subject `k` (0-based); its `fold_id` is `k + 1`.
pub fn build_fold(subjects: &[SubjectWindows], k: usize) -> Result<FoldArchive> {
    if subjects.len() < 2 {
        return Err(PulseError::InvalidArgument("LOSO needs at least 2 subjects".into()));
    }
    if k >= subjects.len() {
        return Err(PulseError::InvalidArgument(format!("no subject {k}")));
    }
    let train: Vec<usize> = (0..subjects.len()).filter(|&s| s != k).collect();
    let (x_train, y_train, l_train, s_train) = gather(subjects, &train);
    let (x_test, y_test, l_test, _) = gather(subjects, &[k]);
    let mut stats = Array3::zeros((subjects.len(), Modality::ALL.len(), 2));
    for (i, sw) in subjects.iter().enumerate() {
        for (r, st) in sw.stats.iter().enumerate() {
            stats[[i, r, 0]] = st.mean;
            stats[[i, r, 1]] = st.std;
        }
    }
    let fold = FoldArchive {
        fold_id: k as u32 + 1,
        subjects: subjects.iter().map(|s| s.subject_id.clone()).collect(),
        test_subject: k,
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

pub fn build_loso_folds(subjects: &[SubjectWindows]) -> Result<Vec<FoldArchive>> {
    (0..subjects.len()).map(|k| build_fold(subjects, k)).collect()
}

/// Plain-text per-subject window accounting.
pub fn summary_text(subjects: &[SubjectWindows]) -> String {
    let mut out = String::from("subject\tcandidates\tpure\trejected\tkept\n");
    let mut total = WindowCounts::default();
    for s in subjects {
        let c = s.counts;
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", s.subject_id, c.candidates, c.pure, c.rejected, c.kept);
        total.candidates += c.candidates;
        total.pure += c.pure;
        total.rejected += c.rejected;
        total.kept += c.kept;
    }
    let _ = writeln!(
        out,
        "total\t{}\t{}\t{}\t{}",
        total.candidates, total.pure, total.rejected, total.kept
    );
    out
}

/// Runs the pipeline and writes one fold archive per subject plus
/// `summary.txt` into `out_dir`.
pub fn preprocess_to_dir(records: &[SignalRecord], cfg: &PreprocessConfig, out_dir: &Path) -> Result<Vec<WindowCounts>> {
    let subjects = process_all(records, cfg)?;
    std::fs::create_dir_all(out_dir)?;
    for k in 0..subjects.len() {
        let fold = build_fold(&subjects, k)?;
        write_fold_archive(&fold, &fold_path(out_dir, fold.fold_id))?;
    }
    std::fs::write(out_dir.join("summary.txt"), summary_text(&subjects))?;
    Ok(subjects.iter().map(|s| s.counts).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, SyntheticConfig};

    fn small() -> Vec<SignalRecord> {
        generate_synthetic_dataset(&SyntheticConfig {
            n_subjects: 3,
            duration_s: 600.0,
            seed: 3,
            coupling: 0.8,
            three_class: false,
        })
        .unwrap()
    }

    fn cfg() -> PreprocessConfig {
        PreprocessConfig {
            window: WindowSpec {
                stride_samples: 640,
                ..WindowSpec::default()
            },
            ..PreprocessConfig::default()
        }
    }

    #[test]
    fn pipeline_windows_are_pure_and_normalised() {
        let subs = process_all(&small(), &cfg()).unwrap();
        for s in &subs {
            assert!(s.counts.kept > 0);
            assert_eq!(s.counts.pure, s.counts.kept + s.counts.rejected);
            assert!(s.windows.labels.iter().all(|l| [1, 2].contains(l)));
            assert!(s.streams.iter().all(|x| x.len() == s.streams[0].len()));
        }
    }

    #[test]
    fn folds_partition_windows() {
        let subs = process_all(&small(), &cfg()).unwrap();
        let folds = build_loso_folds(&subs).unwrap();
        let total: usize = subs.iter().map(|s| s.windows.len()).sum();
        assert_eq!(folds.len(), 3);
        for (k, f) in folds.iter().enumerate() {
            assert_eq!(f.fold_id as usize, k + 1);
            assert_eq!(f.n_test(), subs[k].windows.len());
            assert_eq!(f.n_train(), total - f.n_test());
            assert!(f.s_train.iter().all(|&s| s as usize != k));
        }
        assert!(build_loso_folds(&subs[..1]).is_err());
    }

    #[test]
    fn pipeline_is_deterministic() {
        let recs = small();
        let a = build_fold(&process_all(&recs, &cfg()).unwrap(), 0).unwrap();
        let b = build_fold(&process_all(&recs, &cfg()).unwrap(), 0).unwrap();
        assert_eq!(a, b);
    }
}
