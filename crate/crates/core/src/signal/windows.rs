//! Segmentation, label purity, baseline normalisation and variance rejection.
//!
//! Windows are kept as start offsets into the aligned 64 Hz streams; data is
//! only copied when folds are materialised.

use serde::{Deserialize, Serialize};

use crate::dataset::{ChannelStats, WINDOW_LEN};
use crate::error::{PulseError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub length_samples: usize,
    pub stride_samples: usize,
    pub target_rate_hz: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            length_samples: WINDOW_LEN,
            stride_samples: 16,
            target_rate_hz: 64.0,
        }
    }
}

impl WindowSpec {
    /// Spec from durations in seconds at `target_rate_hz`.
    pub fn from_seconds(window_s: f64, stride_s: f64, target_rate_hz: f64) -> Result<Self> {
        let spec = Self {
            length_samples: (window_s * target_rate_hz).round() as usize,
            stride_samples: (stride_s * target_rate_hz).round() as usize,
            target_rate_hz,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_samples == 0 || self.stride_samples == 0 {
            return Err(PulseError::InvalidArgument("window length and stride must be positive".into()));
        }
        if self.stride_samples > self.length_samples {
            return Err(PulseError::InvalidArgument("stride longer than the window".into()));
        }
        if !(self.target_rate_hz > 0.0) {
            return Err(PulseError::InvalidArgument("target rate must be positive".into()));
        }
        Ok(())
    }

    /// Number of candidate windows in a stream of `len` samples.
    pub fn candidate_count(&self, len: usize) -> usize {
        if len < self.length_samples {
            0
        } else {
            (len - self.length_samples) / self.stride_samples + 1
        }
    }
}

/// Label-pure windows of one subject.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowSet {
    pub length: usize,
    pub starts: Vec<usize>,
    pub labels: Vec<i32>,
    /// Candidates before the purity filter.
    pub candidates: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Keeps the windows whose mask entry is true.
    pub fn retain(&mut self, keep: &[bool]) {
        let mut i = 0;
        self.starts.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut i = 0;
        self.labels.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }
}

pub fn net_magnitude(x: &[f32], y: &[f32], z: &[f32]) -> Result<Vec<f32>> {
    if x.len() != y.len() || x.len() != z.len() {
        return Err(PulseError::Shape(format!(
            "accelerometer axes have lengths {}, {}, {}",
            x.len(),
            y.len(),
            z.len()
        )));
    }
    Ok(x.iter()
        .zip(y)
        .zip(z)
        .map(|((&a, &b), &c)| {
            let (a, b, c) = (a as f64, b as f64, c as f64);
            (a * a + b * b + c * c).sqrt() as f32
        })
        .collect())
}

/// Candidate windows whose every label sample is the same value in {1,2,3}.
pub fn segment_windows(streams: &[&[f32]], labels: &[i32], spec: &WindowSpec) -> Result<WindowSet> {
    spec.validate()?;
    let len = labels.len();
    if let Some(s) = streams.iter().find(|s| s.len() != len) {
        return Err(PulseError::Shape(format!(
            "stream of {} samples does not match {} labels",
            s.len(),
            len
        )));
    }
    // run_end[i]: first index after i whose label differs from labels[i]
    let mut run_end = vec![len; len];
    for i in (0..len.saturating_sub(1)).rev() {
        run_end[i] = if labels[i + 1] == labels[i] { run_end[i + 1] } else { i + 1 };
    }
    let candidates = spec.candidate_count(len);
    let mut set = WindowSet {
        length: spec.length_samples,
        candidates,
        ..Default::default()
    };
    for k in 0..candidates {
        let s = k * spec.stride_samples;
        let l = labels[s];
        if (1..=3).contains(&l) && run_end[s] >= s + spec.length_samples {
            set.starts.push(s);
            set.labels.push(l);
        }
    }
    Ok(set)
}

/// Population standard deviation, two-pass in `f64`.
pub fn std_dev(x: &[f32]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    (x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Keep-mask: a window survives iff every listed stream has std ≥ `threshold`.
/// The comparison is done at `f32` precision, the precision of the data.
pub fn reject_low_variance(streams: &[&[f32]], windows: &WindowSet, threshold: f64) -> Vec<bool> {
    windows
        .starts
        .iter()
        .map(|&s| {
            streams
                .iter()
                .all(|x| std_dev(&x[s..s + windows.length]) as f32 >= threshold as f32)
        })
        .collect()
}

/// Mean and population std over the concatenation of the label-1 windows.
/// Overlapping windows count each shared sample once per window.
pub fn baseline_stats(stream: &[f32], windows: &WindowSet) -> Option<(f64, f64)> {
    let mut mult = vec![0i64; stream.len() + 1];
    let mut count = 0usize;
    for (&s, &l) in windows.starts.iter().zip(&windows.labels) {
        if l == 1 {
            mult[s] += 1;
            mult[s + windows.length] -= 1;
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let mut w = 0i64;
    let weights: Vec<f64> = mult[..stream.len()]
        .iter()
        .map(|d| {
            w += d;
            w as f64
        })
        .collect();
    let total = (count * windows.length) as f64;
    let mean = stream
        .iter()
        .zip(&weights)
        .map(|(&x, &w)| w * x as f64)
        .sum::<f64>()
        / total;
    let var = stream
        .iter()
        .zip(&weights)
        .map(|(&x, &w)| w * (x as f64 - mean).powi(2))
        .sum::<f64>()
        / total;
    Some((mean, var.sqrt()))
}

/// Z-scores each stream with its subject's baseline statistics.
///
/// Normalising the whole stream is the same as normalising every window,
/// since windows are views into it.
pub fn baseline_zscore(
    streams: &[Vec<f32>],
    names: &[&str],
    windows: &WindowSet,
    subject_id: &str,
) -> Result<(Vec<Vec<f32>>, Vec<ChannelStats>)> {
    let mut out = Vec::with_capacity(streams.len());
    let mut stats = Vec::with_capacity(streams.len());
    for (x, name) in streams.iter().zip(names) {
        let (mean, std) =
            baseline_stats(x, windows).ok_or_else(|| PulseError::NoBaseline(subject_id.to_string()))?;
        if !(std >= 1e-8) {
            return Err(PulseError::DegenerateChannel {
                subject: subject_id.to_string(),
                channel: name.to_string(),
                std,
            });
        }
        out.push(x.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect());
        stats.push(ChannelStats {
            mean: mean as f32,
            std: std as f32,
        });
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn spec() -> WindowSpec {
        WindowSpec::default()
    }

    #[test]
    fn window_count_arithmetic() {
        assert_eq!(spec().candidate_count(3840), 1);
        assert_eq!(spec().candidate_count(3856), 2);
        assert_eq!(spec().candidate_count(3839), 0);
        let labels = vec![1; 3856];
        let x = vec![0.0f32; 3856];
        let set = segment_windows(&[&x], &labels, &spec()).unwrap();
        assert_eq!((set.candidates, set.len()), (2, 2));
    }

    #[test]
    fn short_stream_gives_empty_set() {
        let set = segment_windows(&[], &[1; 100], &spec()).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn alternating_labels_keep_nothing() {
        let labels: Vec<i32> = (0..64 * 600).map(|i| if (i / (64 * 30)) % 2 == 0 { 1 } else { 2 }).collect();
        let set = segment_windows(&[], &labels, &spec()).unwrap();
        assert!(set.candidates > 0);
        assert!(set.is_empty());
    }

    #[test]
    fn label_zero_and_four_windows_are_dropped() {
        for bad in [0, 4] {
            let set = segment_windows(&[], &vec![bad; 4000], &spec()).unwrap();
            assert!(set.is_empty());
        }
    }

    #[test]
    fn stream_length_mismatch_is_error() {
        let x = vec![0.0f32; 10];
        assert!(segment_windows(&[&x], &[1; 11], &spec()).is_err());
    }

    #[test]
    fn net_magnitude_examples() {
        assert_eq!(net_magnitude(&[3.0], &[4.0], &[0.0]).unwrap(), vec![5.0]);
        assert_eq!(net_magnitude(&[0.0], &[0.0], &[0.0]).unwrap(), vec![0.0]);
        assert!(net_magnitude(&[0.0], &[0.0, 1.0], &[0.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<[f32; 3]> = (0..100).map(|_| rng.gen()).collect();
        let x: Vec<f32> = v.iter().map(|a| a[0]).collect();
        let y: Vec<f32> = v.iter().map(|a| a[1]).collect();
        let z: Vec<f32> = v.iter().map(|a| a[2]).collect();
        let m = net_magnitude(&x, &y, &z).unwrap();
        for (a, r) in v.iter().zip(m) {
            let want = ((a[0] as f64).powi(2) + (a[1] as f64).powi(2) + (a[2] as f64).powi(2)).sqrt() as f32;
            assert_eq!(r, want);
        }
    }

    fn one_window(x: Vec<f32>) -> (Vec<f32>, WindowSet) {
        let set = WindowSet {
            length: x.len(),
            starts: vec![0],
            labels: vec![1],
            candidates: 1,
        };
        (x, set)
    }

    #[test]
    fn rejection_boundary_and_constant() {
        let (flat, set) = one_window(vec![1.0; 3840]);
        let (noisy, _) = one_window((0..3840).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect());
        assert_eq!(reject_low_variance(&[&flat, &noisy], &set, 0.02), vec![false]);
        let (edge, _) = one_window((0..3840).map(|i| if i % 2 == 0 { 0.02 } else { -0.02 }).collect());
        assert_eq!(reject_low_variance(&[&edge, &edge], &set, 0.02), vec![true]);
    }

    #[test]
    fn unit_noise_windows_all_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f32> = (0..3840 * 4).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let set = segment_windows(&[&x], &vec![1; x.len()], &WindowSpec {
            stride_samples: 640,
            ..spec()
        })
        .unwrap();
        assert!(reject_low_variance(&[&x, &x], &set, 0.02).iter().all(|&k| k));
    }

    #[test]
    fn baseline_stats_match_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 3840 * 3;
        let x: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let labels: Vec<i32> = (0..n).map(|i| if i < 2 * 3840 { 1 } else { 2 }).collect();
        let spec = WindowSpec {
            stride_samples: 1000,
            ..spec()
        };
        let set = segment_windows(&[&x], &labels, &spec).unwrap();
        let (mean, std) = baseline_stats(&x, &set).unwrap();
        // brute force: literally concatenate
        let cat: Vec<f64> = set
            .starts
            .iter()
            .zip(&set.labels)
            .filter(|(_, &l)| l == 1)
            .flat_map(|(&s, _)| x[s..s + 3840].iter().map(|&v| v as f64))
            .collect();
        let m = cat.iter().sum::<f64>() / cat.len() as f64;
        let sd = (cat.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cat.len() as f64).sqrt();
        assert!((mean - m).abs() < 1e-10 && (std - sd).abs() < 1e-10);
    }

    #[test]
    fn zscore_errors() {
        let x = vec![vec![0.5f32; 3840]];
        let (_, set) = one_window(x[0].clone());
        assert!(matches!(
            baseline_zscore(&x, &["ECG"], &set, "S1"),
            Err(PulseError::DegenerateChannel { .. })
        ));
        let mut set2 = set.clone();
        set2.labels = vec![2];
        assert!(matches!(
            baseline_zscore(&x, &["ECG"], &set2, "S1"),
            Err(PulseError::NoBaseline(_))
        ));
    }
}
