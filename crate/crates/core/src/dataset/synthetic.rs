//! Desk-scale synthetic stand-in for a wearable stress dataset.
//!
//! A latent arousal process follows a block protocol (baseline, stress and
//! optionally amusement, separated by short transient gaps). Every channel is
//! channel-specific filtered noise plus a `coupling`-scaled response to the
//! smoothed arousal, at the native rates of a chest/wrist recording setup:
//!
//! | channel | rate | arousal response |
//! |---------|------|------------------|
//! | ECG     | 700 Hz | heart rate up, small level shift |
//! | BVP     | 64 Hz  | heart rate up, pulse amplitude down |
//! | ACC xyz | 32 Hz  | movement energy up |
//! | TEMP    | 4 Hz   | skin temperature down |
//! | EDA     | 4 Hz   | tonic level up, SCR rate and size up |
//!
//! EDA carries the largest gain, so it is the most informative channel.
//! With `coupling = 0` no channel depends on the protocol.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Channel, ChannelStream, SignalRecord, WINDOW_LEN};
use crate::error::{PulseError, Result};

pub const LABEL_RATE_HZ: f64 = 64.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// Strength in `[0, 1]` of the arousal drive on every channel.
    pub coupling: f64,
    /// Adds an amusement state with intermediate arousal (label 3).
    #[serde(default)]
    pub three_class: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_subjects: 6,
            duration_s: 1200.0,
            seed: 0,
            coupling: 0.8,
            three_class: false,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 3 {
            return Err(PulseError::InvalidArgument("need at least 3 subjects".into()));
        }
        let min = 3.0 * WINDOW_LEN as f64 / LABEL_RATE_HZ;
        if !(self.duration_s >= min) {
            return Err(PulseError::InvalidArgument(format!(
                "duration must be at least {min} s"
            )));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(PulseError::InvalidArgument("coupling must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Relative arousal gain per channel family.
const GAIN_EDA: f64 = 1.0;
const GAIN_ECG: f64 = 0.5;
const GAIN_BVP: f64 = 0.45;
const GAIN_TEMP: f64 = 0.3;
const GAIN_ACC: f64 = 0.3;

const TRANSIENT_S: f64 = 15.0;
const AROUSAL_TAU_S: f64 = 20.0;

/// Generates `cfg.n_subjects` records; a pure function of `cfg`.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Vec<SignalRecord>> {
    cfg.validate()?;
    Ok((0..cfg.n_subjects)
        .map(|k| {
            let seed = cfg
                .seed
                .wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            generate_subject(cfg, k, &mut ChaCha8Rng::seed_from_u64(seed))
        })
        .collect())
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Ornstein–Uhlenbeck path with stationary std `sd` and time constant `tau`.
fn ou(rng: &mut impl Rng, n: usize, rate: f64, tau: f64, sd: f64) -> Vec<f64> {
    let a = (-1.0 / (rate * tau)).exp();
    let b = sd * (1.0 - a * a).sqrt();
    let mut x = sd * normal(rng);
    (0..n)
        .map(|_| {
            x = a * x + b * normal(rng);
            x
        })
        .collect()
}

/// Unit-variance white noise low-passed with a one-pole filter at `fc`.
fn lowpassed_noise(rng: &mut impl Rng, n: usize, rate: f64, fc: f64) -> Vec<f64> {
    let a = (-2.0 * std::f64::consts::PI * fc / rate).exp();
    let gain = ((1.0 + a) / (1.0 - a)).sqrt();
    let mut y = 0.0;
    (0..n)
        .map(|_| {
            y = a * y + (1.0 - a) * normal(rng);
            y * gain
        })
        .collect()
}

struct Protocol {
    labels: Vec<i32>,
    /// Smoothed arousal on the label grid.
    arousal: Vec<f64>,
}

fn protocol(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Protocol {
    let n = (cfg.duration_s * LABEL_RATE_HZ).round() as usize;
    let n_blocks = ((cfg.duration_s / 240.0).round() as usize).max(3);
    let cycle: &[i32] = if cfg.three_class { &[1, 2, 1, 3] } else { &[1, 2] };
    let weights: Vec<f64> = (0..n_blocks).map(|_| rng.gen_range(0.8..1.2)).collect();
    let total: f64 = weights.iter().sum();
    let mut labels = vec![0i32; n];
    let mut target = vec![0.0f64; n];
    let mut start = 0usize;
    for (b, w) in weights.iter().enumerate() {
        let len = if b + 1 == n_blocks {
            n - start
        } else {
            ((w / total) * n as f64).round() as usize
        };
        let end = (start + len).min(n);
        let label = cycle[b % cycle.len()];
        let level = match label {
            2 => 1.0,
            3 => 0.5,
            _ => 0.0,
        };
        let gap = if b == 0 {
            0
        } else {
            (TRANSIENT_S * LABEL_RATE_HZ) as usize
        };
        for i in start..end {
            labels[i] = if i < start + gap { 0 } else { label };
            target[i] = level;
        }
        start = end;
    }
    let a = (-1.0 / (LABEL_RATE_HZ * AROUSAL_TAU_S)).exp();
    let mut s = target[0];
    let arousal = target
        .iter()
        .map(|&t| {
            s = a * s + (1.0 - a) * t;
            s
        })
        .collect();
    Protocol { labels, arousal }
}

fn arousal_at(p: &Protocol, t: f64) -> f64 {
    let i = ((t * LABEL_RATE_HZ) as usize).min(p.arousal.len() - 1);
    p.arousal[i]
}

fn gauss(x: f64, mu: f64, sigma: f64) -> f64 {
    (-0.5 * ((x - mu) / sigma).powi(2)).exp()
}

fn generate_subject(cfg: &SyntheticConfig, k: usize, rng: &mut ChaCha8Rng) -> SignalRecord {
    let p = protocol(cfg, rng);
    let dur = cfg.duration_s;
    let c = cfg.coupling;
    // subject-level responsiveness and physiology
    let resp: f64 = rng.gen_range(0.7..1.3);
    let drive = |gain: f64, a: f64| c * gain * resp * a;

    let mut channels = BTreeMap::new();

    // --- heart: beat times shared by ECG and BVP -------------------------
    let ecg_rate = 700.0;
    let n_ecg = (dur * ecg_rate).round() as usize;
    let hr0: f64 = rng.gen_range(62.0..80.0);
    let hrv = ou(rng, n_ecg, ecg_rate, 30.0, 4.0);
    let mut beats = Vec::new();
    let mut phase: f64 = rng.gen_range(0.0..1.0);
    for (i, dv) in hrv.iter().enumerate() {
        let t = i as f64 / ecg_rate;
        let a = arousal_at(&p, t);
        let hr = hr0 + dv + 18.0 * drive(GAIN_ECG, a);
        phase += hr / 60.0 / ecg_rate;
        if phase >= 1.0 {
            phase -= 1.0;
            beats.push(t);
        }
    }

    let wander = lowpassed_noise(rng, n_ecg, ecg_rate, 0.3);
    let mut ecg: Vec<f64> = (0..n_ecg)
        .map(|i| {
            let t = i as f64 / ecg_rate;
            0.2 * wander[i] + 0.03 * normal(rng) + 0.5 * drive(GAIN_ECG, arousal_at(&p, t))
        })
        .collect();
    let qrs_amp: f64 = rng.gen_range(0.8..1.2);
    for &tb in &beats {
        let lo = (((tb - 0.3) * ecg_rate).max(0.0)) as usize;
        let hi = (((tb + 0.45) * ecg_rate) as usize).min(n_ecg);
        for (i, v) in ecg.iter_mut().enumerate().take(hi).skip(lo) {
            let t = i as f64 / ecg_rate;
            *v += 0.1 * gauss(t, tb - 0.2, 0.025)
                + qrs_amp * gauss(t, tb, 0.012)
                + 0.25 * gauss(t, tb + 0.25, 0.04);
        }
    }
    channels.insert(Channel::Ecg, stream(ecg, ecg_rate));

    let bvp_rate = 64.0;
    let n_bvp = (dur * bvp_rate).round() as usize;
    let amp0: f64 = rng.gen_range(30.0..60.0);
    let amp_noise = ou(rng, n_bvp, bvp_rate, 20.0, 0.1);
    let mut bvp: Vec<f64> = (0..n_bvp)
        .map(|i| {
            let t = i as f64 / bvp_rate;
            2.0 * normal(rng) + 5.0 * drive(GAIN_BVP, arousal_at(&p, t))
        })
        .collect();
    for &tb in &beats {
        let onset = tb + 0.25;
        let lo = (onset * bvp_rate).ceil() as usize;
        let hi = (((onset + 1.0) * bvp_rate) as usize).min(n_bvp);
        for i in lo..hi {
            let t = i as f64 / bvp_rate;
            let tau = t - onset;
            let a = arousal_at(&p, t);
            let amp = amp0 * (1.0 + amp_noise[i]) * (1.0 - 0.35 * drive(GAIN_BVP, a));
            *bvp.get_mut(i).unwrap() += amp
                * ((tau / 0.15) * (1.0 - tau / 0.15).exp() + 0.2 * gauss(tau, 0.45, 0.06));
        }
    }
    channels.insert(Channel::Bvp, stream(bvp, bvp_rate));

    // --- wrist accelerometer ----------------------------------------------
    let acc_rate = 32.0;
    let n_acc = (dur * acc_rate).round() as usize;
    let mut grav = [normal(rng), normal(rng), normal(rng)];
    let gn = grav.iter().map(|v| v * v).sum::<f64>().sqrt();
    grav.iter_mut().for_each(|v| *v *= 64.0 / gn);
    let sway: Vec<Vec<f64>> = (0..3).map(|_| ou(rng, n_acc, acc_rate, 60.0, 6.0)).collect();
    let moves: Vec<Vec<f64>> = (0..3)
        .map(|_| lowpassed_noise(rng, n_acc, acc_rate, 5.0))
        .collect();
    for (axis, ch) in [Channel::AccX, Channel::AccY, Channel::AccZ].into_iter().enumerate() {
        let v: Vec<f64> = (0..n_acc)
            .map(|i| {
                let t = i as f64 / acc_rate;
                let d = drive(GAIN_ACC, arousal_at(&p, t));
                grav[axis] + sway[axis][i] + 3.0 * (1.0 + d) * moves[axis][i] + 2.0 * d
            })
            .collect();
        channels.insert(ch, stream(v, acc_rate));
    }

    // --- skin temperature -------------------------------------------------
    let slow_rate = 4.0;
    let n_slow = (dur * slow_rate).round() as usize;
    let t0: f64 = rng.gen_range(32.5..34.0);
    let tdrift = ou(rng, n_slow, slow_rate, 200.0, 0.15);
    let temp: Vec<f64> = (0..n_slow)
        .map(|i| {
            let t = i as f64 / slow_rate;
            t0 + tdrift[i] - 0.3 * drive(GAIN_TEMP, arousal_at(&p, t)) + 0.01 * normal(rng)
        })
        .collect();
    channels.insert(Channel::Temp, stream(temp, slow_rate));

    // --- electrodermal activity -------------------------------------------
    let scl0: f64 = rng.gen_range(1.0..6.0);
    let edrift = ou(rng, n_slow, slow_rate, 120.0, 0.3);
    let mut eda: Vec<f64> = (0..n_slow)
        .map(|i| {
            let t = i as f64 / slow_rate;
            scl0 + edrift[i] + 2.0 * drive(GAIN_EDA, arousal_at(&p, t)) + 0.01 * normal(rng)
        })
        .collect();
    let (tr, td): (f64, f64) = (0.75, 2.0);
    let peak_t = (td * tr / (td - tr)) * (td / tr).ln();
    let peak = (-peak_t / td).exp() - (-peak_t / tr).exp();
    let span = (20.0 * slow_rate) as usize;
    for i in 0..n_slow {
        let t = i as f64 / slow_rate;
        let a = arousal_at(&p, t);
        let rate_per_min = 1.5 + 6.0 * drive(GAIN_EDA, a);
        if rng.gen::<f64>() < rate_per_min / 60.0 / slow_rate {
            let amp = rng.gen_range(0.05..0.3) * (1.0 + c * a);
            for (j, v) in eda.iter_mut().enumerate().skip(i).take(span) {
                let tau = (j - i) as f64 / slow_rate;
                *v += amp * ((-tau / td).exp() - (-tau / tr).exp()) / peak;
            }
        }
    }
    channels.insert(Channel::Eda, stream(eda, slow_rate));

    SignalRecord {
        subject_id: format!("S{}", k + 1),
        channels,
        labels: p.labels,
        label_rate_hz: LABEL_RATE_HZ,
    }
}

fn stream(v: Vec<f64>, rate_hz: f64) -> ChannelStream {
    ChannelStream {
        samples: v.into_iter().map(|x| x as f32).collect(),
        rate_hz,
    }
}
