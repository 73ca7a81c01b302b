//! Butterworth IIR filters in second-order sections.
//!
//! The analog prototype is mapped with the bilinear transform after
//! pre-warping the cutoffs, so the digital magnitude equals the analog
//! Butterworth magnitude at the warped frequency.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Highpass,
    Bandpass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub order: usize,
    pub cutoffs_hz: Vec<f64>,
    pub rate_hz: f64,
}

/// `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
pub type Section = [f64; 6];

impl FilterSpec {
    pub fn highpass(cutoff_hz: f64, order: usize, rate_hz: f64) -> Self {
        Self {
            kind: FilterKind::Highpass,
            order,
            cutoffs_hz: vec![cutoff_hz],
            rate_hz,
        }
    }

    pub fn bandpass(low_hz: f64, high_hz: f64, order: usize, rate_hz: f64) -> Self {
        Self {
            kind: FilterKind::Bandpass,
            order,
            cutoffs_hz: vec![low_hz, high_hz],
            rate_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(PulseError::InvalidArgument("filter order must be at least 1".into()));
        }
        if !(self.rate_hz > 0.0) || !self.rate_hz.is_finite() {
            return Err(PulseError::InvalidArgument("filter rate must be positive".into()));
        }
        let want = match self.kind {
            FilterKind::Highpass => 1,
            FilterKind::Bandpass => 2,
        };
        if self.cutoffs_hz.len() != want {
            return Err(PulseError::InvalidArgument(format!(
                "{:?} filter takes {want} cutoff(s)",
                self.kind
            )));
        }
        let nyq = self.rate_hz / 2.0;
        for &c in &self.cutoffs_hz {
            if !(c > 0.0 && c < nyq) {
                return Err(PulseError::InvalidArgument(format!(
                    "cutoff {c} Hz must lie strictly inside (0, {nyq}) Hz"
                )));
            }
        }
        if want == 2 && self.cutoffs_hz[0] >= self.cutoffs_hz[1] {
            return Err(PulseError::InvalidArgument("bandpass needs low < high".into()));
        }
        Ok(())
    }

    fn warp(&self, f: f64) -> f64 {
        2.0 * self.rate_hz * (PI * f / self.rate_hz).tan()
    }

    /// Butterworth magnitude of the designed (single-pass) filter at `f` Hz.
    pub fn analytic_magnitude(&self, f: f64) -> f64 {
        let w = self.warp(f);
        let n = self.order as i32;
        let omega = match self.kind {
            FilterKind::Highpass => {
                if w == 0.0 {
                    return 0.0;
                }
                self.warp(self.cutoffs_hz[0]) / w
            }
            FilterKind::Bandpass => {
                if w == 0.0 {
                    return 0.0;
                }
                let (wl, wh) = (self.warp(self.cutoffs_hz[0]), self.warp(self.cutoffs_hz[1]));
                (w * w - wl * wh) / (w * (wh - wl))
            }
        };
        1.0 / (1.0 + omega.abs().powi(2 * n)).sqrt()
    }
}

/// Designs the filter as a cascade of second-order sections.
pub fn design(spec: &FilterSpec) -> Result<Vec<Section>> {
    spec.validate()?;
    let n = spec.order;
    let fs2 = 2.0 * spec.rate_hz;
    let proto: Vec<Complex64> = (1..=n)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + n - 1) as f64 / (2 * n) as f64))
        .collect();
    let analog: Vec<Complex64> = match spec.kind {
        FilterKind::Highpass => {
            let wc = spec.warp(spec.cutoffs_hz[0]);
            proto.iter().map(|p| wc / p).collect()
        }
        FilterKind::Bandpass => {
            let (wl, wh) = (spec.warp(spec.cutoffs_hz[0]), spec.warp(spec.cutoffs_hz[1]));
            let (bw, w0sq) = (wh - wl, wl * wh);
            proto
                .iter()
                .flat_map(|p| {
                    let pb = p * bw;
                    let disc = (pb * pb - 4.0 * w0sq).sqrt();
                    [(pb + disc) / 2.0, (pb - disc) / 2.0]
                })
                .collect()
        }
    };
    let digital: Vec<Complex64> = analog.iter().map(|s| (fs2 + s) / (fs2 - s)).collect();

    // Group poles: conjugate pairs first, then reals two at a time.
    let tol = 1e-10;
    let mut complex: Vec<Complex64> = digital.iter().copied().filter(|p| p.im > tol).collect();
    complex.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    let mut reals: Vec<f64> = digital.iter().filter(|p| p.im.abs() <= tol).map(|p| p.re).collect();
    reals.sort_by(|a, b| b.abs().total_cmp(&a.abs()));

    let mut sections: Vec<Section> = Vec::new();
    let mut push = |npoles: usize, a1: f64, a2: f64| {
        let b = match (spec.kind, npoles) {
            (FilterKind::Highpass, 2) => [1.0, -2.0, 1.0],
            (FilterKind::Highpass, _) => [1.0, -1.0, 0.0],
            (FilterKind::Bandpass, _) => [1.0, 0.0, -1.0],
        };
        sections.push([b[0], b[1], b[2], 1.0, a1, a2]);
    };
    for p in &complex {
        push(2, -2.0 * p.re, p.norm_sqr());
    }
    for pair in reals.chunks(2) {
        match pair {
            [p1, p2] => push(2, -(p1 + p2), p1 * p2),
            [p] => push(1, -p, 0.0),
            _ => unreachable!(),
        }
    }

    let f_ref = match spec.kind {
        FilterKind::Highpass => spec.rate_hz / 2.0,
        FilterKind::Bandpass => {
            let w0 = (spec.warp(spec.cutoffs_hz[0]) * spec.warp(spec.cutoffs_hz[1])).sqrt();
            (w0 / fs2).atan() * spec.rate_hz / PI
        }
    };
    let g = sos_magnitude(&sections, f_ref, spec.rate_hz);
    let per = g.powf(-1.0 / sections.len() as f64);
    for s in &mut sections {
        for c in &mut s[..3] {
            *c *= per;
        }
    }
    Ok(sections)
}

/// Magnitude of a section cascade at `f` Hz.
pub fn sos_magnitude(sos: &[Section], f: f64, rate_hz: f64) -> f64 {
    let z1 = Complex64::from_polar(1.0, -2.0 * PI * f / rate_hz);
    let z2 = z1 * z1;
    sos.iter()
        .map(|s| {
            let num = s[0] + z1 * s[1] + z2 * s[2];
            let den = s[3] + z1 * s[4] + z2 * s[5];
            (num / den).norm()
        })
        .product()
}

/// Direct-form II transposed cascade; `zi` holds per-section initial states.
pub fn sosfilt(sos: &[Section], x: &[f64], zi: Option<&[[f64; 2]]>) -> Vec<f64> {
    let mut y = x.to_vec();
    for (k, s) in sos.iter().enumerate() {
        let [mut z1, mut z2] = zi.map_or([0.0, 0.0], |z| z[k]);
        for v in y.iter_mut() {
            let xi = *v;
            let yi = s[0] * xi + z1;
            z1 = s[1] * xi - s[4] * yi + z2;
            z2 = s[2] * xi - s[5] * yi;
            *v = yi;
        }
    }
    y
}

/// Per-section states that make the cascade start in steady state for a
/// constant input of `x0`.
fn steady_state(sos: &[Section], x0: f64) -> Vec<[f64; 2]> {
    let mut level = x0;
    sos.iter()
        .map(|s| {
            let gain = (s[0] + s[1] + s[2]) / (1.0 + s[4] + s[5]);
            let y = gain * level;
            let z2 = s[2] * level - s[5] * y;
            let z1 = s[1] * level - s[4] * y + z2;
            level = y;
            [z1, z2]
        })
        .collect()
}

/// Forward-backward filtering with odd-reflection padding.
pub fn filtfilt(sos: &[Section], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let pad = (3 * (2 * sos.len() + 1)).min(n.saturating_sub(1));
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = steady_state(sos, ext[0]);
    let mut y = sosfilt(sos, &ext, Some(&zi));
    y.reverse();
    let zi = steady_state(sos, y[0]);
    let mut y = sosfilt(sos, &y, Some(&zi));
    y.reverse();
    y[pad..pad + n].to_vec()
}

/// Filters `signal`; forward-backward when `zero_phase`, which squares the
/// magnitude response.
pub fn apply_filter(signal: &[f32], spec: &FilterSpec, zero_phase: bool) -> Result<Vec<f32>> {
    let sos = design(spec)?;
    if signal.len() <= 3 * spec.order {
        return Err(PulseError::InvalidArgument(format!(
            "signal of {} samples too short for an order-{} filter",
            signal.len(),
            spec.order
        )));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(PulseError::NonFinite("filter input".into()));
    }
    let x: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
    let y = if zero_phase {
        filtfilt(&sos, &x)
    } else {
        sosfilt(&sos, &x, None)
    };
    Ok(y.into_iter().map(|v| v as f32).collect())
}
