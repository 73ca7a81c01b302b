//! Rate conversion: polyphase FIR for band-limited channels, linear
//! interpolation for slow ones.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMethod {
    Polyphase,
    Linear,
}

pub fn output_len(n: usize, src_hz: f64, dst_hz: f64) -> usize {
    (n as f64 * dst_hz / src_hz).round() as usize
}

pub fn resample(signal: &[f32], src_hz: f64, dst_hz: f64, method: ResampleMethod) -> Result<Vec<f32>> {
    if !(src_hz > 0.0 && dst_hz > 0.0) || !src_hz.is_finite() || !dst_hz.is_finite() {
        return Err(PulseError::InvalidArgument("sample rates must be positive".into()));
    }
    if signal.is_empty() {
        return Err(PulseError::InvalidArgument("cannot resample an empty signal".into()));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(PulseError::NonFinite("resample input".into()));
    }
    let m = output_len(signal.len(), src_hz, dst_hz);
    Ok(match method {
        ResampleMethod::Linear => linear(signal, src_hz, dst_hz, m),
        ResampleMethod::Polyphase => {
            let (up, down) = ratio(src_hz, dst_hz)?;
            if up == down {
                signal.to_vec()
            } else {
                polyphase(signal, up, down, m)
            }
        }
    })
}

/// Piecewise-linear interpolation; the last segment is extended past the
/// final sample so linear inputs stay exact.
fn linear(x: &[f32], src: f64, dst: f64, m: usize) -> Vec<f32> {
    let n = x.len();
    if n == 1 {
        return vec![x[0]; m];
    }
    (0..m)
        .map(|j| {
            let p = j as f64 * src / dst;
            let i = (p.floor() as usize).min(n - 2);
            let f = p - i as f64;
            (x[i] as f64 + f * (x[i + 1] as f64 - x[i] as f64)) as f32
        })
        .collect()
}

/// Integer up/down factors with `dst/src = up/down`.
fn ratio(src: f64, dst: f64) -> Result<(usize, usize)> {
    const SCALE: f64 = 1000.0;
    let (a, b) = ((dst * SCALE).round(), (src * SCALE).round());
    if (a / SCALE - dst).abs() > 1e-9 * dst || (b / SCALE - src).abs() > 1e-9 * src {
        return Err(PulseError::InvalidArgument(format!(
            "rates {src} -> {dst} Hz are not representable in millihertz"
        )));
    }
    let (a, b) = (a as u64, b as u64);
    let g = gcd(a, b);
    Ok(((a / g) as usize, (b / g) as usize))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc low-pass with cutoff at `min(src, dst)/2`, each
/// polyphase branch normalised to unit DC gain.
fn design_fir(up: usize, down: usize) -> (Vec<f64>, usize) {
    let max = up.max(down);
    let half = 10 * max;
    let beta = 5.0;
    let fc = 1.0 / max as f64;
    let len = 2 * half + 1;
    let mut h: Vec<f64> = (0..len)
        .map(|k| {
            let t = k as f64 - half as f64;
            let sinc = if t == 0.0 { 1.0 } else { (PI * fc * t).sin() / (PI * fc * t) };
            let r = t / half as f64;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(beta);
            fc * sinc * w
        })
        .collect();
    for phase in 0..up {
        let s: f64 = h.iter().skip(phase).step_by(up).sum();
        if s != 0.0 {
            for v in h.iter_mut().skip(phase).step_by(up) {
                *v /= s;
            }
        }
    }
    (h, half)
}

/// Upsample by `up`, low-pass, downsample by `down`. Edges are extended with
/// the boundary sample so a constant input stays constant.
fn polyphase(x: &[f32], up: usize, down: usize, m: usize) -> Vec<f32> {
    let (h, half) = design_fir(up, down);
    let n = x.len() as i64;
    let at = |i: i64| x[i.clamp(0, n - 1) as usize] as f64;
    (0..m)
        .map(|j| {
            // position in the upsampled stream, centred on the filter
            let c = (j * down + half) as i64;
            // only taps landing on a multiple of `up` see a nonzero sample
            let k0 = c.rem_euclid(up as i64) as usize;
            let mut acc = 0.0;
            let mut k = k0;
            while k < h.len() {
                let idx = (c - k as i64) / up as i64;
                acc += h[k] * at(idx);
                k += up;
            }
            acc as f32
        })
        .collect()
}
