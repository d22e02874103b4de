//! Digital Butterworth low-pass filter as a cascade of second-order sections.
//!
//! Coefficients come from the analog prototype through the bilinear
//! transform with a pre-warped cutoff. Each section has unity DC gain.
//! Zero-phase application runs the cascade forward and then backward over a
//! mirror-padded copy of the input, starting every section from its steady
//! state for the first padded sample.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::DecomposeError;

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 100.0;
pub const DEFAULT_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSpec {
    pub cutoff_hz: f64,
    pub sample_rate_hz: f64,
    pub order: usize,
    pub zero_phase: bool,
}

impl FilterSpec {
    pub fn lowpass(cutoff_hz: f64) -> Self {
        Self {
            cutoff_hz,
            ..Self::default()
        }
    }

    pub fn with_cutoff(self, cutoff_hz: f64) -> Self {
        Self { cutoff_hz, ..self }
    }

    pub fn validate(&self) -> Result<(), DecomposeError> {
        if self.order == 0 {
            return Err(DecomposeError::InvalidOrder);
        }
        let nyquist = self.sample_rate_hz / 2.0;
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0)
            || !(self.cutoff_hz > 0.0 && self.cutoff_hz < nyquist)
        {
            return Err(DecomposeError::InvalidCutoff {
                cutoff_hz: self.cutoff_hz,
                nyquist_hz: nyquist,
            });
        }
        Ok(())
    }

    /// Samples of reflected padding added at each end for zero-phase runs.
    pub fn pad_len(&self) -> usize {
        3 * self.order
    }

    pub fn min_len(&self) -> usize {
        3 * self.order
    }
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            cutoff_hz: 10.0,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            order: DEFAULT_ORDER,
            zero_phase: true,
        }
    }
}

/// `y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Transposed direct form II state for a constant input of 1.
    fn unit_steady_state(&self) -> [f64; 2] {
        let z2 = self.b[2] - self.a[1];
        let z1 = self.b[1] - self.a[0] + z2;
        [z1, z2]
    }
}

/// Second-order sections of an order-`n` Butterworth low-pass.
pub fn design_lowpass(spec: &FilterSpec) -> Result<Vec<Biquad>, DecomposeError> {
    spec.validate()?;
    let n = spec.order;
    let k = (PI * spec.cutoff_hz / spec.sample_rate_hz).tan();
    let k2 = k * k;
    let mut sections = Vec::with_capacity(n.div_ceil(2));

    for i in 0..n / 2 {
        // conjugate pole pair: s^2 + q s + k^2
        let q = 2.0 * k * (PI * (2 * i + 1) as f64 / (2 * n) as f64).sin();
        let a0 = 1.0 + q + k2;
        sections.push(Biquad {
            b: [k2 / a0, 2.0 * k2 / a0, k2 / a0],
            a: [2.0 * (k2 - 1.0) / a0, (1.0 - q + k2) / a0],
        });
    }
    if n % 2 == 1 {
        let a0 = 1.0 + k;
        sections.push(Biquad {
            b: [k / a0, k / a0, 0.0],
            a: [(k - 1.0) / a0, 0.0],
        });
    }
    Ok(sections)
}

/// Magnitude of the cascade's frequency response at `freq_hz`.
pub fn magnitude_response(sections: &[Biquad], freq_hz: f64, sample_rate_hz: f64) -> f64 {
    let w = 2.0 * PI * freq_hz / sample_rate_hz;
    let (c1, s1) = (w.cos(), -w.sin());
    let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
    sections.iter().fold(1.0, |acc, sec| {
        let num_re = sec.b[0] + sec.b[1] * c1 + sec.b[2] * c2;
        let num_im = sec.b[1] * s1 + sec.b[2] * s2;
        let den_re = 1.0 + sec.a[0] * c1 + sec.a[1] * c2;
        let den_im = sec.a[0] * s1 + sec.a[1] * s2;
        acc * (num_re.hypot(num_im) / den_re.hypot(den_im))
    })
}

/// Runs the cascade once. With `steady_start`, every section starts in the
/// steady state for a constant input equal to `x[0]`.
fn run_cascade(sections: &[Biquad], x: &[f64], steady_start: bool) -> Vec<f64> {
    let mut buf = x.to_vec();
    let level = x.first().copied().unwrap_or(0.0);
    for sec in sections {
        let [mut z1, mut z2] = if steady_start {
            let [s1, s2] = sec.unit_steady_state();
            [s1 * level, s2 * level]
        } else {
            [0.0, 0.0]
        };
        for v in buf.iter_mut() {
            let xn = *v;
            let yn = sec.b[0] * xn + z1;
            z1 = sec.b[1] * xn - sec.a[0] * yn + z2;
            z2 = sec.b[2] * xn - sec.a[1] * yn;
            *v = yn;
        }
    }
    buf
}

/// `x[pad..1]` ++ x ++ `x[n-2..n-1-pad]`; edge samples are not repeated.
fn mirror_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((1..=pad).map(|i| x[n - 1 - i]));
    out
}

pub fn lowpass(x: &[f64], spec: &FilterSpec) -> Result<Vec<f64>, DecomposeError> {
    let sections = design_lowpass(spec)?;
    if x.len() < spec.min_len() {
        return Err(DecomposeError::SeriesTooShort {
            len: x.len(),
            min: spec.min_len(),
        });
    }
    if !spec.zero_phase {
        return Ok(run_cascade(&sections, x, true));
    }
    let pad = spec.pad_len().min(x.len() - 1);
    let ext = mirror_extend(x, pad);
    let mut y = run_cascade(&sections, &ext, true);
    y.reverse();
    let mut y = run_cascade(&sections, &y, true);
    y.reverse();
    Ok(y[pad..pad + x.len()].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, len: usize, fs: f64) -> Vec<f64> {
        (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 / fs).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    /// Bilinear-transformed Butterworth magnitude evaluated in closed form.
    fn analytic_magnitude(f: f64, fc: f64, fs: f64, order: usize) -> f64 {
        let ratio = (PI * f / fs).tan() / (PI * fc / fs).tan();
        1.0 / (1.0 + ratio.powi(2 * order as i32)).sqrt()
    }

    #[test]
    fn cascade_matches_closed_form_magnitude() {
        for order in 1..=6 {
            for &fc in &[2.5, 5.0, 12.5, 30.0] {
                let spec = FilterSpec {
                    order,
                    ..FilterSpec::lowpass(fc)
                };
                let sos = design_lowpass(&spec).unwrap();
                for &f in &[0.0, 0.5, 1.0, 2.5, 7.0, 20.0, 40.0, 49.0] {
                    let got = magnitude_response(&sos, f, 100.0);
                    let want = analytic_magnitude(f, fc, 100.0, order);
                    assert!(
                        (got - want).abs() < 1e-12,
                        "order {order} fc {fc} f {f}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn dc_passes_unchanged() {
        let x = vec![5.0; 64];
        for &fc in &[2.5, 10.0, 15.0, 45.0] {
            for zero_phase in [true, false] {
                let spec = FilterSpec {
                    zero_phase,
                    ..FilterSpec::lowpass(fc)
                };
                let y = lowpass(&x, &spec).unwrap();
                assert!(y.iter().all(|v| (v - 5.0).abs() < 1e-9), "{y:?}");
            }
        }
    }

    #[test]
    fn attenuates_far_stopband() {
        // |H(40)|^2 for order 4, fc 5, fs 100 is ~1e-10; what remains is edge
        // transient
        let x = sine(40.0, 512, 100.0);
        let y = lowpass(&x, &FilterSpec::lowpass(5.0)).unwrap();
        assert!(rms(&y) < 0.01 * rms(&x), "{} vs {}", rms(&y), rms(&x));
    }

    #[test]
    fn passes_low_frequency() {
        // |H(1)|^2 at fc 10 is 1 - 1e-8
        let x = sine(1.0, 400, 100.0);
        let y = lowpass(&x, &FilterSpec::lowpass(10.0)).unwrap();
        let mid = &y[100..300];
        let amp = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((amp - 1.0).abs() < 0.01, "amplitude {amp}");
        for (a, b) in mid.iter().zip(&x[100..300]) {
            assert!((a - b).abs() < 0.01);
        }
    }

    #[test]
    fn zero_phase_has_no_lag() {
        let x = sine(2.0, 300, 100.0);
        let y = lowpass(&x, &FilterSpec::lowpass(12.5)).unwrap();
        let lagged = lowpass(
            &x,
            &FilterSpec {
                zero_phase: false,
                ..FilterSpec::lowpass(12.5)
            },
        )
        .unwrap();
        let err = |a: &[f64]| {
            rms(&a[100..200]
                .iter()
                .zip(&x[100..200])
                .map(|(p, q)| p - q)
                .collect::<Vec<_>>())
        };
        assert!(err(&y) < 1e-3);
        assert!(err(&lagged) > 10.0 * err(&y));
    }

    #[test]
    fn rejects_bad_specs() {
        let x = vec![1.0; 32];
        assert!(matches!(
            lowpass(&x, &FilterSpec::lowpass(50.0)),
            Err(DecomposeError::InvalidCutoff { .. })
        ));
        assert!(matches!(
            lowpass(&x, &FilterSpec::lowpass(0.0)),
            Err(DecomposeError::InvalidCutoff { .. })
        ));
        assert!(matches!(
            lowpass(&x[..11], &FilterSpec::lowpass(5.0)),
            Err(DecomposeError::SeriesTooShort { len: 11, min: 12 })
        ));
        // minimum length works even though the pad would exceed it
        assert_eq!(
            lowpass(&x[..12], &FilterSpec::lowpass(5.0)).unwrap().len(),
            12
        );
    }
}
