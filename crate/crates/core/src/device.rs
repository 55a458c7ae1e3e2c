//! Transmitter hardware impairments: the per-device fingerprint.
//!
//! The chain is applied per cell in a fixed order:
//! IQ imbalance -> PA nonlinearity -> carrier frequency offset -> DC offset.

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::grid::{ResourceGrid, SYMBOLS_PER_SUBFRAME};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: usize,
    /// IQ gain mismatch, 0 = balanced.
    pub iq_gain: f64,
    /// IQ phase mismatch in radians.
    pub iq_phase: f64,
    pub pa_a1: f64,
    pub pa_a3: f64,
    pub pa_a5: f64,
    /// Carrier frequency offset as a fraction of the subcarrier spacing.
    pub cfo: f64,
    pub dc_offset: Complex64,
    /// Relative std of the per-condition multiplicative parameter drift.
    pub jitter_std: f64,
}

impl DeviceProfile {
    pub fn identity(device_id: usize) -> Self {
        Self {
            device_id,
            iq_gain: 0.0,
            iq_phase: 0.0,
            pa_a1: 1.0,
            pa_a3: 0.0,
            pa_a5: 0.0,
            cfo: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            jitter_std: 0.0,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let id = self.device_id;
        let mut errs = Vec::new();
        let finite = [self.iq_gain, self.iq_phase, self.pa_a1, self.pa_a3, self.pa_a5, self.cfo]
            .iter()
            .all(|v| v.is_finite())
            && self.dc_offset.re.is_finite()
            && self.dc_offset.im.is_finite();
        if !finite {
            errs.push(format!("devices[{id}]: parameters must be finite"));
        }
        if !(self.pa_a1 > 0.0) {
            errs.push(format!("devices[{id}].pa_a1 must be > 0"));
        }
        if !(self.cfo.abs() < 0.05) {
            errs.push(format!("devices[{id}].cfo must satisfy |cfo| < 0.05"));
        }
        if !(self.iq_gain.abs() < 0.5) {
            errs.push(format!("devices[{id}].iq_gain must satisfy |g| < 0.5"));
        }
        if !(self.iq_phase.abs() < 0.5) {
            errs.push(format!("devices[{id}].iq_phase must satisfy |phi| < 0.5"));
        }
        if !(self.jitter_std >= 0.0) {
            errs.push(format!("devices[{id}].jitter_std must be >= 0"));
        }
        errs
    }

    /// Profile with every parameter scaled by the drift multipliers of `ctx`.
    pub fn drifted(&self, ctx: &ConditionContext) -> DeviceProfile {
        let m = drift_multipliers(self, ctx);
        DeviceProfile {
            iq_gain: self.iq_gain * m[0],
            iq_phase: self.iq_phase * m[1],
            pa_a1: self.pa_a1 * m[2],
            pa_a3: self.pa_a3 * m[3],
            pa_a5: self.pa_a5 * m[4],
            cfo: self.cfo * m[5],
            dc_offset: Complex64::new(self.dc_offset.re * m[6], self.dc_offset.im * m[7]),
            ..self.clone()
        }
    }
}

/// Five transmitters in two vendor groups (two of one make, three of another).
///
/// Vendor groups share a nominal impairment signature; units within a group
/// differ by small manufacturing spreads.
pub fn default_profiles() -> Vec<DeviceProfile> {
    let p = |device_id, iq_gain, iq_phase, pa_a1, pa_a3, cfo, dc: (f64, f64)| DeviceProfile {
        device_id,
        iq_gain,
        iq_phase,
        pa_a1,
        pa_a3,
        pa_a5: 0.0,
        cfo,
        dc_offset: Complex64::new(dc.0, dc.1),
        jitter_std: 0.02,
    };
    vec![
        p(0, 0.010, 0.012, 1.000, -0.030, 0.0020, (0.004, -0.003)),
        p(1, 0.016, 0.006, 0.992, -0.026, 0.0026, (-0.002, 0.004)),
        p(2, -0.012, 0.018, 1.006, -0.045, -0.0018, (0.006, 0.002)),
        p(3, -0.006, 0.024, 0.998, -0.052, -0.0024, (-0.005, -0.004)),
        p(4, -0.018, 0.014, 1.012, -0.040, -0.0012, (0.001, 0.007)),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionContext {
    pub condition_id: usize,
    pub drift_seed: u64,
}

/// Multipliers for (g, phi, a1, a3, a5, cfo, dc.re, dc.im), drawn from
/// N(1, jitter_std^2) and truncated to 6 sigma.
pub fn drift_multipliers(profile: &DeviceProfile, ctx: &ConditionContext) -> [f64; 8] {
    let mut m = [1.0; 8];
    if profile.jitter_std == 0.0 {
        return m;
    }
    let mut rng = rng_for(
        ctx.drift_seed,
        "device-drift",
        &[profile.device_id as u64, ctx.condition_id as u64],
    );
    let bound = 6.0 * profile.jitter_std;
    for v in &mut m {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = 1.0 + (profile.jitter_std * z).clamp(-bound, bound);
    }
    m
}

/// `mu*x + nu*conj(x)` with `mu = cos(phi/2) + j g sin(phi/2)` and
/// `nu = g cos(phi/2) - j sin(phi/2)`.
pub fn apply_iq_imbalance(x: Complex64, gain: f64, phase: f64) -> Complex64 {
    let (s, c) = (phase / 2.0).sin_cos();
    let mu = Complex64::new(c, gain * s);
    let nu = Complex64::new(gain * c, -s);
    mu * x + nu * x.conj()
}

pub fn apply_pa(x: Complex64, a1: f64, a3: f64, a5: f64) -> Complex64 {
    let p = x.norm_sqr();
    x * (a1 + a3 * p + a5 * p * p)
}

/// Phase ramp `exp(j 2 pi cfo t / 14)` over the symbol index `t`.
pub fn cfo_rotation(cfo: f64, symbol: usize) -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * PI * cfo * symbol as f64 / SYMBOLS_PER_SUBFRAME as f64)
}

pub fn apply_cfo(x: &[Complex64], cfo: f64) -> Vec<Complex64> {
    x.iter().enumerate().map(|(t, &v)| v * cfo_rotation(cfo, t)).collect()
}

/// Stamp the (condition-drifted) fingerprint of `profile` onto every cell.
pub fn impair(grid: &ResourceGrid, profile: &DeviceProfile, ctx: &ConditionContext) -> ResourceGrid {
    let p = profile.drifted(ctx);
    let mut out = grid.clone();
    let k = grid.n_subcarriers;
    for t in 0..grid.n_symbols {
        let rot = cfo_rotation(p.cfo, t);
        for cell in &mut out.cells[t * k..(t + 1) * k] {
            let y = apply_iq_imbalance(*cell, p.iq_gain, p.iq_phase);
            let y = apply_pa(y, p.pa_a1, p.pa_a3, p.pa_a5);
            *cell = y * rot + p.dc_offset;
        }
    }
    out
}
