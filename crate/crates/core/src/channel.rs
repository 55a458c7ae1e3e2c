//! Frequency-domain propagation, pilot-based channel estimation,
//! equalization and link scoring.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{pilot_positions, GridConfig, Position, ResourceGrid};
use crate::seed::rng_for;

pub const MAX_TAPS: usize = 8;
const ERASURE_THRESHOLD: f64 = 1e-12;
const NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub taps: Vec<Complex64>,
    /// Receiver SNR in dB; `+inf` (`null` in JSON) disables noise.
    #[serde(serialize_with = "ser_snr", deserialize_with = "de_snr")]
    pub snr_db: f64,
    /// Draw fresh Rayleigh taps (with the configured power profile) per frame.
    #[serde(default)]
    pub block_fading: bool,
    pub seed: u64,
}

fn ser_snr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_none()
    } else {
        s.serialize_some(v)
    }
}

fn de_snr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

impl Default for ChannelModel {
    /// Static three-tap channel at 25 dB.
    fn default() -> Self {
        Self::new(
            vec![Complex64::new(0.9, 0.0), Complex64::new(0.32, 0.18), Complex64::new(-0.1, 0.12)],
            25.0,
            0x00c4_a2e1,
        )
    }
}

impl ChannelModel {
    /// Static channel with taps scaled to unit energy.
    pub fn new(taps: Vec<Complex64>, snr_db: f64, seed: u64) -> Self {
        let e: f64 = taps.iter().map(|t| t.norm_sqr()).sum();
        let taps = if e > 0.0 { taps.iter().map(|t| t / e.sqrt()).collect() } else { taps };
        Self { taps, snr_db, block_fading: false, seed }
    }

    pub fn noiseless(taps: Vec<Complex64>) -> Self {
        Self::new(taps, f64::INFINITY, 0)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.taps.is_empty() || self.taps.len() > MAX_TAPS {
            errs.push(format!("channel.taps must hold 1..={MAX_TAPS} taps, got {}", self.taps.len()));
        } else {
            let e: f64 = self.taps.iter().map(|t| t.norm_sqr()).sum();
            if !((e - 1.0).abs() < 1e-9) {
                errs.push(format!("channel.taps energy must be 1, got {e}"));
            }
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            errs.push("channel.snr_db must be finite (or null for noiseless)".to_string());
        }
        errs
    }

    /// Per-cell complex noise variance for unit average signal power.
    pub fn noise_var(&self) -> f64 {
        if self.snr_db.is_infinite() {
            0.0
        } else {
            10f64.powf(-self.snr_db / 10.0)
        }
    }

    pub fn with_snr(&self, snr_db: f64) -> Self {
        Self { snr_db, ..self.clone() }
    }

    pub fn taps_for_frame(&self, frame_index: u64) -> Vec<Complex64> {
        if !self.block_fading {
            return self.taps.clone();
        }
        let mut rng = rng_for(self.seed, "fading-taps", &[frame_index]);
        self.taps
            .iter()
            .map(|t| {
                let s = t.norm() / 2f64.sqrt();
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex64::new(re * s, im * s)
            })
            .collect()
    }
}

/// `H[k] = sum_l h_l exp(-j 2 pi k l / K)`.
pub fn frequency_response(taps: &[Complex64], n_subcarriers: usize) -> Vec<Complex64> {
    (0..n_subcarriers)
        .map(|k| {
            taps.iter()
                .enumerate()
                .map(|(l, &h)| {
                    h * Complex64::from_polar(1.0, -2.0 * PI * (k * l) as f64 / n_subcarriers as f64)
                })
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Propagation {
    pub received: ResourceGrid,
    pub true_h: Vec<Complex64>,
    pub noise_var: f64,
    /// The noise realization (white-box only; the receiver never sees it).
    pub noise: Vec<Complex64>,
}

/// `Y[k,t] = H[k] X[k,t] + n[k,t]`, deterministic per `(ch.seed, frame_index)`.
pub fn propagate(grid: &ResourceGrid, ch: &ChannelModel, frame_index: u64) -> Propagation {
    let true_h = frequency_response(&ch.taps_for_frame(frame_index), grid.n_subcarriers);
    let noise_var = ch.noise_var();
    let k = grid.n_subcarriers;
    let mut noise = vec![Complex64::new(0.0, 0.0); grid.cells.len()];
    if noise_var > 0.0 {
        let mut rng = rng_for(ch.seed, "awgn", &[frame_index]);
        let s = (noise_var / 2.0).sqrt();
        for n in &mut noise {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *n = Complex64::new(re * s, im * s);
        }
    }
    let mut received = grid.clone();
    for (i, cell) in received.cells.iter_mut().enumerate() {
        *cell = true_h[i % k] * *cell + noise[i];
    }
    Propagation { received, true_h, noise_var, noise }
}

/// `(Y - n) H^-1` with the true noise and channel: exact transmit-signal recovery.
pub fn ideal_recover(received: &ResourceGrid, noise: &[Complex64], true_h: &[Complex64]) -> Vec<Complex64> {
    let k = received.n_subcarriers;
    received
        .cells
        .iter()
        .zip(noise)
        .enumerate()
        .map(|(i, (y, n))| (y - n) / true_h[i % k])
        .collect()
}

/// Least-squares estimates `Y / X` at the pilot positions, in position order.
pub fn estimate_ls(
    received: &ResourceGrid,
    known_pilots: &[Complex64],
    positions: &[Position],
) -> Result<Vec<Complex64>> {
    if known_pilots.len() != positions.len() {
        return Err(Error::Sizing(format!(
            "{} known pilots for {} positions",
            known_pilots.len(),
            positions.len()
        )));
    }
    positions
        .iter()
        .zip(known_pilots)
        .enumerate()
        .map(|(i, (&pos, &x))| {
            if x.norm_sqr() == 0.0 {
                Err(Error::ZeroPilot(i))
            } else {
                Ok(received.at(pos) / x)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimationMethod {
    Ls,
    Mmse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub h_hat: Vec<Complex64>,
    pub method: EstimationMethod,
    pub noise_var_est: f64,
}

/// Separable exponential correlation `rho_f^|dk| * rho_t^|dt|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho_f: f64,
    pub rho_t: f64,
}

impl Default for Correlation {
    fn default() -> Self {
        Self { rho_f: 0.98, rho_t: 0.999 }
    }
}

/// Wiener smoother/interpolator from the pilot lattice to every cell.
///
/// The channel mean is unknown, so it is estimated by generalized least
/// squares and the Wiener filter acts on the de-meaned LS estimates:
/// `H = m + R_dp (R_pp + sigma^2/E_s I)^-1 (H_ls - m 1)`. Constant channels
/// are therefore reproduced exactly. The factorization depends only on the
/// lattice and the noise level, so one estimator serves every frame.
pub struct MmseEstimator {
    n_subcarriers: usize,
    n_symbols: usize,
    positions: Vec<Position>,
    noise_var: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    mean_weights: DVector<f64>,
    pow_f: Vec<f64>,
    pow_t: Vec<f64>,
    /// (symbol, first pilot index, pilot count) for each pilot-bearing symbol.
    symbol_groups: Vec<(usize, usize, usize)>,
}

impl MmseEstimator {
    /// `noise_var` is `sigma^2 / E_s`; values below 1e-12 are floored.
    pub fn new(config: &GridConfig, noise_var: f64, corr: Correlation) -> Result<Self> {
        config.check()?;
        let positions = pilot_positions(config);
        let n = positions.len();
        if n == 0 {
            return Err(Error::InvalidArgument("MMSE needs at least one pilot".into()));
        }
        let noise_var = noise_var.max(NOISE_FLOOR);
        let k = config.n_subcarriers;
        let t = config.n_symbols();
        let pow_f: Vec<f64> = (0..k).map(|d| corr.rho_f.powi(d as i32)).collect();
        let pow_t: Vec<f64> = (0..t).map(|d| corr.rho_t.powi(d as i32)).collect();

        let mut r = DMatrix::<f64>::zeros(n, n);
        for (i, a) in positions.iter().enumerate() {
            for (j, b) in positions.iter().enumerate() {
                r[(i, j)] = pow_f[a.subcarrier.abs_diff(b.subcarrier)] * pow_t[a.symbol.abs_diff(b.symbol)];
            }
            r[(i, i)] += noise_var;
        }
        let chol = r.cholesky().ok_or(Error::Singular)?;
        let mut mean_weights = chol.solve(&DVector::from_element(n, 1.0));
        let norm = mean_weights.sum();
        mean_weights /= norm;

        let mut symbol_groups: Vec<(usize, usize, usize)> = Vec::new();
        for (i, p) in positions.iter().enumerate() {
            match symbol_groups.last_mut() {
                Some(g) if g.0 == p.symbol => g.2 += 1,
                _ => symbol_groups.push((p.symbol, i, 1)),
            }
        }
        Ok(Self {
            n_subcarriers: k,
            n_symbols: t,
            positions,
            noise_var,
            chol,
            mean_weights,
            pow_f,
            pow_t,
            symbol_groups,
        })
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn estimate(&self, ls: &[Complex64]) -> Result<ChannelEstimate> {
        let n = self.positions.len();
        if ls.len() != n {
            return Err(Error::Sizing(format!("{} LS estimates for {} pilots", ls.len(), n)));
        }
        let re = DVector::from_iterator(n, ls.iter().map(|c| c.re));
        let im = DVector::from_iterator(n, ls.iter().map(|c| c.im));
        let mean = Complex64::new(self.mean_weights.dot(&re), self.mean_weights.dot(&im));
        let a_re = self.chol.solve(&re.add_scalar(-mean.re));
        let a_im = self.chol.solve(&im.add_scalar(-mean.im));

        let k = self.n_subcarriers;
        // B[s][k] = sum over pilots p on symbol s of rho_f^|k - k_p| a_p
        let mut b = vec![Complex64::new(0.0, 0.0); self.symbol_groups.len() * k];
        for (s, &(_, start, count)) in self.symbol_groups.iter().enumerate() {
            let row = &mut b[s * k..(s + 1) * k];
            for p in start..start + count {
                let kp = self.positions[p].subcarrier;
                let a = Complex64::new(a_re[p], a_im[p]);
                for (kk, v) in row.iter_mut().enumerate() {
                    *v += a * self.pow_f[kk.abs_diff(kp)];
                }
            }
        }
        let mut h_hat = vec![mean; k * self.n_symbols];
        for t in 0..self.n_symbols {
            let out = &mut h_hat[t * k..(t + 1) * k];
            for (s, &(sym, _, _)) in self.symbol_groups.iter().enumerate() {
                let w = self.pow_t[t.abs_diff(sym)];
                for (o, v) in out.iter_mut().zip(&b[s * k..(s + 1) * k]) {
                    *o += v * w;
                }
            }
        }
        Ok(ChannelEstimate {
            n_subcarriers: k,
            n_symbols: self.n_symbols,
            h_hat,
            method: EstimationMethod::Mmse,
            noise_var_est: self.noise_var,
        })
    }
}

/// One-shot MMSE estimate; prefer [`MmseEstimator`] when estimating many frames.
pub fn estimate_mmse(
    ls: &[Complex64],
    config: &GridConfig,
    snr_linear: f64,
    corr: Correlation,
) -> Result<ChannelEstimate> {
    let noise_var = if snr_linear.is_infinite() { 0.0 } else { 1.0 / snr_linear };
    MmseEstimator::new(config, noise_var, corr)?.estimate(ls)
}

/// Baseline full-grid estimate from LS pilots: linear interpolation in
/// frequency on each pilot symbol, then linear in time (edges held).
pub fn interpolate_ls(ls: &[Complex64], config: &GridConfig) -> Result<ChannelEstimate> {
    let positions = pilot_positions(config);
    if ls.len() != positions.len() {
        return Err(Error::Sizing(format!("{} LS estimates for {} pilots", ls.len(), positions.len())));
    }
    let k = config.n_subcarriers;
    let t = config.n_symbols();
    let mut symbols: Vec<(usize, Vec<Complex64>)> = Vec::new();
    let mut i = 0;
    while i < positions.len() {
        let sym = positions[i].symbol;
        let mut j = i;
        while j < positions.len() && positions[j].symbol == sym {
            j += 1;
        }
        let ks: Vec<usize> = positions[i..j].iter().map(|p| p.subcarrier).collect();
        symbols.push((sym, interp_1d(&ks, &ls[i..j], k)));
        i = j;
    }
    let mut h_hat = vec![Complex64::new(0.0, 0.0); k * t];
    let syms: Vec<usize> = symbols.iter().map(|s| s.0).collect();
    for sc in 0..k {
        let column: Vec<Complex64> = symbols.iter().map(|s| s.1[sc]).collect();
        for (tt, v) in interp_1d(&syms, &column, t).into_iter().enumerate() {
            h_hat[tt * k + sc] = v;
        }
    }
    Ok(ChannelEstimate { n_subcarriers: k, n_symbols: t, h_hat, method: EstimationMethod::Ls, noise_var_est: 0.0 })
}

fn interp_1d(xs: &[usize], ys: &[Complex64], len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|x| {
            let upper = xs.partition_point(|&v| v < x);
            if upper == 0 {
                ys[0]
            } else if upper == xs.len() {
                ys[xs.len() - 1]
            } else if xs[upper] == x {
                ys[upper]
            } else {
                let (x0, x1) = (xs[upper - 1] as f64, xs[upper] as f64);
                let w = (x as f64 - x0) / (x1 - x0);
                ys[upper - 1] * (1.0 - w) + ys[upper] * w
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Equalized {
    pub grid: ResourceGrid,
    /// Cells whose channel estimate was too small to divide by.
    pub erased: Vec<bool>,
}

/// Zero-forcing `X = Y / H_hat`; cells with `|H_hat| <= 1e-12` are erased.
pub fn equalize(received: &ResourceGrid, est: &ChannelEstimate) -> Result<Equalized> {
    if est.h_hat.len() != received.cells.len() {
        return Err(Error::Shape(format!(
            "estimate covers {} cells, grid has {}",
            est.h_hat.len(),
            received.cells.len()
        )));
    }
    let mut grid = received.clone();
    let mut erased = vec![false; grid.cells.len()];
    for ((c, h), e) in grid.cells.iter_mut().zip(&est.h_hat).zip(erased.iter_mut()) {
        if h.norm() <= ERASURE_THRESHOLD || !h.is_finite() {
            *c = Complex64::new(0.0, 0.0);
            *e = true;
        } else {
            *c /= h;
        }
    }
    Ok(Equalized { grid, erased })
}

/// Hard-decision QPSK bits (inverse of [`crate::grid::modulate_qpsk`]).
pub fn demodulate_qpsk(symbols: impl Iterator<Item = Complex64>) -> Vec<u8> {
    symbols.flat_map(|s| [u8::from(s.re < 0.0), u8::from(s.im < 0.0)]).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub bler: f64,
    pub plr: f64,
    /// Effective delivered bits per frame, `raw bits x (1 - BLER)`.
    pub throughput: f64,
    pub n_blocks: u64,
    pub n_packets: u64,
    pub errored_blocks: u64,
    pub lost_packets: u64,
    pub bit_errors: u64,
    pub n_bits: u64,
    pub frames: u64,
}

impl LinkStats {
    pub fn bits_per_frame(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.n_bits as f64 / self.frames as f64
        }
    }

    pub fn ber(&self) -> f64 {
        if self.n_bits == 0 {
            0.0
        } else {
            self.bit_errors as f64 / self.n_bits as f64
        }
    }

    fn refresh(&mut self) {
        self.bler = ratio(self.errored_blocks, self.n_blocks);
        self.plr = ratio(self.lost_packets, self.n_packets);
        self.throughput = self.bits_per_frame() * (1.0 - self.bler);
    }

    pub fn merge(&mut self, other: &LinkStats) {
        self.n_blocks += other.n_blocks;
        self.n_packets += other.n_packets;
        self.errored_blocks += other.errored_blocks;
        self.lost_packets += other.lost_packets;
        self.bit_errors += other.bit_errors;
        self.n_bits += other.n_bits;
        self.frames += other.frames;
        self.refresh();
    }

    pub fn combine<'a>(stats: impl IntoIterator<Item = &'a LinkStats>) -> LinkStats {
        let mut acc = LinkStats::default();
        for s in stats {
            acc.merge(s);
        }
        acc
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-block error flags of one equalized frame. Erased cells count as errors.
fn block_errors(eq: &Equalized, true_bits: &[u8], block_bits: usize) -> Result<(Vec<bool>, u64)> {
    let data: Vec<(Complex64, bool)> = eq
        .grid
        .cells
        .iter()
        .zip(&eq.grid.pilot_mask)
        .zip(&eq.erased)
        .filter(|((_, &p), _)| !p)
        .map(|((c, _), &e)| (*c, e))
        .collect();
    if 2 * data.len() != true_bits.len() {
        return Err(Error::Sizing(format!(
            "{} data cells but {} reference bits",
            data.len(),
            true_bits.len()
        )));
    }
    let mut flags = vec![false; true_bits.len().div_ceil(block_bits)];
    let mut bit_errors = 0u64;
    for (i, (c, erased)) in data.iter().enumerate() {
        let bits = demodulate_qpsk(std::iter::once(*c));
        for b in 0..2 {
            let idx = 2 * i + b;
            if *erased || bits[b] != true_bits[idx] {
                bit_errors += 1;
                flags[idx / block_bits] = true;
            }
        }
    }
    Ok((flags, bit_errors))
}

/// Hard-decision demodulation and block/packet accounting for one frame.
///
/// A block is errored iff any of its bits is wrong. Each block is also a
/// packet: an errored block is retried on up to `max_retx` fresh
/// transmissions produced by `retransmit(attempt)`, and the packet is lost
/// only if every attempt fails.
pub fn demodulate_and_score<F>(
    equalized: &Equalized,
    true_bits: &[u8],
    blocks_per_frame: usize,
    max_retx: usize,
    mut retransmit: F,
) -> Result<LinkStats>
where
    F: FnMut(usize) -> Result<Equalized>,
{
    if blocks_per_frame == 0 {
        return Err(Error::InvalidArgument("blocks_per_frame must be > 0".into()));
    }
    let block_bits = true_bits.len().div_ceil(blocks_per_frame).max(1);
    let (flags, bit_errors) = block_errors(equalized, true_bits, block_bits)?;
    let n_blocks = flags.len() as u64;
    let errored_blocks = flags.iter().filter(|&&f| f).count() as u64;
    let mut pending: Vec<usize> = flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect();
    for attempt in 1..=max_retx {
        if pending.is_empty() {
            break;
        }
        let retry = retransmit(attempt)?;
        let (retry_flags, _) = block_errors(&retry, true_bits, block_bits)?;
        pending.retain(|&b| retry_flags[b]);
    }
    let mut stats = LinkStats {
        n_blocks,
        n_packets: n_blocks,
        errored_blocks,
        lost_packets: pending.len() as u64,
        bit_errors,
        n_bits: true_bits.len() as u64,
        frames: 1,
        ..LinkStats::default()
    };
    stats.refresh();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_frame, random_bits};

    fn frame(seed: u64) -> (GridConfig, ResourceGrid, Vec<u8>) {
        let cfg = GridConfig::default();
        let bits = random_bits(seed, 2 * cfg.n_data_cells());
        let g = build_frame(&cfg, &cfg.pilot_sequence(), &bits, seed).unwrap();
        (cfg, g, bits)
    }

    fn no_retx(_: usize) -> Result<Equalized> {
        unreachable!("no block should fail")
    }

    #[test]
    fn noiseless_unit_tap_is_identity() {
        let (_, g, _) = frame(1);
        let p = propagate(&g, &ChannelModel::noiseless(vec![Complex64::new(1.0, 0.0)]), 0);
        assert_eq!(p.received.cells, g.cells);
        assert_eq!(p.noise_var, 0.0);
    }

    #[test]
    fn delta_impulse_is_flat() {
        let h = frequency_response(&[Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)], 72);
        assert!(h.iter().all(|&v| v == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn empirical_snr_matches_configuration() {
        let (_, g, _) = frame(2);
        let ch = ChannelModel::new(vec![Complex64::new(1.0, 0.0)], 20.0, 77);
        let p = propagate(&g, &ch, 5);
        let n = 10_000;
        let var: f64 = p.noise.iter().take(n).map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
        let measured_db = -10.0 * var.log10();
        assert!((measured_db - 20.0).abs() < 0.5, "{measured_db}");
        // and the noise in `received` is exactly the returned realization
        assert!((p.received.cells[3] - g.cells[3] - p.noise[3]).norm() < 1e-15);
    }

    #[test]
    fn propagation_deterministic_per_frame_index() {
        let (_, g, _) = frame(3);
        let ch = ChannelModel::default();
        assert_eq!(propagate(&g, &ch, 4).received, propagate(&g, &ch, 4).received);
        assert_ne!(propagate(&g, &ch, 4).received, propagate(&g, &ch, 5).received);
        let fading = ChannelModel { block_fading: true, ..ch };
        assert_ne!(fading.taps_for_frame(0), fading.taps_for_frame(1));
        assert_eq!(fading.taps_for_frame(9), fading.taps_for_frame(9));
    }

    #[test]
    fn ls_examples() {
        let (cfg, g, _) = frame(4);
        let pos = pilot_positions(&cfg);
        let pilots = cfg.pilot_sequence();
        let flat = ChannelModel::noiseless(vec![Complex64::new(2.0, 0.0)]);
        // energy normalization makes the single tap 1; scale explicitly instead
        let mut rx = propagate(&g, &flat, 0).received;
        rx.cells.iter_mut().for_each(|c| *c *= 2.0);
        let ls = estimate_ls(&rx, &pilots, &pos).unwrap();
        assert!(ls.iter().all(|h| (h - Complex64::new(2.0, 0.0)).norm() < 1e-12));

        let ch = ChannelModel::noiseless(ChannelModel::default().taps);
        let p = propagate(&g, &ch, 0);
        let ls = estimate_ls(&p.received, &pilots, &pos).unwrap();
        for (h, q) in ls.iter().zip(&pos) {
            assert!((h - p.true_h[q.subcarrier]).norm() < 1e-12);
        }

        let mut zero = pilots.clone();
        zero[7] = Complex64::new(0.0, 0.0);
        assert!(matches!(estimate_ls(&p.received, &zero, &pos), Err(Error::ZeroPilot(7))));
    }

    #[test]
    fn ls_error_variance_matches_noise() {
        let cfg = GridConfig::default();
        let pos = pilot_positions(&cfg);
        let pilots = cfg.pilot_sequence();
        let ch = ChannelModel::new(vec![Complex64::new(1.0, 0.0)], 20.0, 3);
        let mut sum = 0.0;
        let mut count = 0usize;
        for f in 0..21 {
            let (_, g, _) = frame(100 + f);
            let p = propagate(&g, &ch, f);
            for (h, q) in estimate_ls(&p.received, &pilots, &pos).unwrap().iter().zip(&pos) {
                sum += (h - p.true_h[q.subcarrier]).norm_sqr();
                count += 1;
            }
        }
        assert!(count >= 10_000);
        let ratio = (sum / count as f64) / ch.noise_var();
        assert!((ratio - 1.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn mmse_reproduces_flat_channel() {
        let cfg = GridConfig::default();
        let h = Complex64::new(0.7, -0.4);
        let ls = vec![h; cfg.n_pilots()];
        let est = estimate_mmse(&ls, &cfg, f64::INFINITY, Correlation::default()).unwrap();
        let max = est.h_hat.iter().map(|e| (e - h).norm()).fold(0.0, f64::max);
        assert!(max < 1e-6, "{max}");
        assert_eq!(est.method, EstimationMethod::Mmse);
        assert_eq!(est.h_hat.len(), cfg.n_cells());
    }

    fn mse_at_pilots(snr_db: f64, frames: u64) -> (f64, f64) {
        let cfg = GridConfig::default();
        let pos = pilot_positions(&cfg);
        let pilots = cfg.pilot_sequence();
        let ch = ChannelModel::default().with_snr(snr_db);
        let est = MmseEstimator::new(&cfg, ch.noise_var(), Correlation::default()).unwrap();
        let (mut ls_err, mut mmse_err, mut n) = (0.0, 0.0, 0.0);
        for f in 0..frames {
            let (_, g, _) = frame(500 + f);
            let p = propagate(&g, &ch, f);
            let ls = estimate_ls(&p.received, &pilots, &pos).unwrap();
            let m = est.estimate(&ls).unwrap();
            for (l, q) in ls.iter().zip(&pos) {
                let h = p.true_h[q.subcarrier];
                ls_err += (l - h).norm_sqr();
                mmse_err += (m.h_hat[q.symbol * cfg.n_subcarriers + q.subcarrier] - h).norm_sqr();
                n += 1.0;
            }
        }
        (ls_err / n, mmse_err / n)
    }

    #[test]
    fn mmse_beats_ls_at_20db() {
        let (ls, mmse) = mse_at_pilots(20.0, 100);
        assert!(mmse <= ls, "mmse {mmse} ls {ls}");
    }

    #[test]
    fn mmse_error_decreases_with_snr() {
        let mses: Vec<f64> = [0.0, 10.0, 20.0, 30.0].iter().map(|&s| mse_at_pilots(s, 10).1).collect();
        assert!(mses.windows(2).all(|w| w[1] < w[0]), "{mses:?}");
    }

    #[test]
    fn ls_interpolation_exact_for_constant() {
        let cfg = GridConfig::default();
        let h = Complex64::new(-0.2, 0.9);
        let est = interpolate_ls(&vec![h; cfg.n_pilots()], &cfg).unwrap();
        assert!(est.h_hat.iter().all(|e| (e - h).norm() < 1e-12));
    }

    #[test]
    fn perfect_equalization_recovers_transmit_grid() {
        let (cfg, g, bits) = frame(6);
        let ch = ChannelModel::noiseless(ChannelModel::default().taps);
        let p = propagate(&g, &ch, 0);
        let est = ChannelEstimate {
            n_subcarriers: cfg.n_subcarriers,
            n_symbols: cfg.n_symbols(),
            h_hat: (0..cfg.n_cells()).map(|i| p.true_h[i % cfg.n_subcarriers]).collect(),
            method: EstimationMethod::Mmse,
            noise_var_est: 0.0,
        };
        let eq = equalize(&p.received, &est).unwrap();
        let max = eq.grid.cells.iter().zip(&g.cells).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(max <= 1e-12, "{max}");
        let stats = demodulate_and_score(&eq, &bits, 10, 4, no_retx).unwrap();
        assert_eq!((stats.bler, stats.plr, stats.bit_errors), (0.0, 0.0, 0));
        assert_eq!(stats.throughput, bits.len() as f64);
    }

    #[test]
    fn ideal_recovery_identity() {
        let (_, g, _) = frame(7);
        let p = propagate(&g, &ChannelModel::default().with_snr(10.0), 3);
        let x = ideal_recover(&p.received, &p.noise, &p.true_h);
        let max = x.iter().zip(&g.cells).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(max <= 1e-12, "{max}");
    }

    #[test]
    fn near_zero_estimate_erases_cells() {
        let (cfg, g, bits) = frame(8);
        let mut est = ChannelEstimate {
            n_subcarriers: cfg.n_subcarriers,
            n_symbols: cfg.n_symbols(),
            h_hat: vec![Complex64::new(1.0, 0.0); cfg.n_cells()],
            method: EstimationMethod::Ls,
            noise_var_est: 0.0,
        };
        let idx = g.pilot_mask.iter().position(|&p| !p).unwrap();
        est.h_hat[idx] = Complex64::new(1e-13, 0.0);
        let eq = equalize(&g, &est).unwrap();
        assert!(eq.erased[idx]);
        let stats = demodulate_and_score(&eq, &bits, 10, 0, no_retx).unwrap();
        assert_eq!(stats.errored_blocks, 1);
        assert_eq!(stats.lost_packets, 1);
        assert_eq!(stats.bit_errors, 2);
    }

    #[test]
    fn retransmission_recovers_packets() {
        let (cfg, g, bits) = frame(9);
        let ones = ChannelEstimate {
            n_subcarriers: cfg.n_subcarriers,
            n_symbols: cfg.n_symbols(),
            h_hat: vec![Complex64::new(1.0, 0.0); cfg.n_cells()],
            method: EstimationMethod::Ls,
            noise_var_est: 0.0,
        };
        let mut bad = g.clone();
        for c in bad.cells.iter_mut() {
            *c = -*c;
        }
        let eq_bad = equalize(&bad, &ones).unwrap();
        let eq_good = equalize(&g, &ones).unwrap();
        let mut calls = 0;
        let stats = demodulate_and_score(&eq_bad, &bits, 10, 4, |_| {
            calls += 1;
            Ok(eq_good.clone())
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(stats.bler, 1.0);
        assert_eq!(stats.plr, 0.0);
        assert_eq!(stats.throughput, 0.0);
        let lost = demodulate_and_score(&eq_bad, &bits, 10, 2, |_| Ok(eq_bad.clone())).unwrap();
        assert_eq!(lost.plr, 1.0);
    }

    #[test]
    fn low_snr_flat_channel_fails_blocks() {
        let cfg = GridConfig::default();
        let pos = pilot_positions(&cfg);
        let pilots = cfg.pilot_sequence();
        let ch = ChannelModel::new(vec![Complex64::new(1.0, 0.0)], -10.0, 12);
        let est = MmseEstimator::new(&cfg, ch.noise_var(), Correlation::default()).unwrap();
        let mut all = LinkStats::default();
        for f in 0..100 {
            let (_, g, bits) = frame(900 + f);
            let p = propagate(&g, &ch, f);
            let ls = estimate_ls(&p.received, &pilots, &pos).unwrap();
            let eq = equalize(&p.received, &est.estimate(&ls).unwrap()).unwrap();
            let s = demodulate_and_score(&eq, &bits, 10, 0, |_| unreachable!()).unwrap();
            all.merge(&s);
        }
        assert!(all.bler >= 0.9, "{}", all.bler);
        assert_eq!(all.frames, 100);
    }

    #[test]
    fn snr_json_round_trip() {
        let ch = ChannelModel::noiseless(vec![Complex64::new(1.0, 0.0)]);
        let s = serde_json::to_string(&ch).unwrap();
        assert!(s.contains("\"snr_db\":null"));
        let back: ChannelModel = serde_json::from_str(&s).unwrap();
        assert!(back.snr_db.is_infinite());
        assert!(ChannelModel::default().validate().is_empty());
    }
}
