//! OFDM resource grids with an LTE-style staggered ("diamond") pilot lattice.
//!
//! Cells are stored symbol-major: index `t * n_subcarriers + k` for OFDM
//! symbol `t` and subcarrier `k`. Pilot order everywhere in the crate is the
//! same row-major (symbol, then subcarrier) order.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const SYMBOLS_PER_SUBFRAME: usize = 14;
pub const DEFAULT_PILOT_SEED: u64 = 0x5eed_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub n_subcarriers: usize,
    /// Pilot-bearing symbol indices within each 14-symbol subframe.
    pub pilot_symbols: Vec<usize>,
    pub pilot_spacing: usize,
    /// Frequency offset applied to every other pilot symbol of a subframe.
    pub pilot_stagger: usize,
    #[serde(default = "default_subframes")]
    pub subframes: usize,
    /// Seed of the fixed pseudo-random QPSK pilot sequence shared by all devices.
    #[serde(default = "default_pilot_seed")]
    pub pilot_seed: u64,
}

fn default_subframes() -> usize {
    10
}

fn default_pilot_seed() -> u64 {
    DEFAULT_PILOT_SEED
}

impl Default for GridConfig {
    /// 6 resource blocks, 10 subframes, pilots on symbols {0,4,7,11} every
    /// 6th subcarrier with a stagger of 3.
    fn default() -> Self {
        Self {
            n_subcarriers: 72,
            pilot_symbols: vec![0, 4, 7, 11],
            pilot_spacing: 6,
            pilot_stagger: 3,
            subframes: 10,
            pilot_seed: DEFAULT_PILOT_SEED,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_subcarriers == 0 {
            errs.push("grid.n_subcarriers must be > 0".to_string());
        }
        if self.subframes == 0 {
            errs.push("grid.subframes must be > 0".to_string());
        }
        if self.pilot_symbols.is_empty() {
            errs.push("grid.pilot_symbols must not be empty".to_string());
        }
        if let Some(&s) = self.pilot_symbols.iter().find(|&&s| s >= SYMBOLS_PER_SUBFRAME) {
            errs.push(format!("grid.pilot_symbols: index {s} is not < {SYMBOLS_PER_SUBFRAME}"));
        }
        if self.pilot_symbols.windows(2).any(|w| w[0] >= w[1]) {
            errs.push("grid.pilot_symbols must be strictly increasing".to_string());
        }
        if self.pilot_spacing == 0 {
            errs.push("grid.pilot_spacing must be > 0".to_string());
        } else {
            if self.n_subcarriers % self.pilot_spacing != 0 {
                errs.push(format!(
                    "grid.pilot_spacing {} does not divide n_subcarriers {}",
                    self.pilot_spacing, self.n_subcarriers
                ));
            }
            if self.pilot_stagger >= self.pilot_spacing {
                errs.push(format!(
                    "grid.pilot_stagger {} must be < pilot_spacing {}",
                    self.pilot_stagger, self.pilot_spacing
                ));
            }
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn n_symbols(&self) -> usize {
        self.subframes * SYMBOLS_PER_SUBFRAME
    }

    pub fn n_cells(&self) -> usize {
        self.n_subcarriers * self.n_symbols()
    }

    pub fn pilots_per_symbol(&self) -> usize {
        self.n_subcarriers / self.pilot_spacing
    }

    pub fn pilot_symbol_count(&self) -> usize {
        self.pilot_symbols.len() * self.subframes
    }

    pub fn n_pilots(&self) -> usize {
        self.pilots_per_symbol() * self.pilot_symbol_count()
    }

    pub fn n_data_cells(&self) -> usize {
        self.n_cells() - self.n_pilots()
    }

    /// Shape `[2, P_t, P_f]` of the classifier input extracted from one frame.
    pub fn tensor_shape(&self) -> [usize; 3] {
        [2, self.pilot_symbol_count(), self.pilots_per_symbol()]
    }

    /// The frame's known pilot sequence (unit-modulus QPSK, identical for every device).
    pub fn pilot_sequence(&self) -> Vec<Complex64> {
        pilot_sequence(self.pilot_seed, self.n_pilots())
    }
}

/// A `(subcarrier, symbol)` coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub subcarrier: usize,
    pub symbol: usize,
}

/// Pilot coordinates sorted by (symbol, subcarrier). Consecutive pilot symbols
/// of a subframe alternate between offset 0 and `pilot_stagger`.
pub fn pilot_positions(config: &GridConfig) -> Vec<Position> {
    let mut out = Vec::with_capacity(config.n_pilots());
    for sf in 0..config.subframes {
        for (j, &s) in config.pilot_symbols.iter().enumerate() {
            let symbol = sf * SYMBOLS_PER_SUBFRAME + s;
            let offset = if j % 2 == 1 { config.pilot_stagger } else { 0 };
            let mut k = offset;
            while k < config.n_subcarriers {
                out.push(Position { subcarrier: k, symbol });
                k += config.pilot_spacing;
            }
        }
    }
    out
}

/// Gray-mapped, unit-energy QPSK. Bits are `0`/`1`; the first bit of a pair
/// picks the sign of I, the second the sign of Q.
pub fn modulate_qpsk(bits: &[u8]) -> Result<Vec<Complex64>> {
    if bits.len() % 2 != 0 {
        return Err(Error::Sizing(format!("QPSK needs an even bit count, got {}", bits.len())));
    }
    Ok(bits
        .chunks_exact(2)
        .map(|p| {
            let i = if p[0] == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
            let q = if p[1] == 0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
            Complex64::new(i, q)
        })
        .collect())
}

/// Pseudo-random unit-modulus QPSK sequence.
pub fn pilot_sequence(seed: u64, len: usize) -> Vec<Complex64> {
    let mut rng = rng_for(seed, "pilot-sequence", &[]);
    let bits: Vec<u8> = (0..2 * len).map(|_| rng.random_range(0..2u8)).collect();
    modulate_qpsk(&bits).expect("even length")
}

pub fn random_bits(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = rng_for(seed, "data-bits", &[]);
    (0..len).map(|_| rng.random_range(0..2u8)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceGrid {
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub cells: Vec<Complex64>,
    pub pilot_mask: Vec<bool>,
    pub frame_id: u64,
}

impl ResourceGrid {
    #[inline]
    pub fn index(&self, subcarrier: usize, symbol: usize) -> usize {
        symbol * self.n_subcarriers + subcarrier
    }

    pub fn at(&self, pos: Position) -> Complex64 {
        self.cells[self.index(pos.subcarrier, pos.symbol)]
    }

    pub fn average_power(&self) -> f64 {
        self.cells.iter().map(|c| c.norm_sqr()).sum::<f64>() / self.cells.len() as f64
    }

    /// Data cells in row-major order.
    pub fn data_cells(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.cells
            .iter()
            .zip(&self.pilot_mask)
            .filter(|(_, &p)| !p)
            .map(|(c, _)| *c)
    }

    pub fn matches(&self, config: &GridConfig) -> bool {
        self.n_subcarriers == config.n_subcarriers && self.n_symbols == config.n_symbols()
    }
}

/// Map pilots and QPSK data onto one frame and normalize to unit average power.
///
/// The normalizing scale is skipped when the power is already within 1e-9 of
/// unity, so unit-modulus pilots round-trip bit-exactly.
pub fn build_frame(
    config: &GridConfig,
    pilot_seq: &[Complex64],
    data_bits: &[u8],
    frame_id: u64,
) -> Result<ResourceGrid> {
    config.check()?;
    let n_pilots = config.n_pilots();
    if pilot_seq.len() != n_pilots {
        return Err(Error::Sizing(format!(
            "pilot sequence has {} symbols, frame has {} pilot cells",
            pilot_seq.len(),
            n_pilots
        )));
    }
    let n_data = config.n_data_cells();
    if data_bits.len() != 2 * n_data {
        return Err(Error::Sizing(format!(
            "data has {} bits, frame needs {} (2 x {} data cells)",
            data_bits.len(),
            2 * n_data,
            n_data
        )));
    }
    let data = modulate_qpsk(data_bits)?;

    let k = config.n_subcarriers;
    let t = config.n_symbols();
    let mut grid = ResourceGrid {
        n_subcarriers: k,
        n_symbols: t,
        cells: vec![Complex64::new(0.0, 0.0); k * t],
        pilot_mask: vec![false; k * t],
        frame_id,
    };
    for (pos, &p) in pilot_positions(config).iter().zip(pilot_seq) {
        let i = grid.index(pos.subcarrier, pos.symbol);
        grid.cells[i] = p;
        grid.pilot_mask[i] = true;
    }
    let mut data_iter = data.into_iter();
    for i in 0..grid.cells.len() {
        if !grid.pilot_mask[i] {
            grid.cells[i] = data_iter.next().expect("data length checked");
        }
    }

    let power = grid.average_power();
    if power > 0.0 && (power - 1.0).abs() > 1e-9 {
        let scale = 1.0 / power.sqrt();
        grid.cells.iter_mut().for_each(|c| *c *= scale);
    }
    Ok(grid)
}

/// Pilot observations of one frame as a real `[2, P_t, P_f]` tensor
/// (channel 0 in-phase, channel 1 quadrature).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotTensor {
    pub shape: [usize; 3],
    pub values: Vec<f64>,
    pub device_label: usize,
    pub condition_id: usize,
}

impl PilotTensor {
    pub fn n_res(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    /// Complex value of resource element `re` (pilot order).
    pub fn re(&self, re: usize) -> Complex64 {
        let n = self.n_res();
        Complex64::new(self.values[re], self.values[n + re])
    }
}

pub fn extract_pilots(
    grid: &ResourceGrid,
    config: &GridConfig,
    label: usize,
    condition: usize,
) -> Result<PilotTensor> {
    if !grid.matches(config) {
        return Err(Error::Shape(format!(
            "grid is {}x{}, config expects {}x{}",
            grid.n_subcarriers,
            grid.n_symbols,
            config.n_subcarriers,
            config.n_symbols()
        )));
    }
    let positions = pilot_positions(config);
    let n = positions.len();
    let mut values = vec![0.0; 2 * n];
    for (i, pos) in positions.iter().enumerate() {
        let idx = grid.index(pos.subcarrier, pos.symbol);
        if !grid.pilot_mask[idx] {
            return Err(Error::Shape(format!(
                "grid cell ({}, {}) is not a pilot under this config",
                pos.subcarrier, pos.symbol
            )));
        }
        let c = grid.cells[idx];
        values[i] = c.re;
        values[n + i] = c.im;
    }
    Ok(PilotTensor { shape: config.tensor_shape(), values, device_label: label, condition_id: condition })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_config() -> GridConfig {
        GridConfig {
            n_subcarriers: 12,
            pilot_symbols: vec![0, 4],
            pilot_spacing: 6,
            pilot_stagger: 3,
            subframes: 1,
            pilot_seed: 1,
        }
    }

    #[test]
    fn default_lattice_has_480_pilots() {
        let cfg = GridConfig::default();
        // 10 subframes x 4 pilot symbols x (72 / 6) subcarriers
        assert_eq!(pilot_positions(&cfg).len(), 480);
        assert_eq!(cfg.pilots_per_symbol(), 12);
        assert_eq!(cfg.pilot_symbol_count(), 40);
        assert_eq!(cfg.tensor_shape(), [2, 40, 12]);
    }

    #[test]
    fn diamond_offsets_alternate() {
        let pos = pilot_positions(&small_config());
        let on = |s: usize| -> Vec<usize> {
            pos.iter().filter(|p| p.symbol == s).map(|p| p.subcarrier).collect()
        };
        assert_eq!(on(0), vec![0, 6]);
        assert_eq!(on(4), vec![3, 9]);
    }

    #[test]
    fn zero_stagger_repeats_subcarriers() {
        let cfg = GridConfig { pilot_stagger: 0, ..GridConfig::default() };
        let pos = pilot_positions(&cfg);
        let first: Vec<usize> = pos.iter().filter(|p| p.symbol == 0).map(|p| p.subcarrier).collect();
        for s in [4, 7, 11, 18, 137] {
            let here: Vec<usize> = pos.iter().filter(|p| p.symbol == s).map(|p| p.subcarrier).collect();
            assert_eq!(here, first);
        }
    }

    #[test]
    fn positions_unique_and_sorted() {
        let pos = pilot_positions(&GridConfig::default());
        let set: HashSet<_> = pos.iter().collect();
        assert_eq!(set.len(), pos.len());
        assert!(pos.windows(2).all(|w| (w[0].symbol, w[0].subcarrier) < (w[1].symbol, w[1].subcarrier)));
    }

    #[test]
    fn qpsk_mapping() {
        let s = modulate_qpsk(&[0, 0, 0, 1, 1, 0, 1, 1]).unwrap();
        let h = FRAC_1_SQRT_2;
        assert_eq!(s[0], Complex64::new(h, h));
        assert_eq!(s[1], Complex64::new(h, -h));
        assert_eq!(s[2], Complex64::new(-h, h));
        assert_eq!(s[3], Complex64::new(-h, -h));
        for x in s {
            assert!((x.norm_sqr() - 1.0).abs() < 1e-15);
        }
        assert!(matches!(modulate_qpsk(&[0, 1, 1]), Err(Error::Sizing(_))));
    }

    #[test]
    fn zero_bits_unit_pilots() {
        let cfg = GridConfig::default();
        let pilots = vec![Complex64::new(1.0, 0.0); cfg.n_pilots()];
        let bits = vec![0u8; 2 * cfg.n_data_cells()];
        let g = build_frame(&cfg, &pilots, &bits, 0).unwrap();
        let h = FRAC_1_SQRT_2;
        for (c, &p) in g.cells.iter().zip(&g.pilot_mask) {
            if p {
                assert_eq!(*c, Complex64::new(1.0, 0.0));
            } else {
                assert_eq!(*c, Complex64::new(h, h));
            }
        }
        let t = extract_pilots(&g, &cfg, 0, 0).unwrap();
        assert!(t.values[..480].iter().all(|&v| v == 1.0));
        assert!(t.values[480..].iter().all(|&v| v == 0.0));
        assert_eq!(t.values.len(), 960);
    }

    #[test]
    fn sizing_errors() {
        let cfg = GridConfig::default();
        let pilots = cfg.pilot_sequence();
        let bits = vec![0u8; 2 * cfg.n_data_cells()];
        assert!(matches!(build_frame(&cfg, &pilots[1..], &bits, 0), Err(Error::Sizing(_))));
        assert!(matches!(build_frame(&cfg, &pilots, &bits[2..], 0), Err(Error::Sizing(_))));
    }

    #[test]
    fn build_is_deterministic_and_round_trips() {
        let cfg = GridConfig::default();
        let pilots = cfg.pilot_sequence();
        let bits = random_bits(11, 2 * cfg.n_data_cells());
        let a = build_frame(&cfg, &pilots, &bits, 3).unwrap();
        let b = build_frame(&cfg, &pilots, &bits, 3).unwrap();
        assert_eq!(a, b);
        let p = (a.average_power() - 1.0).abs();
        assert!(p < 0.1);
        let t = extract_pilots(&a, &cfg, 2, 5).unwrap();
        for (i, &p) in pilots.iter().enumerate() {
            assert_eq!(t.re(i), p);
        }
        assert_eq!((t.device_label, t.condition_id), (2, 5));
    }

    #[test]
    fn mismatched_grid_rejected() {
        let cfg = GridConfig::default();
        let g = build_frame(&cfg, &cfg.pilot_sequence(), &vec![0; 2 * cfg.n_data_cells()], 0).unwrap();
        assert!(extract_pilots(&g, &small_config(), 0, 0).is_err());
        let shifted = GridConfig { pilot_stagger: 1, ..cfg };
        assert!(extract_pilots(&g, &shifted, 0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = GridConfig { n_subcarriers: 70, pilot_stagger: 6, pilot_symbols: vec![0, 14], ..GridConfig::default() };
        let errs = bad.validate();
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(GridConfig::default().validate().is_empty());
    }
}
