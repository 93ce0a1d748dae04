//! Random flips and per-band offset jitter.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::hsidata::HsiCube;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flips: bool,
    /// Standard deviation of the additive per-band offset, in normalized units.
    pub jitter_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flips: true,
            jitter_std: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            flips: false,
            jitter_std: 0.0,
        }
    }
}

fn remap(cube: &HsiCube, src: impl Fn(usize, usize) -> (usize, usize)) -> HsiCube {
    let (h, w, b) = (cube.height(), cube.width(), cube.bands());
    let mut values = Vec::with_capacity(cube.values().len());
    let mut labels = cube.labels().map(|_| Vec::with_capacity(h * w));
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = src(i, j);
            values.extend_from_slice(&cube.values()[(si * w + sj) * b..(si * w + sj + 1) * b]);
            if let (Some(out), Some(l)) = (labels.as_mut(), cube.labels()) {
                out.push(l[si * w + sj]);
            }
        }
    }
    HsiCube::new(h, w, b, values, cube.wavelengths().to_vec(), labels).expect("same extents")
}

/// Mirrors columns (left ↔ right).
pub fn flip_horizontal(cube: &HsiCube) -> HsiCube {
    let w = cube.width();
    remap(cube, |i, j| (i, w - 1 - j))
}

/// Mirrors rows (top ↔ bottom).
pub fn flip_vertical(cube: &HsiCube) -> HsiCube {
    let h = cube.height();
    remap(cube, |i, j| (h - 1 - i, j))
}

/// Each flip fires with probability 1/2, then every band gets one Gaussian
/// offset shared by all its pixels. Labels follow the pixels.
pub fn augment(cube: &HsiCube, config: &AugmentConfig, seed: u64) -> HsiCube {
    let mut rng = seed::rng(seed);
    let flip_h = rng.random_bool(0.5);
    let flip_v = rng.random_bool(0.5);
    let mut out = cube.clone();
    if config.flips && flip_h {
        out = flip_horizontal(&out);
    }
    if config.flips && flip_v {
        out = flip_vertical(&out);
    }
    if config.jitter_std > 0.0 {
        let normal = Normal::new(0.0, config.jitter_std).expect("positive std");
        let offsets: Vec<f64> = (0..cube.bands()).map(|_| normal.sample(&mut rng)).collect();
        let values = out
            .values()
            .chunks(cube.bands())
            .flat_map(|px| px.iter().zip(&offsets).map(|(v, o)| v + o))
            .collect();
        out = out.with_values(values);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsidata::gen_synthetic;

    fn band_sorted(cube: &HsiCube, b: usize) -> Vec<f64> {
        let mut v: Vec<f64> = cube.values().chunks(cube.bands()).map(|px| px[b]).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn flips_are_involutions() {
        let cube = gen_synthetic(10, 9, 8, 2, 3).unwrap();
        assert_eq!(flip_horizontal(&flip_horizontal(&cube)), cube);
        assert_eq!(flip_vertical(&flip_vertical(&cube)), cube);
        assert_ne!(flip_horizontal(&cube), cube);
    }

    #[test]
    fn flips_keep_band_multisets_and_pairing() {
        let cube = gen_synthetic(10, 9, 8, 3, 1).unwrap();
        let f = flip_vertical(&flip_horizontal(&cube));
        for b in 0..8 {
            assert_eq!(band_sorted(&f, b), band_sorted(&cube, b));
        }
        assert_eq!(f.spectrum(0, 0), cube.spectrum(9, 8));
        assert_eq!(f.label(0, 0), cube.label(9, 8));
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let cube = gen_synthetic(10, 9, 8, 2, 3).unwrap();
        for s in 0..8 {
            assert_eq!(augment(&cube, &AugmentConfig::off(), s), cube);
        }
    }

    #[test]
    fn deterministic_and_offsets_per_band() {
        let cube = gen_synthetic(10, 9, 8, 2, 3).unwrap();
        let cfg = AugmentConfig {
            flips: false,
            jitter_std: 0.01,
        };
        let a = augment(&cube, &cfg, 11);
        assert_eq!(a, augment(&cube, &cfg, 11));
        let d0: Vec<f64> = (0..8).map(|b| a.value(0, 0, b) - cube.value(0, 0, b)).collect();
        let d1: Vec<f64> = (0..8).map(|b| a.value(3, 2, b) - cube.value(3, 2, b)).collect();
        for (x, y) in d0.iter().zip(&d1) {
            assert!((x - y).abs() < 1e-12);
            assert!(x.abs() < 0.06);
        }
    }
}
