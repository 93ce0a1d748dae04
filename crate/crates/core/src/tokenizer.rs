//! 9×9×8 spatial–spectral patches and the sinusoidal encodings attached to them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsidata::HsiCube;
use crate::tensor::Tensor;

pub const PATCH_ROWS: usize = 9;
pub const PATCH_COLS: usize = 9;
pub const PATCH_BANDS: usize = 8;
pub const PATCH_LEN: usize = PATCH_ROWS * PATCH_COLS * PATCH_BANDS;

/// Residual extents dropped because they do not fill a whole patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Crop {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
}

/// The `(p, q, k)` patch grid of a cube.
///
/// Token `t = (p·Q + q)·K + k`; each row of `patches` is one 648-value patch
/// flattened row-outer, column-middle, band-inner.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub patches: Tensor,
    pub crop: Crop,
}

impl TokenGrid {
    pub fn n_tokens(&self) -> usize {
        self.p * self.q * self.k
    }

    pub fn token(&self, p: usize, q: usize, k: usize) -> usize {
        (p * self.q + q) * self.k + k
    }

    /// Inverse of [`TokenGrid::token`].
    pub fn coords(&self, t: usize) -> (usize, usize, usize) {
        (t / (self.q * self.k), (t / self.k) % self.q, t % self.k)
    }

    /// Cropped extents `(9P, 9Q, 8K)`.
    pub fn extents(&self) -> (usize, usize, usize) {
        (
            PATCH_ROWS * self.p,
            PATCH_COLS * self.q,
            PATCH_BANDS * self.k,
        )
    }

    /// Token and in-patch offset holding cropped voxel `(i, j, b)`.
    pub fn locate(&self, i: usize, j: usize, b: usize) -> (usize, usize) {
        let t = self.token(i / PATCH_ROWS, j / PATCH_COLS, b / PATCH_BANDS);
        let off = ((i % PATCH_ROWS) * PATCH_COLS + j % PATCH_COLS) * PATCH_BANDS + b % PATCH_BANDS;
        (t, off)
    }

    /// For every voxel of the cropped cube (row-major `i, j, b`), its flat
    /// index in the `N × 648` token matrix.
    pub fn cube_gather_index(&self) -> Vec<usize> {
        let (h, w, bands) = self.extents();
        let mut index = Vec::with_capacity(h * w * bands);
        for i in 0..h {
            for j in 0..w {
                for b in 0..bands {
                    let (t, off) = self.locate(i, j, b);
                    index.push(t * PATCH_LEN + off);
                }
            }
        }
        index
    }
}

/// Partitions a cube into non-overlapping 9×9×8 patches, cropping residuals.
pub fn partition(cube: &HsiCube) -> Result<TokenGrid> {
    let (h, w, b) = (cube.height(), cube.width(), cube.bands());
    if h < PATCH_ROWS || w < PATCH_COLS || b < PATCH_BANDS {
        return Err(Error::invalid(format!(
            "cube {h}×{w}×{b} is smaller than one 9×9×8 patch"
        )));
    }
    let (p, q, k) = (h / PATCH_ROWS, w / PATCH_COLS, b / PATCH_BANDS);
    let crop = Crop {
        rows: h % PATCH_ROWS,
        cols: w % PATCH_COLS,
        bands: b % PATCH_BANDS,
    };
    if crop != Crop::default() {
        log::warn!(
            "cropping {} rows, {} cols, {} bands that do not fill a patch",
            crop.rows,
            crop.cols,
            crop.bands
        );
    }
    let mut data = Vec::with_capacity(p * q * k * PATCH_LEN);
    for pi in 0..p {
        for qi in 0..q {
            for ki in 0..k {
                for di in 0..PATCH_ROWS {
                    for dj in 0..PATCH_COLS {
                        let px = cube.spectrum(pi * PATCH_ROWS + di, qi * PATCH_COLS + dj);
                        data.extend_from_slice(
                            &px[ki * PATCH_BANDS..(ki + 1) * PATCH_BANDS],
                        );
                    }
                }
            }
        }
    }
    Ok(TokenGrid {
        p,
        q,
        k,
        patches: Tensor::new([p * q * k, PATCH_LEN], data)?,
        crop,
    })
}

/// Values of the cropped cube as a `[9P, 9Q, 8K]` tensor.
pub fn cropped_values(cube: &HsiCube, grid: &TokenGrid) -> Tensor {
    let (h, w, b) = grid.extents();
    let mut data = Vec::with_capacity(h * w * b);
    for i in 0..h {
        for j in 0..w {
            data.extend_from_slice(&cube.spectrum(i, j)[..b]);
        }
    }
    Tensor::new([h, w, b], data).expect("cropped extents")
}

/// Unit in which band-center wavelengths enter `ω = 2π/λ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavelengthUnit {
    #[default]
    Micrometers,
    Nanometers,
}

impl WavelengthUnit {
    fn from_micrometers(self, um: f64) -> f64 {
        match self {
            WavelengthUnit::Micrometers => um,
            WavelengthUnit::Nanometers => um * 1e3,
        }
    }
}

/// Mean wavelength and angular frequency of every spectral group.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMeta {
    pub lambda: Vec<f64>,
    pub omega: Vec<f64>,
}

impl SpectralMeta {
    /// Groups `wavelengths_um` into blocks of eight; trailing partial groups are dropped.
    pub fn from_wavelengths(wavelengths_um: &[f64], unit: WavelengthUnit) -> Result<Self> {
        let lambda: Vec<f64> = wavelengths_um
            .chunks_exact(PATCH_BANDS)
            .map(|g| mean_wavelength(g).map(|l| unit.from_micrometers(l)))
            .collect::<Result<_>>()?;
        let omega = lambda.iter().map(|l| std::f64::consts::TAU / l).collect();
        Ok(Self { lambda, omega })
    }

    pub fn k(&self) -> usize {
        self.lambda.len()
    }

    /// `K × d` table of [`spec_enc`] rows.
    pub fn encoding_table(&self, d: usize) -> Result<Tensor> {
        let rows = self
            .lambda
            .iter()
            .map(|&l| spec_enc(l, d))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

/// Representative wavelength of an 8-band group: the arithmetic mean.
pub fn mean_wavelength(band_centers: &[f64]) -> Result<f64> {
    if band_centers.len() != PATCH_BANDS || band_centers.iter().any(|&w| w <= 0.0) {
        return Err(Error::invalid(format!(
            "expected {PATCH_BANDS} positive band centers, got {band_centers:?}"
        )));
    }
    Ok(band_centers.iter().sum::<f64>() / PATCH_BANDS as f64)
}

fn sinusoid(phase: f64, d: usize) -> Vec<f64> {
    (0..d / 2)
        .flat_map(|i| {
            let arg = phase / 10000f64.powf(2.0 * i as f64 / d as f64);
            [arg.sin(), arg.cos()]
        })
        .collect()
}

/// Multi-frequency wavelength encoding: entries `2i, 2i+1` are
/// `sin, cos (ω / 10000^(2i/d))` with `ω = 2π/λ`.
pub fn spec_enc(lambda: f64, d: usize) -> Result<Vec<f64>> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "encoding width must be even and >= 2, got {d}"
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("wavelength must be positive, got {lambda}")));
    }
    Ok(sinusoid(std::f64::consts::TAU / lambda, d))
}

/// Standard sinusoidal position encoding of an integer position.
pub fn sinusoidal_pe(pos: usize, d: usize) -> Result<Vec<f64>> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "encoding width must be even and >= 2, got {d}"
        )));
    }
    Ok(sinusoid(pos as f64, d))
}
