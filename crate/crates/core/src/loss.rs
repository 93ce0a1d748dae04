//! Reconstruction objective: masked-voxel MSE plus the mean spectral angle
//! over all pixels, mixed as `α·MSE + (1 − α)·SAM`.
//!
//! The MSE term only touches voxels in the mask, so its gradient is exactly
//! zero elsewhere; the SAM term reaches every voxel of every valid pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::VoxelMask;
use crate::tensor::{clamp_cos, Graph, Tensor, Var};

/// Spectra with a smaller L2 norm are excluded from the angle average.
pub const MIN_SPECTRUM_NORM: f64 = 1e-12;

pub const DEFAULT_ALPHA: f64 = 0.5;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Angle between two spectra in radians, with the cosine clamped as in
/// training. `None` when either spectrum has (near) zero norm.
pub fn spectral_angle(y: &[f64], y_hat: &[f64]) -> Option<f64> {
    let (ny, nh) = (norm(y), norm(y_hat));
    if ny <= MIN_SPECTRUM_NORM || nh <= MIN_SPECTRUM_NORM {
        return None;
    }
    let dot: f64 = y.iter().zip(y_hat).map(|(a, b)| a * b).sum();
    Some(clamp_cos(dot / (ny * nh)).acos())
}

/// Per-pixel angles of two `[.., bands]` arrays; `None` marks excluded pixels.
pub fn sam_map(y: &Tensor, y_hat: &Tensor) -> Result<Vec<Option<f64>>> {
    if y.shape() != y_hat.shape() {
        return Err(Error::Shape {
            op: "sam_map",
            lhs: y.shape().to_vec(),
            rhs: y_hat.shape().to_vec(),
        });
    }
    let b = *y.shape().last().unwrap();
    Ok(y.data()
        .chunks(b)
        .zip(y_hat.data().chunks(b))
        .map(|(a, h)| spectral_angle(a, h))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mse: f64,
    pub l_sam: f64,
    pub l_rec: f64,
    /// `|M|`
    pub n_masked: usize,
    /// `|Ω|`, pixels contributing to the angle term.
    pub n_pixels: usize,
    /// Zero-norm pixels left out of the angle average.
    pub excluded_pixels: usize,
    pub alpha: f64,
}

fn check_extents(op: &'static str, g: &Graph, y_hat: Var, y: &Tensor) -> Result<()> {
    if g.shape(y_hat) != y.shape() {
        return Err(Error::Shape {
            op,
            lhs: y.shape().to_vec(),
            rhs: g.shape(y_hat).to_vec(),
        });
    }
    Ok(())
}

/// Mean squared error over the voxels in `mask` only.
pub fn mse_masked(g: &mut Graph, y_hat: Var, y: &Tensor, mask: &VoxelMask) -> Result<Var> {
    check_extents("mse_masked", g, y_hat, y)?;
    if mask.len() != y.len() {
        return Err(Error::invalid("mask extents differ from the cube"));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let target = g.constant(y.clone());
    let indicator = g.constant(mask.indicator().reshape(y.shape())?);
    let diff = g.sub(y_hat, target)?;
    let sq = g.mul(diff, diff)?;
    let kept = g.mul(sq, indicator)?;
    let total = g.sum(kept)?;
    g.scale(total, 1.0 / count as f64)
}

/// Mean spectral angle over all pixels with non-zero spectra.
/// Returns the loss node, the pixel count used and the excluded count.
pub fn sam_loss(g: &mut Graph, y_hat: Var, y: &Tensor) -> Result<(Var, usize, usize)> {
    check_extents("sam_loss", g, y_hat, y)?;
    let bands = *y.shape().last().unwrap();
    let n_pix = y.len() / bands;
    let yh_val = g.value(y_hat).data();
    let valid: Vec<usize> = (0..n_pix)
        .filter(|&p| {
            let r = p * bands..(p + 1) * bands;
            norm(&y.data()[r.clone()]) > MIN_SPECTRUM_NORM && norm(&yh_val[r]) > MIN_SPECTRUM_NORM
        })
        .collect();
    if valid.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let y_rows: Vec<f64> = valid
        .iter()
        .flat_map(|&p| y.data()[p * bands..(p + 1) * bands].iter().copied())
        .collect();
    let y_norms: Vec<f64> = y_rows.chunks(bands).map(norm).collect();

    let flat = g.reshape(y_hat, [n_pix, bands])?;
    let yh = g.gather_rows(flat, &valid)?;
    let yc = g.constant(Tensor::new([valid.len(), bands], y_rows)?);
    let prod = g.mul(yh, yc)?;
    let dot = g.sum_last(prod)?;
    let sq = g.mul(yh, yh)?;
    let sq_sum = g.sum_last(sq)?;
    let yh_norm = g.sqrt(sq_sum)?;
    let y_norm = g.constant(Tensor::new([valid.len()], y_norms)?);
    let denom = g.mul(yh_norm, y_norm)?;
    let cos = g.div(dot, denom)?;
    let angles = g.acos(cos)?;
    let loss = g.mean(angles)?;
    Ok((loss, valid.len(), n_pix - valid.len()))
}

/// `α·L_MSE + (1 − α)·L_SAM`.
pub fn rec_loss(
    g: &mut Graph,
    y_hat: Var,
    y: &Tensor,
    mask: &VoxelMask,
    alpha: f64,
) -> Result<(Var, LossReport)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let mse = mse_masked(g, y_hat, y, mask)?;
    let (sam, n_pixels, excluded_pixels) = sam_loss(g, y_hat, y)?;
    let a = g.scale(mse, alpha)?;
    let b = g.scale(sam, 1.0 - alpha)?;
    let rec = g.add(a, b)?;
    let report = LossReport {
        l_mse: g.value(mse).item(),
        l_sam: g.value(sam).item(),
        l_rec: g.value(rec).item(),
        n_masked: mask.count(),
        n_pixels,
        excluded_pixels,
        alpha,
    };
    Ok((rec, report))
}

/// Loss values without gradients.
pub fn evaluate_rec_loss(y: &Tensor, y_hat: &Tensor, mask: &VoxelMask, alpha: f64) -> Result<LossReport> {
    let mut g = Graph::new();
    let yh = g.constant(y_hat.clone());
    rec_loss(&mut g, yh, y, mask, alpha).map(|(_, r)| r)
}
