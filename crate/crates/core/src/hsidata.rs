//! Hyperspectral cubes: the in-memory model, the HSC container, label splits,
//! per-band normalization and a labeled synthetic generator.
//!
//! # HSC layout (little-endian)
//!
//! ```text
//! "HSC1"                       4 bytes
//! H, W, B                      u32 each
//! label flag                   u8 (0 or 1)
//! wavelengths                  B × f64, micrometers, strictly increasing
//! values                       H·W·B × f64, i outer, j middle, band inner
//! labels (if flag = 1)         H·W × u16, 0 = unlabeled
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::spectral_angle;
use crate::seed;

pub const HSC_MAGIC: &[u8; 4] = b"HSC1";
const HEADER_LEN: usize = 4 + 3 * 4 + 1;

/// Floor applied to per-band standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f64>,
    wavelengths: Vec<f64>,
    labels: Option<Vec<u16>>,
}

impl HsiCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        values: Vec<f64>,
        wavelengths: Vec<f64>,
        labels: Option<Vec<u16>>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::invalid(format!(
                "cube extents must be positive, got {height}×{width}×{bands}"
            )));
        }
        if values.len() != height * width * bands {
            return Err(Error::invalid(format!(
                "{} values for a {height}×{width}×{bands} cube",
                values.len()
            )));
        }
        if wavelengths.len() != bands {
            return Err(Error::invalid(format!(
                "{} wavelengths for {bands} bands",
                wavelengths.len()
            )));
        }
        check_wavelengths(&wavelengths).map_err(Error::invalid)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cube values must be finite"));
        }
        if let Some(l) = &labels {
            if l.len() != height * width {
                return Err(Error::invalid(format!(
                    "{} labels for {height}×{width} pixels",
                    l.len()
                )));
            }
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
            wavelengths,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn index(&self, i: usize, j: usize, b: usize) -> usize {
        (i * self.width + j) * self.bands + b
    }

    pub fn value(&self, i: usize, j: usize, b: usize) -> f64 {
        self.values[self.index(i, j, b)]
    }

    pub fn spectrum(&self, i: usize, j: usize) -> &[f64] {
        let start = self.index(i, j, 0);
        &self.values[start..start + self.bands]
    }

    pub fn label(&self, i: usize, j: usize) -> Option<u16> {
        self.labels.as_ref().map(|l| l[i * self.width + j])
    }

    /// Largest class id present, i.e. the class count when ids run `1..=n`.
    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize)
    }

    pub fn with_labels(mut self, labels: Option<Vec<u16>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.height * self.width {
                return Err(Error::invalid("label count does not match pixel count"));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }

    /// `9×9×B` window centered on `(i, j)`, replicating edge pixels outside the image.
    pub fn window(&self, i: usize, j: usize, size: usize) -> HsiCube {
        let half = (size / 2) as isize;
        let mut values = Vec::with_capacity(size * size * self.bands);
        for di in 0..size as isize {
            let si = (i as isize + di - half).clamp(0, self.height as isize - 1) as usize;
            for dj in 0..size as isize {
                let sj = (j as isize + dj - half).clamp(0, self.width as isize - 1) as usize;
                values.extend_from_slice(self.spectrum(si, sj));
            }
        }
        HsiCube {
            height: size,
            width: size,
            bands: self.bands,
            values,
            wavelengths: self.wavelengths.clone(),
            labels: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_LEN + 8 * (self.bands + self.values.len()) + 2 * self.height * self.width,
        );
        out.extend_from_slice(HSC_MAGIC);
        for d in [self.height, self.width, self.bands] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(u8::from(self.labels.is_some()));
        for v in self.wavelengths.iter().chain(&self.values) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != HSC_MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected \"HSC1\"", String::from_utf8_lossy(magic)),
            ));
        }
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let bands = r.u32("bands")? as usize;
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::format(4, "zero extent"));
        }
        let flag_at = r.pos;
        let flag = r.take(1, "label flag")?[0];
        if flag > 1 {
            return Err(Error::format(flag_at, format!("label flag {flag}")));
        }
        let wl_at = r.pos;
        let wavelengths = r.f64s(bands, "wavelengths")?;
        if let Err(msg) = check_wavelengths(&wavelengths) {
            return Err(Error::format(wl_at, msg));
        }
        let values_at = r.pos;
        let values = r.f64s(height * width * bands, "values")?;
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(values_at + 8 * k, "non-finite value"));
        }
        let labels = if flag == 1 {
            let raw = r.take(2 * height * width, "labels")?;
            Some(
                raw.chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            )
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after payload"));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
            wavelengths,
            labels,
        })
    }
}

fn check_wavelengths(wl: &[f64]) -> std::result::Result<(), String> {
    if let Some(k) = wl.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(format!("wavelength {k} is not positive ({})", wl[k]));
    }
    if let Some(k) = wl.windows(2).position(|p| p[1] <= p[0]) {
        return Err(format!(
            "wavelengths not strictly increasing at band {} ({} <= {})",
            k + 1,
            wl[k + 1],
            wl[k]
        ));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    HsiCube::from_bytes(&bytes)
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cube.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Per-band mean and (floored) population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn of(cube: &HsiCube) -> Self {
        let b = cube.bands;
        let n = (cube.height * cube.width) as f64;
        let mut mean = vec![0.0; b];
        for px in cube.values.chunks(b) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; b];
        for px in cube.values.chunks(b) {
            for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, cube: &HsiCube) -> HsiCube {
        let values = cube
            .values
            .chunks(cube.bands)
            .flat_map(|px| {
                px.iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((v, m), s)| (v - m) / s)
            })
            .collect();
        cube.with_values(values)
    }

    pub fn denormalize(&self, cube: &HsiCube) -> HsiCube {
        let values = cube
            .values
            .chunks(cube.bands)
            .flat_map(|px| {
                px.iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((v, m), s)| v * s + m)
            })
            .collect();
        cube.with_values(values)
    }
}

/// Z-scores every band; the returned stats undo the transform.
pub fn normalize(cube: &HsiCube) -> (HsiCube, NormStats) {
    let stats = NormStats::of(cube);
    (stats.apply(cube), stats)
}

/// Minimum spectral angle between any two generated class endmembers.
pub const MIN_ENDMEMBER_ANGLE: f64 = 0.15;

/// Labeled synthetic cube: rectangular class segments, Gaussian-bump
/// endmembers, a smooth brightness field and 2 % Gaussian noise.
pub fn gen_synthetic(
    height: usize,
    width: usize,
    bands: usize,
    n_classes: usize,
    seed: u64,
) -> Result<HsiCube> {
    if n_classes < 2 || bands < 8 || height < 9 || width < 9 {
        return Err(Error::invalid(format!(
            "gen_synthetic needs H, W >= 9, B >= 8 and at least 2 classes; got {height}×{width}×{bands} with {n_classes} classes"
        )));
    }
    if n_classes > u16::MAX as usize {
        return Err(Error::invalid("too many classes"));
    }
    let mut rng = seed::rng(seed);
    let wavelengths: Vec<f64> = (0..bands)
        .map(|b| 0.4 + 2.1 * b as f64 / (bands - 1) as f64)
        .collect();

    let endmembers = sample_endmembers(&mut rng, &wavelengths, n_classes)?;
    let class_map = sample_segments(&mut rng, height, width, n_classes);

    let (f1, f2) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let (p1, p2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let tau = std::f64::consts::TAU;
    let mut signal = Vec::with_capacity(height * width * bands);
    for i in 0..height {
        for j in 0..width {
            let fi = i as f64 / height as f64;
            let fj = j as f64 / width as f64;
            let brightness =
                1.0 + 0.25 * (tau * (f1 * fi + p1)).sin() * (tau * (f2 * fj + p2)).cos();
            let class = class_map[i * width + j];
            signal.extend(endmembers[class].iter().map(|e| e * brightness));
        }
    }
    let lo = signal.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = signal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let noise = Normal::new(0.0, 0.02 * (hi - lo).max(f64::MIN_POSITIVE)).unwrap();
    let values = signal.into_iter().map(|s| s + noise.sample(&mut rng)).collect();
    let labels = class_map.iter().map(|&c| c as u16 + 1).collect();
    HsiCube::new(height, width, bands, values, wavelengths, Some(labels))
}

fn sample_endmembers(
    rng: &mut impl Rng,
    wavelengths: &[f64],
    n_classes: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut attempts = 0;
    while out.len() < n_classes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::invalid(format!(
                "could not draw {n_classes} endmembers separated by {MIN_ENDMEMBER_ANGLE} rad"
            )));
        }
        let bumps = rng.random_range(2..=4);
        let params: Vec<(f64, f64, f64)> = (0..bumps)
            .map(|_| {
                (
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.4..2.5),
                    rng.random_range(0.08..0.35),
                )
            })
            .collect();
        let spectrum: Vec<f64> = wavelengths
            .iter()
            .map(|&l| {
                0.05 + params
                    .iter()
                    .map(|(a, c, w)| a * (-(l - c).powi(2) / (2.0 * w * w)).exp())
                    .sum::<f64>()
            })
            .collect();
        if out
            .iter()
            .all(|e| spectral_angle(e, &spectrum).is_some_and(|a| a > MIN_ENDMEMBER_ANGLE))
        {
            out.push(spectrum);
        }
    }
    Ok(out)
}

/// Splits the image into a jittered grid of rectangles and assigns every
/// class to at least one of them.
fn sample_segments(rng: &mut impl Rng, height: usize, width: usize, n_classes: usize) -> Vec<usize> {
    let cols = (n_classes as f64).sqrt().ceil() as usize;
    let rows = n_classes.div_ceil(cols);
    let rows = rows.min(height);
    let cols = cols.min(width);

    let cuts = |rng: &mut dyn rand::RngCore, extent: usize, parts: usize| -> Vec<usize> {
        let mut c = vec![0];
        for k in 1..parts {
            let base = extent * k / parts;
            let slack = (extent / (4 * parts)) as i64;
            let jitter = if slack > 0 {
                rng.random_range(-slack..=slack)
            } else {
                0
            };
            let prev = *c.last().unwrap();
            c.push(((base as i64 + jitter).max(prev as i64 + 1)) as usize);
        }
        c.push(extent);
        c
    };
    let row_cuts = cuts(rng, height, rows);
    let col_cuts = cuts(rng, width, cols);

    let mut assignment: Vec<usize> = (0..n_classes).collect();
    assignment.shuffle(rng);
    while assignment.len() < rows * cols {
        assignment.push(rng.random_range(0..n_classes));
    }
    if rows * cols < n_classes {
        // Extents too small for a full grid; fall back to horizontal stripes.
        return (0..height * width)
            .map(|px| (px / width) * n_classes / height)
            .collect();
    }

    let mut map = vec![0; height * width];
    for r in 0..rows {
        for c in 0..cols {
            let class = assignment[r * cols + c];
            for i in row_cuts[r]..row_cuts[r + 1] {
                for j in col_cuts[c]..col_cuts[c + 1] {
                    map[i * width + j] = class;
                }
            }
        }
    }
    map
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One row of a label-split CSV: `i,j,label,split` (0-based pixel indices).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub i: usize,
    pub j: usize,
    pub label: u16,
    pub split: Split,
}

/// Random per-class split keeping at least one train and one test pixel per
/// class whenever the class has two or more pixels.
pub fn make_split(cube: &HsiCube, train_fraction: f64, seed: u64) -> Result<Vec<SplitEntry>> {
    let labels = cube
        .labels()
        .ok_or_else(|| Error::invalid("cube has no labels"))?;
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid("train fraction must lie in [0, 1]"));
    }
    let mut rng = seed::rng(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); cube.n_classes() + 1];
    for (px, &l) in labels.iter().enumerate() {
        if l > 0 {
            by_class[l as usize].push(px);
        }
    }
    let mut entries = Vec::new();
    for (label, mut pixels) in by_class.into_iter().enumerate() {
        if pixels.is_empty() {
            continue;
        }
        pixels.shuffle(&mut rng);
        let n = pixels.len();
        let mut n_train = (train_fraction * n as f64).round() as usize;
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        }
        for (rank, px) in pixels.into_iter().enumerate() {
            entries.push(SplitEntry {
                i: px / cube.width,
                j: px % cube.width,
                label: label as u16,
                split: if rank < n_train {
                    Split::Train
                } else {
                    Split::Test
                },
            });
        }
    }
    entries.sort_by_key(|e| (e.i, e.j));
    Ok(entries)
}

pub fn write_split(entries: &[SplitEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split(path: impl AsRef<Path>) -> Result<Vec<SplitEntry>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
