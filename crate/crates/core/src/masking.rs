//! Dual spatial/spectral masking.
//!
//! A plan hides a fraction of the `(p, q)` grid cells (all their spectral
//! groups) and, independently, a fraction of the spectral groups `k` at every
//! position. A token stays visible only if neither its cell nor its group is
//! hidden, so 50 % / 50 % leaves a quarter of the tokens visible.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{PATCH_BANDS, PATCH_COLS, PATCH_ROWS};

/// `floor(ratio·n + 1/2)`, capped at `n`.
pub fn round_half_up(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).min(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub p: usize,
    pub q: usize,
    pub k: usize,
    /// Hidden grid cells, sorted.
    pub masked_spatial: Vec<(usize, usize)>,
    /// Hidden spectral groups, sorted.
    pub masked_spectral: Vec<usize>,
    /// Visible token indices `(p·Q + q)·K + k`, ascending.
    #[serde(skip)]
    pub visible: Vec<usize>,
    /// Hidden token indices, ascending.
    #[serde(skip)]
    pub masked_tokens: Vec<usize>,
    pub seed: u64,
    pub ratio_spatial: f64,
    pub ratio_spectral: f64,
}

impl MaskPlan {
    /// Plan with explicit hidden cells and groups.
    pub fn from_sets(
        (p, q, k): (usize, usize, usize),
        mut masked_spatial: Vec<(usize, usize)>,
        mut masked_spectral: Vec<usize>,
        seed: u64,
        ratios: (f64, f64),
    ) -> Result<Self> {
        if masked_spatial.iter().any(|&(a, b)| a >= p || b >= q)
            || masked_spectral.iter().any(|&g| g >= k)
        {
            return Err(Error::invalid("masked index outside the token grid"));
        }
        masked_spatial.sort_unstable();
        masked_spatial.dedup();
        masked_spectral.sort_unstable();
        masked_spectral.dedup();
        let mut cell_hidden = vec![false; p * q];
        for &(a, b) in &masked_spatial {
            cell_hidden[a * q + b] = true;
        }
        let mut group_hidden = vec![false; k];
        for &g in &masked_spectral {
            group_hidden[g] = true;
        }
        let (visible, masked_tokens): (Vec<usize>, Vec<usize>) =
            (0..p * q * k).partition(|t| !cell_hidden[t / k] && !group_hidden[t % k]);
        if visible.is_empty() {
            return Err(Error::NothingVisible);
        }
        Ok(Self {
            p,
            q,
            k,
            masked_spatial,
            masked_spectral,
            visible,
            masked_tokens,
            seed,
            ratio_spatial: ratios.0,
            ratio_spectral: ratios.1,
        })
    }

    /// Plan that hides nothing.
    pub fn unmasked(p: usize, q: usize, k: usize) -> Result<Self> {
        Self::from_sets((p, q, k), vec![], vec![], 0, (0.0, 0.0))
    }

    pub fn n_tokens(&self) -> usize {
        self.p * self.q * self.k
    }

    pub fn visible_fraction(&self) -> f64 {
        self.visible.len() as f64 / self.n_tokens() as f64
    }

    pub fn is_visible(&self, token: usize) -> bool {
        self.visible.binary_search(&token).is_ok()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: MaskPlan = serde_json::from_str(text)?;
        Self::from_sets(
            (raw.p, raw.q, raw.k),
            raw.masked_spatial,
            raw.masked_spectral,
            raw.seed,
            (raw.ratio_spatial, raw.ratio_spectral),
        )
    }
}

/// Samples `round_half_up(ρ_s·P·Q)` grid cells, then `round_half_up(ρ_b·K)`
/// spectral groups, uniformly without replacement.
pub fn sample_mask_plan(
    p: usize,
    q: usize,
    k: usize,
    ratio_spatial: f64,
    ratio_spectral: f64,
    seed: u64,
) -> Result<MaskPlan> {
    if p * q == 0 || k == 0 {
        return Err(Error::invalid("token grid must be non-empty"));
    }
    for r in [ratio_spatial, ratio_spectral] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("mask ratio {r} outside [0, 1]")));
        }
    }
    let mut rng = seed::rng(seed);
    let n_spatial = round_half_up(ratio_spatial, p * q);
    let n_spectral = round_half_up(ratio_spectral, k);
    let spatial = index::sample(&mut rng, p * q, n_spatial)
        .into_iter()
        .map(|c| (c / q, c % q))
        .collect();
    let spectral = index::sample(&mut rng, k, n_spectral).into_vec();
    MaskPlan::from_sets(
        (p, q, k),
        spatial,
        spectral,
        seed,
        (ratio_spatial, ratio_spectral),
    )
}

/// Selects the visible rows of an `N × d` embedding matrix in plan order.
/// The returned index map gives the token index of each selected row.
pub fn apply_mask(g: &mut Graph, embeddings: Var, plan: &MaskPlan) -> Result<(Var, Vec<usize>)> {
    let rows = g.shape(embeddings)[0];
    if rows != plan.n_tokens() {
        return Err(Error::invalid(format!(
            "{rows} embeddings for a plan over {} tokens",
            plan.n_tokens()
        )));
    }
    let visible = g.gather_rows(embeddings, &plan.visible)?;
    Ok((visible, plan.visible.clone()))
}

/// Writes `rows` back to the token slots named by `index_map`, filling the rest with `fill`.
pub fn scatter_rows(rows: &Tensor, index_map: &[usize], n_tokens: usize, fill: f64) -> Result<Tensor> {
    let (n, d) = rows.dims2()?;
    if n != index_map.len() || index_map.iter().any(|&t| t >= n_tokens) {
        return Err(Error::invalid("index map does not match rows"));
    }
    let mut out = Tensor::full([n_tokens, d], fill);
    for (r, &t) in index_map.iter().enumerate() {
        out.data_mut()[t * d..(t + 1) * d].copy_from_slice(rows.row(r));
    }
    Ok(out)
}

/// The masked-voxel set over a cropped `9P × 9Q × 8K` cube.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMask {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    mask: Vec<bool>,
}

impl VoxelMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// False for voxels outside the cropped extents.
    pub fn contains(&self, i: usize, j: usize, b: usize) -> bool {
        i < self.height
            && j < self.width
            && b < self.bands
            && self.mask[(i * self.width + j) * self.bands + b]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    /// 0/1 indicator tensor shaped like the cropped cube.
    pub fn indicator(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| f64::from(u8::from(m))).collect();
        Tensor::new([self.height, self.width, self.bands], data).expect("mask extents")
    }

    pub fn from_flags(height: usize, width: usize, bands: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width * bands {
            return Err(Error::invalid("mask length does not match extents"));
        }
        Ok(Self {
            height,
            width,
            bands,
            mask,
        })
    }
}

/// Voxels covered by the plan's hidden tokens. `height`, `width`, `bands` are
/// the full cube extents; anything past the patch grid is excluded.
pub fn voxel_mask(plan: &MaskPlan, height: usize, width: usize, bands: usize) -> Result<VoxelMask> {
    let (h, w, b) = (PATCH_ROWS * plan.p, PATCH_COLS * plan.q, PATCH_BANDS * plan.k);
    if h > height || w > width || b > bands {
        return Err(Error::invalid(format!(
            "plan grid {}×{}×{} does not fit a {height}×{width}×{bands} cube",
            plan.p, plan.q, plan.k
        )));
    }
    let mut mask = vec![false; h * w * b];
    let mut hidden = vec![false; plan.n_tokens()];
    for &t in &plan.masked_tokens {
        hidden[t] = true;
    }
    for i in 0..h {
        for j in 0..w {
            let cell = (i / PATCH_ROWS) * plan.q + j / PATCH_COLS;
            for bb in 0..b {
                mask[(i * w + j) * b + bb] = hidden[cell * plan.k + bb / PATCH_BANDS];
            }
        }
    }
    VoxelMask::from_flags(h, w, b, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::PATCH_LEN;

    #[test]
    fn counting_at_half_half() {
        let plan = sample_mask_plan(4, 4, 4, 0.5, 0.5, 3).unwrap();
        assert_eq!(plan.masked_spatial.len(), 8);
        assert_eq!(plan.masked_spectral.len(), 2);
        assert_eq!(plan.visible.len(), 16);
        assert_eq!(plan.visible_fraction(), 0.25);
    }

    #[test]
    fn zero_ratios_keep_everything() {
        let plan = sample_mask_plan(3, 2, 5, 0.0, 0.0, 1).unwrap();
        assert_eq!(plan.visible, (0..30).collect::<Vec<_>>());
        assert!(plan.masked_tokens.is_empty());
        let m = voxel_mask(&plan, 27, 18, 40).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn odd_grid_rounds_half_up() {
        assert_eq!(round_half_up(0.5, 9), 5);
        assert_eq!(round_half_up(0.5, 3), 2);
        assert_eq!(round_half_up(0.5, 4), 2);
        let plan = sample_mask_plan(3, 3, 3, 0.5, 0.5, 0).unwrap();
        assert_eq!(plan.visible.len(), 4);
    }

    #[test]
    fn nothing_visible_is_error() {
        assert!(matches!(
            sample_mask_plan(2, 2, 2, 1.0, 0.0, 0),
            Err(Error::NothingVisible)
        ));
        assert!(matches!(
            sample_mask_plan(1, 1, 1, 0.6, 0.0, 0),
            Err(Error::NothingVisible)
        ));
        assert!(sample_mask_plan(2, 2, 2, 1.5, 0.0, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = sample_mask_plan(4, 4, 4, 0.5, 0.5, 42).unwrap();
        assert_eq!(a, sample_mask_plan(4, 4, 4, 0.5, 0.5, 42).unwrap());
        let distinct = (0..100)
            .filter(|s| sample_mask_plan(4, 4, 4, 0.5, 0.5, 1000 + s).unwrap() != a)
            .count();
        assert!(distinct >= 99);
    }

    #[test]
    fn visibility_is_product_of_axes() {
        let plan = sample_mask_plan(5, 3, 6, 0.4, 0.5, 8).unwrap();
        for t in 0..plan.n_tokens() {
            let cell = ((t / plan.k) / plan.q, (t / plan.k) % plan.q);
            let expect = !plan.masked_spatial.contains(&cell)
                && !plan.masked_spectral.contains(&(t % plan.k));
            assert_eq!(plan.is_visible(t), expect);
        }
        assert_eq!(plan.visible.len() + plan.masked_tokens.len(), plan.n_tokens());
    }

    #[test]
    fn spatial_uniformity() {
        let mut hits = [0usize; 16];
        for s in 0..1000 {
            let plan = sample_mask_plan(4, 4, 2, 0.5, 0.0, s).unwrap();
            for &(a, b) in &plan.masked_spatial {
                hits[a * 4 + b] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / 1000.0;
            assert!((f - 0.5).abs() <= 0.05, "{f}");
        }
    }

    #[test]
    fn voxel_mask_counts() {
        let plan = sample_mask_plan(4, 4, 4, 0.5, 0.5, 9).unwrap();
        let m = voxel_mask(&plan, 36, 36, 32).unwrap();
        assert_eq!(m.count(), 48 * PATCH_LEN);
        assert_eq!(m.count(), 31104);
        assert!(!m.contains(40, 0, 0));
        assert!(voxel_mask(&plan, 35, 36, 32).is_err());
    }

    #[test]
    fn gather_scatter_round_trip() {
        let plan = sample_mask_plan(2, 2, 2, 0.5, 0.5, 4).unwrap();
        let x = Tensor::new([8, 3], (0..24).map(f64::from).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (vis, map) = apply_mask(&mut g, xv, &plan).unwrap();
        assert_eq!(g.shape(vis)[0], plan.visible.len());
        let back = scatter_rows(g.value(vis), &map, 8, f64::NAN).unwrap();
        for t in 0..8 {
            if plan.is_visible(t) {
                assert_eq!(back.row(t), x.row(t));
            } else {
                assert!(back.row(t).iter().all(|v| v.is_nan()));
            }
        }
    }

    #[test]
    fn unmasked_apply_is_copy() {
        let plan = MaskPlan::unmasked(2, 1, 3).unwrap();
        let x = Tensor::new([6, 2], (0..12).map(f64::from).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (vis, _) = apply_mask(&mut g, xv, &plan).unwrap();
        assert_eq!(g.value(vis), &x);
    }

    #[test]
    fn json_round_trip() {
        let plan = sample_mask_plan(3, 3, 3, 0.5, 0.5, 77).unwrap();
        let text = plan.to_json();
        assert!(text.contains("masked_spatial") && text.contains("\"seed\":77"));
        assert_eq!(MaskPlan::from_json(&text).unwrap(), plan);
    }
}
