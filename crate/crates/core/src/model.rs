//! Transformer encoder/decoder over spatial–spectral tokens.
//!
//! The encoder sees only visible tokens. The decoder scatters the encoder
//! latents back to their slots, fills hidden slots with one learned mask
//! token, re-adds positional encodings and reconstructs every patch with a
//! shared linear head. Classification encodes an unmasked cube and applies a
//! linear head to the mean latent.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsidata::HsiCube;
use crate::masking::{apply_mask, voxel_mask, MaskPlan, VoxelMask};
use crate::seed;
use crate::tensor::{Gradients, Graph, Tensor, Var};
use crate::tokenizer::{
    cropped_values, partition, SpectralMeta, TokenGrid, WavelengthUnit, PATCH_LEN,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub wavelength_unit: WavelengthUnit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64-wide, 4 encoder and 2 decoder layers.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_enc_layers: 4,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 256,
            wavelength_unit: WavelengthUnit::Micrometers,
        }
    }

    /// Tiny configuration used for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            d_model: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_ff: 32,
            wavelength_unit: WavelengthUnit::Micrometers,
        }
    }

    /// 768-wide preset of roughly 0.18 B parameters. Not exercised by tests.
    pub fn foundation() -> Self {
        Self {
            d_model: 768,
            n_enc_layers: 18,
            n_dec_layers: 8,
            n_heads: 12,
            d_ff: 3072,
            wavelength_unit: WavelengthUnit::Micrometers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.d_model,
            self.n_enc_layers,
            self.n_dec_layers,
            self.n_heads,
            self.d_ff,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid("model sizes must be >= 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::invalid("d_model must be even for the wavelength encoding"));
        }
        Ok(())
    }

    /// Closed-form parameter count for a `p × q` spatial table and `n_classes` outputs.
    pub fn param_count(&self, p: usize, q: usize, n_classes: usize) -> usize {
        let d = self.d_model;
        let block = 2 * (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * self.d_ff + self.d_ff)
            + (self.d_ff * d + d);
        (PATCH_LEN * d + d)
            + p * q * d
            + self.n_enc_layers * block
            + 2 * d
            + d
            + self.n_dec_layers * block
            + 2 * d
            + (d * PATCH_LEN + PATCH_LEN)
            + (d * n_classes + n_classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `in × out`
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: Norm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

/// Every learnable array of the model, generic over storage so the same
/// layout can hold values, graph handles or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// `(P, Q)` extents of the spatial table.
    pub grid: (usize, usize),
    pub patch_proj: Linear<T>,
    /// `P·Q × d`, row `p·Q + q`.
    pub spatial_pe: T,
    pub encoder: Vec<Block<T>>,
    pub enc_norm: Norm<T>,
    /// `1 × d`
    pub mask_token: T,
    pub decoder: Vec<Block<T>>,
    pub dec_norm: Norm<T>,
    pub recon_head: Linear<T>,
    pub classifier: Linear<T>,
}

pub type ModelParams = Weights<Tensor>;

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

impl<T> Block<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Block<U> {
        Block {
            norm1: self.norm1.map(f),
            qkv: self.qkv.map(f),
            proj: self.proj.map(f),
            norm2: self.norm2.map(f),
            ff1: self.ff1.map(f),
            ff2: self.ff2.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.norm1.gain"), &self.norm1.gain);
        f(format!("{prefix}.norm1.bias"), &self.norm1.bias);
        f(format!("{prefix}.qkv.weight"), &self.qkv.weight);
        f(format!("{prefix}.qkv.bias"), &self.qkv.bias);
        f(format!("{prefix}.proj.weight"), &self.proj.weight);
        f(format!("{prefix}.proj.bias"), &self.proj.bias);
        f(format!("{prefix}.norm2.gain"), &self.norm2.gain);
        f(format!("{prefix}.norm2.bias"), &self.norm2.bias);
        f(format!("{prefix}.ff1.weight"), &self.ff1.weight);
        f(format!("{prefix}.ff1.bias"), &self.ff1.bias);
        f(format!("{prefix}.ff2.weight"), &self.ff2.weight);
        f(format!("{prefix}.ff2.bias"), &self.ff2.bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        f(&mut self.norm1.gain);
        f(&mut self.norm1.bias);
        f(&mut self.qkv.weight);
        f(&mut self.qkv.bias);
        f(&mut self.proj.weight);
        f(&mut self.proj.bias);
        f(&mut self.norm2.gain);
        f(&mut self.norm2.bias);
        f(&mut self.ff1.weight);
        f(&mut self.ff1.bias);
        f(&mut self.ff2.weight);
        f(&mut self.ff2.bias);
    }
}

impl<T> Weights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        Weights {
            grid: self.grid,
            patch_proj: self.patch_proj.map(&mut f),
            spatial_pe: f(&self.spatial_pe),
            encoder: self.encoder.iter().map(|b| b.map(&mut f)).collect(),
            enc_norm: self.enc_norm.map(&mut f),
            mask_token: f(&self.mask_token),
            decoder: self.decoder.iter().map(|b| b.map(&mut f)).collect(),
            dec_norm: self.dec_norm.map(&mut f),
            recon_head: self.recon_head.map(&mut f),
            classifier: self.classifier.map(&mut f),
        }
    }

    /// Visits every array in the fixed checkpoint order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("patch_proj.weight".into(), &self.patch_proj.weight);
        f("patch_proj.bias".into(), &self.patch_proj.bias);
        f("spatial_pe".into(), &self.spatial_pe);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&format!("encoder.{i}"), f);
        }
        f("enc_norm.gain".into(), &self.enc_norm.gain);
        f("enc_norm.bias".into(), &self.enc_norm.bias);
        f("mask_token".into(), &self.mask_token);
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&format!("decoder.{i}"), f);
        }
        f("dec_norm.gain".into(), &self.dec_norm.gain);
        f("dec_norm.bias".into(), &self.dec_norm.bias);
        f("recon_head.weight".into(), &self.recon_head.weight);
        f("recon_head.bias".into(), &self.recon_head.bias);
        f("classifier.weight".into(), &self.classifier.weight);
        f("classifier.bias".into(), &self.classifier.bias);
    }

    /// Same order as [`Weights::visit`].
    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        f(&mut self.patch_proj.weight);
        f(&mut self.patch_proj.bias);
        f(&mut self.spatial_pe);
        for b in &mut self.encoder {
            b.visit_mut(f);
        }
        f(&mut self.enc_norm.gain);
        f(&mut self.enc_norm.bias);
        f(&mut self.mask_token);
        for b in &mut self.decoder {
            b.visit_mut(f);
        }
        f(&mut self.dec_norm.gain);
        f(&mut self.dec_norm.bias);
        f(&mut self.recon_head.weight);
        f(&mut self.recon_head.bias);
        f(&mut self.classifier.weight);
        f(&mut self.classifier.bias);
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn fields_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(&mut |t| out.push(t));
        out
    }
}

impl ModelParams {
    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.bias.len()
    }

    pub fn d_model(&self) -> usize {
        self.mask_token.len()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every array as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Weights<Var> {
        self.map(|t| g.param(t.clone()))
    }

    /// Registers every array as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Weights<Var> {
        self.map(|t| g.constant(t.clone()))
    }

    /// Gradients laid out like the parameters; arrays the loss never reached are zero.
    pub fn gradients(&self, vars: &Weights<Var>, grads: &Gradients) -> ModelParams {
        let mut out = self.map(|t| Tensor::zeros(t.shape()));
        let mut handles = Vec::new();
        vars.visit(&mut |_, v| handles.push(*v));
        for (slot, v) in out.fields_mut().into_iter().zip(handles) {
            if let Some(gt) = grads.get(v) {
                *slot = gt.clone();
            }
        }
        out
    }

    /// Fresh classifier head for `n_classes` outputs.
    pub fn reset_classifier(&mut self, n_classes: usize, seed: u64) {
        let mut rng = seed::rng(seed);
        self.classifier = Linear {
            weight: trunc_normal(&mut rng, [self.d_model(), n_classes]),
            bias: Tensor::zeros([n_classes]),
        };
    }
}

fn trunc_normal(rng: &mut impl Rng, shape: [usize; 2]) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let data = (0..shape[0] * shape[1])
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Truncated-normal linear weights, zero biases and spatial table, unit
/// layer-norm gains, normal mask token.
pub fn init_params(
    config: &ModelConfig,
    p: usize,
    q: usize,
    n_classes: usize,
    seed: u64,
) -> Result<ModelParams> {
    config.validate()?;
    if p == 0 || q == 0 || n_classes == 0 {
        return Err(Error::invalid("spatial grid and class count must be >= 1"));
    }
    let d = config.d_model;
    let mut rng = seed::rng(seed);
    let linear = |rng: &mut rand_chacha::ChaCha8Rng, i: usize, o: usize| Linear {
        weight: trunc_normal(rng, [i, o]),
        bias: Tensor::zeros([o]),
    };
    let norm = || Norm {
        gain: Tensor::ones([d]),
        bias: Tensor::zeros([d]),
    };
    let block = |rng: &mut rand_chacha::ChaCha8Rng| Block {
        norm1: norm(),
        qkv: linear(rng, d, 3 * d),
        proj: linear(rng, d, d),
        norm2: norm(),
        ff1: linear(rng, d, config.d_ff),
        ff2: linear(rng, config.d_ff, d),
    };
    let patch_proj = linear(&mut rng, PATCH_LEN, d);
    let encoder = (0..config.n_enc_layers).map(|_| block(&mut rng)).collect();
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let mask_token = Tensor::new([1, d], (0..d).map(|_| normal.sample(&mut rng)).collect())?;
    let decoder = (0..config.n_dec_layers).map(|_| block(&mut rng)).collect();
    let recon_head = linear(&mut rng, d, PATCH_LEN);
    let classifier = linear(&mut rng, d, n_classes);
    Ok(Weights {
        grid: (p, q),
        patch_proj,
        spatial_pe: Tensor::zeros([p * q, d]),
        encoder,
        enc_norm: norm(),
        mask_token,
        decoder,
        dec_norm: norm(),
        recon_head,
        classifier,
    })
}

fn linear(g: &mut Graph, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = g.matmul(x, l.weight)?;
    g.add_row(y, l.bias)
}

fn attention(g: &mut Graph, x: Var, b: &Block<Var>, n_heads: usize) -> Result<Var> {
    let d = g.shape(x)[1];
    let dh = d / n_heads;
    let qkv = linear(g, x, &b.qkv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, d + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax(scores, 1)?;
        heads.push(g.matmul(weights, v)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(g, merged, &b.proj)
}

/// Pre-norm block: `x + attn(ln(x))`, then `h + ff(ln(h))`.
fn block(g: &mut Graph, x: Var, b: &Block<Var>, n_heads: usize) -> Result<Var> {
    let n1 = g.layer_norm(x, b.norm1.gain, b.norm1.bias, LAYER_NORM_EPS)?;
    let a = attention(g, n1, b, n_heads)?;
    let h = g.add(x, a)?;
    let n2 = g.layer_norm(h, b.norm2.gain, b.norm2.bias, LAYER_NORM_EPS)?;
    let f1 = linear(g, n2, &b.ff1)?;
    let act = g.gelu(f1)?;
    let f2 = linear(g, act, &b.ff2)?;
    g.add(h, f2)
}

/// Per-token spatial-table rows and wavelength encodings for a grid.
fn positional(
    g: &mut Graph,
    w: &Weights<Var>,
    grid: &TokenGrid,
    meta: &SpectralMeta,
    d: usize,
) -> Result<(Var, Var)> {
    let (tp, tq) = w.grid;
    if grid.p > tp || grid.q > tq {
        return Err(Error::invalid(format!(
            "token grid {}×{} exceeds the {tp}×{tq} spatial table",
            grid.p, grid.q
        )));
    }
    if meta.k() < grid.k {
        return Err(Error::invalid("spectral metadata has fewer groups than the grid"));
    }
    let cells: Vec<usize> = (0..grid.n_tokens())
        .map(|t| {
            let (p, q, _) = grid.coords(t);
            p * tq + q
        })
        .collect();
    let spatial = g.gather_rows(w.spatial_pe, &cells)?;
    let table = meta.encoding_table(d)?;
    let spec_rows: Vec<f64> = (0..grid.n_tokens())
        .flat_map(|t| table.row(grid.coords(t).2).to_vec())
        .collect();
    let spec = g.constant(Tensor::new([grid.n_tokens(), d], spec_rows)?);
    Ok((spatial, spec))
}

/// `LinearProj(patch) + SpatialPE(p, q) + SpecEnc(λ_k)` for every token.
pub fn embed_tokens(
    g: &mut Graph,
    w: &Weights<Var>,
    grid: &TokenGrid,
    meta: &SpectralMeta,
) -> Result<Var> {
    let d = g.shape(w.mask_token)[1];
    let patches = g.constant(grid.patches.clone());
    let proj = linear(g, patches, &w.patch_proj)?;
    let (spatial, spec) = positional(g, w, grid, meta, d)?;
    let x = g.add(proj, spatial)?;
    g.add(x, spec)
}

/// Encoder blocks over the given rows followed by a final layer norm.
pub fn encode(g: &mut Graph, w: &Weights<Var>, x: Var, config: &ModelConfig) -> Result<Var> {
    let d = g.shape(w.mask_token)[1];
    if g.shape(x).len() != 2 || g.shape(x)[1] != d {
        return Err(Error::Shape {
            op: "encode",
            lhs: g.shape(x).to_vec(),
            rhs: vec![d],
        });
    }
    let mut h = x;
    for b in &w.encoder {
        h = block(g, h, b, config.n_heads)?;
    }
    g.layer_norm(h, w.enc_norm.gain, w.enc_norm.bias, LAYER_NORM_EPS)
}

/// Decoder input: latents in visible slots, the mask token elsewhere, plus
/// positional encodings. Returned separately so it can be inspected.
pub fn decoder_input(
    g: &mut Graph,
    w: &Weights<Var>,
    latents: Var,
    plan: &MaskPlan,
    grid: &TokenGrid,
    meta: &SpectralMeta,
) -> Result<Var> {
    if (plan.p, plan.q, plan.k) != (grid.p, grid.q, grid.k) {
        return Err(Error::invalid("mask plan does not match the token grid"));
    }
    let nv = plan.visible.len();
    if g.shape(latents)[0] != nv {
        return Err(Error::invalid(format!(
            "{} latents for {nv} visible tokens",
            g.shape(latents)[0]
        )));
    }
    let d = g.shape(w.mask_token)[1];
    let stacked = g.concat_rows(&[latents, w.mask_token])?;
    let mut slot = vec![nv; plan.n_tokens()];
    for (r, &t) in plan.visible.iter().enumerate() {
        slot[t] = r;
    }
    let full = g.gather_rows(stacked, &slot)?;
    let (spatial, spec) = positional(g, w, grid, meta, d)?;
    let x = g.add(full, spatial)?;
    g.add(x, spec)
}

/// Reconstructs the cropped cube `[9P, 9Q, 8K]` from visible-token latents.
pub fn decode(
    g: &mut Graph,
    w: &Weights<Var>,
    latents: Var,
    plan: &MaskPlan,
    grid: &TokenGrid,
    meta: &SpectralMeta,
    config: &ModelConfig,
) -> Result<Var> {
    let mut h = decoder_input(g, w, latents, plan, grid, meta)?;
    for b in &w.decoder {
        h = block(g, h, b, config.n_heads)?;
    }
    let h = g.layer_norm(h, w.dec_norm.gain, w.dec_norm.bias, LAYER_NORM_EPS)?;
    let patches = linear(g, h, &w.recon_head)?;
    let (hh, ww, bb) = grid.extents();
    g.gather(patches, grid.cube_gather_index(), [hh, ww, bb])
}

/// Graph nodes of one masked reconstruction.
pub struct Reconstruction {
    pub y_hat: Var,
    /// Cropped input cube, the reconstruction target.
    pub target: Tensor,
    pub mask: VoxelMask,
    pub grid: TokenGrid,
}

/// Tokenize, embed, hide per `plan`, encode the visible tokens and decode.
pub fn reconstruct(
    g: &mut Graph,
    w: &Weights<Var>,
    cube: &HsiCube,
    plan: &MaskPlan,
    config: &ModelConfig,
) -> Result<Reconstruction> {
    let grid = partition(cube)?;
    let meta = SpectralMeta::from_wavelengths(cube.wavelengths(), config.wavelength_unit)?;
    let emb = embed_tokens(g, w, &grid, &meta)?;
    let (visible, _) = apply_mask(g, emb, plan)?;
    let latents = encode(g, w, visible, config)?;
    let y_hat = decode(g, w, latents, plan, &grid, &meta, config)?;
    let mask = voxel_mask(plan, cube.height(), cube.width(), cube.bands())?;
    Ok(Reconstruction {
        y_hat,
        target: cropped_values(cube, &grid),
        mask,
        grid,
    })
}

/// Mean of the encoder latents of an unmasked cube, `1 × d`.
pub fn pooled_features(
    g: &mut Graph,
    w: &Weights<Var>,
    cube: &HsiCube,
    config: &ModelConfig,
) -> Result<Var> {
    let grid = partition(cube)?;
    let meta = SpectralMeta::from_wavelengths(cube.wavelengths(), config.wavelength_unit)?;
    let emb = embed_tokens(g, w, &grid, &meta)?;
    let latents = encode(g, w, emb, config)?;
    let n = grid.n_tokens();
    let avg = g.constant(Tensor::full([1, n], 1.0 / n as f64));
    g.matmul(avg, latents)
}

/// Classifier logits `1 × n_classes` for a cube.
pub fn classify_graph(
    g: &mut Graph,
    w: &Weights<Var>,
    cube: &HsiCube,
    config: &ModelConfig,
) -> Result<Var> {
    let pooled = pooled_features(g, w, cube, config)?;
    linear(g, pooled, &w.classifier)
}

pub fn classify(cube: &HsiCube, params: &ModelParams, config: &ModelConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let w = params.bind_frozen(&mut g);
    let logits = classify_graph(&mut g, &w, cube, config)?;
    Ok(g.value(logits).data().to_vec())
}

/// Pooled encoder features without gradients.
pub fn features(cube: &HsiCube, params: &ModelParams, config: &ModelConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let w = params.bind_frozen(&mut g);
    let f = pooled_features(&mut g, &w, cube, config)?;
    Ok(g.value(f).data().to_vec())
}
