//! Supervised fine-tuning on labeled pixels.
//!
//! Every labeled pixel becomes a `9×9×B` window centered on it (edges
//! replicated). `probe` trains a linear head on frozen pooled features,
//! `full` trains every parameter.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::hsidata::{normalize, HsiCube, Split, SplitEntry};
use crate::model::{classify, classify_graph, features, ModelParams};
use crate::seed::{self, derive_seed};
use crate::tensor::{Graph, Tensor};
use crate::tokenizer::PATCH_ROWS;

use super::metrics::{evaluate, ClassReport};
use super::optim::{AdamW, AdamWConfig};

const HEAD_TAG: u64 = 0x4ead;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    Probe,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub steps: usize,
    /// Windows per step in `full` mode; `probe` always uses every train pixel.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::probe()
    }
}

impl FinetuneConfig {
    pub fn probe() -> Self {
        Self {
            mode: FinetuneMode::Probe,
            steps: 300,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 1e-2,
                ..Default::default()
            },
        }
    }

    pub fn full() -> Self {
        Self {
            mode: FinetuneMode::Full,
            steps: 200,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch_size must be >= 1"));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub i: usize,
    pub j: usize,
    pub label: u16,
    pub predicted: u16,
}

pub struct FinetuneOutcome {
    pub report: ClassReport,
    pub params: ModelParams,
    pub predictions: Vec<Prediction>,
    /// Training cross-entropy per step.
    pub losses: Vec<f64>,
}

fn check_split(cube: &HsiCube, split: &[SplitEntry]) -> Result<usize> {
    let labels = cube
        .labels()
        .ok_or_else(|| Error::invalid("fine-tuning needs a labeled cube"))?;
    let mut n_classes = 0;
    for e in split {
        if e.i >= cube.height() || e.j >= cube.width() {
            return Err(Error::invalid(format!(
                "split pixel ({}, {}) outside the {}×{} cube",
                e.i,
                e.j,
                cube.height(),
                cube.width()
            )));
        }
        if e.label == 0 {
            return Err(Error::DegenerateSplit(format!("pixel ({}, {}) has label 0", e.i, e.j)));
        }
        let actual = labels[e.i * cube.width() + e.j];
        if actual != e.label {
            return Err(Error::invalid(format!(
                "split says label {} at ({}, {}) but the cube has {actual}",
                e.label, e.i, e.j
            )));
        }
        n_classes = n_classes.max(e.label as usize);
    }
    let has = |label: u16, s: Split| split.iter().any(|e| e.label == label && e.split == s);
    if !split.iter().any(|e| e.split == Split::Train) || !split.iter().any(|e| e.split == Split::Test) {
        return Err(Error::DegenerateSplit("need at least one train and one test pixel".into()));
    }
    for e in split.iter().filter(|e| e.split == Split::Test) {
        if !has(e.label, Split::Train) {
            return Err(Error::DegenerateSplit(format!(
                "class {} has test pixels but no training pixels",
                e.label
            )));
        }
    }
    Ok(n_classes)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

fn head_logits(feats: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(feats.clone());
    let w = g.constant(params.classifier.weight.clone());
    let b = g.constant(params.classifier.bias.clone());
    let z = g.matmul(x, w)?;
    let z = g.add_row(z, b)?;
    Ok(g.value(z).clone())
}

fn feature_matrix(windows: &[HsiCube], params: &ModelParams, checkpoint: &Checkpoint) -> Result<Tensor> {
    let rows = windows
        .iter()
        .map(|w| features(w, params, &checkpoint.config))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Trains a classifier for the split's classes and scores its test pixels.
/// The classifier head is always freshly initialized from `seed`.
pub fn finetune(
    checkpoint: &Checkpoint,
    cube: &HsiCube,
    split: &[SplitEntry],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    let n_classes = check_split(cube, split)?;
    let (norm, _) = normalize(cube);
    let train: Vec<&SplitEntry> = split.iter().filter(|e| e.split == Split::Train).collect();
    let test: Vec<&SplitEntry> = split.iter().filter(|e| e.split == Split::Test).collect();
    let window = |e: &&SplitEntry| norm.window(e.i, e.j, PATCH_ROWS);
    let train_x: Vec<HsiCube> = train.iter().map(window).collect();
    let test_x: Vec<HsiCube> = test.iter().map(window).collect();
    let train_y: Vec<usize> = train.iter().map(|e| e.label as usize - 1).collect();

    let mut params = checkpoint.params.clone();
    params.reset_classifier(n_classes, derive_seed(&[seed, HEAD_TAG]));
    let mut opt = AdamW::new(config.optimizer.clone());
    let mut losses = Vec::with_capacity(config.steps);

    let test_logits: Vec<Vec<f64>> = match config.mode {
        FinetuneMode::Probe => {
            let feats = feature_matrix(&train_x, &params, checkpoint)?;
            let names = ["classifier.weight".to_string(), "classifier.bias".to_string()];
            for _ in 0..config.steps {
                let mut g = Graph::new();
                let x = g.constant(feats.clone());
                let w = g.param(params.classifier.weight.clone());
                let b = g.param(params.classifier.bias.clone());
                let z = g.matmul(x, w)?;
                let z = g.add_row(z, b)?;
                let loss = g.cross_entropy(z, &train_y)?;
                losses.push(g.value(loss).item());
                let mut grads = g.backward(loss)?;
                let (gw, gb) = (grads.take(w).unwrap(), grads.take(b).unwrap());
                let head = &mut params.classifier;
                opt.step(&mut [&mut head.weight, &mut head.bias], &[&gw, &gb], &names)?;
            }
            let logits = head_logits(&feature_matrix(&test_x, &params, checkpoint)?, &params)?;
            (0..test_x.len()).map(|r| logits.row(r).to_vec()).collect()
        }
        FinetuneMode::Full => {
            let batch = config.batch_size.min(train_x.len());
            for step in 0..config.steps {
                let mut rng = seed::rng(derive_seed(&[seed, step as u64]));
                let picks = index::sample(&mut rng, train_x.len(), batch).into_vec();
                let mut g = Graph::new();
                let w = params.bind(&mut g);
                let rows = picks
                    .iter()
                    .map(|&n| classify_graph(&mut g, &w, &train_x[n], &checkpoint.config))
                    .collect::<Result<Vec<_>>>()?;
                let z = g.concat_rows(&rows)?;
                let targets: Vec<usize> = picks.iter().map(|&n| train_y[n]).collect();
                let loss = g.cross_entropy(z, &targets)?;
                losses.push(g.value(loss).item());
                let grads = g.backward(loss)?;
                let grads = params.gradients(&w, &grads);
                opt.step_model(&mut params, &grads)?;
            }
            test_x
                .iter()
                .map(|x| classify(x, &params, &checkpoint.config))
                .collect::<Result<_>>()?
        }
    };

    let predicted: Vec<usize> = test_logits.iter().map(|l| argmax(l)).collect();
    let truth: Vec<usize> = test.iter().map(|e| e.label as usize - 1).collect();
    let report = evaluate(&predicted, &truth)?;
    let predictions = test
        .iter()
        .zip(&predicted)
        .map(|(e, &p)| Prediction {
            i: e.i,
            j: e.j,
            label: e.label,
            predicted: p as u16 + 1,
        })
        .collect();
    Ok(FinetuneOutcome {
        report,
        params,
        predictions,
        losses,
    })
}
