//! Masked reconstruction pre-training.

use std::thread;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::hsidata::{normalize, HsiCube};
use crate::loss::{rec_loss, LossReport, DEFAULT_ALPHA};
use crate::masking::{round_half_up, sample_mask_plan, MaskPlan};
use crate::model::{init_params, reconstruct, ModelConfig, ModelParams};
use crate::seed::derive_seed;
use crate::tensor::Graph;
use crate::tokenizer::partition;

use super::augment::{augment, AugmentConfig};
use super::optim::{AdamW, AdamWConfig};

const INIT_TAG: u64 = 0x1417;
const AUGMENT_TAG: u64 = 0xa06;
const FIXED_PLAN_TAG: u64 = 0xf1ed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub mask_spatial: f64,
    pub mask_spectral: f64,
    pub alpha: f64,
    pub steps: usize,
    pub augment: AugmentConfig,
    /// Draw one mask plan per cube and reuse it every step.
    pub fixed_plan: bool,
    /// Micro-batches (one cube each) averaged per optimizer step.
    pub grad_accum: usize,
    /// Workers for the micro-batches of one step. Results do not depend on it.
    pub threads: usize,
    /// Emit a checkpoint every this many steps; 0 means only at the end.
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            optimizer: AdamWConfig::default(),
            mask_spatial: 0.5,
            mask_spectral: 0.5,
            alpha: DEFAULT_ALPHA,
            steps: 1000,
            augment: AugmentConfig::default(),
            fixed_plan: false,
            grad_accum: 1,
            threads: 1,
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        for (name, r) in [
            ("spatial mask ratio", self.mask_spatial),
            ("spectral mask ratio", self.mask_spectral),
            ("alpha", self.alpha),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("{name} {r} outside [0, 1]")));
            }
        }
        if self.mask_spatial == 0.0 && self.mask_spectral == 0.0 {
            return Err(Error::invalid(
                "both mask ratios are 0: no voxel would be masked, so the MSE term is undefined",
            ));
        }
        if self.steps == 0 || self.grad_accum == 0 || self.threads == 0 {
            return Err(Error::invalid("steps, grad_accum and threads must be >= 1"));
        }
        if !(self.augment.jitter_std >= 0.0 && self.augment.jitter_std.is_finite()) {
            return Err(Error::invalid("jitter std must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// One line of the loss log. With gradient accumulation the losses are
/// micro-batch means and `seed` is the first micro-batch's plan seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_mse: f64,
    pub l_sam: f64,
    pub l_rec: f64,
    pub seed: u64,
}

pub fn log_to_jsonl(log: &[LossRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

/// Loss and parameter gradients of one masked reconstruction.
pub fn reconstruction_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    cube: &HsiCube,
    plan: &MaskPlan,
    alpha: f64,
) -> Result<(LossReport, ModelParams)> {
    let mut g = Graph::new();
    let w = params.bind(&mut g);
    let rec = reconstruct(&mut g, &w, cube, plan, config)?;
    let (loss, report) = rec_loss(&mut g, rec.y_hat, &rec.target, &rec.mask, alpha)?;
    let grads = g.backward(loss)?;
    Ok((report, params.gradients(&w, &grads)))
}

/// Loss of one masked reconstruction without gradients.
pub fn reconstruction_loss(
    params: &ModelParams,
    config: &ModelConfig,
    cube: &HsiCube,
    plan: &MaskPlan,
    alpha: f64,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let w = params.bind_frozen(&mut g);
    let rec = reconstruct(&mut g, &w, cube, plan, config)?;
    rec_loss(&mut g, rec.y_hat, &rec.target, &rec.mask, alpha).map(|(_, r)| r)
}

struct Micro {
    cube_id: usize,
    plan: MaskPlan,
    augment_seed: u64,
}

fn run_micro(
    params: &ModelParams,
    config: &PretrainConfig,
    cubes: &[HsiCube],
    m: &Micro,
    step: usize,
) -> Result<(LossReport, ModelParams)> {
    let cube = augment(&cubes[m.cube_id], &config.augment, m.augment_seed);
    reconstruction_gradients(params, &config.model, &cube, &m.plan, config.alpha).map_err(|e| match e {
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
            step,
            plan: m.plan.to_json(),
        },
        other => other,
    })
}

/// Round-robin over `cubes`, one cube per micro-batch. Each cube is
/// z-scored once up front; augmentation then acts in normalized units.
/// `on_checkpoint` receives the 1-based step and the current model.
pub fn pretrain(
    cubes: &[HsiCube],
    config: &PretrainConfig,
    run_seed: u64,
    on_checkpoint: &mut dyn FnMut(usize, &Checkpoint) -> Result<()>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if cubes.is_empty() {
        return Err(Error::invalid("pre-training needs at least one cube"));
    }
    let mut grids = Vec::with_capacity(cubes.len());
    for (c, cube) in cubes.iter().enumerate() {
        let grid = partition(cube)?;
        let (cells, k) = (grid.p * grid.q, grid.k);
        let visible = (cells - round_half_up(config.mask_spatial, cells))
            * (k - round_half_up(config.mask_spectral, k));
        if visible == 0 {
            return Err(Error::invalid(format!("cube {c}: the mask ratios hide every token")));
        }
        if visible == cells * k {
            return Err(Error::invalid(format!(
                "cube {c}: the mask ratios round to an empty mask on a {}×{}×{} grid",
                grid.p, grid.q, grid.k
            )));
        }
        grids.push((grid.p, grid.q, grid.k));
    }
    let p_max = grids.iter().map(|g| g.0).max().unwrap();
    let q_max = grids.iter().map(|g| g.1).max().unwrap();
    let k_max = grids.iter().map(|g| g.2).max().unwrap();

    let normalized: Vec<HsiCube> = cubes.iter().map(|c| normalize(c).0).collect();
    let mut params = init_params(&config.model, p_max, q_max, 1, derive_seed(&[run_seed, INIT_TAG]))?;
    let mut opt = AdamW::new(config.optimizer.clone());
    let n = cubes.len() as u64;
    let mut log = Vec::with_capacity(config.steps);
    let snapshot = |params: &ModelParams| Checkpoint {
        config: config.model.clone(),
        k: k_max,
        seed: run_seed,
        params: params.clone(),
    };

    for step in 0..config.steps {
        let mut micros = Vec::with_capacity(config.grad_accum);
        for a in 0..config.grad_accum {
            let m = (step * config.grad_accum + a) as u64;
            let (cube_id, epoch) = (m % n, m / n);
            let plan_seed = if config.fixed_plan {
                derive_seed(&[run_seed, FIXED_PLAN_TAG, cube_id])
            } else {
                derive_seed(&[run_seed, epoch, step as u64, cube_id])
            };
            let (p, q, k) = grids[cube_id as usize];
            micros.push(Micro {
                cube_id: cube_id as usize,
                plan: sample_mask_plan(p, q, k, config.mask_spatial, config.mask_spectral, plan_seed)?,
                augment_seed: derive_seed(&[run_seed, epoch, step as u64, cube_id, AUGMENT_TAG]),
            });
        }

        let results: Vec<Result<(LossReport, ModelParams)>> = if config.threads == 1 || micros.len() == 1 {
            micros
                .iter()
                .map(|m| run_micro(&params, config, &normalized, m, step + 1))
                .collect()
        } else {
            let per = micros.len().div_ceil(config.threads);
            thread::scope(|s| {
                let handles: Vec<_> = micros
                    .chunks(per)
                    .map(|chunk| {
                        let (params, normalized) = (&params, &normalized);
                        s.spawn(move || {
                            chunk
                                .iter()
                                .map(|m| run_micro(params, config, normalized, m, step + 1))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("worker panicked"))
                    .collect()
            })
        };

        let mut reports = Vec::with_capacity(results.len());
        let mut total: Option<ModelParams> = None;
        for r in results {
            let (report, grads) = r?;
            reports.push(report);
            match total.as_mut() {
                None => total = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.fields_mut().into_iter().zip(grads.named()) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.1.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = total.expect("at least one micro-batch");
        if reports.len() > 1 {
            let s = 1.0 / reports.len() as f64;
            for t in grads.fields_mut() {
                t.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        opt.step_model(&mut params, &grads)?;

        let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        let record = LossRecord {
            step: step + 1,
            l_mse: mean(|r| r.l_mse),
            l_sam: mean(|r| r.l_sam),
            l_rec: mean(|r| r.l_rec),
            seed: micros[0].plan.seed,
        };
        debug!("step {} l_rec {:.6}", record.step, record.l_rec);
        if (step + 1) % 100 == 0 {
            info!("step {}/{} l_rec {:.6}", step + 1, config.steps, record.l_rec);
        }
        log.push(record);

        let last = step + 1 == config.steps;
        if last || (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) {
            on_checkpoint(step + 1, &snapshot(&params))?;
        }
    }

    Ok(PretrainOutcome {
        checkpoint: snapshot(&params),
        log,
    })
}
