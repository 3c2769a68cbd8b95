//! Weighted MSE loss over non-boundary nodes and the two-phase training
//! loop: single-step prediction first, then fine-tuning on multi-step
//! rollouts with boundary forcing at every step.

use crate::data::{materialize_sample, window_samples, NormStats, SampleSpec, Trajectory};
use crate::error::{LamError, Result};
use crate::graph::LamGraph;
use crate::model::{rollout, GraphArrays, GraphBind, ModelParams, RolloutStep};
use crate::optim::{AdamW, AdamWConfig};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub n_rollout: usize,
    pub seed: u64,
    /// Optional gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    /// Batch members in parallel (gradients are still accumulated in member
    /// order, so results are bit-identical to serial mode).
    pub parallel: bool,
    /// Invoke the checkpoint callback every this many epochs (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            epochs: 50,
            n_rollout: 1,
            seed: 0,
            grad_clip: None,
            parallel: true,
            checkpoint_every: 0,
        }
    }
}

/// Weighted squared-error loss: mean over rollout steps, mean over
/// non-boundary nodes, weighted sum over variables. Boundary rows contribute
/// nothing.
pub fn weighted_mse_loss<S: Scalar>(
    tape: &mut Tape<S>,
    predictions: &[TensorId],
    targets: &[Tensor<S>],
    loss_weights: &Tensor<S>,
    interior: &Arc<Vec<u32>>,
) -> Result<TensorId> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(LamError::contract(format!(
            "loss over {} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if interior.is_empty() {
        return Err(LamError::contract(
            "no non-boundary nodes: the loss set G is empty",
        ));
    }
    let weights = tape.constant(loss_weights.clone());
    let mut total: Option<TensorId> = None;
    for (pred, target) in predictions.iter().zip(targets) {
        let t = tape.constant(target.clone());
        let err = tape.sub(*pred, t)?;
        let sq = tape.mul(err, err)?;
        let weighted = tape.mul_cols(sq, weights)?;
        let inner = tape.gather_rows(weighted, interior.clone())?;
        let s = tape.sum(inner)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let scale = 1.0 / (predictions.len() * interior.len()) as f64;
    tape.scale(total.unwrap(), scale)
}

/// Loss curve and bookkeeping from one training phase.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// (epoch, mean training loss over the epoch's batches).
    pub loss_curve: Vec<(usize, f64)>,
    pub optimizer_steps: u64,
}

struct MemberResult<S: Scalar> {
    loss: f64,
    grads: Vec<Vec<S>>,
}

fn run_member<S: Scalar>(
    params: &ModelParams<S>,
    arrays: &GraphArrays<S>,
    trajectories: &[Trajectory],
    stats: &NormStats,
    spec: SampleSpec,
    n_rollout: usize,
    loss_weights: &Tensor<S>,
    param_sizes: &[usize],
) -> Result<MemberResult<S>> {
    let sample = materialize_sample(&trajectories[spec.trajectory], stats, spec, n_rollout)?;
    let mut tape: Tape<S> = Tape::fast();
    let bound = params.bind(&mut tape, true);
    let gb = GraphBind::new(&mut tape, arrays);
    let prev2 = tape.leaf(Tensor::from_f64_tensor(&sample.init[0]), false);
    let prev = tape.leaf(Tensor::from_f64_tensor(&sample.init[1]), false);
    let forcing_ids: Vec<[TensorId; 3]> = sample
        .forcing
        .iter()
        .map(|triple| {
            [
                tape.leaf(Tensor::from_f64_tensor(&triple[0]), false),
                tape.leaf(Tensor::from_f64_tensor(&triple[1]), false),
                tape.leaf(Tensor::from_f64_tensor(&triple[2]), false),
            ]
        })
        .collect();
    let truths: Vec<Tensor<S>> = sample
        .boundary_truth
        .iter()
        .map(Tensor::from_f64_tensor)
        .collect();
    let steps: Vec<RolloutStep<S>> = forcing_ids
        .iter()
        .zip(&truths)
        .map(|(f, t)| RolloutStep {
            forcing: *f,
            boundary_truth: t,
        })
        .collect();
    let preds = rollout(&mut tape, &bound, &gb, prev2, prev, &steps)?;
    let targets: Vec<Tensor<S>> = sample.targets.iter().map(Tensor::from_f64_tensor).collect();
    let loss = weighted_mse_loss(&mut tape, &preds, &targets, loss_weights, &arrays.interior)?;
    let loss_value = tape.value(loss).item()?.as_f64();
    if !loss_value.is_finite() {
        return Err(LamError::NonFinite(format!("loss diverged to {loss_value}")));
    }
    let grads = tape.backward(loss)?;
    // parameter leaves are the first nodes on the tape, in for_each order
    let collected = param_sizes
        .iter()
        .enumerate()
        .map(|(i, &len)| grads.get_or_zeros(TensorId::from_index(i), len))
        .collect();
    Ok(MemberResult {
        loss: loss_value,
        grads: collected,
    })
}

/// One training phase over the dataset: shuffled seeded batches, rollouts of
/// `config.n_rollout` steps with boundary forcing, AdamW updates on the
/// batch-mean gradient. On a non-finite loss the parameters are restored to
/// the last completed epoch and an error is returned.
pub fn train_phase<S: Scalar>(
    params: &mut ModelParams<S>,
    graph: &LamGraph,
    trajectories: &[Trajectory],
    stats: &NormStats,
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &ModelParams<S>) -> Result<()>,
) -> Result<TrainReport> {
    params.config.matches_graph(graph)?;
    if stats.n_vars() != params.config.n_vars {
        return Err(LamError::contract(format!(
            "stats have {} variables, model expects {}",
            stats.n_vars(),
            params.config.n_vars
        )));
    }
    if config.batch_size == 0 || config.n_rollout == 0 {
        return Err(LamError::config("batch size and rollout length must be >= 1"));
    }
    let mut samples: Vec<SampleSpec> = Vec::new();
    for (i, tr) in trajectories.iter().enumerate() {
        samples.extend(window_samples(tr.len(), i, config.n_rollout));
    }
    if samples.is_empty() {
        return Err(LamError::contract(
            "no usable training samples for this rollout length",
        ));
    }

    let arrays: GraphArrays<S> = GraphArrays::new(graph);
    let loss_weights = Tensor::from_f64_tensor(&Tensor::vector(stats.loss_weights()));
    let mut param_sizes = Vec::new();
    params.for_each_param(&mut |_, t| param_sizes.push(t.numel()));

    let mut opt: AdamW<S> = AdamW::new(AdamWConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();
    let mut last_good = params.clone();

    for epoch in 0..config.epochs {
        samples.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in samples.chunks(config.batch_size) {
            let run = |&spec: &SampleSpec| {
                run_member(
                    params,
                    &arrays,
                    trajectories,
                    stats,
                    spec,
                    config.n_rollout,
                    &loss_weights,
                    &param_sizes,
                )
            };
            let members: Vec<Result<MemberResult<S>>> = if config.parallel {
                batch.par_iter().map(run).collect()
            } else {
                batch.iter().map(run).collect()
            };

            // accumulate in fixed member order for determinism
            let mut accum: Vec<Vec<S>> = param_sizes.iter().map(|&n| vec![S::zero(); n]).collect();
            let mut batch_loss = 0.0;
            let inv_b = S::from_f64(1.0 / batch.len() as f64);
            for member in members {
                let member = member.map_err(|e| {
                    *params = last_good.clone();
                    LamError::TrainAbort(format!(
                        "epoch {epoch}: {e}; parameters restored to last completed epoch"
                    ))
                })?;
                batch_loss += member.loss;
                for (acc, g) in accum.iter_mut().zip(&member.grads) {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a += v * inv_b;
                    }
                }
            }
            if let Some(clip) = config.grad_clip {
                clip_gradients(&mut accum, clip);
            }
            opt.begin_step(&param_sizes)?;
            let mut idx = 0;
            let mut opt_err = None;
            params.for_each_param_mut(&mut |_, t| {
                if let Err(e) = opt.update_param(idx, t.values_mut(), &accum[idx]) {
                    opt_err.get_or_insert(e);
                }
                idx += 1;
            });
            if let Some(e) = opt_err {
                return Err(e);
            }
            report.optimizer_steps += 1;
            batch_loss /= batch.len() as f64;
            epoch_loss += batch_loss;
            epoch_batches += 1;
        }
        epoch_loss /= epoch_batches as f64;
        report.loss_curve.push((epoch, epoch_loss));
        last_good = params.clone();
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            on_checkpoint(epoch, params)?;
        }
    }
    Ok(report)
}

/// Fine-tuning phase: the same loop with 4-step rollouts.
pub fn finetune_rollout<S: Scalar>(
    params: &mut ModelParams<S>,
    graph: &LamGraph,
    trajectories: &[Trajectory],
    stats: &NormStats,
    config: &TrainConfig,
    on_checkpoint: impl FnMut(usize, &ModelParams<S>) -> Result<()>,
) -> Result<TrainReport> {
    let cfg = TrainConfig {
        n_rollout: 4,
        ..config.clone()
    };
    train_phase(params, graph, trajectories, stats, &cfg, on_checkpoint)
}

fn clip_gradients<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) {
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g {
            sq += v.as_f64() * v.as_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g {
                *v *= scale;
            }
        }
    }
}
