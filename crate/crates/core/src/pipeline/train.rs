//! Joint training: marginal-likelihood ascent on the per-level kernels and
//! cross-entropy descent on the aggregation network, one episode per
//! iteration.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::episode::{derive_seed, generate_episodes, EpisodeConfig, Split};
use super::metrics::IouAccumulator;
use super::model::{cross_entropy, pool_volume, predict_mask, DacmModel, ForwardCache};
use super::{prepare_episode, Backbone, EpisodeFeatures};
use crate::aggregation::{Parameterized, Volume};
use crate::config::RunConfig;
use crate::cost_volume::{build_cost_volume, run_sampler, training_set_with_fallback, CostVolume};
use crate::error::{DacmError, Result};
use crate::gp::{mll_gradients, GpModel};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub fn episode_config(cfg: &RunConfig, split: Split) -> EpisodeConfig {
    EpisodeConfig {
        image_size: cfg.image_size,
        shots: cfg.shots,
        split,
        clutter: cfg.clutter,
        ..EpisodeConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    /// iterations completed so far
    pub iter: usize,
    pub loss: f64,
    pub miou: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DacmModel,
    pub trace: Vec<TraceRow>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0].loss
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.loss)
    }
}

/// First epoch whose mean loss is at most `fraction` of the epoch-0 loss.
pub fn epochs_to_fraction(trace: &[TraceRow], fraction: f64) -> Option<usize> {
    let target = fraction * trace.first()?.loss;
    trace.iter().skip(1).find(|r| r.loss <= target).map(|r| r.epoch)
}

pub struct EpisodeOutput {
    pub raw: Vec<CostVolume>,
    pub pooled: Vec<Volume>,
    pub logits: Tensor,
    pub cache: ForwardCache,
}

fn level_volumes(model: &DacmModel, ep: &EpisodeFeatures) -> Result<Vec<CostVolume>> {
    ep.query
        .iter()
        .zip(&ep.support)
        .zip(&model.kernels)
        .map(|((q, s), k)| build_cost_volume(model.kind, k, q, s))
        .collect()
}

fn run_net(model: &DacmModel, raw: Vec<CostVolume>, cfg: &RunConfig) -> Result<EpisodeOutput> {
    let pooled: Vec<Volume> = raw
        .iter()
        .map(|c| pool_volume(c, cfg.query_pool, cfg.support_pool))
        .collect();
    let (logits, cache) = model.net.forward(&pooled)?;
    Ok(EpisodeOutput {
        raw,
        pooled,
        logits,
        cache,
    })
}

/// Cost volumes with the current kernels followed by the network.
pub fn forward_episode(model: &DacmModel, ep: &EpisodeFeatures, cfg: &RunConfig) -> Result<EpisodeOutput> {
    let raw = level_volumes(model, ep)?;
    run_net(model, raw, cfg)
}

struct KernelTrainer {
    adams: Vec<Adam>,
    rng: ChaCha8Rng,
}

impl KernelTrainer {
    /// One ascent step per level on freshly sampled query points.
    fn step(&mut self, model: &mut DacmModel, ep: &EpisodeFeatures, raw: &[CostVolume], cfg: &RunConfig) -> Result<()> {
        for l in 0..raw.len() {
            let state = run_sampler(&raw[l], &ep.query_masks[l], cfg.lambda, cfg.epsilon, &mut self.rng)?;
            let set = training_set_with_fallback(&ep.query[l], &state, &ep.query_masks[l])?;
            let gp = GpModel::new(model.kind, model.kernels[l].clone(), set)
                .map_err(|e| DacmError::Numerical(format!("level {l} GP: {e}")))?;
            let grad = mll_gradients(&gp);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(DacmError::Numerical(format!("level {l}: non-finite MLL gradient")));
            }
            let mut flat = model.kernels[l].to_vec();
            self.adams[l].ascend(&mut flat, &grad);
            model.kernels[l].set_from_slice(&flat)?;
        }
        Ok(())
    }
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let backbone = Backbone::new(cfg.pyramid(), cfg.backbone_seed)?;
    let ecfg = episode_config(cfg, Split::Train);
    let feats = generate_episodes(cfg.seed, cfg.train_episodes, &ecfg)
        .iter()
        .map(|e| prepare_episode(e, &backbone))
        .collect::<Result<Vec<_>>>()?;
    train_on(cfg, &feats)
}

/// Trains from epoch 0 on prepared episodes. Epoch 0 is a forward-only
/// pass that records the starting loss.
pub fn train_on(cfg: &RunConfig, episodes: &[EpisodeFeatures]) -> Result<TrainOutcome> {
    if episodes.is_empty() {
        return Err(DacmError::Config("training needs at least one episode".into()));
    }
    let mut model = DacmModel::new(cfg);
    let mut agg = Adam::new(AdamConfig::with_lr(cfg.agg_lr), model.net.num_params());
    let mut kt = KernelTrainer {
        adams: model
            .kernels
            .iter()
            .map(|k| Adam::new(AdamConfig::with_lr(cfg.gp_lr), k.num_params()))
            .collect(),
        rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4, 0)),
    };
    let mut trace = Vec::with_capacity(cfg.epochs + 1);

    let mut acc = IouAccumulator::new();
    let mut total = 0.0;
    for ep in episodes {
        let out = forward_episode(&model, ep, cfg)?;
        let (loss, _) = cross_entropy(&out.logits, &ep.query_mask)?;
        total += loss;
        acc.add(ep.class_id, &predict_mask(&out.logits), &ep.query_mask)?;
    }
    trace.push(TraceRow {
        epoch: 0,
        iter: 0,
        loss: total / episodes.len() as f64,
        miou: acc.miou(),
    });
    info!("epoch 0 loss {:.6}", trace[0].loss);

    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut iter = 0;
    for epoch in 1..=cfg.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 5, epoch as u64));
        order.shuffle(&mut shuffle);
        let mut acc = IouAccumulator::new();
        let mut total = 0.0;
        for &i in &order {
            let ep = &episodes[i];
            let raw = level_volumes(&model, ep)?;
            if cfg.learn_kernel {
                kt.step(&mut model, ep, &raw, cfg)?;
            }
            let out = run_net(&model, raw, cfg)?;
            let (loss, dlogits) = cross_entropy(&out.logits, &ep.query_mask)?;
            if !loss.is_finite() {
                return Err(DacmError::Numerical(format!("non-finite loss at epoch {epoch}, iteration {iter}")));
            }
            total += loss;
            acc.add(ep.class_id, &predict_mask(&out.logits), &ep.query_mask)?;
            let (grad, _) = model.net.backward(&out.cache, &dlogits)?;
            let g = grad.flatten();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(DacmError::Numerical(format!(
                    "non-finite aggregation gradient at epoch {epoch}, iteration {iter}"
                )));
            }
            let mut flat = model.net.flatten();
            agg.descend(&mut flat, &g);
            model.net.assign_flat(&flat)?;
            iter += 1;
        }
        let row = TraceRow {
            epoch,
            iter,
            loss: total / episodes.len() as f64,
            miou: acc.miou(),
        };
        info!("epoch {epoch} loss {:.6} miou {:.4}", row.loss, row.miou);
        debug!("level kernels {:?}", model.kernels);
        trace.push(row);
    }
    Ok(TrainOutcome { model, trace })
}
