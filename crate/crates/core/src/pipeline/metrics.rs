//! Intersection-over-union bookkeeping.
//!
//! Intersections and unions are summed over episodes before any division,
//! so the result does not depend on episode order. A class whose union is
//! empty counts as a perfect match.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::model::{predict_mask, DacmModel};
use super::train::forward_episode;
use super::EpisodeFeatures;
use crate::cost_volume::Mask;
use crate::error::{DacmError, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IouAccumulator {
    /// class id → (foreground intersection, foreground union)
    per_class: BTreeMap<usize, (u64, u64)>,
    fg: (u64, u64),
    bg: (u64, u64),
    episodes: usize,
}

fn ratio((i, u): (u64, u64)) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

impl IouAccumulator {
    pub fn new() -> Self {
        IouAccumulator::default()
    }

    pub fn add(&mut self, class_id: usize, pred: &Mask, truth: &Mask) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(DacmError::dim(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        let (mut fi, mut fu, mut bi, mut bu) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            fi += (p && t) as u64;
            fu += (p || t) as u64;
            bi += (!p && !t) as u64;
            bu += (!p || !t) as u64;
        }
        let e = self.per_class.entry(class_id).or_insert((0, 0));
        e.0 += fi;
        e.1 += fu;
        self.fg.0 += fi;
        self.fg.1 += fu;
        self.bg.0 += bi;
        self.bg.1 += bu;
        self.episodes += 1;
        Ok(())
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn class_iou(&self) -> BTreeMap<usize, f64> {
        self.per_class.iter().map(|(&c, &iu)| (c, ratio(iu))).collect()
    }

    /// Mean over classes of the foreground IoU.
    pub fn miou(&self) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        self.per_class.values().map(|&iu| ratio(iu)).sum::<f64>() / self.per_class.len() as f64
    }

    pub fn foreground_iou(&self) -> f64 {
        ratio(self.fg)
    }

    pub fn background_iou(&self) -> f64 {
        ratio(self.bg)
    }

    pub fn fb_iou(&self) -> f64 {
        (self.foreground_iou() + self.background_iou()) / 2.0
    }

    pub fn report(&self, seed: u64) -> EvalReport {
        EvalReport {
            class_iou: self.class_iou(),
            miou: self.miou(),
            fb_iou: self.fb_iou(),
            foreground_iou: self.foreground_iou(),
            background_iou: self.background_iou(),
            episodes: self.episodes,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_iou: BTreeMap<usize, f64>,
    pub miou: f64,
    pub fb_iou: f64,
    pub foreground_iou: f64,
    pub background_iou: f64,
    pub episodes: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "episodes = {}", self.episodes);
        let _ = writeln!(s, "miou = {:.6}", self.miou);
        let _ = writeln!(s, "fb_iou = {:.6}", self.fb_iou);
        let _ = writeln!(s, "iou_foreground = {:.6}", self.foreground_iou);
        let _ = writeln!(s, "iou_background = {:.6}", self.background_iou);
        for (c, v) in &self.class_iou {
            let _ = writeln!(s, "iou_class_{c} = {v:.6}");
        }
        s
    }
}

/// Runs the model on prepared episodes. With `oracle` set the ground truth
/// replaces the prediction, which checks the metric plumbing end to end.
pub fn evaluate_features(
    model: &DacmModel,
    episodes: &[EpisodeFeatures],
    cfg: &crate::config::RunConfig,
    oracle: bool,
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(DacmError::Config("evaluation needs at least one episode".into()));
    }
    let mut acc = IouAccumulator::new();
    for ep in episodes {
        let pred = if oracle {
            ep.query_mask.clone()
        } else {
            let out = forward_episode(model, ep, cfg)?;
            predict_mask(&out.logits)
        };
        acc.add(ep.class_id, &pred, &ep.query_mask)?;
    }
    Ok(acc.report(cfg.seed))
}

/// Generates `cfg.eval_episodes` held-out episodes and evaluates on them.
pub fn evaluate(model: &DacmModel, cfg: &crate::config::RunConfig) -> Result<EvalReport> {
    let backbone = super::Backbone::new(cfg.pyramid(), cfg.backbone_seed)?;
    let ecfg = super::train::episode_config(cfg, super::Split::Eval);
    let feats = super::generate_episodes(cfg.seed, cfg.eval_episodes, &ecfg)
        .iter()
        .map(|e| super::prepare_episode(e, &backbone))
        .collect::<Result<Vec<_>>>()?;
    evaluate_features(model, &feats, cfg, cfg.oracle)
}
