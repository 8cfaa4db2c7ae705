//! Synthetic episodes, fixed feature pyramid, model, training and
//! evaluation.

mod backbone;
mod decoder;
mod episode;
mod metrics;
mod model;
mod train;

pub use backbone::{extract_pyramid, Backbone, PyramidConfig, LEVELS};
pub use decoder::{decode, decode_backward, decode_with_cache, upsample, upsample_backward, Decoder, DecoderCache};
pub use episode::{
    class_hue, derive_seed, generate_episode, generate_episodes, Episode, EpisodeConfig, ShapeFamily, Split,
    NUM_CLASSES,
};
pub use metrics::{evaluate, evaluate_features, EvalReport, IouAccumulator};
pub use model::{
    cross_entropy, encode_level, encode_level_backward, pool_volume, predict_mask, AggregationNet, DacmModel,
    EncoderCache, ForwardCache, LevelEncoder,
};
pub use train::{
    epochs_to_fraction, episode_config, forward_episode, train, train_on, EpisodeOutput, TraceRow, TrainOutcome,
};

use crate::cost_volume::{FeatureMap, Mask};
use crate::error::{DacmError, Result};

/// Elementwise mean of the per-shot support maps.
pub fn aggregate_kshot(support: &[FeatureMap]) -> Result<FeatureMap> {
    FeatureMap::mean_of(support)
}

/// Zeroes support features outside the mask; the mask is resized to the
/// feature grid by nearest neighbour first.
pub fn mask_support_features(features: &FeatureMap, mask: &Mask) -> Result<FeatureMap> {
    if mask.height() == 0 || mask.width() == 0 {
        return Err(DacmError::dim("empty support mask"));
    }
    let m = mask.resize_nearest(features.height(), features.width());
    features.masked(&m)
}

/// Everything the model needs from one episode, independent of the
/// trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeFeatures {
    pub class_id: usize,
    pub query: Vec<FeatureMap>,
    /// masked per shot, then averaged over shots
    pub support: Vec<FeatureMap>,
    /// query mask at each level resolution
    pub query_masks: Vec<Mask>,
    pub query_mask: Mask,
}

pub fn prepare_episode(ep: &Episode, backbone: &Backbone) -> Result<EpisodeFeatures> {
    let query = extract_pyramid(&ep.query_image, backbone)?;
    let mut per_level: Vec<Vec<FeatureMap>> = vec![Vec::new(); LEVELS];
    for (img, mask) in &ep.support {
        for (l, f) in extract_pyramid(img, backbone)?.into_iter().enumerate() {
            per_level[l].push(mask_support_features(&f, mask)?);
        }
    }
    let support = per_level
        .iter()
        .map(|maps| aggregate_kshot(maps))
        .collect::<Result<Vec<_>>>()?;
    let query_masks = query
        .iter()
        .map(|f| ep.query_mask.resize_nearest(f.height(), f.width()))
        .collect();
    Ok(EpisodeFeatures {
        class_id: ep.class_id,
        query,
        support,
        query_masks,
        query_mask: ep.query_mask.clone(),
    })
}
