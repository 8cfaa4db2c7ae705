//! Builds a cost volume between two episode images and runs the
//! similarity-guided sampler that picks GP training cells.
//!
//! cargo run --release --example cost_volume_sampler -- [seed]

use dacm::cost_volume::{build_cost_volume, run_sampler, training_set_with_fallback, FeatureMap};
use dacm::kernels::{KernelHyperparams, KernelKind};
use dacm::pipeline::{episode_config, generate_episode, prepare_episode, Backbone, Split};
use dacm::RunConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dacm::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = RunConfig::default();
    let backbone = Backbone::new(cfg.pyramid(), cfg.backbone_seed)?;
    let ep = prepare_episode(&generate_episode(seed, &episode_config(&cfg, Split::Train)), &backbone)?;
    let (q, s): (&FeatureMap, &FeatureMap) = (&ep.query[1], &ep.support[1]);
    let params = KernelHyperparams::new(q.channels());
    let vol = build_cost_volume(KernelKind::RbfArd, &params, q, s)?;
    println!("level 1 volume: {} query x {} support cells", vol.query_positions(), vol.support_positions());

    let mask = &ep.query_masks[1];
    let state = run_sampler(&vol, mask, cfg.lambda, cfg.epsilon, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let set = training_set_with_fallback(q, &state, mask)?;
    println!("sampled {} of {} cells ({} in mask)", state.mask_sample.count(), mask.data().len(), mask.count());
    println!("gp training set: {} points of dim {}", set.len(), set.dim());
    for i in 0..mask.height() {
        let line: String = (0..mask.width())
            .map(|j| match (mask.get(i, j), state.mask_sample.get(i, j)) {
                (true, true) => '#',
                (true, false) => '+',
                (false, true) => 'o',
                _ => '.',
            })
            .collect();
        println!("  {line}");
    }
    Ok(())
}
