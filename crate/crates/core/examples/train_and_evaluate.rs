//! Trains a small model on synthetic episodes and reports held-out IoU.
//!
//! cargo run --release --example train_and_evaluate -- [seed] [epochs]

use dacm::pipeline::{evaluate_features, episode_config, generate_episodes, prepare_episode, train_on, Backbone, Split};
use dacm::RunConfig;

fn main() -> dacm::Result<()> {
    env_logger::init();
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cfg = RunConfig {
        seed: args.first().copied().unwrap_or(0),
        epochs: args.get(1).copied().unwrap_or(5) as usize,
        train_episodes: 40,
        eval_episodes: 20,
        heads: 2,
        head_dim: 4,
        embed_channels: 4,
        offset_hidden: 4,
        ..RunConfig::default()
    };
    let backbone = Backbone::new(cfg.pyramid(), cfg.backbone_seed)?;
    let prep = |split, n| -> dacm::Result<Vec<_>> {
        generate_episodes(cfg.seed, n, &episode_config(&cfg, split)).iter().map(|e| prepare_episode(e, &backbone)).collect()
    };
    let train = prep(Split::Train, cfg.train_episodes)?;
    let eval = prep(Split::Eval, cfg.eval_episodes)?;
    let out = train_on(&cfg, &train)?;
    for row in out.trace.iter().filter(|r| r.iter == 0 || r.epoch == 0) {
        println!("epoch {:2}  loss {:.4}", row.epoch, row.loss);
    }
    let rep = evaluate_features(&out.model, &eval, &cfg, false)?;
    println!("held-out mIoU {:.3}  FB-IoU {:.3}", rep.miou, rep.fb_iou);
    Ok(())
}
