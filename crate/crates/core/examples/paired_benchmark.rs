//! Trains the learned-kernel model and the fixed-cosine baseline on the
//! same episodes and compares convergence and held-out mIoU.
//!
//! cargo run --release --example paired_benchmark -- [seed] [epochs] [train] [eval]

use std::time::Instant;

use dacm::kernels::KernelKind;
use dacm::pipeline::{
    epochs_to_fraction, episode_config, evaluate_features, generate_episodes, prepare_episode, train_on, Backbone,
    Split,
};
use dacm::RunConfig;

fn main() -> dacm::Result<()> {
    env_logger::init();
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seed = args.first().copied().unwrap_or(0);
    let mut cfg = RunConfig {
        seed,
        epochs: args.get(1).copied().unwrap_or(20) as usize,
        train_episodes: args.get(2).copied().unwrap_or(200) as usize,
        eval_episodes: args.get(3).copied().unwrap_or(100) as usize,
        ..RunConfig::default()
    };
    if let Ok(text) = std::env::var("DACM_CONFIG") {
        for kv in text.split(';').filter(|s| !s.trim().is_empty()) {
            let (k, v) = kv.split_once('=').expect("key=value");
            cfg.set(k.trim(), v.trim())?;
        }
    }
    let baseline = RunConfig {
        kernel: KernelKind::Linear,
        learn_kernel: false,
        ddt_layers: 0,
        ..cfg.clone()
    };

    let backbone = Backbone::new(cfg.pyramid(), cfg.backbone_seed)?;
    let prep = |split| -> dacm::Result<Vec<_>> {
        let n = if split == Split::Train { cfg.train_episodes } else { cfg.eval_episodes };
        generate_episodes(seed, n, &episode_config(&cfg, split))
            .iter()
            .map(|e| prepare_episode(e, &backbone))
            .collect()
    };
    let train = prep(Split::Train)?;
    let eval = prep(Split::Eval)?;

    for (name, c) in [("dacm", &cfg), ("baseline", &baseline)] {
        let t = Instant::now();
        let out = train_on(c, &train)?;
        let secs = t.elapsed().as_secs_f64();
        let report = evaluate_features(&out.model, &eval, c, false)?;
        let losses: Vec<String> = out.trace.iter().map(|r| format!("{:.3}", r.loss)).collect();
        println!(
            "{name:9} seed {seed} half@{:?} eval miou {:.4} fb {:.4} train {secs:.1}s losses [{}]",
            epochs_to_fraction(&out.trace, 0.5),
            report.miou,
            report.fb_iou,
            losses.join(" ")
        );
    }
    Ok(())
}
