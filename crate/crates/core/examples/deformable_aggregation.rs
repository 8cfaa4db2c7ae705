//! Runs deformable attention on a 2D slice and a DDT layer on a small 4D
//! volume, then back-propagates a unit upstream gradient.
//!
//! cargo run --example deformable_aggregation

use dacm::aggregation::{
    ddt_forward, deformable_attention_2d, offset_network, parameter_gradients, AggregationOp, AttentionParams,
    DdtConfig, DdtParams, Volume,
};
use dacm::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dacm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let slice = Tensor::from_vec(&[2, 4, 4], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let att = AttentionParams::random(2, 2, 2, 4, 1.0, &mut rng);
    let offsets = offset_network(&slice, &att)?;
    let out = deformable_attention_2d(&slice, &att)?;
    println!("offset field {:?}, max |offset| {:.3}", offsets.shape(), offsets.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    println!("attention output {:?}", out.shape());

    let cfg = DdtConfig {
        embed_channels: 4,
        heads: 2,
        head_dim: 2,
        offset_hidden: 4,
        max_offset: 1.0,
    };
    let ddt = DdtParams::random(&cfg, 1.0, 1.0, &mut rng);
    let vol = Volume::new(1, [3, 3, 4, 4], (0..144).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let y = ddt_forward(&vol, &ddt.sdt, &ddt.qdt)?;
    println!("ddt output dims {:?}", y.dims());
    let grads = parameter_gradients(AggregationOp::Ddt { volume: &vol, params: &ddt }, &vec![1.0; y.data().len()])?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("|d input| = {:.4}", norm(&grads.input));
    for (name, g) in &grads.params {
        println!("|d {name}| = {:.4}", norm(g.data()));
    }
    Ok(())
}
