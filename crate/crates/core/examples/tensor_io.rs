//! Writes a tensor file, reads it back, and renders a 2D tensor as a PGM.
//!
//! cargo run --example tensor_io -- [out_dir]

use std::path::PathBuf;

use dacm::io::{read_tensor, write_pgm, write_tensor};
use dacm::tensor::Tensor;

fn main() -> dacm::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().display().to_string()));
    let (h, w) = (32, 48);
    let data = (0..h * w)
        .map(|k| {
            let (i, j) = ((k / w) as f64 / h as f64, (k % w) as f64 / w as f64);
            (6.0 * i).sin() * (4.0 * j).cos()
        })
        .collect();
    let t = Tensor::from_vec(&[h, w], data)?;
    let path = dir.join("wave.dacm");
    write_tensor(&path, &t)?;
    let back = read_tensor(&path)?;
    let exact = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("wrote {} ({:?}), bit-exact round trip: {exact}", path.display(), back.shape());
    let pgm = dir.join("wave.pgm");
    write_pgm(&pgm, &back, 1e-12)?;
    println!("wrote {}", pgm.display());
    Ok(())
}
