//! Checkpoint directory: `manifest.txt` naming every weight tensor with its
//! shape and file, one tensor file per weight, the run configuration, and
//! the kernel hyperparameters.

use std::fmt::Write as _;
use std::path::Path;

use super::hyper::{kernels_from_text, kernels_to_text};
use super::tensor_file::{read_tensor, write_tensor};
use crate::aggregation::Parameterized;
use crate::config::RunConfig;
use crate::error::{DacmError, Result};
use crate::pipeline::DacmModel;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.cfg";
pub const KERNELS: &str = "kernels.cfg";
const HEADER: &str = "dacm-checkpoint 1";

fn file_name(name: &str) -> String {
    format!("{name}.dacm")
}

pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, model: &DacmModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = format!("{HEADER}\n");
    for (name, t) in model.net.named_params() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let file = file_name(&name);
        let _ = writeln!(manifest, "{name} {} {file}", dims.join("x"));
        write_tensor(&dir.join(&file), t)?;
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    std::fs::write(dir.join(CONFIG), cfg.to_text())?;
    std::fs::write(dir.join(KERNELS), kernels_to_text(model.kind, &model.kernels))?;
    Ok(())
}

/// Rebuilds the model described by the stored configuration and fills in
/// every stored tensor. Names and shapes must match exactly.
pub fn load_checkpoint(dir: &Path) -> Result<(RunConfig, DacmModel)> {
    let cfg = RunConfig::load(&dir.join(CONFIG))?;
    let mut model = DacmModel::new(&cfg);
    let (kind, kernels) = kernels_from_text(&std::fs::read_to_string(dir.join(KERNELS))?)?;
    if kernels.len() != model.kernels.len() {
        return Err(DacmError::Format(format!(
            "checkpoint has {} kernel levels, model has {}",
            kernels.len(),
            model.kernels.len()
        )));
    }
    model.kind = kind;
    model.kernels = kernels;

    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(DacmError::Format("unrecognised manifest header".into()));
    }
    let entries: Vec<(String, String, String)> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(DacmError::Format(format!("bad manifest line {l:?}")));
            }
            Ok((f[0].to_string(), f[1].to_string(), f[2].to_string()))
        })
        .collect::<Result<_>>()?;
    let mut params = model.net.named_params_mut();
    if entries.len() != params.len() {
        return Err(DacmError::Format(format!(
            "manifest lists {} tensors, model has {}",
            entries.len(),
            params.len()
        )));
    }
    for ((name, dims, file), (pname, slot)) in entries.iter().zip(params.iter_mut()) {
        if name != pname {
            return Err(DacmError::Format(format!("expected tensor {pname}, manifest has {name}")));
        }
        let t = read_tensor(&dir.join(file))?;
        let want: Vec<String> = slot.shape().iter().map(|d| d.to_string()).collect();
        if t.shape() != slot.shape() || *dims != want.join("x") {
            return Err(DacmError::Format(format!(
                "{name}: stored shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        **slot = t;
    }
    drop(params);
    Ok((cfg, model))
}
