//! Kernel hyperparameters in the `key = value` text format. Floats use the
//! shortest representation that parses back to the same bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{DacmError, Result};
use crate::kernels::{KernelHyperparams, KernelKind};

fn key(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn hyperparams_to_text(prefix: &str, p: &KernelHyperparams) -> String {
    let mut s = String::new();
    let ls: Vec<String> = p.log_lengthscales.iter().map(|v| format!("{v:?}")).collect();
    let _ = writeln!(s, "{} = {:?}", key(prefix, "log_output_scale"), p.log_output_scale);
    let _ = writeln!(s, "{} = {}", key(prefix, "log_lengthscales"), ls.join(","));
    let _ = writeln!(s, "{} = {:?}", key(prefix, "log_noise"), p.log_noise);
    let _ = writeln!(s, "{} = {:?}", key(prefix, "log_linear_variance"), p.log_linear_variance);
    let _ = writeln!(s, "{} = {}", key(prefix, "shared_lengthscale"), p.shared_lengthscale);
    s
}

/// Splits `key = value` lines into a map, ignoring blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DacmError::Format(format!("line {}: expected key = value", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(DacmError::Format(format!("duplicate key {}", k.trim())));
        }
    }
    Ok(out)
}

fn get<'a>(pairs: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
    pairs
        .get(k)
        .map(String::as_str)
        .ok_or_else(|| DacmError::Format(format!("missing key {k}")))
}

fn float(pairs: &BTreeMap<String, String>, k: &str) -> Result<f64> {
    let v = get(pairs, k)?;
    v.parse()
        .map_err(|_| DacmError::Format(format!("{k}: invalid number {v:?}")))
}

pub fn hyperparams_from_pairs(prefix: &str, pairs: &BTreeMap<String, String>) -> Result<KernelHyperparams> {
    let ls_text = get(pairs, &key(prefix, "log_lengthscales"))?;
    let log_lengthscales = if ls_text.is_empty() {
        Vec::new()
    } else {
        ls_text
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| DacmError::Format(format!("invalid lengthscale {v:?}")))
            })
            .collect::<Result<Vec<f64>>>()?
    };
    let shared = match get(pairs, &key(prefix, "shared_lengthscale"))? {
        "true" => true,
        "false" => false,
        other => return Err(DacmError::Format(format!("invalid boolean {other:?}"))),
    };
    Ok(KernelHyperparams {
        log_output_scale: float(pairs, &key(prefix, "log_output_scale"))?,
        log_lengthscales,
        log_noise: float(pairs, &key(prefix, "log_noise"))?,
        log_linear_variance: float(pairs, &key(prefix, "log_linear_variance"))?,
        shared_lengthscale: shared,
    })
}

/// Kernel kind plus one hyperparameter block per level.
pub fn kernels_to_text(kind: KernelKind, levels: &[KernelHyperparams]) -> String {
    let mut s = format!("kernel = {kind}\nlevels = {}\n", levels.len());
    for (l, p) in levels.iter().enumerate() {
        s.push_str(&hyperparams_to_text(&format!("level{l}"), p));
    }
    s
}

pub fn kernels_from_text(text: &str) -> Result<(KernelKind, Vec<KernelHyperparams>)> {
    let pairs = parse_pairs(text)?;
    let kind: KernelKind = get(&pairs, "kernel")?
        .parse()
        .map_err(|e: DacmError| DacmError::Format(e.to_string()))?;
    let n: usize = get(&pairs, "levels")?
        .parse()
        .map_err(|_| DacmError::Format("invalid level count".into()))?;
    let levels = (0..n)
        .map(|l| hyperparams_from_pairs(&format!("level{l}"), &pairs))
        .collect::<Result<Vec<_>>>()?;
    Ok((kind, levels))
}
