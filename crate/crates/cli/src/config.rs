//! Flat `key = value` configuration files and flag precedence.

use std::path::Path;

use fsmol_core::meta::{TrainConfig, CONFIG_KEYS};
use fsmol_core::{Error, Result};

/// `(key, value)` pairs from flat config text. Blank lines and `#`
/// comments are ignored.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn apply_file(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    for (k, v) in parse_pairs(&text)? {
        cfg.set(&k, &v)?;
    }
    Ok(())
}

/// Parses `key=value` from a `--set` flag.
pub fn split_assignment(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Usage(format!("expected key=value, got `{s}`")))
}

/// Flag spelling of a config key.
pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

pub fn is_bool_key(key: &str) -> bool {
    matches!(
        key,
        "first_order" | "no_cprl" | "no_cgib" | "contrastive" | "adapt_encoder" | "include_unknown"
    )
}

pub fn keys() -> impl Iterator<Item = (&'static str, &'static str)> {
    CONFIG_KEYS.iter().copied()
}

/// Flat text that reproduces `cfg` when read back with [`apply_file`].
pub fn render(cfg: &TrainConfig) -> String {
    let m = &cfg.model;
    let lower = |s: String| s.to_lowercase();
    let values: Vec<(&str, String)> = vec![
        ("k", cfg.k.to_string()),
        ("m", cfg.m.to_string()),
        ("n_auxi", cfg.n_auxi.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("steps_per_epoch", cfg.steps_per_epoch.to_string()),
        ("inner_lr", cfg.inner_lr.to_string()),
        ("outer_lr", cfg.outer_lr.to_string()),
        ("beta", cfg.beta.to_string()),
        ("temperature", cfg.temperature.to_string()),
        ("inner_steps", cfg.inner_steps.to_string()),
        ("first_order", cfg.first_order.to_string()),
        ("rel_loss", lower(format!("{:?}", cfg.rel_loss))),
        ("no_cprl", cfg.no_cprl.to_string()),
        ("no_cgib", cfg.no_cgib.to_string()),
        ("contrastive", cfg.contrastive.to_string()),
        ("optimizer", lower(format!("{:?}", cfg.optimizer))),
        ("adapt_encoder", cfg.adapt_encoder.to_string()),
        ("seed", cfg.seed.to_string()),
        ("eval_repeats", cfg.eval_repeats.to_string()),
        ("eval_chunk", cfg.eval_chunk.to_string()),
        ("checkpoint_every", cfg.checkpoint_every.to_string()),
        ("threads", cfg.threads.to_string()),
        ("enc_layers", m.encoder.layers.to_string()),
        ("d1", m.encoder.dim.to_string()),
        ("readout", lower(format!("{:?}", m.encoder.readout))),
        ("ctx_layers", m.context_layers.to_string()),
        ("d2", m.context_dim.to_string()),
        ("head_hidden", m.head_hidden.to_string()),
        ("include_unknown", m.include_unknown.to_string()),
    ];
    values.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
