//! Flat `key = value` configuration files with `#` comments. Dotted keys
//! namespace the modules (`model.c`, `train.lr_start`, `paths.checkpoint`,
//! `mode.deterministic`). Unknown keys are hard errors so typos cannot
//! silently fall back to defaults.

use crate::error::{Error, Result};
use crate::model::{SkipMode, UformerConfig};
use crate::train::TrainConfig;
use std::path::{Path, PathBuf};

/// Everything a command needs: architecture, training settings, paths, and
/// mode flags.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub model: UformerConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
    pub use_f64: bool,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got '{v}'"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_num::<usize>(key, s.trim()))
        .collect()
}

/// Parse configuration text, starting from defaults.
pub fn parse(text: &str) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
        apply(&mut rc, key.trim(), value.trim())
            .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
    }
    rc.model.validate()?;
    rc.train.validate()?;
    Ok(rc)
}

pub fn parse_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text)
}

fn apply(rc: &mut RunConfig, key: &str, v: &str) -> Result<()> {
    let m = &mut rc.model;
    let t = &mut rc.train;
    match key {
        "model.c" => m.base_channels = parse_num(key, v)?,
        "model.stages" => m.stages = parse_num(key, v)?,
        "model.encoder_depths" => m.encoder_depths = parse_list(key, v)?,
        "model.bottleneck_depth" => m.bottleneck_depth = parse_num(key, v)?,
        "model.window" => m.window = parse_num(key, v)?,
        "model.head_dim" => m.head_dim = parse_num(key, v)?,
        "model.use_modulator" => m.use_modulator = parse_bool(key, v)?,
        "model.use_shift" => m.use_shift = parse_bool(key, v)?,
        "model.skip_mode" => m.skip_mode = SkipMode::parse(v)?,
        "model.in_channels" => m.in_channels = parse_num(key, v)?,
        "model.leff_ratio" => m.leff_ratio = parse_num(key, v)?,
        "model.leaky_slope" => m.leaky_slope = parse_num(key, v)?,
        "model.modulator_pre_shift" => m.modulator_pre_shift = parse_bool(key, v)?,
        "model.shift_even_indices" => m.shift_even_indices = parse_bool(key, v)?,
        "model.zero_output_proj" => m.zero_output_proj = parse_bool(key, v)?,

        "train.epsilon" => t.epsilon = parse_num(key, v)?,
        "train.beta1" => t.beta1 = parse_num(key, v)?,
        "train.beta2" => t.beta2 = parse_num(key, v)?,
        "train.adam_eps" => t.adam_eps = parse_num(key, v)?,
        "train.weight_decay" => t.weight_decay = parse_num(key, v)?,
        "train.lr_start" => t.lr_start = parse_num(key, v)?,
        "train.lr_end" => t.lr_end = parse_num(key, v)?,
        "train.total_steps" => t.total_steps = parse_num(key, v)?,
        "train.batch_size" => t.batch_size = parse_num(key, v)?,
        "train.patch_size" => t.patch_size = parse_num(key, v)?,
        "train.seed" => t.seed = parse_num(key, v)?,
        "train.degradation" => t.degradation.kind = v.to_string(),
        "train.noise_sigma" => t.degradation.noise_sigma = parse_num(key, v)?,
        "train.blur_kernel" => t.degradation.blur_kernel = parse_num(key, v)?,
        "train.rain_count" => t.degradation.rain_count = parse_num(key, v)?,
        "train.rain_length" => t.degradation.rain_length = parse_num(key, v)?,
        "train.rain_angle" => t.degradation.rain_angle = parse_num(key, v)?,
        "train.rain_intensity" => t.degradation.rain_intensity = parse_num(key, v)?,
        "train.augment" => t.augment = parse_bool(key, v)?,
        "train.train_patches" => t.train_patches = parse_num(key, v)?,
        "train.val_patches" => t.val_patches = parse_num(key, v)?,
        "train.val_interval" => t.val_interval = parse_num(key, v)?,
        "train.checkpoint_interval" => t.checkpoint_interval = parse_num(key, v)?,
        "train.grad_clip" => t.grad_clip = parse_num(key, v)?,
        "train.check_finite" => t.check_finite = parse_bool(key, v)?,

        "paths.data_dir" => rc.data_dir = Some(PathBuf::from(v)),
        "paths.checkpoint" => rc.checkpoint = Some(PathBuf::from(v)),
        "paths.out_dir" => rc.out_dir = Some(PathBuf::from(v)),
        "mode.deterministic" => rc.deterministic = parse_bool(key, v)?,
        "mode.f64" => rc.use_f64 = parse_bool(key, v)?,

        _ => return Err(Error::Config(format!("unknown key '{key}'"))),
    }
    Ok(())
}

fn depths_str(depths: &[usize]) -> String {
    depths
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Serialize just the architecture (used inside checkpoints).
pub fn serialize_model_config(m: &UformerConfig) -> String {
    format!(
        "model.c = {}\n\
         model.stages = {}\n\
         model.encoder_depths = {}\n\
         model.bottleneck_depth = {}\n\
         model.window = {}\n\
         model.head_dim = {}\n\
         model.use_modulator = {}\n\
         model.use_shift = {}\n\
         model.skip_mode = {}\n\
         model.in_channels = {}\n\
         model.leff_ratio = {}\n\
         model.leaky_slope = {}\n\
         model.modulator_pre_shift = {}\n\
         model.shift_even_indices = {}\n\
         model.zero_output_proj = {}\n",
        m.base_channels,
        m.stages,
        depths_str(&m.encoder_depths),
        m.bottleneck_depth,
        m.window,
        m.head_dim,
        m.use_modulator,
        m.use_shift,
        m.skip_mode.as_str(),
        m.in_channels,
        m.leff_ratio,
        m.leaky_slope,
        m.modulator_pre_shift,
        m.shift_even_indices,
        m.zero_output_proj,
    )
}

pub fn parse_model_config(text: &str) -> Result<UformerConfig> {
    let rc = parse(text)?;
    Ok(rc.model)
}

/// Full round-trippable serialization.
pub fn serialize(rc: &RunConfig) -> String {
    let t = &rc.train;
    let mut out = serialize_model_config(&rc.model);
    out.push_str(&format!(
        "train.epsilon = {}\n\
         train.beta1 = {}\n\
         train.beta2 = {}\n\
         train.adam_eps = {}\n\
         train.weight_decay = {}\n\
         train.lr_start = {}\n\
         train.lr_end = {}\n\
         train.total_steps = {}\n\
         train.batch_size = {}\n\
         train.patch_size = {}\n\
         train.seed = {}\n\
         train.degradation = {}\n\
         train.noise_sigma = {}\n\
         train.blur_kernel = {}\n\
         train.rain_count = {}\n\
         train.rain_length = {}\n\
         train.rain_angle = {}\n\
         train.rain_intensity = {}\n\
         train.augment = {}\n\
         train.train_patches = {}\n\
         train.val_patches = {}\n\
         train.val_interval = {}\n\
         train.checkpoint_interval = {}\n\
         train.grad_clip = {}\n\
         train.check_finite = {}\n",
        t.epsilon,
        t.beta1,
        t.beta2,
        t.adam_eps,
        t.weight_decay,
        t.lr_start,
        t.lr_end,
        t.total_steps,
        t.batch_size,
        t.patch_size,
        t.seed,
        t.degradation.kind,
        t.degradation.noise_sigma,
        t.degradation.blur_kernel,
        t.degradation.rain_count,
        t.degradation.rain_length,
        t.degradation.rain_angle,
        t.degradation.rain_intensity,
        t.augment,
        t.train_patches,
        t.val_patches,
        t.val_interval,
        t.checkpoint_interval,
        t.grad_clip,
        t.check_finite,
    ));
    if let Some(p) = &rc.data_dir {
        out.push_str(&format!("paths.data_dir = {}\n", p.display()));
    }
    if let Some(p) = &rc.checkpoint {
        out.push_str(&format!("paths.checkpoint = {}\n", p.display()));
    }
    if let Some(p) = &rc.out_dir {
        out.push_str(&format!("paths.out_dir = {}\n", p.display()));
    }
    out.push_str(&format!("mode.deterministic = {}\n", rc.deterministic));
    out.push_str(&format!("mode.f64 = {}\n", rc.use_f64));
    out
}

/// Built-in configurations reachable as `--config builtin:<name>`.
pub fn builtin(name: &str) -> Option<RunConfig> {
    let (model, train) = match name {
        "uformer-t" => (UformerConfig::tiny(), TrainConfig::default()),
        "uformer-s" => (UformerConfig::small(), TrainConfig::default()),
        "uformer-b" => (UformerConfig::base(), TrainConfig::default()),
        "smoke" => (UformerConfig::smoke(), TrainConfig::smoke()),
        _ => return None,
    };
    Some(RunConfig {
        model,
        train,
        ..RunConfig::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trips_through_serialize() {
        let mut rc = RunConfig {
            model: UformerConfig::base(),
            data_dir: Some(PathBuf::from("/tmp/data")),
            deterministic: true,
            ..RunConfig::default()
        };
        rc.train.total_steps = 777;
        rc.train.degradation.kind = "box_blur".into();

        let text = serialize(&rc);
        let parsed = parse(&text).unwrap();
        assert_eq!(serialize(&parsed), text);
        assert_eq!(parsed.model, rc.model);
        assert_eq!(parsed.train.total_steps, 777);
        assert!(parsed.deterministic);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = parse("model.c = 16\nmodel.windw = 8\n").unwrap_err();
        assert!(err.to_string().contains("model.windw"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let rc =
            parse("# a comment\n\nmodel.c = 24  # inline comment\nmodel.head_dim = 24\n").unwrap();
        assert_eq!(rc.model.base_channels, 24);
    }

    #[test]
    fn invalid_values_name_the_key() {
        let err = parse("model.c = many\n").unwrap_err();
        assert!(err.to_string().contains("model.c"), "{err}");
        let err = parse("train.augment = maybe\n").unwrap_err();
        assert!(err.to_string().contains("train.augment"), "{err}");
    }

    #[test]
    fn builtins_cover_the_published_variants() {
        assert_eq!(
            builtin("uformer-b").unwrap().model.encoder_depths,
            vec![1, 2, 8, 8]
        );
        assert_eq!(builtin("uformer-t").unwrap().model.base_channels, 16);
        assert_eq!(builtin("smoke").unwrap().model.stages, 2);
        assert!(builtin("nope").is_none());
    }

    #[test]
    fn train_invariants_are_enforced() {
        let err = parse("train.lr_end = 0.01\ntrain.lr_start = 0.001\n").unwrap_err();
        assert!(err.to_string().contains("lr_end"), "{err}");
        let err = parse("train.beta1 = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("beta"), "{err}");
        let err = parse("train.epsilon = 0\n").unwrap_err();
        assert!(err.to_string().contains("epsilon"), "{err}");
    }
}
