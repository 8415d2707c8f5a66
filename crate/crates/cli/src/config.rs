//! Flat `key = value` training configuration.
//!
//! ```text
//! # comment
//! backbone = lightweight
//! epochs = 50
//! grad_clip = none
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;

use stlpd::data::AugmentConfig;
use stlpd::engine::TrainConfig;
use stlpd::net::Backbone;

/// Every accepted key with its default, in the order they are echoed.
pub const KEYS: &[(&str, &str)] = &[
    ("backbone", "residual"),
    ("attention", "true"),
    ("stage_channels", "8,16,32,64"),
    ("fpn_dim", "32"),
    ("input_size", "64"),
    ("epochs", "10"),
    ("batch_size", "8"),
    ("lr", "0.01"),
    ("min_lr", "0.0001"),
    ("momentum", "0.9"),
    ("weight_decay", "0.0005"),
    ("seed", "0"),
    ("shuffle", "true"),
    ("grad_clip", "5"),
    ("augment", "true"),
    ("flip_prob", "0.5"),
    ("jitter", "0.1"),
    ("cls_weight", "1"),
    ("box_weight", "2"),
    ("corner_weight", "1"),
    ("checkpoint", "false"),
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Write a checkpoint after every epoch.
    pub checkpoint: bool,
    /// Augmentation parameters as written, kept while augmentation is off.
    pub aug: AugmentConfig,
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not true or false")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

struct State {
    cfg: RunConfig,
    augment: bool,
}

impl State {
    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.cfg.train;
        match key {
            "backbone" => {
                t.net.backbone = Backbone::parse(v).ok_or_else(|| format!("`{v}` is not residual or lightweight"))?
            }
            "attention" => t.net.attention = parse_bool(v)?,
            "stage_channels" => {
                let parts: Vec<usize> = v.split(',').map(|p| parse_num(p.trim())).collect::<Result<_, _>>()?;
                t.net.stage_channels = parts
                    .try_into()
                    .map_err(|p: Vec<usize>| format!("expected 4 channel counts, got {}", p.len()))?;
            }
            "fpn_dim" => t.net.fpn_dim = parse_num(v)?,
            "input_size" => t.net.input_size = parse_num(v)?,
            "epochs" => t.epochs = parse_num(v)?,
            "batch_size" => t.batch_size = parse_num(v)?,
            "lr" => t.lr = parse_num(v)?,
            "min_lr" => t.min_lr = parse_num(v)?,
            "momentum" => t.momentum = parse_num(v)?,
            "weight_decay" => t.weight_decay = parse_num(v)?,
            "seed" => t.seed = parse_num(v)?,
            "shuffle" => t.shuffle = parse_bool(v)?,
            "grad_clip" => t.grad_clip = if v == "none" { None } else { Some(parse_num(v)?) },
            "augment" => self.augment = parse_bool(v)?,
            "flip_prob" => self.cfg.aug.flip_prob = parse_num(v)?,
            "jitter" => self.cfg.aug.jitter = parse_num(v)?,
            "cls_weight" => t.loss_weights.cls = parse_num(v)?,
            "box_weight" => t.loss_weights.bbox = parse_num(v)?,
            "corner_weight" => t.loss_weights.corner = parse_num(v)?,
            "checkpoint" => self.cfg.checkpoint = parse_bool(v)?,
            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }
}

/// Parses and validates a configuration file. Each key may appear once.
pub fn parse_config(text: &str) -> Result<RunConfig, String> {
    let mut st = State {
        cfg: RunConfig::default(),
        augment: true,
    };
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {lineno}: expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.iter().any(|(name, _)| *name == k) {
            let known: Vec<&str> = KEYS.iter().map(|(n, _)| *n).collect();
            return Err(format!("line {lineno}: unknown key `{k}` (known keys: {})", known.join(", ")));
        }
        if !seen.insert(k.to_string()) {
            return Err(format!("line {lineno}: duplicate key `{k}`"));
        }
        st.set(k, v).map_err(|e| format!("line {lineno}: {k}: {e}"))?;
    }
    st.cfg.train.augment = st.augment.then_some(st.cfg.aug);
    st.cfg.train.validate().map_err(|e| e.to_string())?;
    Ok(st.cfg)
}

/// The effective configuration in the format `parse_config` reads.
pub fn render_config(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    let a = cfg.aug;
    let values = [
        t.net.backbone.name().to_string(),
        t.net.attention.to_string(),
        t.net.stage_channels.map(|c| c.to_string()).join(","),
        t.net.fpn_dim.to_string(),
        t.net.input_size.to_string(),
        t.epochs.to_string(),
        t.batch_size.to_string(),
        t.lr.to_string(),
        t.min_lr.to_string(),
        t.momentum.to_string(),
        t.weight_decay.to_string(),
        t.seed.to_string(),
        t.shuffle.to_string(),
        t.grad_clip.map_or("none".to_string(), |c| c.to_string()),
        t.augment.is_some().to_string(),
        a.flip_prob.to_string(),
        a.jitter.to_string(),
        t.loss_weights.cls.to_string(),
        t.loss_weights.bbox.to_string(),
        t.loss_weights.corner.to_string(),
        cfg.checkpoint.to_string(),
    ];
    let mut out = String::new();
    for ((k, _), v) in KEYS.iter().zip(values) {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults_and_defaults_are_documented() {
        let cfg = parse_config("# nothing here\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let documented: String = KEYS.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        assert_eq!(render_config(&cfg), documented);
    }

    #[test]
    fn echo_reads_back() {
        let text = "backbone = lightweight\nattention=false\ngrad_clip = none\naugment = false\njitter = 0.2\nlr = 0.003 # tuned\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.train.net.backbone, Backbone::Lightweight);
        assert_eq!(cfg.train.grad_clip, None);
        assert_eq!(cfg.train.augment, None);
        assert_eq!(cfg.train.lr, 0.003);
        let again = parse_config(&render_config(&cfg)).unwrap();
        assert_eq!(again, cfg);
        assert!(render_config(&cfg).contains("jitter = 0.2"));
    }

    #[test]
    fn problems_are_reported_with_lines() {
        assert!(parse_config("epochs = 3\nlearning_rate = 1").unwrap_err().starts_with("line 2: unknown key"));
        assert!(parse_config("seed = 1\nseed = 2").unwrap_err().contains("duplicate"));
        assert!(parse_config("epochs three").unwrap_err().contains("key = value"));
        assert!(parse_config("epochs = -1").unwrap_err().contains("line 1: epochs"));
        assert!(parse_config("stage_channels = 8,16").unwrap_err().contains("4 channel counts"));
        assert!(parse_config("batch_size = 0").unwrap_err().contains("batch_size"));
    }
}
