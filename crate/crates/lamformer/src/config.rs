//! Flat `key = value` run configuration with `#` comments and dotted keys.

use std::fmt::Write as _;
use std::str::FromStr;

use lamformer_core::data::{AugOp, SynthSpec};
use lamformer_core::network::{NetConfig, Toggles, STAGES};
use lamformer_core::train::TrainConfig;

use crate::error::{Error, Result};

/// Everything a run needs; every random stream is derived from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub data: SynthSpec,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            net: NetConfig::default(),
            data: SynthSpec::default(),
            train_samples: 200,
            eval_samples: 50,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_stages(key: &str, value: &str) -> Result<[usize; STAGES]> {
    let v: Vec<usize> = parse_list(key, value)?;
    v.try_into().map_err(|v: Vec<usize>| {
        Error::Config(format!("{key}: expected {STAGES} values, got {}", v.len()))
    })
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_aug(key: &str, value: &str) -> Result<Vec<AugOp>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "hflip" => Ok(AugOp::HFlip),
            "vflip" => Ok(AugOp::VFlip),
            "rot90" => Ok(AugOp::Rot90),
            _ => Err(Error::Config(format!(
                "{key}: unknown augmentation {s:?}; expected hflip, vflip or rot90"
            ))),
        })
        .collect()
}

fn aug_name(op: AugOp) -> &'static str {
    match op {
        AugOp::HFlip => "hflip",
        AugOp::VFlip => "vflip",
        AugOp::Rot90 => "rot90",
    }
}

/// `net.*` keys of a network configuration, in a fixed order.
pub fn net_pairs(net: &NetConfig) -> Vec<(String, String)> {
    let t = net.toggles;
    [
        ("net.img_channels", net.img_channels.to_string()),
        ("net.num_classes", net.num_classes.to_string()),
        ("net.stage_channels", join(&net.stage_channels)),
        ("net.stage_depths", join(&net.stage_depths)),
        ("net.reduction_ratios", join(&net.reduction_ratios)),
        ("net.attn_divisor", net.attn_divisor.to_string()),
        ("net.frn_depth", net.frn_depth.to_string()),
        ("net.lam", t.lam.to_string()),
        ("net.phfa", t.phfa.to_string()),
        ("net.rt", t.rt.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Apply one `net.*` key; `false` if the key is not a network key.
pub fn set_net(net: &mut NetConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "net.img_channels" => net.img_channels = parse(key, value)?,
        "net.num_classes" => net.num_classes = parse(key, value)?,
        "net.stage_channels" => net.stage_channels = parse_stages(key, value)?,
        "net.stage_depths" => net.stage_depths = parse_stages(key, value)?,
        "net.reduction_ratios" => net.reduction_ratios = parse_stages(key, value)?,
        "net.attn_divisor" => net.attn_divisor = parse(key, value)?,
        "net.frn_depth" => net.frn_depth = parse(key, value)?,
        "net.lam" => net.toggles.lam = parse(key, value)?,
        "net.phfa" => net.toggles.phfa = parse(key, value)?,
        "net.rt" => net.toggles.rt = parse(key, value)?,
        "net.seed" => net.seed = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Split `key = value` lines, dropping blanks and `#` comments.
pub fn pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected key = value, got {line:?}",
                i + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if set_net(&mut self.net, key, value)? {
            return Ok(());
        }
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.image_size" => d.image_size = parse(key, value)?,
            "data.train_samples" => self.train_samples = parse(key, value)?,
            "data.eval_samples" => self.eval_samples = parse(key, value)?,
            "data.blobs_per_class" => {
                let v: Vec<usize> = parse_list(key, value)?;
                match v[..] {
                    [lo, hi] => d.blobs_per_class = (lo, hi),
                    _ => return Err(Error::Config(format!("{key}: expected lo,hi"))),
                }
            }
            "data.intensity_means" => {
                let m: Vec<f64> = parse_list(key, value)?;
                let s: Vec<f64> = d
                    .intensity_bands
                    .iter()
                    .map(|b| b.1)
                    .chain(std::iter::repeat(0.1))
                    .take(m.len())
                    .collect();
                d.intensity_bands = m.into_iter().zip(s).collect();
            }
            "data.intensity_stds" => {
                let s: Vec<f64> = parse_list(key, value)?;
                if s.len() != d.intensity_bands.len() {
                    return Err(Error::Config(format!(
                        "{key}: {} values for {} means",
                        s.len(),
                        d.intensity_bands.len()
                    )));
                }
                for (b, s) in d.intensity_bands.iter_mut().zip(s) {
                    b.1 = s;
                }
            }
            "data.noise_std" => d.noise_std = parse(key, value)?,
            "data.small_classes" => d.small_class_ids = parse_list(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.lambda" => t.lambda = parse(key, value)?,
            "train.augment" => t.augment = parse_aug(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` overrides after file parsing.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config().validate()?;
        let data = self.train_spec();
        if data.num_classes != self.net.num_classes {
            return Err(Error::Config(format!(
                "data has {} intensity bands but net.num_classes is {}",
                data.intensity_bands.len(),
                self.net.num_classes
            )));
        }
        data.validate()?;
        self.train_config().validate()?;
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err(Error::Config(
                "data.train_samples and data.eval_samples must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            seed: self.seed,
            ..self.net.clone()
        }
    }

    pub fn train_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed.wrapping_add(1),
            num_classes: self.data.intensity_bands.len(),
            ..self.data.clone()
        }
    }

    pub fn eval_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed.wrapping_add(2),
            ..self.train_spec()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn with_toggles(&self, toggles: Toggles) -> RunConfig {
        let mut c = self.clone();
        c.net.toggles = toggles;
        c
    }

    pub fn to_text(&self) -> String {
        let d = &self.data;
        let t = &self.train;
        let mut lines = vec![("seed".to_string(), self.seed.to_string())];
        lines.extend(net_pairs(&self.net));
        let means: Vec<f64> = d.intensity_bands.iter().map(|b| b.0).collect();
        let stds: Vec<f64> = d.intensity_bands.iter().map(|b| b.1).collect();
        for (k, v) in [
            ("data.image_size", d.image_size.to_string()),
            ("data.train_samples", self.train_samples.to_string()),
            ("data.eval_samples", self.eval_samples.to_string()),
            (
                "data.blobs_per_class",
                format!("{},{}", d.blobs_per_class.0, d.blobs_per_class.1),
            ),
            ("data.intensity_means", join(&means)),
            ("data.intensity_stds", join(&stds)),
            ("data.noise_std", d.noise_std.to_string()),
            ("data.small_classes", join(&d.small_class_ids)),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.lambda", t.lambda.to_string()),
            (
                "train.augment",
                t.augment
                    .iter()
                    .map(|&a| aug_name(a))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ] {
            lines.push((k.to_string(), v));
        }
        let mut s = String::new();
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
