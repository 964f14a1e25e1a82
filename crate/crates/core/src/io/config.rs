//! Flat `key = value` configuration.
//!
//! Blank lines and everything after `#` are ignored. Missing keys keep
//! their defaults, unknown keys are rejected. `min_area` applies to both the
//! phantom generator and episode sampling.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::attention::{AffinityInput, BranchMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::phantom::PhantomSpec;
use crate::selfsup::EpisodeConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub episode: EpisodeConfig,
    pub phantom: PhantomSpec,
}

enum Slot<'a> {
    Usize(&'a mut usize),
    U64(&'a mut u64),
    F64(&'a mut f64),
    Mode(&'a mut BranchMode),
    Affinity(&'a mut AffinityInput),
}

impl Slot<'_> {
    fn expected(&self) -> &'static str {
        match self {
            Slot::Usize(_) | Slot::U64(_) => "a non-negative integer",
            Slot::F64(_) => "a number",
            Slot::Mode(_) => "`two-branch` or `single-branch`",
            Slot::Affinity(_) => "`embedded` or `raw`",
        }
    }

    fn set(&mut self, value: &str) -> bool {
        match self {
            Slot::Usize(v) => value.parse().map(|x| **v = x).is_ok(),
            Slot::U64(v) => value.parse().map(|x| **v = x).is_ok(),
            Slot::F64(v) => value.parse::<f64>().ok().filter(|x| x.is_finite()).map(|x| **v = x).is_some(),
            Slot::Mode(v) => BranchMode::parse(value).map(|x| **v = x).is_some(),
            Slot::Affinity(v) => AffinityInput::parse(value).map(|x| **v = x).is_some(),
        }
    }

    fn render(&self) -> String {
        match self {
            Slot::Usize(v) => v.to_string(),
            Slot::U64(v) => v.to_string(),
            Slot::F64(v) => format!("{v:?}"),
            Slot::Mode(v) => v.name().to_string(),
            Slot::Affinity(v) => v.name().to_string(),
        }
    }
}

impl Config {
    /// Every key with its storage, in canonical order.
    fn slots(&mut self) -> Vec<(&'static str, Slot<'_>)> {
        let Config {
            model,
            train,
            episode,
            phantom,
        } = self;
        let aug = &mut episode.augment;
        vec![
            ("alpha", Slot::F64(&mut model.alpha)),
            ("affinity_input", Slot::Affinity(&mut model.affinity)),
            ("bg_weight", Slot::F64(&mut train.weights.background)),
            ("branch_mode", Slot::Mode(&mut model.branch_mode)),
            ("depth", Slot::Usize(&mut model.depth)),
            ("elastic_amplitude", Slot::F64(&mut aug.elastic_amplitude)),
            ("elastic_smoothing", Slot::F64(&mut aug.elastic_smoothing)),
            ("fg_weight", Slot::F64(&mut train.weights.foreground)),
            ("image_size", Slot::Usize(&mut phantom.image_size)),
            ("iterations", Slot::Usize(&mut train.iterations)),
            ("k_re", Slot::Usize(&mut model.pool.k_re)),
            ("lambda_reg", Slot::F64(&mut train.lambda_reg)),
            ("log_every", Slot::Usize(&mut train.log_every)),
            ("lr", Slot::F64(&mut train.schedule.lr)),
            ("lr_decay_every", Slot::Usize(&mut train.schedule.decay_every)),
            ("lr_decay_factor", Slot::F64(&mut train.schedule.decay_factor)),
            ("max_gamma_delta", Slot::F64(&mut aug.max_gamma_delta)),
            ("max_rotation_deg", Slot::F64(&mut aug.max_rotation_deg)),
            ("max_scale_delta", Slot::F64(&mut aug.max_scale_delta)),
            ("max_translation", Slot::F64(&mut aug.max_translation)),
            ("min_area", Slot::Usize(&mut episode.min_area)),
            ("momentum", Slot::F64(&mut train.momentum)),
            ("n_blocks", Slot::Usize(&mut model.n_blocks)),
            ("n_scans", Slot::Usize(&mut phantom.n_scans)),
            ("phantom_seed", Slot::U64(&mut phantom.seed)),
            ("seed", Slot::U64(&mut train.seed)),
            ("sigma", Slot::Usize(&mut model.pool.sigma)),
            ("superpixel_min_size", Slot::Usize(&mut episode.min_size)),
            ("superpixel_scale", Slot::F64(&mut episode.k_scale)),
            ("tau", Slot::F64(&mut model.pool.tau)),
            ("texture_noise", Slot::F64(&mut phantom.texture_noise)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.episode.augment.validate()?;
        if !self.phantom.image_size.is_multiple_of(4 * self.model.pool.sigma) {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by 4 × sigma",
                self.phantom.image_size
            )));
        }
        Ok(())
    }

    /// Sorted `key = value` lines; parsing them yields this config again.
    pub fn canonical(&self) -> String {
        let mut copy = *self;
        copy.slots()
            .into_iter()
            .map(|(k, s)| format!("{k} = {}\n", s.render()))
            .collect()
    }

    /// Hex SHA-256 of [`Config::canonical`].
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn parse_str(text: &str, origin: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut seen: Vec<String> = Vec::new();
    let mut unknown = Vec::new();
    {
        let mut slots = cfg.slots();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                path: origin.to_string(),
                line: n + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::ConfigParse {
                    path: origin.to_string(),
                    line: n + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            seen.push(key.to_string());
            match slots.iter_mut().find(|(k, _)| *k == key) {
                Some((_, slot)) => {
                    if !slot.set(value) {
                        return Err(Error::ConfigType {
                            key: key.to_string(),
                            expected: slot.expected(),
                            value: value.to_string(),
                        });
                    }
                }
                None => unknown.push(key.to_string()),
            }
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownKeys(unknown));
    }
    cfg.phantom.min_area = cfg.episode.min_area;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_str(&text, &path.display().to_string())
}
