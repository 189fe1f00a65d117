use std::fmt;
use std::str::FromStr;

use crate::augment::{AugmentConfig, StainMatrix};
use crate::error::{Error, Result};
use crate::kv::parse_value;
use crate::pooling::{PoolKind, PoolingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::config(format!(
                "unknown optimizer {s:?} (expected sgd_momentum or adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Heavy-ball coefficient for `sgd_momentum`.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// L2 penalty added to the gradient of every parameter.
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_bags: usize,
    pub seed: u64,
    pub pooling: PoolingConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 5e-4,
            max_epochs: 100,
            patience: 10,
            batch_bags: 1,
            seed: 0,
            pooling: PoolingConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

fn on_off(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key} must be on or off, got {value:?}"))),
    }
}

fn flag(b: bool) -> String {
    if b { "on" } else { "off" }.to_string()
}

fn vector(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn triple(key: &str, value: &str) -> Result<[f64; 3]> {
    vector(key, value)?
        .try_into()
        .map_err(|_| Error::config(format!("{key} needs three comma-separated numbers")))
}

fn join(v: &[f64]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Learning rate 0 is accepted and turns every step into a no-op.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        unit("momentum", self.momentum)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(Error::config(format!(
                "adam_epsilon must be > 0, got {}",
                self.adam_epsilon
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.max_epochs < 1 || self.patience < 1 || self.batch_bags < 1 {
            return Err(Error::config("max_epochs, patience and batch_bags must all be >= 1"));
        }
        self.pooling.validate()?;
        self.augment.validate()
    }

    /// Applies one `key = value` setting; `Ok(false)` if the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "optimizer" => self.optimizer = value.parse()?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "batch_bags" => self.batch_bags = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "pool" => self.pooling.kind = value.parse::<PoolKind>()?,
            "r" => self.pooling.r = parse_value(key, value)?,
            "epsilon" => self.pooling.epsilon = parse_value(key, value)?,
            "augment" => self.augment.enabled = on_off(key, value)?,
            "augment_stain" => self.augment.stain = on_off(key, value)?,
            "augment_dihedral" => self.augment.dihedral = on_off(key, value)?,
            "augment_blur" => self.augment.blur = on_off(key, value)?,
            "stain_sigma" => self.augment.stain_sigma = parse_value(key, value)?,
            "blur_radius_max" => self.augment.blur_radius_max = parse_value(key, value)?,
            "stain_h" | "stain_e" => {
                let rows = self.augment.stain_matrix.rows();
                let (mut h, mut e) = (rows[0], rows[1]);
                *if key == "stain_h" { &mut h } else { &mut e } = triple(key, value)?;
                self.augment.stain_matrix = StainMatrix::from_stains(h, e)?;
            }
            "stain_matrix" => {
                let v: [f64; 9] = vector(key, value)?
                    .try_into()
                    .map_err(|_| Error::config("stain_matrix needs nine comma-separated numbers"))?;
                self.augment.stain_matrix =
                    StainMatrix::from_rows([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])?;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every field as `key = value`, readable back through [`TrainConfig::set`]
    /// without loss (the stain matrix is written row by row).
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let a = &self.augment;
        vec![
            ("optimizer", self.optimizer.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("momentum", self.momentum.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_epsilon", self.adam_epsilon.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("batch_bags", self.batch_bags.to_string()),
            ("seed", self.seed.to_string()),
            ("pool", self.pooling.kind.to_string()),
            ("r", self.pooling.r.to_string()),
            ("epsilon", self.pooling.epsilon.to_string()),
            ("augment", flag(a.enabled)),
            ("augment_stain", flag(a.stain)),
            ("augment_dihedral", flag(a.dihedral)),
            ("augment_blur", flag(a.blur)),
            ("stain_sigma", a.stain_sigma.to_string()),
            ("blur_radius_max", a.blur_radius_max.to_string()),
            ("stain_matrix", join(&a.stain_matrix.rows().concat())),
        ]
    }
}
