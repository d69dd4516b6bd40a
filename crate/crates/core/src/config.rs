//! Training configuration, loaded from JSON. Unknown keys are rejected; the
//! accepted keys are listed in `schema/train_config.schema.json`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::networks::NetworkConfig;
use crate::transforms::TransformConfig;

/// Multipliers on the three encoder-side objectives. All default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg: f64,
    pub rec: f64,
    pub mi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            rec: 1.0,
            mi: 1.0,
        }
    }
}

/// Few-shot fine-tuning of the anatomical encoder and segmentor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Share of the target dataset used for fine-tuning; the rest is evaluated.
    pub fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seeds the split and the batch order.
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            fraction: 0.05,
            epochs: 50,
            learning_rate: 1e-4,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::config("adapt.fraction", "must lie in (0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::config("adapt.epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("adapt.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("adapt.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Adam step size shared by all five components.
    pub learning_rate: f64,
    /// Optional separate step size for the statistics network.
    pub mine_learning_rate: Option<f64>,
    /// Passes over the training set.
    pub epochs: usize,
    pub batch_size: usize,
    /// Root of every random stream in a run.
    pub seed: u64,
    pub use_mi_loss: bool,
    pub use_cross_rec: bool,
    pub loss_weights: LossWeights,
    pub loss: LossConfig,
    /// Global gradient-norm clip per component optimizer; off by default.
    pub grad_clip_norm: Option<f64>,
    pub transforms: TransformConfig,
    pub network: NetworkConfig,
    pub adapt: AdaptConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            mine_learning_rate: None,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            use_mi_loss: true,
            use_cross_rec: true,
            loss_weights: LossWeights::default(),
            loss: LossConfig::default(),
            grad_clip_norm: None,
            transforms: TransformConfig::default(),
            network: NetworkConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn resolution(&self) -> usize {
        self.network.resolution
    }

    pub fn mine_lr(&self) -> f64 {
        self.mine_learning_rate.unwrap_or(self.learning_rate)
    }

    /// Parses and validates a JSON config. Errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { String::new() } else { path };
            let inner = e.into_inner();
            let msg = inner.to_string();
            // For unknown fields the path stops at the parent; append the field.
            let key = match msg.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
                Some(field) if !key.ends_with(field) => {
                    if key.is_empty() {
                        field.to_string()
                    } else {
                        format!("{key}.{field}")
                    }
                }
                _ => key,
            };
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if let Some(lr) = self.mine_learning_rate {
            if !(lr > 0.0) {
                return Err(Error::config("mine_learning_rate", "must be positive"));
            }
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size",
                "must be at least 2 (the marginal term shuffles the batch)",
            ));
        }
        for (key, w) in [
            ("loss_weights.seg", self.loss_weights.seg),
            ("loss_weights.rec", self.loss_weights.rec),
            ("loss_weights.mi", self.loss_weights.mi),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(key, "must be a finite non-negative number"));
            }
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip_norm", "must be positive"));
            }
        }
        self.loss.validate()?;
        self.transforms.validate()?;
        self.network.validate()?;
        self.adapt.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn key_of(text: &str) -> String {
        match TrainConfig::from_json(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = TrainConfig::from_json("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.epochs, 200);
        assert_eq!(cfg.resolution(), 256);
        assert_eq!(cfg.transforms.crop.range, [0.7, 0.9]);
        assert_eq!(cfg.transforms.flip.probability, 0.05);
        assert_eq!(cfg.transforms.crop.probability, 0.5);
        assert_eq!(cfg.transforms.blur.probability, 0.1);
    }

    #[test]
    fn unknown_keys_are_named() {
        assert_eq!(key_of(r#"{"learnin_rate": 0.1}"#), "learnin_rate");
        assert_eq!(key_of(r#"{"network": {"depth": 3}}"#), "network.depth");
        assert_eq!(key_of(r#"{"transforms": {"blur": {"p": 0.1, "range": [0, 1]}}}"#), "transforms.blur.p");
    }

    #[test]
    fn invalid_values_are_named() {
        assert_eq!(key_of(r#"{"learning_rate": -1}"#), "learning_rate");
        assert_eq!(key_of(r#"{"epochs": 0}"#), "epochs");
        assert_eq!(key_of(r#"{"batch_size": 1}"#), "batch_size");
        assert_eq!(key_of(r#"{"epochs": "many"}"#), "epochs");
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = TrainConfig::default();
        cfg.use_cross_rec = false;
        cfg.network = NetworkConfig::small(64);
        let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    /// Object keys of `value`, recursively, as dotted paths.
    fn keys(value: &Value, prefix: &str, out: &mut Vec<String>) {
        if let Value::Object(map) = value {
            for (k, v) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                out.push(path.clone());
                keys(v, &path, out);
            }
        }
    }

    fn schema_keys(schema: &Value, prefix: &str, out: &mut Vec<String>) {
        if let Some(Value::Object(props)) = schema.get("properties") {
            for (k, v) in props {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                out.push(path.clone());
                schema_keys(v, &path, out);
            }
        }
    }

    #[test]
    fn schema_lists_exactly_the_accepted_keys() {
        let schema: Value =
            serde_json::from_str(include_str!("../schema/train_config.schema.json")).unwrap();
        let mut from_schema = Vec::new();
        schema_keys(&schema, "", &mut from_schema);
        let mut from_config = Vec::new();
        keys(&serde_json::to_value(TrainConfig::default()).unwrap(), "", &mut from_config);
        from_schema.sort();
        from_config.sort();
        assert_eq!(from_schema, from_config);
    }
}
