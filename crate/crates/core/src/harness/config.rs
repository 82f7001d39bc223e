use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{parse_bool, parse_kv, parse_num, ModelSpec};
use crate::optim::{OptimizerMode, DEFAULT_ATTN_LR, DEFAULT_INIT_STD, DEFAULT_LR};

/// Everything needed to reproduce one training run.
///
/// Stored as flat `key=value` lines. The model is given either by a built-in
/// id (`model=attn-B`), optionally adjusted with `skip` and `scale_divisor`,
/// or field by field with a `model.` prefix (`model.kind=attention`, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub dataset: Dataset,
    pub data_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerMode,
    pub init_std: f64,
    /// Overrides `init_std` for convolution and classifier kernels.
    pub dense_init_std: Option<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Train on the first `n` training samples only.
    pub train_limit: Option<usize>,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn new(model: ModelSpec, dataset: Dataset) -> Self {
        Self {
            model,
            dataset,
            data_dir: PathBuf::from("data"),
            epochs: 10,
            batch_size: dataset.default_batch_size(),
            optimizer: OptimizerMode::Single { lr: DEFAULT_LR },
            init_std: DEFAULT_INIT_STD,
            dense_init_std: None,
            seed: 0,
            out_dir: PathBuf::from("runs/latest"),
            train_limit: None,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_settings()?;
        let want = match self.dataset {
            Dataset::FashionMnist => crate::models::FASHION_MNIST_SHAPE,
            Dataset::Cifar10 => crate::models::CIFAR10_SHAPE,
        };
        if self.model.input != want {
            return Err(Error::Config(format!(
                "model input {:?} does not match {} samples {want:?}",
                self.model.input,
                self.dataset.name()
            )));
        }
        Ok(())
    }

    /// Checks everything except the match between model input and dataset.
    pub fn validate_settings(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let rates = match self.optimizer {
            OptimizerMode::Single { lr } => vec![lr],
            OptimizerMode::Segregated { attn_lr, lr } => vec![attn_lr, lr],
        };
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config(format!("learning rates must be positive, got {rates:?}")));
        }
        let stds = [Some(self.init_std), self.dense_init_std];
        if stds.iter().flatten().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("init std must be positive".into()));
        }
        if self.train_limit == Some(0) {
            return Err(Error::Config("train_limit must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        Self::from_map(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    fn from_map(mut map: BTreeMap<String, String>) -> Result<Self> {
        let model_fields: BTreeMap<String, String> = map
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k.to_string(), v.clone())))
            .collect();
        map.retain(|k, _| !k.starts_with("model."));
        let mut model = match (map.remove("model"), model_fields.is_empty()) {
            (Some(_), false) => return Err(Error::Config("give either 'model' or 'model.*' keys, not both".into())),
            (Some(id), true) => resolve_model(&id)?,
            (None, false) => ModelSpec::from_map(&model_fields)?,
            (None, true) => return Err(Error::Config("run config is missing 'model'".into())),
        };
        if let Some(v) = map.remove("skip") {
            model = model.with_skip(parse_bool(&v)?);
        }
        if let Some(v) = map.remove("scale_divisor") {
            model = model.with_scale_divisor(parse_num(&v)?);
        }
        let dataset = match map.remove("dataset") {
            Some(d) => Dataset::parse(&d)?,
            None if model.input == crate::models::CIFAR10_SHAPE => Dataset::Cifar10,
            None => Dataset::FashionMnist,
        };
        let mut cfg = Self::new(model, dataset);
        let mut optimizer = "single".to_string();
        let mut lr = DEFAULT_LR;
        let mut attn_lr = DEFAULT_ATTN_LR;
        for (k, v) in map {
            match k.as_str() {
                "data_dir" => cfg.data_dir = PathBuf::from(v),
                "epochs" => cfg.epochs = parse_num(&v)?,
                "batch_size" => cfg.batch_size = parse_num(&v)?,
                "optimizer" => optimizer = v,
                "lr" => lr = parse_num(&v)?,
                "attn_lr" => attn_lr = parse_num(&v)?,
                "init_std" => cfg.init_std = parse_num(&v)?,
                "dense_init_std" => cfg.dense_init_std = optional(&v, parse_num)?,
                "seed" => cfg.seed = parse_num(&v)?,
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                "train_limit" => cfg.train_limit = optional(&v, parse_num)?,
                "shuffle" => cfg.shuffle = parse_bool(&v)?,
                other => return Err(Error::Config(format!("unknown run config key '{other}'"))),
            }
        }
        cfg.optimizer = match optimizer.as_str() {
            "single" => OptimizerMode::Single { lr },
            "segregated" => OptimizerMode::Segregated { attn_lr, lr },
            other => {
                return Err(Error::Config(format!(
                    "optimizer must be single or segregated, got '{other}'"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Self-contained `key=value` form, readable by [`TrainConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for line in self.model.to_kv().lines() {
            let _ = writeln!(out, "model.{line}");
        }
        let _ = writeln!(out, "dataset={}", self.dataset.name());
        let _ = writeln!(out, "data_dir={}", self.data_dir.display());
        let _ = writeln!(out, "epochs={}", self.epochs);
        let _ = writeln!(out, "batch_size={}", self.batch_size);
        match self.optimizer {
            OptimizerMode::Single { lr } => {
                let _ = writeln!(out, "optimizer=single\nlr={lr}");
            }
            OptimizerMode::Segregated { attn_lr, lr } => {
                let _ = writeln!(out, "optimizer=segregated\nlr={lr}\nattn_lr={attn_lr}");
            }
        }
        let _ = writeln!(out, "init_std={}", self.init_std);
        let _ = writeln!(out, "dense_init_std={}", fmt_optional(self.dense_init_std));
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "out_dir={}", self.out_dir.display());
        let _ = writeln!(out, "train_limit={}", fmt_optional(self.train_limit));
        let _ = writeln!(out, "shuffle={}", self.shuffle);
        out
    }
}

/// A built-in id, or a path to a model spec file.
pub fn resolve_model(id_or_path: &str) -> Result<ModelSpec> {
    match ModelSpec::preset(id_or_path) {
        Ok(spec) => Ok(spec),
        Err(e) => {
            let path = Path::new(id_or_path);
            if path.is_file() {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                ModelSpec::from_kv(&text)
            } else {
                Err(e)
            }
        }
    }
}

fn optional<N>(s: &str, parse: impl Fn(&str) -> Result<N>) -> Result<Option<N>> {
    match s {
        "" | "none" => Ok(None),
        s => parse(s).map(Some),
    }
}

fn fmt_optional<N: std::fmt::Display>(v: Option<N>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = TrainConfig::from_kv("model=attn-B\n").unwrap();
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.batch_size, 4096);
        assert_eq!(cfg.optimizer, OptimizerMode::Single { lr: 1e-3 });
        assert_eq!(cfg.dataset, Dataset::FashionMnist);
        let cifar = TrainConfig::from_kv("model=attn-cifar").unwrap();
        assert_eq!((cifar.dataset, cifar.batch_size), (Dataset::Cifar10, 1024));
    }

    #[test]
    fn round_trip_through_text() {
        let text = "model=attn-B\nskip=false\noptimizer=segregated\nattn_lr=0.1\nseed=9\ntrain_limit=20000\n";
        let cfg = TrainConfig::from_kv(text).unwrap();
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let control = TrainConfig::from_kv("model=control-fmnist\nscale_divisor=4\ndense_init_std=1").unwrap();
        assert_eq!(TrainConfig::from_kv(&control.to_kv()).unwrap(), control);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_kv("model=attn-B\nepochs=0").is_err());
        assert!(TrainConfig::from_kv("model=attn-B\nlr=-1").is_err());
        assert!(TrainConfig::from_kv("model=attn-B\ncolour=blue").is_err());
        assert!(TrainConfig::from_kv("model=attn-B\ndataset=cifar10").is_err());
        assert!(TrainConfig::from_kv("epochs=3").is_err());
        assert!(TrainConfig::from_kv("model=control-fmnist\nscale_divisor=3").is_err());
    }
}
