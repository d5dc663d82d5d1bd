use std::path::{Path, PathBuf};

use microcast_core::data::{load_stations, Scenario, SplitConfig, StationSeries};
use microcast_core::eval::{config_digest, BaselineConfig, ModelKind};
use microcast_core::model::ModelConfig;
use microcast_core::synth::{build_world, WorldSpec};
use microcast_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DATA_ENV: &str = "MICROCAST_DATA";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `observations.csv` and `stations.csv`.
    pub dir: Option<PathBuf>,
    pub target_channel: Option<String>,
    /// Generate a world in memory instead of reading files.
    pub synthetic: Option<WorldSpec>,
}

/// One experiment: data, split, model, training and evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub target: Option<String>,
    /// Empty means every station except the target.
    pub train_stations: Vec<String>,
    pub scenarios: Vec<Scenario>,
    pub models: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    pub split: SplitConfig,
    /// Defaults to the desk preset sized to the data's channel count.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    /// Phase-2 settings; falls back to `train`.
    pub transform_train: Option<TrainConfig>,
    pub baselines: BaselineConfig,
    pub curve: Vec<usize>,
    pub output: PathBuf,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            target: None,
            train_stations: Vec::new(),
            scenarios: vec![Scenario::FullData, Scenario::ZeroShot],
            models: ModelKind::TABLE.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            split: SplitConfig {
                train_stride: 6,
                test_stride: 1,
                ..SplitConfig::default()
            },
            model: None,
            train: TrainConfig {
                learning_rate: 1e-3,
                batches_per_epoch: Some(60),
                val_windows: Some(256),
                max_epochs: 30,
                patience: 5,
                ..TrainConfig::default()
            },
            transform_train: None,
            baselines: BaselineConfig::default(),
            curve: Vec::new(),
            output: PathBuf::from("out"),
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Overlays `text` on the defaults key by key, so a partial `[train]`
    /// keeps the default values it does not mention. `[transform_train]`
    /// overlays the resulting `[train]`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let user: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| e.to_string())?;
        if let Some(toml::Value::Table(tt)) = user.get("transform_train") {
            let mut phase2 = match user.get("train") {
                Some(toml::Value::Table(t)) => overlay(merged["train"].clone(), t),
                _ => merged["train"].clone(),
            };
            if let toml::Value::Table(base) = &mut phase2 {
                for (k, v) in tt {
                    base.insert(k.clone(), v.clone());
                }
            }
            merged.insert("transform_train".into(), phase2);
        }
        for (k, v) in &user {
            if k == "transform_train" && v.is_table() {
                continue;
            }
            let next = match (merged.remove(k), v) {
                (Some(base), toml::Value::Table(t)) => overlay(base, t),
                (_, v) => v.clone(),
            };
            merged.insert(k.clone(), next);
        }
        toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| e.to_string())
    }

    pub fn phase2(&self) -> TrainConfig {
        self.transform_train.clone().unwrap_or_else(|| self.train.clone())
    }

    /// Stations from the configured source: synthetic spec, data directory,
    /// or the directory named by the environment.
    pub fn load_stations(&self) -> Result<Vec<StationSeries>, CliError> {
        if let Some(spec) = &self.data.synthetic {
            return Ok(build_world(spec)?.1);
        }
        let dir = match &self.data.dir {
            Some(d) => d.clone(),
            None => std::env::var_os(DATA_ENV).map(PathBuf::from).ok_or_else(|| {
                CliError::Usage(format!(
                    "no data: set data.dir or data.synthetic in the config, pass --data, or set {DATA_ENV}"
                ))
            })?,
        };
        let (stations, _) = load_stations(
            &dir.join("observations.csv"),
            &dir.join("stations.csv"),
            self.data.target_channel.as_deref(),
        )?;
        if stations.len() < 2 {
            return Err(CliError::Contract(format!(
                "{} holds {} station(s); at least 2 are needed",
                dir.display(),
                stations.len()
            )));
        }
        Ok(stations)
    }

    /// Fills in everything that depends on the data: target, training
    /// stations and model width.
    pub fn resolve(&mut self, stations: &[StationSeries]) -> Result<(), CliError> {
        let target = match &self.target {
            Some(t) => t.clone(),
            None => stations[0].id().to_string(),
        };
        microcast_core::data::find_station(stations, &target)?;
        if self.train_stations.is_empty() {
            self.train_stations = stations
                .iter()
                .map(|s| s.id().to_string())
                .filter(|id| *id != target)
                .collect();
        }
        self.target = Some(target);
        let n_features = stations[0].n_features();
        let model = self
            .model
            .get_or_insert_with(|| ModelConfig::desk(n_features));
        if model.n_features != n_features {
            return Err(CliError::Usage(format!(
                "model expects {} features, data has {n_features}",
                model.n_features
            )));
        }
        self.split.lx = model.lx;
        self.split.ly = model.ly;
        if self.jobs == 0 {
            return Err(CliError::Usage("jobs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn target(&self) -> &str {
        self.target.as_deref().expect("resolved")
    }

    pub fn model(&self) -> &ModelConfig {
        self.model.as_ref().expect("resolved")
    }

    /// Identifies the experiment; output location and parallelism are left
    /// out since they cannot change results.
    pub fn digest(&self) -> Result<String, CliError> {
        let mut c = self.clone();
        c.output = PathBuf::new();
        c.jobs = 0;
        Ok(config_digest(&c)?)
    }

    /// Identifies what a checkpoint was trained from.
    pub fn training_digest(&self) -> Result<String, CliError> {
        #[derive(Serialize)]
        struct Training<'a> {
            data: &'a DataConfig,
            target: &'a Option<String>,
            train_stations: &'a [String],
            split: &'a SplitConfig,
            model: &'a Option<ModelConfig>,
            train: &'a TrainConfig,
            transform_train: TrainConfig,
        }
        Ok(config_digest(&Training {
            data: &self.data,
            target: &self.target,
            train_stations: &self.train_stations,
            split: &self.split,
            model: &self.model,
            train: &self.train,
            transform_train: self.phase2(),
        })?)
    }
}

fn overlay(base: toml::Value, top: &toml::Table) -> toml::Value {
    match base {
        toml::Value::Table(mut b) => {
            for (k, v) in top {
                let next = match (b.remove(k), v) {
                    (Some(old), toml::Value::Table(t)) => overlay(old, t),
                    (_, v) => v.clone(),
                };
                b.insert(k.clone(), next);
            }
            toml::Value::Table(b)
        }
        _ => toml::Value::Table(top.clone()),
    }
}
