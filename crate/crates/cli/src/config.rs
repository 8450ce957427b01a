//! `key = value` run configuration.

use std::path::{Path, PathBuf};

use kspace_rl_core::dqn::TrainConfig;
use kspace_rl_core::env::EpisodeConfig;
use kspace_rl_core::transformer::PTConfig;

use crate::error::CliError;

/// Every key a config file may contain, with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "(required) KSP1 training data"),
    (
        "eval_data",
        "(optional) KSP1 held-out data; default: tail of `data`",
    ),
    ("eval_slices", "50"),
    ("out_dir", "run"),
    ("frequencies", "64"),
    ("phases", "64"),
    ("preselect", "6"),
    ("selections", "10"),
    ("patch_rows", "8"),
    ("patch_cols", "8"),
    ("embed_dim", "64"),
    ("hidden_dim", "128"),
    ("layers", "2"),
    ("heads", "4"),
    ("phase_token", "true"),
    ("init_seed", "0"),
    ("seed", "0"),
    ("episodes", "2000"),
    ("batch_size", "16"),
    ("learning_rate", "3e-4"),
    ("gamma", "0.5"),
    ("epsilon_start", "1.0"),
    ("epsilon_end", "0.05"),
    ("epsilon_decay", "0.3"),
    ("target_sync", "250"),
    ("warmup", "200"),
    ("buffer_capacity", "10000"),
    ("grad_clip", "10"),
    ("eval_every", "100"),
    ("record_timing", "false"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub eval_data: Option<PathBuf>,
    pub eval_slices: usize,
    pub out_dir: PathBuf,
    pub episode: EpisodeConfig,
    pub network: PTConfig,
    pub init_seed: u64,
    pub train: TrainConfig,
}

struct Values(Vec<(String, String)>);

impl Values {
    fn given(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn raw(&self, key: &str) -> &str {
        self.given(key)
            .unwrap_or_else(|| KEYS.iter().find(|(k, _)| *k == key).expect("known key").1)
    }

    fn num<V: std::str::FromStr>(&self, key: &str) -> Result<V, CliError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| CliError::Config(format!("{}: cannot parse {:?}", key, raw)))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
        let cfg = Self::parse(&text)?;
        // relative paths resolve against the config file
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &Path| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.to_path_buf()
            }
        };
        Ok(Self {
            data: rebase(&cfg.data),
            eval_data: cfg.eval_data.as_deref().map(rebase),
            out_dir: rebase(&cfg.out_dir),
            ..cfg
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values: Vec<(String, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            let key = key.trim();
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(CliError::Config(format!(
                    "line {}: unknown key `{}`",
                    n + 1,
                    key
                )));
            }
            if values.iter().any(|(k, _)| k == key) {
                return Err(CliError::Config(format!(
                    "line {}: duplicate key `{}`",
                    n + 1,
                    key
                )));
            }
            values.push((key.to_string(), value.trim().to_string()));
        }
        let values = Values(values);
        let data = values
            .given("data")
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Config("data: required".into()))?;
        let eval_data = values.given("eval_data").map(PathBuf::from);

        let episode = EpisodeConfig::new(
            values.num("frequencies")?,
            values.num("phases")?,
            values.num("preselect")?,
            values.num("selections")?,
        );
        let network = PTConfig {
            image_rows: episode.frequencies,
            image_cols: episode.phases,
            patch_rows: values.num("patch_rows")?,
            patch_cols: values.num("patch_cols")?,
            embed_dim: values.num("embed_dim")?,
            hidden_dim: values.num("hidden_dim")?,
            layers: values.num("layers")?,
            heads: values.num("heads")?,
            preselect: episode.preselect,
            phase_token: values.num("phase_token")?,
        };
        let train = TrainConfig {
            gamma: values.num("gamma")?,
            learning_rate: values.num("learning_rate")?,
            episodes: values.num("episodes")?,
            batch_size: values.num("batch_size")?,
            epsilon_start: values.num("epsilon_start")?,
            epsilon_end: values.num("epsilon_end")?,
            epsilon_decay: values.num("epsilon_decay")?,
            target_sync: values.num("target_sync")?,
            warmup: values.num("warmup")?,
            buffer_capacity: values.num("buffer_capacity")?,
            grad_clip: values.num("grad_clip")?,
            seed: values.num("seed")?,
            eval_every: values.num("eval_every")?,
            record_timing: values.num("record_timing")?,
            first_episode: 0,
        };
        let cfg = Self {
            data,
            eval_data,
            eval_slices: values.num("eval_slices")?,
            out_dir: PathBuf::from(values.raw("out_dir")),
            episode,
            network,
            init_seed: values.num("init_seed")?,
            train,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        fn tag(section: &'static str) -> impl Fn(kspace_rl_core::Error) -> CliError {
            move |e| CliError::Config(format!("{}: {}", section, e))
        }
        self.episode.validate().map_err(tag("episode"))?;
        self.network.validate().map_err(tag("network"))?;
        self.train.validate().map_err(tag("training"))?;
        if self.eval_data.is_none() && self.eval_slices == 0 && self.train.eval_every > 0 {
            return Err(CliError::Config(
                "eval_every: evaluation requested but eval_slices = 0 and no eval_data".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = RunConfig::parse("data = d.ksp\n").unwrap();
        assert_eq!(cfg.episode, EpisodeConfig::desk());
        assert_eq!(cfg.network, PTConfig::desk());
        assert_eq!(
            cfg.train,
            TrainConfig {
                episodes: 2000,
                ..TrainConfig::desk()
            }
        );
    }

    #[test]
    fn comments_and_spacing() {
        let cfg = RunConfig::parse(
            "# run\n data=a.ksp  # inline\n\nepisodes =  7\nphase_token = false\n",
        )
        .unwrap();
        assert_eq!(cfg.data, PathBuf::from("a.ksp"));
        assert_eq!(cfg.train.episodes, 7);
        assert!(!cfg.network.phase_token);
    }

    #[test]
    fn rejections_name_the_field() {
        let err = |text: &str| match RunConfig::parse(text) {
            Err(CliError::Config(m)) => m,
            other => panic!("expected config error, got {:?}", other),
        };
        assert!(err("data = a\nbogus = 1\n").contains("bogus"));
        assert!(err("data = a\ngamma = x\n").contains("gamma"));
        assert!(err("episodes = 3\n").contains("data"));
        assert!(err("data = a\ndata = b\n").contains("duplicate"));
        assert!(err("data = a\npatch_rows = 7\n").contains("network"));
        assert!(err("data = a\npreselect = 60\n").contains("episode"));
        assert!(err("data = a\ngamma = 2\n").contains("gamma"));
        assert!(err("data = a\nno equals sign\n").contains("line 2"));
    }
}
