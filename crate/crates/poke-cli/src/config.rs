//! Plain-text `key = value` configuration with defaults, file loading, and
//! the effective-config rendering that every command echoes to stderr and
//! embeds in its output files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use poke_core::blob::BlobConfig;
use poke_core::sim::ArenaParams;
use poke_core::train::TrainConfig;

/// Environment variable consulted for a config path when --config is absent.
pub const CONFIG_ENV: &str = "POKE_CONFIG";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Training-set sizes of the experiment matrix.
    pub sizes: Vec<usize>,
    /// Paired episodes per (size, model) cell.
    pub episodes: usize,
    pub seed: u64,
    /// Dataset generation seed for inline training.
    pub data_seed: u64,
    /// Minimum init-to-goal center distance; keeps the relative error
    /// denominator well away from zero.
    pub min_goal_dist: f64,
    /// Poke count at which headline comparisons are made.
    pub headline_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sizes: vec![10_000, 20_000, 100_000],
            episodes: 200,
            seed: 1,
            data_seed: 42,
            min_goal_dist: 24.0,
            headline_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalConfig {
    pub arena: ArenaParams,
    pub train: TrainConfig,
    /// Poke budget shared by the model planner and the blob baseline.
    pub max_pokes: usize,
    pub blob: BlobConfig,
    pub eval: EvalConfig,
    /// Worker threads for gradient evaluation (1 = serial).
    pub jobs: usize,
    pub out_dir: PathBuf,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        let max_pokes = 10;
        GlobalConfig {
            arena: ArenaParams::default(),
            train: TrainConfig::default(),
            max_pokes,
            blob: BlobConfig {
                max_pokes,
                ..BlobConfig::default()
            },
            eval: EvalConfig::default(),
            jobs: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl GlobalConfig {
    /// Loads from `path`, falling back to the `POKE_CONFIG` env var, then to
    /// pure defaults. Returns the config and a note about its source.
    pub fn load(path: Option<&Path>) -> Result<(Self, String)> {
        let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let chosen = path.map(Path::to_path_buf).or(env_path);
        match chosen {
            Some(p) => {
                let text = std::fs::read_to_string(&p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let cfg = Self::parse(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                Ok((cfg, format!("config file {}", p.display())))
            }
            None => Ok((Self::default(), "built-in defaults".into())),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown and repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {raw:?}", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                bail!("line {}: repeated key {key:?}", lineno + 1);
            }
            cfg.apply(key, value)
                .with_context(|| format!("line {}: key {key:?}", lineno + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(value: &str) -> Result<T>
        where
            T::Err: std::error::Error + Send + Sync + 'static,
        {
            value.parse().with_context(|| format!("bad value {value:?}"))
        }
        match key {
            "arena_size" => self.arena.arena_size = num(value)?,
            "rect_w" => self.arena.rect_w = num(value)?,
            "rect_h" => self.arena.rect_h = num(value)?,
            "k_t" => self.arena.k_t = num(value)?,
            "k_r" => self.arena.k_r = num(value)?,
            "wall_margin" => self.arena.wall_margin = num(value)?,
            "noise_std" => self.arena.noise_std = num(value)?,
            "poke_len_min" => self.arena.poke_len_range.0 = num(value)?,
            "poke_len_max" => self.arena.poke_len_range.1 = num(value)?,
            "lambda" => self.train.lambda = num(value)?,
            "batch_size" => self.train.batch_size = num(value)?,
            "epochs" => self.train.epochs = num(value)?,
            "learning_rate" => self.train.learning_rate = num(value)?,
            "train_seed" => self.train.seed = num(value)?,
            "max_pokes" => {
                self.max_pokes = num(value)?;
                self.blob.max_pokes = self.max_pokes;
            }
            "blob_stop_threshold" => self.blob.stop_threshold = num(value)?,
            "blob_len_gain" => self.blob.len_gain = num(value)?,
            "eval_sizes" => {
                let sizes: Result<Vec<usize>> =
                    value.split(',').map(|s| num::<usize>(s.trim())).collect();
                self.eval.sizes = sizes?;
                if self.eval.sizes.is_empty() {
                    bail!("eval_sizes must name at least one size");
                }
            }
            "eval_episodes" => self.eval.episodes = num(value)?,
            "eval_seed" => self.eval.seed = num(value)?,
            "data_seed" => self.eval.data_seed = num(value)?,
            "min_goal_dist" => self.eval.min_goal_dist = num(value)?,
            "headline_k" => self.eval.headline_k = num(value)?,
            "jobs" => self.jobs = num(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => bail!("unknown key {key:?}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.arena.validate()?;
        self.train.validate()?;
        self.blob.validate()?;
        if self.max_pokes == 0 {
            bail!("max_pokes must be at least 1");
        }
        if self.eval.episodes == 0 || self.eval.sizes.is_empty() {
            bail!("eval needs at least one episode and one size");
        }
        if self.eval.headline_k > self.max_pokes {
            bail!(
                "headline_k {} exceeds max_pokes {}",
                self.eval.headline_k,
                self.max_pokes
            );
        }
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        if !(self.eval.min_goal_dist > 0.0) {
            bail!("min_goal_dist must be positive");
        }
        Ok(())
    }

    /// Every key with its effective value, parseable by [`Self::parse`].
    pub fn render(&self) -> String {
        let mut s = String::new();
        let sizes = self
            .eval
            .sizes
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "arena_size = {}", self.arena.arena_size);
        let _ = writeln!(s, "rect_w = {}", self.arena.rect_w);
        let _ = writeln!(s, "rect_h = {}", self.arena.rect_h);
        let _ = writeln!(s, "k_t = {}", self.arena.k_t);
        let _ = writeln!(s, "k_r = {}", self.arena.k_r);
        let _ = writeln!(s, "wall_margin = {}", self.arena.wall_margin);
        let _ = writeln!(s, "noise_std = {}", self.arena.noise_std);
        let _ = writeln!(s, "poke_len_min = {}", self.arena.poke_len_range.0);
        let _ = writeln!(s, "poke_len_max = {}", self.arena.poke_len_range.1);
        let _ = writeln!(s, "lambda = {}", self.train.lambda);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "learning_rate = {}", self.train.learning_rate);
        let _ = writeln!(s, "train_seed = {}", self.train.seed);
        let _ = writeln!(s, "max_pokes = {}", self.max_pokes);
        let _ = writeln!(s, "blob_stop_threshold = {}", self.blob.stop_threshold);
        let _ = writeln!(s, "blob_len_gain = {}", self.blob.len_gain);
        let _ = writeln!(s, "eval_sizes = {sizes}");
        let _ = writeln!(s, "eval_episodes = {}", self.eval.episodes);
        let _ = writeln!(s, "eval_seed = {}", self.eval.seed);
        let _ = writeln!(s, "data_seed = {}", self.eval.data_seed);
        let _ = writeln!(s, "min_goal_dist = {}", self.eval.min_goal_dist);
        let _ = writeln!(s, "headline_k = {}", self.eval.headline_k);
        let _ = writeln!(s, "jobs = {}", self.jobs);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }
}
