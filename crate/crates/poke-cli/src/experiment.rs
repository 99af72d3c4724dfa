//! The experiment matrix: train joint and inverse models per training-set
//! size, run paired episodes against the blob baseline, and emit a CSV of
//! per-poke metrics plus summary curves and paired sign tests.
//!
//! Pairing: episode index i uses seed eval_seed + i, which fully determines
//! (init, goal); every model sees the same episodes, so per-episode
//! differences are attributable to the model alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use poke_core::blob::run_blob_episode;
use poke_core::metrics::{pose_error_degrees, relative_location_error};
use poke_core::model::{LossWeights, ModelParams};
use poke_core::planner::{run_episode, Episode, PlannerConfig, Selection};
use poke_core::rng::{stream, StreamKind};
use poke_core::sim::{generate_interactions, random_pose, Interaction, Pose};
use poke_core::train::{train_with_weights, BatchEvaluator, EpochStats, TrainConfig};

use crate::checkpoint;
use crate::config::GlobalConfig;

pub const CSV_SCHEMA: &str = "model,train_size,episode,seed,k,rel_loc_err,pose_err_deg,terminal_reason";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelTag {
    Joint,
    Inverse,
    Blob,
}

impl ModelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Joint => "joint",
            ModelTag::Inverse => "inverse",
            ModelTag::Blob => "blob",
        }
    }
}

/// Fully seeded episode start/goal pair.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeSetup {
    pub seed: u64,
    pub init: Pose,
    pub goal: Pose,
}

/// Draws the shared episode list: init free, goal redrawn until its center
/// is at least `min_goal_dist` away so the relative-error denominator is
/// well-conditioned.
pub fn episode_setups(cfg: &GlobalConfig) -> Result<Vec<EpisodeSetup>> {
    let mut out = Vec::with_capacity(cfg.eval.episodes);
    for i in 0..cfg.eval.episodes {
        let seed = cfg.eval.seed.wrapping_add(i as u64);
        let mut rng = stream(seed, StreamKind::Episode, 0);
        let init = random_pose(&cfg.arena, &mut rng);
        let mut goal = None;
        for _ in 0..10_000 {
            let g = random_pose(&cfg.arena, &mut rng);
            let dist = ((g.cx - init.cx).powi(2) + (g.cy - init.cy).powi(2)).sqrt();
            if dist >= cfg.eval.min_goal_dist {
                goal = Some(g);
                break;
            }
        }
        let goal = goal.ok_or_else(|| {
            anyhow!(
                "could not draw a goal {} px from the init; min_goal_dist too large for the arena",
                cfg.eval.min_goal_dist
            )
        })?;
        out.push(EpisodeSetup { seed, init, goal });
    }
    Ok(out)
}

fn checkpoint_name(tag: ModelTag, size: usize) -> String {
    format!("ckpt_{}_{}.pokm", tag.as_str(), size)
}

/// Trains (or loads) the model for one (tag, size) cell.
fn obtain_model(
    tag: ModelTag,
    size: usize,
    data: &[Interaction],
    cfg: &GlobalConfig,
    evaluator: &dyn BatchEvaluator,
    checkpoints: Option<&Path>,
    out_dir: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<ModelParams> {
    if let Some(dir) = checkpoints {
        let path = dir.join(checkpoint_name(tag, size));
        if !path.exists() {
            bail!("missing checkpoint {}", path.display());
        }
        let ckpt = checkpoint::load(&path)?;
        if ckpt.arena != cfg.arena {
            bail!(
                "checkpoint {} was trained under different arena parameters",
                path.display()
            );
        }
        if tag == ModelTag::Inverse && ckpt.lambda != 0.0 {
            bail!(
                "checkpoint {} claims to be inverse-only but has lambda {}",
                path.display(),
                ckpt.lambda
            );
        }
        progress(&format!("loaded {}", path.display()));
        return Ok(ckpt.params);
    }

    let lambda = match tag {
        ModelTag::Joint => cfg.train.lambda,
        ModelTag::Inverse => 0.0,
        ModelTag::Blob => unreachable!("blob has no parameters"),
    };
    let train_cfg = TrainConfig {
        lambda,
        ..cfg.train
    };
    progress(&format!(
        "training {} on {} samples ({} epochs)",
        tag.as_str(),
        size,
        train_cfg.epochs
    ));
    let weights = LossWeights::joint(lambda);
    let (params, _log) = train_with_weights(
        &data[..size],
        &cfg.arena,
        &train_cfg,
        weights,
        &evaluator,
        &mut |stats: &EpochStats| {
            progress(&format!(
                "  epoch {}: train {:.4} heldout {:.4} acc loc {:.3} angle {:.3} len {:.3}",
                stats.epoch,
                stats.train_loss,
                stats.heldout_loss,
                stats.heldout_loc_acc,
                stats.heldout_angle_acc,
                stats.heldout_len_acc
            ))
        },
    )
    .with_context(|| format!("training {} at size {}", tag.as_str(), size))?;
    let path = out_dir.join(checkpoint_name(tag, size));
    checkpoint::save(&path, &params, lambda, &cfg.arena, &cfg.render())?;
    progress(&format!("saved {}", path.display()));
    Ok(params)
}

fn push_rows(
    csv: &mut String,
    tag: ModelTag,
    size: usize,
    index: usize,
    setup: &EpisodeSetup,
    episode: &Episode,
    max_pokes: usize,
) -> Result<()> {
    for k in 0..=max_pokes {
        let pose = episode.pose_after(k);
        let rel = relative_location_error(&pose, &episode.goal, &episode.init)?;
        let pose_err = pose_error_degrees(&pose, &episode.goal);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{:.9},{:.9},{}",
            tag.as_str(),
            size,
            index,
            setup.seed,
            k,
            rel,
            pose_err,
            episode.terminal.as_str()
        );
    }
    Ok(())
}

/// Runs the full matrix and writes `episodes.csv` into `out_dir`. When
/// `checkpoints` is given, models are loaded from that directory instead of
/// trained inline; freshly trained models are checkpointed into `out_dir`.
pub fn run_experiment(
    cfg: &GlobalConfig,
    evaluator: &dyn BatchEvaluator,
    out_dir: &Path,
    checkpoints: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let setups = episode_setups(cfg)?;

    let max_size = *cfg.eval.sizes.iter().max().expect("validated non-empty");
    let data = if checkpoints.is_none() {
        progress(&format!(
            "generating {} training samples (seed {})",
            max_size, cfg.eval.data_seed
        ));
        generate_interactions(max_size, cfg.eval.data_seed, &cfg.arena)?
    } else {
        Vec::new()
    };

    let mut csv = String::new();
    for line in cfg.render().lines() {
        let _ = writeln!(csv, "# {line}");
    }
    let _ = writeln!(csv, "{CSV_SCHEMA}");

    for &size in &cfg.eval.sizes {
        if size > max_size || (checkpoints.is_none() && size > data.len()) {
            bail!("train size {size} exceeds the generated dataset");
        }
        for tag in [ModelTag::Joint, ModelTag::Inverse] {
            let params = obtain_model(
                tag, size, &data, cfg, evaluator, checkpoints, out_dir, progress,
            )?;
            let planner = PlannerConfig {
                max_pokes: cfg.max_pokes,
                selection: Selection::Argmax,
                seed: 0,
            };
            for (i, setup) in setups.iter().enumerate() {
                let planner = PlannerConfig {
                    seed: setup.seed,
                    ..planner
                };
                let episode = run_episode(&setup.init, &setup.goal, &params, &cfg.arena, &planner)?;
                push_rows(&mut csv, tag, size, i, setup, &episode, cfg.max_pokes)?;
            }
            progress(&format!(
                "ran {} episodes for {} at size {}",
                setups.len(),
                tag.as_str(),
                size
            ));
        }
        // The blob baseline is training-free; its rows repeat identically
        // for every size so each cell is complete on its own.
        for (i, setup) in setups.iter().enumerate() {
            let episode =
                run_blob_episode(&setup.init, &setup.goal, &cfg.arena, &cfg.blob, setup.seed)?;
            push_rows(&mut csv, ModelTag::Blob, size, i, setup, &episode, cfg.max_pokes)?;
        }
        progress(&format!("ran blob baseline at size {size}"));
    }

    let csv_path = out_dir.join("episodes.csv");
    std::fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    Ok(csv_path)
}

/// One parsed CSV row.
#[derive(Debug, Clone)]
struct Row {
    model: String,
    size: usize,
    episode: usize,
    k: usize,
    rel: f64,
    pose: f64,
}

/// Mean and standard error; stderr is absent with fewer than two samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanErr {
    pub mean: f64,
    pub stderr: Option<f64>,
}

fn mean_err(xs: &[f64]) -> MeanErr {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let stderr = if xs.len() >= 2 {
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        Some((var / n).sqrt())
    } else {
        None
    };
    MeanErr { mean, stderr }
}

/// Error curves for one (size, model) cell.
#[derive(Debug, Clone)]
pub struct CellCurve {
    pub episodes: usize,
    /// Indexed by k.
    pub rel: Vec<MeanErr>,
    pub pose: Vec<MeanErr>,
}

/// Paired sign-test comparison of relative location error at the headline k.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub size: usize,
    pub a: String,
    pub b: String,
    pub k: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    pub p_value: f64,
    pub mean_a: f64,
    pub mean_b: f64,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub headline_k: usize,
    pub cells: BTreeMap<(usize, String), CellCurve>,
    pub comparisons: Vec<Comparison>,
}

/// Exact two-sided binomial sign test at p = 1/2, ties excluded.
pub fn sign_test_p(wins_a: usize, wins_b: usize) -> f64 {
    let n = wins_a + wins_b;
    if n == 0 {
        return 1.0;
    }
    let k = wins_a.min(wins_b);
    // pmf(0) = 0.5^n, pmf(i+1) = pmf(i) * (n - i) / (i + 1).
    let mut pmf = 0.5f64.powi(n as i32);
    let mut tail = pmf;
    for i in 0..k {
        pmf *= (n - i) as f64 / (i + 1) as f64;
        tail += pmf;
    }
    (2.0 * tail).min(1.0)
}

fn parse_csv(text: &str) -> Result<Vec<Row>> {
    let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#'));
    let header = lines.next().ok_or_else(|| anyhow!("CSV is empty"))?;
    if header.trim() != CSV_SCHEMA {
        bail!("unexpected CSV header {header:?} (want {CSV_SCHEMA:?})");
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            bail!("line {}: expected 8 fields, got {}", lineno + 2, f.len());
        }
        let parse_err = |what: &str| anyhow!("line {}: bad {what} {f:?}", lineno + 2);
        rows.push(Row {
            model: f[0].to_string(),
            size: f[1].parse().map_err(|_| parse_err("train_size"))?,
            episode: f[2].parse().map_err(|_| parse_err("episode"))?,
            k: f[4].parse().map_err(|_| parse_err("k"))?,
            rel: f[5].parse().map_err(|_| parse_err("rel_loc_err"))?,
            pose: f[6].parse().map_err(|_| parse_err("pose_err_deg"))?,
        });
    }
    if rows.is_empty() {
        bail!("CSV has no data rows");
    }
    Ok(rows)
}

/// Builds mean/stderr curves per (size, model) and paired sign tests at
/// `headline_k` for every model pair present at each size.
pub fn summarize(csv_text: &str, headline_k: usize) -> Result<Summary> {
    let rows = parse_csv(csv_text)?;

    // (size, model) -> k -> values; episode -> value at headline_k.
    let mut by_cell: BTreeMap<(usize, String), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut by_cell_pose: BTreeMap<(usize, String), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut paired: BTreeMap<(usize, String), BTreeMap<usize, f64>> = BTreeMap::new();
    for row in &rows {
        let key = (row.size, row.model.clone());
        by_cell
            .entry(key.clone())
            .or_default()
            .entry(row.k)
            .or_default()
            .push(row.rel);
        by_cell_pose
            .entry(key.clone())
            .or_default()
            .entry(row.k)
            .or_default()
            .push(row.pose);
        if row.k == headline_k {
            paired.entry(key).or_default().insert(row.episode, row.rel);
        }
    }

    let mut cells = BTreeMap::new();
    for (key, by_k) in &by_cell {
        let max_k = *by_k.keys().max().expect("nonempty");
        let mut rel = Vec::with_capacity(max_k + 1);
        let mut pose = Vec::with_capacity(max_k + 1);
        let mut episodes = 0;
        for k in 0..=max_k {
            let rel_vals = by_k
                .get(&k)
                .ok_or_else(|| anyhow!("cell {key:?} is missing k={k} rows"))?;
            let pose_vals = &by_cell_pose[key][&k];
            episodes = rel_vals.len();
            rel.push(mean_err(rel_vals));
            pose.push(mean_err(pose_vals));
        }
        cells.insert(
            key.clone(),
            CellCurve {
                episodes,
                rel,
                pose,
            },
        );
    }

    let mut comparisons = Vec::new();
    let sizes: Vec<usize> = {
        let mut s: Vec<usize> = cells.keys().map(|(size, _)| *size).collect();
        s.dedup();
        s
    };
    for &size in &sizes {
        let models: Vec<String> = cells
            .keys()
            .filter(|(s, _)| *s == size)
            .map(|(_, m)| m.clone())
            .collect();
        for i in 0..models.len() {
            for j in i + 1..models.len() {
                let (a, b) = (&models[i], &models[j]);
                // Cells have headline-k rows unless the caller asked for a k
                // beyond the recorded range; skip the comparison then.
                let (Some(pa), Some(pb)) = (
                    paired.get(&(size, a.clone())),
                    paired.get(&(size, b.clone())),
                ) else {
                    continue;
                };
                let mut wins_a = 0;
                let mut wins_b = 0;
                let mut ties = 0;
                let mut sum_a = 0.0;
                let mut sum_b = 0.0;
                let mut n = 0usize;
                for (ep, va) in pa {
                    let Some(vb) = pb.get(ep) else { continue };
                    n += 1;
                    sum_a += *va;
                    sum_b += *vb;
                    if va < vb {
                        wins_a += 1;
                    } else if vb < va {
                        wins_b += 1;
                    } else {
                        ties += 1;
                    }
                }
                if n == 0 {
                    continue;
                }
                comparisons.push(Comparison {
                    size,
                    a: a.clone(),
                    b: b.clone(),
                    k: headline_k,
                    wins_a,
                    wins_b,
                    ties,
                    p_value: sign_test_p(wins_a, wins_b),
                    mean_a: sum_a / n as f64,
                    mean_b: sum_b / n as f64,
                });
            }
        }
    }

    Ok(Summary {
        headline_k,
        cells,
        comparisons,
    })
}

impl Summary {
    pub fn cell(&self, size: usize, model: &str) -> Option<&CellCurve> {
        self.cells.get(&(size, model.to_string()))
    }

    pub fn comparison(&self, size: usize, a: &str, b: &str) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.size == size && ((c.a == a && c.b == b) || (c.a == b && c.b == a)))
    }

    /// Gnu-plottable TSV per cell: k, mean and stderr of both errors.
    /// Returns the written paths.
    pub fn write_curves(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let fmt = |m: &MeanErr| {
            let e = m
                .stderr
                .map(|e| format!("{e:.9}"))
                .unwrap_or_else(|| "-".to_string());
            format!("{:.9}\t{e}", m.mean)
        };
        let mut paths = Vec::new();
        for ((size, model), curve) in &self.cells {
            let path = dir.join(format!("curve_{model}_{size}.tsv"));
            let mut text = String::from("k\trel_mean\trel_stderr\tpose_mean\tpose_stderr\n");
            for (k, (rel, pose)) in curve.rel.iter().zip(&curve.pose).enumerate() {
                let _ = writeln!(text, "{k}\t{}\t{}", fmt(rel), fmt(pose));
            }
            std::fs::write(&path, text)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Aligned text table: one line per cell at the headline k, then the
    /// paired comparisons.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let k = self.headline_k;
        let _ = writeln!(
            out,
            "{:>10} {:>8} {:>10} {:>22} {:>22}",
            "train_size", "model", "episodes", "rel_loc_err@k", "pose_err_deg@k"
        );
        let fmt = |m: &MeanErr| match m.stderr {
            Some(e) => format!("{:.4} +/- {:.4}", m.mean, e),
            None => format!("{:.4}", m.mean),
        };
        for ((size, model), curve) in &self.cells {
            let rel = curve.rel.get(k).unwrap_or_else(|| curve.rel.last().unwrap());
            let pose = curve
                .pose
                .get(k)
                .unwrap_or_else(|| curve.pose.last().unwrap());
            let _ = writeln!(
                out,
                "{size:>10} {model:>8} {:>10} {:>22} {:>22}",
                curve.episodes,
                fmt(rel),
                fmt(pose)
            );
        }
        let _ = writeln!(out, "\npaired sign tests on rel_loc_err at k = {k}:");
        for c in &self.comparisons {
            let _ = writeln!(
                out,
                "  size {:>7}: {} {:.4} vs {} {:.4} | wins {}:{} ties {} | p = {:.5}",
                c.size, c.a, c.mean_a, c.b, c.mean_b, c.wins_a, c.wins_b, c.ties, c.p_value
            );
        }
        out
    }
}
