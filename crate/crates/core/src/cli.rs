//! The `generate`, `train`, `eval` and `export` commands behind the binary.

use crate::config::{model_from_checkpoint, Config, Metric};
use crate::data::{load_checkpoint, load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::optim::{train, TrainOutput};
use crate::rollout::{
    channel_rmse, free_simulate, regular_grid, save_grid_csv, tip_error, transition_grid, write_quantiles_csv,
    InitialState,
};
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "gpssm", version, about = "Gaussian-process state-space model identification")]
#[command(after_help = "Any configuration key can be overridden with --<dotted.key>=<value>.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset from the configured generator.
    Generate { config: PathBuf },
    /// Fit a model and write checkpoints and per-step metrics.
    Train {
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Free-simulate held-out episodes and score the predictions.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out dataset; overrides `data.test`.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Tabulate the learned transition function on a grid.
    Export {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

const OWN_FLAGS: &[&str] = &["--resume", "--checkpoint", "--test", "--help", "--version"];

/// Separate `--dotted.key=value` (or `--dotted.key value`) overrides from
/// the arguments the command parser understands.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let name = body.split('=').next().unwrap_or(body);
        if body.is_empty() || OWN_FLAGS.contains(&format!("--{name}").as_str()) {
            rest.push(arg);
            continue;
        }
        match body.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::config(body, "override is missing a value"))?;
                overrides.push((body.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

#[derive(Debug)]
pub enum ParseError {
    Override(Error),
    Args(clap::Error),
}

/// Parse the full argument list, including the program name.
pub fn parse(args: impl IntoIterator<Item = String>) -> Result<(Cli, Vec<(String, String)>), ParseError> {
    let (rest, overrides) = split_overrides(args).map_err(ParseError::Override)?;
    let cli = Cli::try_parse_from(rest).map_err(ParseError::Args)?;
    Ok((cli, overrides))
}

/// Run one command; returns the run directory.
pub fn run(cli: &Cli, overrides: &[(String, String)]) -> Result<PathBuf> {
    match &cli.command {
        Command::Generate { config } => Ok(cmd_generate(&Config::load(config, overrides)?)?.dir),
        Command::Train { config, resume } => Ok(cmd_train(&Config::load(config, overrides)?, resume.as_deref())?.dir),
        Command::Eval {
            config,
            checkpoint,
            test,
        } => {
            let mut cfg = Config::load(config, overrides)?;
            if test.is_some() {
                cfg.data.test = test.clone();
            }
            Ok(cmd_eval(&cfg, checkpoint)?.dir)
        }
        Command::Export { config, checkpoint } => Ok(cmd_export(&Config::load(config, overrides)?, checkpoint)?.dir),
    }
}

#[derive(Clone, Debug)]
pub struct GenerateOutput {
    pub dir: PathBuf,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
}

pub fn cmd_generate(cfg: &Config) -> Result<GenerateOutput> {
    let gen = cfg
        .data
        .generator
        .as_ref()
        .ok_or_else(|| Error::config("data.generator", "no generator configured"))?;
    let (train, test) = gen.generate()?;
    let dir = cfg.create_run_dir()?;
    let train_path = dir.join("train.jsonl");
    save_dataset(&train, &train_path)?;
    let test_path = match test {
        Some(t) => {
            let p = dir.join("test.jsonl");
            save_dataset(&t, &p)?;
            Some(p)
        }
        None => None,
    };
    log::info!("wrote {} episodes to {}", train.len(), train_path.display());
    Ok(GenerateOutput {
        dir,
        train: train_path,
        test: test_path,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    #[serde(skip)]
    pub dir: PathBuf,
    pub final_checkpoint: Option<PathBuf>,
    pub steps: u64,
    pub final_elbo: Option<f64>,
}

fn training_data(cfg: &Config) -> Result<(Dataset, Option<Dataset>)> {
    match (&cfg.data.train, &cfg.data.generator) {
        (Some(p), _) => Ok((load_dataset(p)?, None)),
        (None, Some(g)) => g.generate(),
        (None, None) => Err(Error::config("data.train", "set a dataset path or data.generator")),
    }
}

pub fn cmd_train(cfg: &Config, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.check_files(true, false)?;
    let resume_cp = resume.map(load_checkpoint).transpose()?;
    let (ds, _) = training_data(cfg)?;
    let mut model = match &resume_cp {
        Some(cp) => {
            let (stored, model) = model_from_checkpoint(cp)?;
            if stored.model != cfg.model || stored.recognition != cfg.recognition {
                return Err(Error::config(
                    "model",
                    "differs from the model section stored in the checkpoint being resumed",
                ));
            }
            model
        }
        None => cfg.build_model(&ds)?,
    };
    let dir = cfg.create_run_dir()?;
    if cfg.data.train.is_none() {
        save_dataset(&ds, &dir.join("train.jsonl"))?;
    }
    let out = TrainOutput {
        dir: Some(dir.clone()),
        config: cfg.echo(ds.obs_dim, ds.action_dim),
    };
    let report = train(&mut model, &ds, &cfg.train_options(), &out, resume_cp.as_ref())?;
    let summary = TrainSummary {
        dir: dir.clone(),
        final_checkpoint: report.final_checkpoint,
        steps: report.checkpoint.step,
        final_elbo: report.metrics.last().map(|m| m.elbo.total),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeScore {
    pub episode: usize,
    /// Tip error, or the mean of the per-channel RMSEs.
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel_rmse: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    #[serde(skip)]
    pub dir: PathBuf,
    pub metric: Metric,
    pub checkpoint: PathBuf,
    pub mean: f64,
    pub episodes: Vec<EpisodeScore>,
}

fn test_data(cfg: &Config) -> Result<Dataset> {
    match (&cfg.data.test, &cfg.data.generator) {
        (Some(p), _) => load_dataset(p),
        (None, Some(g)) => g
            .generate()?
            .1
            .ok_or_else(|| Error::config("data.generator.test_episodes", "no held-out episodes requested")),
        (None, None) => Err(Error::config("data.test", "set a held-out dataset path")),
    }
}

pub fn cmd_eval(cfg: &Config, checkpoint: &Path) -> Result<EvalSummary> {
    cfg.check_files(false, true)?;
    let cp = load_checkpoint(checkpoint)?;
    let (_, model) = model_from_checkpoint(&cp)?;
    let ds = test_data(cfg)?;
    for ep in &ds.episodes {
        model.check_episode(ep)?;
    }
    let ev = &cfg.eval;
    if ev.metric == Metric::Tip && (ev.position_channel >= ds.obs_dim || ev.angle_channel >= ds.obs_dim) {
        return Err(Error::config(
            "eval.angle_channel",
            format!(
                "tip error needs position channel {} and angle channel {}, data has {} channels",
                ev.position_channel, ev.angle_channel, ds.obs_dim
            ),
        ));
    }
    let dir = cfg.create_run_dir()?;
    let opts = cfg.rollout.options();
    let mut episodes = Vec::new();
    for (i, ep) in ds.episodes.iter().enumerate() {
        let init = InitialState::Prefix(ep.prefix(cfg.rollout.prefix.min(ep.len())));
        let h = cfg.rollout.horizon.unwrap_or(ep.len()).min(ep.len());
        let actions = ep.a.rows(0, h).into_owned();
        let truth = ep.y.rows(0, h).into_owned();
        let res = free_simulate(&model, &init, &actions, &opts)?;
        let score = match ev.metric {
            Metric::Tip => EpisodeScore {
                episode: i,
                score: tip_error(
                    &res.observations,
                    &truth,
                    ev.position_channel,
                    ev.angle_channel,
                    ev.pole_length,
                )?,
                channel_rmse: None,
            },
            Metric::Rmse => {
                let per = channel_rmse(&res.mean_observation(), &truth)?;
                EpisodeScore {
                    episode: i,
                    score: per.iter().sum::<f64>() / per.len() as f64,
                    channel_rmse: Some(per),
                }
            }
        };
        episodes.push(score);
        if ev.write_rollouts {
            let path = dir.join(format!("rollout-{i:03}.csv"));
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
            write_quantiles_csv(&res, &mut f)
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
    }
    let mean = episodes.iter().map(|e| e.score).sum::<f64>() / episodes.len() as f64;
    let summary = EvalSummary {
        dir: dir.clone(),
        metric: ev.metric,
        checkpoint: checkpoint.to_path_buf(),
        mean,
        episodes,
    };
    write_json(&dir.join("eval.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct ExportOutput {
    pub dir: PathBuf,
    pub csv: PathBuf,
}

pub fn cmd_export(cfg: &Config, checkpoint: &Path) -> Result<ExportOutput> {
    let cp = load_checkpoint(checkpoint)?;
    let (_, mut model) = model_from_checkpoint(&cp)?;
    if cfg.export.prior_reset {
        model.gp.reset_to_prior()?;
    }
    let z = model.gp.inducing_inputs();
    let n_in = z.ncols();
    let bounds: Vec<(f64, f64)> = match &cfg.export.bounds {
        Some(b) if b.len() != n_in => {
            return Err(Error::config(
                "export.bounds",
                format!("expected {n_in} ranges, one per transition input"),
            ))
        }
        Some(b) => b.iter().map(|&[lo, hi]| (lo, hi)).collect(),
        None => z
            .column_iter()
            .map(|c| (c.min(), c.max()))
            .collect(),
    };
    let points = match cfg.export.points.len() {
        1 => vec![cfg.export.points[0]; n_in],
        n if n == n_in => cfg.export.points.clone(),
        _ => {
            return Err(Error::config(
                "export.points",
                format!("give one count or {n_in} counts"),
            ))
        }
    };
    let grid = regular_grid(&bounds, &points)?;
    let rows = transition_grid(&model, &grid)?;
    let dir = cfg.create_run_dir()?;
    let csv = dir.join("transition_grid.csv");
    save_grid_csv(&rows, &csv)?;
    Ok(ExportOutput { dir, csv })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_are_split_from_own_flags() {
        let (rest, ov) =
            split_overrides(args("gpssm eval c.toml --checkpoint ck.bin --training.steps=5 --model.state_dim 2")).unwrap();
        assert_eq!(rest, args("gpssm eval c.toml --checkpoint ck.bin"));
        assert_eq!(
            ov,
            vec![
                ("training.steps".to_string(), "5".to_string()),
                ("model.state_dim".to_string(), "2".to_string())
            ]
        );
        assert!(split_overrides(args("gpssm train c.toml --model.state_dim")).is_err());
    }

    #[test]
    fn parses_subcommands() {
        let (cli, ov) = parse(args("gpssm train c.toml --resume a.bin --output_dir=/tmp/r")).unwrap();
        assert!(matches!(cli.command, Command::Train { resume: Some(_), .. }));
        assert_eq!(ov, vec![("output_dir".to_string(), "/tmp/r".to_string())]);
        assert!(parse(args("gpssm frobnicate c.toml")).is_err());
    }
}
