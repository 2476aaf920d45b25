//! Gradients, Adam, and the training loop.

use crate::autodiff::{Graph, Var};
use crate::data::{save_checkpoint, Checkpoint, Dataset, Episode, RngState};
use crate::elbo::{draw_noise, record_elbo, ElboBreakdown};
use crate::error::{Error, Result};
use crate::model::Gpssm;
use crate::params::{bind, collect_gradients, ParamSet, Parameterized};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Value and gradient of the scalar recorded by `f` with respect to every
/// parameter of `model`. Non-finite entries are reported by parameter name.
pub fn gradient<M: Parameterized>(
    model: &M,
    f: impl FnOnce(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<(f64, ParamSet)> {
    let like = ParamSet::from_model(model);
    let mut g = Graph::new();
    let leaves = bind(model, &mut g);
    let root = f(&mut g, &leaves)?;
    let value = g.scalar_value(root);
    let grads = collect_gradients(&like, &leaves, &g.backward(root));
    if let Some((name, _)) = grads.iter().find(|(_, m)| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    Ok((value, grads))
}

/// ELBO breakdown and its gradient for the given noise.
pub fn elbo_gradient(
    model: &Gpssm,
    batch: &[&Episode],
    noise: &[Vec<nalgebra::DMatrix<f64>>],
    total_episodes: usize,
) -> Result<(ElboBreakdown, ParamSet)> {
    let mut parts = None;
    let (_, grads) = gradient(model, |g, vars| {
        let rec = record_elbo(model, g, vars, batch, noise, total_episodes)?;
        parts = Some(rec.breakdown(g));
        Ok(rec.total)
    })?;
    Ok((parts.expect("recorded"), grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first: ParamSet,
    pub second: ParamSet,
}

impl AdamState {
    pub fn new(like: &ParamSet, lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: like.zeros_like(),
            second: like.zeros_like(),
        }
    }

    /// One bias-corrected Adam update descending along `grads`. Parameters
    /// for which `frozen` holds are left alone.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, frozen: &dyn Fn(&str) -> bool) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Dimension("optimiser state does not match the parameters".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let iter = params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.first.iter_mut().zip(self.second.iter_mut()));
        for (((name, p), (gname, g)), ((_, m), (_, v))) in iter {
            if name != gname || p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::Dimension(format!("gradient for `{gname}` does not match `{name}`")));
            }
            if frozen(name) {
                continue;
            }
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescale `grads` so that their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let n = grads.norm();
    if n > max_norm {
        let s = max_norm / n;
        for (_, m) in grads.iter_mut() {
            *m *= s;
        }
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub num_samples: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Clip the gradient to this global norm before each update.
    pub clip_grad_norm: Option<f64>,
    /// Parameters whose names start with one of these are not updated.
    pub freeze: Vec<String>,
    pub log_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            num_samples: 1,
            seed: 0,
            checkpoint_every: 0,
            clip_grad_norm: None,
            freeze: Vec::new(),
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    #[serde(flatten)]
    pub elbo: ElboBreakdown,
    pub grad_norm: f64,
    pub wall_time: f64,
}

impl MetricRecord {
    /// Equality ignoring `wall_time`.
    pub fn same_run_values(&self, other: &Self) -> bool {
        self.step == other.step
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
            && serde_json::to_value(self.elbo).ok() == serde_json::to_value(other.elbo).ok()
    }
}

/// Where training writes its artefacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    /// Checkpoints and `metrics.jsonl` go here; nothing is written if unset.
    pub dir: Option<PathBuf>,
    /// Stored verbatim in every checkpoint.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<MetricRecord>,
    pub final_checkpoint: Option<PathBuf>,
    /// State at the end of training, ready for resuming.
    pub checkpoint: Checkpoint,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:08}.bin"))
}

fn snapshot(params: &ParamSet, adam: &AdamState, rng: &ChaCha8Rng, step: u64, config: &serde_json::Value) -> Checkpoint {
    Checkpoint {
        step,
        params: params.clone(),
        config: config.clone(),
        rng: Some(RngState::capture(rng)),
        adam: Some(adam.clone()),
    }
}

/// Maximise the ELBO of `ds` by Adam on random mini-batches. With `resume`,
/// parameters, optimiser and RNG continue from the checkpoint, so the
/// remaining steps match an uninterrupted run exactly.
pub fn train(
    model: &mut Gpssm,
    ds: &Dataset,
    opts: &TrainOptions,
    out: &TrainOutput,
    resume: Option<&Checkpoint>,
) -> Result<TrainReport> {
    if ds.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    if opts.batch_size == 0 || opts.num_samples == 0 {
        return Err(Error::config("training", "batch_size and num_samples must be ≥ 1"));
    }
    for ep in &ds.episodes {
        model.check_episode(ep)?;
    }
    let (mut params, mut adam, mut rng, start) = match resume {
        Some(cp) => {
            cp.params.apply_to(model)?;
            let adam = cp
                .adam
                .clone()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimiser state".into()))?;
            let rng = cp
                .rng
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no RNG state".into()))?
                .restore()?;
            (cp.params.clone(), adam, rng, cp.step)
        }
        None => {
            let params = ParamSet::from_model(model);
            let adam = AdamState::new(&params, opts.learning_rate);
            (params, adam, ChaCha8Rng::seed_from_u64(opts.seed), 0)
        }
    };
    let frozen = |name: &str| opts.freeze.iter().any(|p| name.starts_with(p.as_str()));

    let mut metrics_file = match &out.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(f)))
        }
        None => None,
    };
    let mut last_checkpoint: Option<PathBuf> = None;
    let save = |params: &ParamSet, adam: &AdamState, rng: &ChaCha8Rng, step: u64| -> Result<Option<PathBuf>> {
        match &out.dir {
            Some(dir) => {
                let p = checkpoint_path(dir, step);
                save_checkpoint(&snapshot(params, adam, rng, step, &out.config), &p)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    };
    if start == 0 {
        last_checkpoint = save(&params, &adam, &rng, 0)?;
    }

    let n = ds.len();
    let b = opts.batch_size.min(n);
    let clock = Instant::now();
    let mut metrics = Vec::new();
    for step in start + 1..=opts.steps {
        let batch: Vec<&Episode> = if b == n {
            ds.episodes.iter().collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, n, b).into_vec();
            idx.sort_unstable();
            idx.iter().map(|&i| &ds.episodes[i]).collect()
        };
        let noise = draw_noise(&batch, model.state_dim(), opts.num_samples, &mut rng);
        let (parts, mut grads) = match elbo_gradient(model, &batch, &noise, n) {
            Ok(r) => r,
            Err(Error::NonFiniteGradient(name)) => {
                log::error!("non-finite gradient for `{name}` at step {step}");
                return Err(Error::NonFiniteGradient(name));
            }
            Err(e) => return Err(e),
        };
        if !parts.total.is_finite() {
            return Err(Error::NonFiniteElbo {
                step,
                last_checkpoint,
            });
        }
        for (_, m) in grads.iter_mut() {
            m.neg_mut();
        }
        let grad_norm = match opts.clip_grad_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => grads.norm(),
        };
        adam.step(&mut params, &grads, &frozen)?;
        params.apply_to(model)?;

        let rec = MetricRecord {
            step,
            elbo: parts,
            grad_norm,
            wall_time: clock.elapsed().as_secs_f64(),
        };
        if let Some((path, w)) = metrics_file.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Numerical(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if opts.log_every > 0 && step % opts.log_every == 0 {
            log::info!("step {step}: elbo {:.4} (grad norm {:.3e})", parts.total, grad_norm);
        }
        metrics.push(rec);
        let at_end = step == opts.steps;
        if at_end || (opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0) {
            if let Some((path, w)) = metrics_file.as_mut() {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            last_checkpoint = save(&params, &adam, &rng, step)?.or(last_checkpoint);
        }
    }
    if let Some((path, mut w)) = metrics_file {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let end = opts.steps.max(start);
    Ok(TrainReport {
        metrics,
        final_checkpoint: last_checkpoint,
        checkpoint: snapshot(&params, &adam, &rng, end, &out.config),
    })
}

/// Read a metrics file written by [`train`].
pub fn load_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
