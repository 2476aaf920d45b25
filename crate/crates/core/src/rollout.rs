//! Free simulation of a trained model, transition-function export and
//! trajectory error metrics.

use crate::data::Episode;
use crate::elbo::transition_inputs;
use crate::error::{Error, Result};
use crate::model::Gpssm;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Where the initial state distribution of a rollout comes from.
#[derive(Clone, Debug)]
pub enum InitialState {
    Explicit { m0: DVector<f64>, l0: DMatrix<f64> },
    /// Encode these leading steps with the recognition net and use its
    /// `q(x_0)`.
    Prefix(Episode),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutOptions {
    pub samples: usize,
    pub seed: u64,
    /// Deterministic mean path: start at `m_0`, follow the posterior mean.
    pub suppress_noise: bool,
    /// Draw `u ~ q(u)` once per sample and follow the conditional mean of
    /// that function draw instead of sampling each step's marginal.
    pub freeze_function: bool,
    /// Add emission noise to the reported observations.
    pub observation_noise: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            samples: 50,
            seed: 0,
            suppress_noise: false,
            freeze_function: false,
            observation_noise: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    /// One `(T+1)×D` latent trajectory per sample.
    pub states: Vec<DMatrix<f64>>,
    /// One `T×O` observation trajectory per sample (for `x_1..x_T`).
    pub observations: Vec<DMatrix<f64>>,
    /// Across-sample standard deviation of the observations, `T×O`.
    pub std: DMatrix<f64>,
}

impl RolloutResult {
    /// Across-sample mean of the observations, `T×O`.
    pub fn mean_observation(&self) -> DMatrix<f64> {
        let mut m = self.observations[0].clone() * 0.0;
        for o in &self.observations {
            m += o;
        }
        m / self.observations.len() as f64
    }
}

fn initial(model: &Gpssm, init: &InitialState) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = model.state_dim();
    match init {
        InitialState::Explicit { m0, l0 } => {
            if m0.len() != d || l0.shape() != (d, d) {
                return Err(Error::Dimension(format!("initial state must be {d}-dimensional")));
            }
            Ok((m0.clone(), l0.clone()))
        }
        InitialState::Prefix(ep) => {
            model.check_episode(ep)?;
            let q = model.recognition.encode(&ep.recognition_input())?;
            Ok((q.m0, q.l0))
        }
    }
}

/// Simulate `S` trajectories under `actions` (`T×P`).
pub fn free_simulate(
    model: &Gpssm,
    init: &InitialState,
    actions: &DMatrix<f64>,
    opts: &RolloutOptions,
) -> Result<RolloutResult> {
    if opts.samples == 0 {
        return Err(Error::Input("at least one rollout sample is required".into()));
    }
    if actions.ncols() != model.action_dim() {
        return Err(Error::Dimension(format!(
            "actions have {} columns, the model expects {}",
            actions.ncols(),
            model.action_dim()
        )));
    }
    let (d, t, s) = (model.state_dim(), actions.nrows(), if opts.suppress_noise { 1 } else { opts.samples });
    let (m0, l0) = initial(model, init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = |rng: &mut ChaCha8Rng, n: usize| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));

    let pred = model.gp.predictor()?;
    let sf = model.gp.sigma_f2().sqrt();
    let mut x = DMatrix::zeros(s, d);
    for i in 0..s {
        let x0 = if opts.suppress_noise { m0.clone() } else { &m0 + &l0 * normal(&mut rng, d) };
        x.row_mut(i).copy_from(&x0.transpose());
    }
    // One function draw per sample when frozen.
    let draws: Vec<DMatrix<f64>> = if opts.freeze_function && !opts.suppress_noise && !model.pin_transition {
        (0..s)
            .map(|_| {
                let mut u = DMatrix::zeros(model.gp.num_inducing(), d);
                for k in 0..d {
                    let q = model.gp.variational(k);
                    let e = normal(&mut rng, q.mu.len());
                    u.set_column(k, &(&q.mu + &q.chol * e));
                }
                u
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut states: Vec<DMatrix<f64>> = (0..s).map(|_| DMatrix::zeros(t + 1, d)).collect();
    for (i, st) in states.iter_mut().enumerate() {
        st.row_mut(0).copy_from(&x.row(i));
    }
    for step in 0..t {
        let acts = DMatrix::from_fn(s, actions.ncols(), |_, j| actions[(step, j)]);
        let inputs = transition_inputs(&x, &acts);
        let next = if model.pin_transition {
            let mut m = x.clone();
            if !opts.suppress_noise {
                for v in m.iter_mut() {
                    *v += sf * rng.sample::<f64, _>(StandardNormal);
                }
            }
            m
        } else if !draws.is_empty() {
            let mut m = DMatrix::zeros(s, d);
            for (i, u) in draws.iter().enumerate() {
                let row = inputs.rows(i, 1).into_owned();
                m.row_mut(i).copy_from(&pred.conditional_mean(&row, u)?);
                for k in 0..d {
                    m[(i, k)] += sf * rng.sample::<f64, _>(StandardNormal);
                }
            }
            m
        } else {
            let (mean, var) = pred.predict(&inputs)?;
            if opts.suppress_noise {
                mean
            } else {
                let mut m = mean;
                for i in 0..s {
                    for k in 0..d {
                        let sd = (var[(i, k)] + sf * sf).sqrt();
                        m[(i, k)] += sd * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                m
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("rollout diverged at step {}", step + 1)));
        }
        x = next;
        for (i, st) in states.iter_mut().enumerate() {
            st.row_mut(step + 1).copy_from(&x.row(i));
        }
    }

    let em = &model.emission;
    let sg = em.sigma_g2().sqrt();
    let o = em.obs_dim();
    let observations: Vec<DMatrix<f64>> = states
        .iter()
        .map(|st| {
            let mut y = st.rows(1, t) * em.w.transpose();
            for mut row in y.row_iter_mut() {
                row += &em.b;
                if opts.observation_noise && !opts.suppress_noise {
                    for v in row.iter_mut() {
                        *v += sg * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            y
        })
        .collect();
    let mut std = DMatrix::zeros(t, o);
    if observations.len() > 1 {
        let n = observations.len() as f64;
        for i in 0..t {
            for j in 0..o {
                let mean = observations.iter().map(|y| y[(i, j)]).sum::<f64>() / n;
                let var = observations.iter().map(|y| (y[(i, j)] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                std[(i, j)] = var.sqrt();
            }
        }
    }
    Ok(RolloutResult {
        states,
        observations,
        std,
    })
}

/// Mean Euclidean distance between predicted and true pendulum tips, in
/// pole lengths. The tip is `(position + ℓ sin θ, −ℓ cos θ)`.
pub fn tip_error(
    pred: &[DMatrix<f64>],
    truth: &DMatrix<f64>,
    position: usize,
    angle: usize,
    pole_length: f64,
) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Input("no predicted trajectories".into()));
    }
    if position >= truth.ncols() || angle >= truth.ncols() {
        return Err(Error::Input(format!(
            "observations have {} channels; position {position} and angle {angle} are required",
            truth.ncols()
        )));
    }
    if !(pole_length > 0.0) {
        return Err(Error::Input("pole length must be > 0".into()));
    }
    let tip = |m: &DMatrix<f64>, t: usize| {
        let (p, th) = (m[(t, position)], m[(t, angle)]);
        (p + pole_length * th.sin(), -pole_length * th.cos())
    };
    let mut total = 0.0;
    for p in pred {
        if p.shape() != truth.shape() {
            return Err(Error::Dimension(format!(
                "prediction {:?} against truth {:?}",
                p.shape(),
                truth.shape()
            )));
        }
        for t in 0..truth.nrows() {
            let (a, b) = (tip(p, t), tip(truth, t));
            total += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        }
    }
    Ok(total / (pred.len() * truth.nrows()) as f64 / pole_length)
}

/// Per-channel root-mean-square error of `pred` against `truth`.
pub fn channel_rmse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() || truth.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "prediction {:?} against truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let n = truth.nrows() as f64;
    Ok((0..truth.ncols())
        .map(|j| ((pred.column(j) - truth.column(j)).norm_squared() / n).sqrt())
        .collect())
}

/// Across-sample mean and 5%/95% quantiles per step and channel.
pub fn write_quantiles_csv(res: &RolloutResult, w: &mut impl Write) -> std::io::Result<()> {
    let (t, o) = res.observations[0].shape();
    let mut header = vec!["t".to_string()];
    for j in 0..o {
        header.extend([format!("mean_{j}"), format!("p05_{j}"), format!("p95_{j}")]);
    }
    writeln!(w, "{}", header.join(","))?;
    let mean = res.mean_observation();
    for i in 0..t {
        let mut row = vec![(i + 1).to_string()];
        for j in 0..o {
            let mut vals: Vec<f64> = res.observations.iter().map(|y| y[(i, j)]).collect();
            vals.sort_by(f64::total_cmp);
            row.push(mean[(i, j)].to_string());
            row.push(quantile(&vals, 0.05).to_string());
            row.push(quantile(&vals, 0.95).to_string());
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    /// `probe` or `inducing`.
    pub kind: &'static str,
    pub input: Vec<f64>,
    pub output: usize,
    pub mean: f64,
    pub var: f64,
}

/// Posterior transition mean and variance at each probe row, followed by
/// the inducing inputs with their `q(u)` means and variances.
pub fn transition_grid(model: &Gpssm, grid: &DMatrix<f64>) -> Result<Vec<GridRow>> {
    let gp = &model.gp;
    let (mean, var) = gp.predictor()?.predict(grid)?;
    let mut rows = Vec::new();
    for i in 0..grid.nrows() {
        for d in 0..gp.state_dim() {
            rows.push(GridRow {
                kind: "probe",
                input: grid.row(i).iter().copied().collect(),
                output: d,
                mean: mean[(i, d)],
                var: var[(i, d)],
            });
        }
    }
    let z = gp.inducing_inputs();
    for d in 0..gp.state_dim() {
        let q = gp.variational(d);
        let cov = q.covariance();
        for i in 0..z.nrows() {
            rows.push(GridRow {
                kind: "inducing",
                input: z.row(i).iter().copied().collect(),
                output: d,
                mean: q.mu[i],
                var: cov[(i, i)],
            });
        }
    }
    Ok(rows)
}

pub fn write_grid_csv(rows: &[GridRow], w: &mut impl Write) -> std::io::Result<()> {
    let n = rows.first().map_or(0, |r| r.input.len());
    let inputs: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    writeln!(w, "kind,{},output,mean,var,lower,upper", inputs.join(","))?;
    for r in rows {
        let sd = r.var.max(0.0).sqrt();
        let x: Vec<String> = r.input.iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.kind,
            x.join(","),
            r.output,
            r.mean,
            r.var,
            r.mean - 2.0 * sd,
            r.mean + 2.0 * sd
        )?;
    }
    Ok(())
}

/// Regular grid over a box: `points[i]` values along input `i`, Cartesian
/// product in row-major order (last input varies fastest).
pub fn regular_grid(bounds: &[(f64, f64)], points: &[usize]) -> Result<DMatrix<f64>> {
    if bounds.len() != points.len() || bounds.is_empty() || points.contains(&0) {
        return Err(Error::Input("grid needs one positive point count per input".into()));
    }
    let total: usize = points.iter().product();
    let mut m = DMatrix::zeros(total, bounds.len());
    for r in 0..total {
        let mut rem = r;
        for j in (0..bounds.len()).rev() {
            let k = rem % points[j];
            rem /= points[j];
            let (lo, hi) = bounds[j];
            m[(r, j)] = if points[j] == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * k as f64 / (points[j] - 1) as f64
            };
        }
    }
    Ok(m)
}

pub fn save_grid_csv(rows: &[GridRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write_grid_csv(rows, &mut f).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}
