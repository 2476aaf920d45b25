//! Episodes and datasets, the synthetic generators, and on-disk formats for
//! datasets and checkpoints.
//!
//! Row `t` of an episode holds the observation of state `x_{t+1}` and the
//! action applied between `x_t` and `x_{t+1}`, so an episode of length `T`
//! spans the latent states `x_0..x_T`.

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamSet;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `T×O` observations.
    pub y: DMatrix<f64>,
    /// `T×P` actions; `P` may be zero.
    pub a: DMatrix<f64>,
}

impl Episode {
    pub fn new(y: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self> {
        if y.nrows() != a.nrows() {
            return Err(Error::Dimension(format!(
                "{} observations but {} actions",
                y.nrows(),
                a.nrows()
            )));
        }
        if y.iter().chain(a.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("episode contains non-finite values".into()));
        }
        Ok(Self { y, a })
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.a.ncols()
    }

    /// Observations and actions side by side, `T×(O+P)`.
    pub fn recognition_input(&self) -> DMatrix<f64> {
        let (t, o, p) = (self.len(), self.obs_dim(), self.action_dim());
        let mut m = DMatrix::zeros(t, o + p);
        m.columns_mut(0, o).copy_from(&self.y);
        if p > 0 {
            m.columns_mut(o, p).copy_from(&self.a);
        }
        m
    }

    /// The first `n` steps (or all of them).
    pub fn prefix(&self, n: usize) -> Episode {
        let n = n.min(self.len());
        Episode {
            y: self.y.rows(0, n).into_owned(),
            a: self.a.rows(0, n).into_owned(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub dt: Option<f64>,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, obs_dim: usize, action_dim: usize, dt: Option<f64>, episodes: Vec<Episode>) -> Result<Self> {
        if obs_dim == 0 {
            return Err(Error::Input("observation dimension must be ≥ 1".into()));
        }
        for (i, ep) in episodes.iter().enumerate() {
            if ep.obs_dim() != obs_dim || ep.action_dim() != action_dim {
                return Err(Error::Dimension(format!(
                    "episode {i} has O={}, P={}; dataset declares O={obs_dim}, P={action_dim}",
                    ep.obs_dim(),
                    ep.action_dim()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            obs_dim,
            action_dim,
            dt,
            episodes,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// A dataset holding the selected episodes.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            episodes: idx.iter().map(|&i| self.episodes[i].clone()).collect(),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Kink system

/// The piecewise-linear kink transition; `x = 4` takes the falling branch.
pub fn kink_f(x: f64) -> f64 {
    if x < 4.0 {
        x + 1.0
    } else {
        13.0 - 2.0 * x
    }
}

/// Kink episodes together with the latent states `x_0..x_T` of each.
pub fn kink_generate_with_states(
    n_episodes: usize,
    length: usize,
    sigma_f2: f64,
    sigma_g2: f64,
    seed: u64,
) -> Result<(Dataset, Vec<Vec<f64>>)> {
    if n_episodes == 0 || length == 0 {
        return Err(Error::Input("kink generator needs n_episodes, length ≥ 1".into()));
    }
    if sigma_f2 < 0.0 || sigma_g2 < 0.0 {
        return Err(Error::Input("noise variances must be ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sf, sg) = (sigma_f2.sqrt(), sigma_g2.sqrt());
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut states = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut x: f64 = rng.sample(StandardNormal);
        let mut xs = vec![x];
        let mut y = DMatrix::zeros(length, 1);
        for t in 0..length {
            let e: f64 = rng.sample(StandardNormal);
            x = kink_f(x) + sf * e;
            let n: f64 = rng.sample(StandardNormal);
            y[(t, 0)] = x + sg * n;
            xs.push(x);
        }
        episodes.push(Episode::new(y, DMatrix::zeros(length, 0))?);
        states.push(xs);
    }
    Ok((Dataset::new("kink", 1, 0, None, episodes)?, states))
}

pub fn kink_generate(n_episodes: usize, length: usize, sigma_f2: f64, sigma_g2: f64, seed: u64) -> Result<Dataset> {
    Ok(kink_generate_with_states(n_episodes, length, sigma_f2, sigma_g2, seed)?.0)
}

// ---------------------------------------------------------------------------
// Cart-pole

/// Physical constants. The pole is a uniform rod; angle zero hangs down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    pub gravity: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 0.5,
            pole_mass: 0.5,
            pole_length: 0.5,
            gravity: 9.82,
        }
    }
}

/// State `(position, velocity, angle, angular velocity)`.
pub type CartPoleState = [f64; 4];

/// Time derivative of the frictionless cart-pole under horizontal force `u`.
pub fn cartpole_derivative(p: &CartPoleParams, s: &CartPoleState, u: f64) -> CartPoleState {
    let (mc, m, l, g) = (p.cart_mass, p.pole_mass, p.pole_length, p.gravity);
    let (_, v, th, w) = (s[0], s[1], s[2], s[3]);
    let (sn, cs) = th.sin_cos();
    let dv = (2.0 * m * l * w * w * sn + 3.0 * m * g * sn * cs + 4.0 * u) / (4.0 * (mc + m) - 3.0 * m * cs * cs);
    let dw = (-3.0 * m * l * w * w * sn * cs - 6.0 * (mc + m) * g * sn - 6.0 * u * cs)
        / (4.0 * l * (mc + m) - 3.0 * m * l * cs * cs);
    [v, dv, w, dw]
}

/// One classical Runge-Kutta step with the force held constant.
pub fn rk4_step(p: &CartPoleParams, s: &CartPoleState, u: f64, dt: f64) -> CartPoleState {
    let add = |a: &CartPoleState, k: &CartPoleState, h: f64| -> CartPoleState {
        [a[0] + h * k[0], a[1] + h * k[1], a[2] + h * k[2], a[3] + h * k[3]]
    };
    let k1 = cartpole_derivative(p, s, u);
    let k2 = cartpole_derivative(p, &add(s, &k1, dt / 2.0), u);
    let k3 = cartpole_derivative(p, &add(s, &k2, dt / 2.0), u);
    let k4 = cartpole_derivative(p, &add(s, &k3, dt), u);
    let mut out = *s;
    for i in 0..4 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Total mechanical energy, potential measured from the lowest pole position.
pub fn cartpole_energy(p: &CartPoleParams, s: &CartPoleState) -> f64 {
    let (mc, m, l, g) = (p.cart_mass, p.pole_mass, p.pole_length, p.gravity);
    let (v, th, w) = (s[1], s[2], s[3]);
    let kinetic = 0.5 * (mc + m) * v * v + 0.5 * m * l * v * w * th.cos() + m * l * l * w * w / 6.0;
    let potential = 0.5 * m * g * l * (1.0 - th.cos());
    kinetic + potential
}

/// Scripted excitation used to drive the simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Policy {
    Zero,
    /// `amplitude·sin(2π t·dt / period + phase)` with per-episode random
    /// amplitude in `[amplitude/2, amplitude]`, period in `period` and phase.
    Sinusoid { amplitude: f64, period: (f64, f64) },
    /// First-order autoregressive noise with stationary standard deviation
    /// `amplitude` and lag-one correlation `smoothness`.
    RandomSmooth { amplitude: f64, smoothness: f64 },
}

impl Policy {
    /// Per-episode open-loop command generator.
    fn commands(&self, rng: &mut impl Rng, dt: f64) -> Box<dyn FnMut(usize, &CartPoleState) -> f64> {
        match *self {
            Policy::Zero => Box::new(|_, _| 0.0),
            Policy::Sinusoid { amplitude, period } => {
                let amp = rng.random_range(0.5 * amplitude..=amplitude);
                let per = if period.1 > period.0 {
                    rng.random_range(period.0..period.1)
                } else {
                    period.0
                };
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                Box::new(move |t, _| amp * (std::f64::consts::TAU * t as f64 * dt / per + phase).sin())
            }
            Policy::RandomSmooth { amplitude, smoothness } => {
                let mut inner = ChaCha8Rng::seed_from_u64(rng.random());
                let mut u = amplitude * inner.sample::<f64, _>(StandardNormal);
                let innov = (1.0 - smoothness * smoothness).max(0.0).sqrt();
                Box::new(move |t, _| {
                    if t > 0 {
                        let e: f64 = inner.sample(StandardNormal);
                        u = smoothness * u + innov * amplitude * e;
                    }
                    u
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CartPoleObservation {
    /// All four state coordinates.
    Full,
    /// Cart position and pole angle only.
    PositionAngle,
}

impl CartPoleObservation {
    pub fn channels(self) -> &'static [usize] {
        match self {
            CartPoleObservation::Full => &[0, 1, 2, 3],
            CartPoleObservation::PositionAngle => &[0, 2],
        }
    }

    /// Indices of the position and angle channels within an observation.
    pub fn position_angle(self) -> (usize, usize) {
        match self {
            CartPoleObservation::Full => (0, 2),
            CartPoleObservation::PositionAngle => (0, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartPoleConfig {
    pub physics: CartPoleParams,
    pub dt: f64,
    pub max_force: f64,
    pub policy: Policy,
    pub observe: CartPoleObservation,
    /// Steps by which the applied force trails the recorded command.
    pub action_lag: usize,
    pub obs_noise_std: f64,
    pub init_std: f64,
    /// Episodes stop early once `|position|` exceeds this.
    pub position_bound: f64,
}

impl Default for CartPoleConfig {
    fn default() -> Self {
        Self {
            physics: CartPoleParams::default(),
            dt: 0.1,
            max_force: 10.0,
            policy: Policy::Sinusoid {
                amplitude: 10.0,
                period: (0.8, 3.0),
            },
            observe: CartPoleObservation::Full,
            action_lag: 0,
            obs_noise_std: 0.01,
            init_std: 0.1,
            position_bound: 10.0,
        }
    }
}

/// Latent record of one simulated episode.
#[derive(Clone, Debug, PartialEq)]
pub struct CartPoleTrace {
    /// `x_0..x_T`.
    pub states: Vec<CartPoleState>,
    /// Force actually applied on each step.
    pub applied: Vec<f64>,
}

/// Simulate one episode from `x0`. The recorded command at step `t` is
/// `command(t, x_t)` clamped to `±max_force`; the force applied is the
/// command from `action_lag` steps earlier (zero before that).
pub fn cartpole_episode(
    cfg: &CartPoleConfig,
    x0: CartPoleState,
    length: usize,
    command: &mut dyn FnMut(usize, &CartPoleState) -> f64,
    rng: &mut impl Rng,
) -> Result<(Episode, CartPoleTrace)> {
    if !(cfg.dt > 0.0) {
        return Err(Error::Input("dt must be > 0".into()));
    }
    let channels = cfg.observe.channels();
    let noise = Normal::new(0.0, cfg.obs_noise_std.max(0.0)).map_err(|e| Error::Input(e.to_string()))?;
    let mut s = x0;
    let mut states = vec![s];
    let mut commands = Vec::with_capacity(length);
    let mut applied = Vec::with_capacity(length);
    let mut ys = Vec::with_capacity(length);
    for t in 0..length {
        let u = command(t, &s).clamp(-cfg.max_force, cfg.max_force);
        commands.push(u);
        let f = if t >= cfg.action_lag { commands[t - cfg.action_lag] } else { 0.0 };
        let next = rk4_step(&cfg.physics, &s, f, cfg.dt);
        if next.iter().any(|v| !v.is_finite()) || next[0].abs() > cfg.position_bound {
            log::warn!("cart-pole episode left the track at step {t}; truncating to {t} steps");
            commands.pop();
            break;
        }
        s = next;
        applied.push(f);
        states.push(s);
        ys.push(channels.iter().map(|&c| s[c] + noise.sample(rng)).collect::<Vec<_>>());
    }
    let t = ys.len();
    let y = DMatrix::from_fn(t, channels.len(), |i, j| ys[i][j]);
    let a = DMatrix::from_fn(t, 1, |i, _| commands[i]);
    Ok((Episode::new(y, a)?, CartPoleTrace { states, applied }))
}

pub fn cartpole_simulate_with_states(
    cfg: &CartPoleConfig,
    n_episodes: usize,
    length: usize,
    seed: u64,
) -> Result<(Dataset, Vec<CartPoleTrace>)> {
    if n_episodes == 0 || length == 0 {
        return Err(Error::Input("cart-pole generator needs n_episodes, length ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::new();
    let mut traces = Vec::new();
    for _ in 0..n_episodes {
        let mut x0 = [0.0; 4];
        for v in &mut x0 {
            *v = cfg.init_std * rng.sample::<f64, _>(StandardNormal);
        }
        let mut cmd = cfg.policy.commands(&mut rng, cfg.dt);
        let (ep, tr) = cartpole_episode(cfg, x0, length, &mut *cmd, &mut rng)?;
        if ep.is_empty() {
            log::warn!("dropping a cart-pole episode that diverged immediately");
            continue;
        }
        episodes.push(ep);
        traces.push(tr);
    }
    let o = cfg.observe.channels().len();
    Ok((Dataset::new("cartpole", o, 1, Some(cfg.dt), episodes)?, traces))
}

pub fn cartpole_simulate(cfg: &CartPoleConfig, n_episodes: usize, length: usize, seed: u64) -> Result<Dataset> {
    Ok(cartpole_simulate_with_states(cfg, n_episodes, length, seed)?.0)
}

// ---------------------------------------------------------------------------
// Dataset files

pub const DATASET_FORMAT: &str = "gpssm-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    version: u32,
    name: String,
    obs_dim: usize,
    action_dim: usize,
    dt: Option<f64>,
    n_episodes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    episode: usize,
    t: usize,
    y: Vec<f64>,
    a: Vec<f64>,
}

/// Write `ds` as JSON lines: a header, then one record per time step.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        name: ds.name.clone(),
        obs_dim: ds.obs_dim,
        action_dim: ds.action_dim,
        dt: ds.dt,
        n_episodes: ds.len(),
    };
    write_line(&mut w, path, &header)?;
    for (i, ep) in ds.episodes.iter().enumerate() {
        for t in 0..ep.len() {
            let rec = StepRecord {
                episode: i,
                t,
                y: ep.y.row(t).iter().copied().collect(),
                a: ep.a.row(t).iter().copied().collect(),
            };
            write_line(&mut w, path, &rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_line(w: &mut impl Write, path: &Path, v: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string(v).map_err(|e| Error::Input(e.to_string()))?;
    writeln!(w, "{s}").map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let perr = |line: usize, msg: String| Error::Parse {
        path: name.clone(),
        line,
        msg,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: DatasetHeader = match lines.next() {
        Some((_, l)) => {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| perr(1, format!("bad header: {e}")))?
        }
        None => return Err(perr(1, "missing header line".into())),
    };
    if header.format != DATASET_FORMAT {
        return Err(perr(1, format!("unknown format `{}`", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(perr(1, format!("unsupported version {}", header.version)));
    }
    let mut rows: Vec<Vec<StepRecord>> = (0..header.n_episodes).map(|_| Vec::new()).collect();
    let mut last: Option<(usize, usize)> = None;
    for (i, l) in lines {
        let n = i + 1;
        let l = l.map_err(|e| Error::io(path, e))?;
        if l.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&l).map_err(|e| perr(n, e.to_string()))?;
        if rec.episode >= header.n_episodes {
            return Err(perr(n, format!("episode {} but the header declares {}", rec.episode, header.n_episodes)));
        }
        let expected_t = match last {
            Some((e, t)) if e == rec.episode => t + 1,
            Some((e, _)) if rec.episode < e => {
                return Err(perr(n, format!("episode {} after episode {e}", rec.episode)))
            }
            _ => 0,
        };
        if !rows[rec.episode].is_empty() && expected_t == 0 {
            return Err(perr(n, format!("episode {} is not contiguous", rec.episode)));
        }
        if rec.t != expected_t {
            return Err(perr(n, format!("expected t = {expected_t}, found {}", rec.t)));
        }
        if rec.y.len() != header.obs_dim || rec.a.len() != header.action_dim {
            return Err(perr(
                n,
                format!(
                    "y has {} and a has {} entries; expected {} and {}",
                    rec.y.len(),
                    rec.a.len(),
                    header.obs_dim,
                    header.action_dim
                ),
            ));
        }
        if rec.y.iter().chain(&rec.a).any(|v| !v.is_finite()) {
            return Err(perr(n, "non-finite value".into()));
        }
        last = Some((rec.episode, rec.t));
        rows[rec.episode].push(rec);
    }
    let episodes = rows
        .into_iter()
        .map(|r| {
            let t = r.len();
            Episode::new(
                DMatrix::from_fn(t, header.obs_dim, |i, j| r[i].y[j]),
                DMatrix::from_fn(t, header.action_dim, |i, j| r[i].a[j]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(header.name, header.obs_dim, header.action_dim, header.dt, episodes)
}

/// Read a whitespace-separated numeric table (one time step per line, `#`
/// comments allowed) and cut it into consecutive episodes of
/// `episode_length` steps. `obs_cols` and `action_cols` pick the columns.
pub fn import_columns(
    path: &Path,
    obs_cols: &[usize],
    action_cols: &[usize],
    episode_length: usize,
) -> Result<Dataset> {
    if episode_length == 0 || obs_cols.is_empty() {
        return Err(Error::Input("need ≥ 1 observation column and episode length ≥ 1".into()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut table: Vec<Vec<f64>> = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let l = l.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        let row = l
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: name.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        if let Some(&c) = obs_cols.iter().chain(action_cols).find(|&&c| c >= row.len()) {
            return Err(Error::Parse {
                path: name.clone(),
                line: i + 1,
                msg: format!("column {c} missing"),
            });
        }
        table.push(row);
    }
    let episodes = table
        .chunks_exact(episode_length)
        .map(|rows| {
            Episode::new(
                DMatrix::from_fn(rows.len(), obs_cols.len(), |i, j| rows[i][obs_cols[j]]),
                DMatrix::from_fn(rows.len(), action_cols.len(), |i, j| rows[i][action_cols[j]]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(name, obs_cols.len(), action_cols.len(), None, episodes)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GPSSMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialisable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamSet,
    /// Configuration the model was built from, kept verbatim.
    pub config: serde_json::Value,
    pub rng: Option<RngState>,
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    step: u64,
    config: serde_json::Value,
    rng: Option<RngState>,
    adam: Option<AdamHeader>,
    tensors: Vec<TensorEntry>,
}

const FIRST_MOMENT: &str = "adam.first.";
const SECOND_MOMENT: &str = "adam.second.";

/// Binary layout: 8-byte magic, `u32` version, `u64` manifest length, the
/// JSON manifest, then for every tensor `u64` rows, `u64` cols and the
/// column-major values, all little-endian.
pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, &DMatrix<f64>)> = cp.params.iter().map(|(n, m)| (n.to_string(), m)).collect();
    if let Some(adam) = &cp.adam {
        tensors.extend(adam.first.iter().map(|(n, m)| (format!("{FIRST_MOMENT}{n}"), m)));
        tensors.extend(adam.second.iter().map(|(n, m)| (format!("{SECOND_MOMENT}{n}"), m)));
    }
    let manifest = Manifest {
        step: cp.step,
        config: cp.config.clone(),
        rng: cp.rng.clone(),
        adam: cp.adam.as_ref().map(|a| AdamHeader {
            step: a.step,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }),
        tensors: tensors
            .iter()
            .map(|(n, m)| TensorEntry {
                name: n.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 64);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, m) in &tensors {
        buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // Write then rename so an interrupted save never clobbers a good file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "file truncated while reading {what} at byte {} ({} bytes available, {n} needed)",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let len = r.u64("manifest length")? as usize;
    let manifest: Manifest =
        serde_json::from_slice(r.take(len, "manifest")?).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let (mut params, mut first, mut second) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
    for entry in &manifest.tensors {
        let rows = r.u64(&entry.name)? as usize;
        let cols = r.u64(&entry.name)? as usize;
        if (rows, cols) != (entry.rows, entry.cols) {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` is {rows}×{cols} but the manifest says {}×{}",
                entry.name, entry.rows, entry.cols
            )));
        }
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| {
            Error::Checkpoint(format!("tensor `{}` has an impossible shape", entry.name))
        })?;
        let raw = r.take(n, &entry.name)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = DMatrix::from_vec(rows, cols, values);
        if let Some(n) = entry.name.strip_prefix(FIRST_MOMENT) {
            first.push(n, m);
        } else if let Some(n) = entry.name.strip_prefix(SECOND_MOMENT) {
            second.push(n, m);
        } else {
            params.push(entry.name.clone(), m);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let adam = manifest.adam.map(|h| AdamState {
        step: h.step,
        lr: h.lr,
        beta1: h.beta1,
        beta2: h.beta2,
        eps: h.eps,
        first,
        second,
    });
    Ok(Checkpoint {
        step: manifest.step,
        params,
        config: manifest.config,
        rng: manifest.rng,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kink_values() {
        assert_eq!(kink_f(3.5), 4.5);
        assert_eq!(kink_f(4.0), 5.0);
        assert_eq!(kink_f(5.0), 3.0);
        assert!((kink_f(4.0 - 1e-12) - 5.0).abs() < 1e-11);
        let mut x = 0.0;
        let mut path = vec![x];
        for _ in 0..9 {
            x = kink_f(x);
            path.push(x);
        }
        assert_eq!(path, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 3.0, 4.0, 5.0, 3.0]);
    }

    #[test]
    fn noise_free_kink_generation_follows_the_map() {
        let (ds, states) = kink_generate_with_states(3, 6, 0.0, 0.0, 5).unwrap();
        for (ep, xs) in ds.episodes.iter().zip(&states) {
            assert_eq!(xs.len(), 7);
            for t in 0..6 {
                assert_eq!(xs[t + 1], kink_f(xs[t]));
                assert_eq!(ep.y[(t, 0)], xs[t + 1]);
            }
        }
        assert_eq!(kink_generate(3, 6, 0.01, 0.1, 9).unwrap(), kink_generate(3, 6, 0.01, 0.1, 9).unwrap());
        assert!(kink_generate(0, 6, 0.01, 0.1, 9).is_err());
    }

    #[test]
    fn cartpole_rest_is_a_fixed_point() {
        let cfg = CartPoleConfig {
            policy: Policy::Zero,
            obs_noise_std: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ep, tr) = cartpole_episode(&cfg, [0.0; 4], 40, &mut |_, _| 0.0, &mut rng).unwrap();
        assert!(tr.states.iter().all(|s| *s == [0.0; 4]));
        assert!(ep.y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lagged_forces_trail_commands() {
        let mut cfg = CartPoleConfig::default();
        cfg.action_lag = 2;
        let (ds, tr) = cartpole_simulate_with_states(&cfg, 2, 20, 4).unwrap();
        for (ep, tr) in ds.episodes.iter().zip(&tr) {
            for t in 0..ep.len() {
                let want = if t >= 2 { ep.a[(t - 2, 0)] } else { 0.0 };
                assert_eq!(tr.applied[t], want);
            }
        }
    }

    #[test]
    fn truncates_when_leaving_the_track() {
        let cfg = CartPoleConfig {
            position_bound: 0.5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ep, tr) = cartpole_episode(&cfg, [0.0; 4], 40, &mut |_, _| 10.0, &mut rng).unwrap();
        assert!(ep.len() < 40 && ep.len() > 0);
        assert_eq!(tr.states.len(), ep.len() + 1);
    }
}
