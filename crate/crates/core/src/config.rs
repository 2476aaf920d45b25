//! Declarative run configuration: a TOML tree with dotted-key overrides,
//! validated before anything runs.

use crate::data::{CartPoleConfig, CartPoleObservation, Checkpoint, Dataset};
use crate::elbo::EmissionModel;
use crate::error::{Error, Result};
use crate::kernels::{Kernel, KernelParams, LeafKind, WarpNet};
use crate::model::{action_bounds, inducing_in_bounds, state_bounds, Gpssm};
use crate::optim::TrainOptions;
use crate::recognition::RecognitionNet;
use crate::rollout::RolloutOptions;
use crate::sparse_gp::SparseGp;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Parent of the per-run directories.
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub recognition: RecognitionConfig,
    pub training: TrainOptions,
    pub data: DataConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
    pub export: ExportConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            recognition: RecognitionConfig::default(),
            training: TrainOptions::default(),
            data: DataConfig::default(),
            rollout: RolloutConfig::default(),
            eval: EvalConfig::default(),
            export: ExportConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionMode {
    Learned,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub num_inducing: usize,
    pub sigma_f2: f64,
    pub sigma_g2: f64,
    /// Initial `q(u)` covariance is this squared times `K_zz`.
    pub q_u_init_scale: f64,
    pub emission: EmissionMode,
    /// `O×D` rows; defaults to `[I 0]`.
    pub emission_weight: Option<Vec<Vec<f64>>>,
    pub emission_bias: Option<Vec<f64>>,
    pub pin_transition: bool,
    /// Inducing inputs are spread over the data range widened to at least
    /// this span per coordinate.
    pub inducing_min_width: f64,
    pub kernel: KernelSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            state_dim: 1,
            num_inducing: 20,
            sigma_f2: 0.05,
            sigma_g2: 0.1,
            q_u_init_scale: 0.1,
            emission: EmissionMode::Learned,
            emission_weight: None,
            emission_bias: None,
            pin_transition: false,
            inducing_min_width: 1.0,
            kernel: KernelSpec::Sum {
                components: vec![
                    KernelSpec::Rbf {
                        variance: 1.0,
                        lengthscale: 1.0,
                        ard: false,
                    },
                    KernelSpec::Matern12 {
                        variance: 1.0,
                        lengthscale: 1.0,
                        ard: false,
                    },
                ],
            },
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Rbf {
        #[serde(default = "one")]
        variance: f64,
        #[serde(default = "one")]
        lengthscale: f64,
        #[serde(default)]
        ard: bool,
    },
    Matern12 {
        #[serde(default = "one")]
        variance: f64,
        #[serde(default = "one")]
        lengthscale: f64,
        #[serde(default)]
        ard: bool,
    },
    ArcCosine0 {
        #[serde(default = "one")]
        variance: f64,
    },
    Sum {
        components: Vec<KernelSpec>,
    },
    /// Inputs pass through a tanh network of the given layer widths first.
    Warped {
        widths: Vec<usize>,
        base: Box<KernelSpec>,
    },
}

impl KernelSpec {
    pub fn build(&self, input_dim: usize, rng: &mut impl Rng) -> Result<Kernel> {
        let ard = |on: bool| on.then_some(input_dim);
        match self {
            KernelSpec::Rbf {
                variance,
                lengthscale,
                ard: a,
            } => Kernel::leaf(LeafKind::Rbf, input_dim, KernelParams::new(*variance, *lengthscale, ard(*a))?),
            KernelSpec::Matern12 {
                variance,
                lengthscale,
                ard: a,
            } => Kernel::leaf(
                LeafKind::Matern12,
                input_dim,
                KernelParams::new(*variance, *lengthscale, ard(*a))?,
            ),
            KernelSpec::ArcCosine0 { variance } => Kernel::arc_cosine0(input_dim, *variance),
            KernelSpec::Sum { components } => {
                let children = components
                    .iter()
                    .map(|c| c.build(input_dim, rng))
                    .collect::<Result<Vec<_>>>()?;
                Kernel::sum(children)
            }
            KernelSpec::Warped { widths, base } => {
                let net = WarpNet::new(input_dim, widths, rng)?;
                let inner = base.build(net.output_dim(), rng)?;
                Kernel::warped(net, inner)
            }
        }
    }

    fn validate(&self, key: &str) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{key}.{name}"), format!("must be > 0, got {v}")))
            }
        };
        match self {
            KernelSpec::Rbf {
                variance, lengthscale, ..
            }
            | KernelSpec::Matern12 {
                variance, lengthscale, ..
            } => {
                positive("variance", *variance)?;
                positive("lengthscale", *lengthscale)
            }
            KernelSpec::ArcCosine0 { variance } => positive("variance", *variance),
            KernelSpec::Sum { components } => {
                if components.is_empty() {
                    return Err(Error::config(format!("{key}.components"), "needs at least one kernel"));
                }
                for (i, c) in components.iter().enumerate() {
                    c.validate(&format!("{key}.components.{i}"))?;
                }
                Ok(())
            }
            KernelSpec::Warped { widths, base } => {
                if widths.is_empty() || widths.contains(&0) {
                    return Err(Error::config(format!("{key}.widths"), "layer widths must be ≥ 1"));
                }
                base.validate(&format!("{key}.base"))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognitionConfig {
    pub hidden: usize,
}

impl Default for RecognitionConfig {
    fn default() -> Self {
        Self { hidden: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training episodes; generated in memory from `generator` when unset.
    pub train: Option<PathBuf>,
    /// Held-out episodes for `eval`.
    pub test: Option<PathBuf>,
    pub generator: Option<GeneratorConfig>,
}

fn default_kink_f2() -> f64 {
    0.01
}

fn default_kink_g2() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    Kink {
        n_episodes: usize,
        length: usize,
        #[serde(default = "default_kink_f2")]
        sigma_f2: f64,
        #[serde(default = "default_kink_g2")]
        sigma_g2: f64,
        #[serde(default)]
        seed: u64,
        /// Extra held-out episodes written next to the training set.
        #[serde(default)]
        test_episodes: usize,
    },
    Cartpole {
        n_episodes: usize,
        length: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        test_episodes: usize,
        #[serde(default)]
        sim: CartPoleConfig,
    },
}

impl GeneratorConfig {
    /// Training set and, if requested, a held-out set drawn with a
    /// different seed.
    pub fn generate(&self) -> Result<(Dataset, Option<Dataset>)> {
        match self {
            GeneratorConfig::Kink {
                n_episodes,
                length,
                sigma_f2,
                sigma_g2,
                seed,
                test_episodes,
            } => {
                let train = crate::data::kink_generate(*n_episodes, *length, *sigma_f2, *sigma_g2, *seed)?;
                let test = (*test_episodes > 0)
                    .then(|| crate::data::kink_generate(*test_episodes, *length, *sigma_f2, *sigma_g2, held_out(*seed)))
                    .transpose()?;
                Ok((train, test))
            }
            GeneratorConfig::Cartpole {
                n_episodes,
                length,
                seed,
                test_episodes,
                sim,
            } => {
                let train = crate::data::cartpole_simulate(sim, *n_episodes, *length, *seed)?;
                let test = (*test_episodes > 0)
                    .then(|| crate::data::cartpole_simulate(sim, *test_episodes, *length, held_out(*seed)))
                    .transpose()?;
                Ok((train, test))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let (n, len) = match self {
            GeneratorConfig::Kink { n_episodes, length, .. } | GeneratorConfig::Cartpole { n_episodes, length, .. } => {
                (*n_episodes, *length)
            }
        };
        if n == 0 {
            return Err(Error::config("data.generator.n_episodes", "must be ≥ 1"));
        }
        if len == 0 {
            return Err(Error::config("data.generator.length", "must be ≥ 1"));
        }
        if let GeneratorConfig::Cartpole { sim, .. } = self {
            if !(sim.dt > 0.0) {
                return Err(Error::config("data.generator.sim.dt", "must be > 0"));
            }
        }
        Ok(())
    }
}

fn held_out(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub samples: usize,
    pub seed: u64,
    pub suppress_noise: bool,
    pub freeze_function: bool,
    pub observation_noise: bool,
    /// Leading observations encoded to obtain the initial state.
    pub prefix: usize,
    /// Steps to simulate; the whole episode when unset.
    pub horizon: Option<usize>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        let o = RolloutOptions::default();
        Self {
            samples: o.samples,
            seed: o.seed,
            suppress_noise: o.suppress_noise,
            freeze_function: o.freeze_function,
            observation_noise: o.observation_noise,
            prefix: 5,
            horizon: None,
        }
    }
}

impl RolloutConfig {
    pub fn options(&self) -> RolloutOptions {
        RolloutOptions {
            samples: self.samples,
            seed: self.seed,
            suppress_noise: self.suppress_noise,
            freeze_function: self.freeze_function,
            observation_noise: self.observation_noise,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Pendulum tip distance in pole lengths.
    Tip,
    /// Root-mean-square error per observed channel.
    Rmse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metric: Metric,
    pub pole_length: f64,
    pub position_channel: usize,
    pub angle_channel: usize,
    /// Write per-episode rollout quantile CSVs.
    pub write_rollouts: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let (position_channel, angle_channel) = CartPoleObservation::Full.position_angle();
        Self {
            metric: Metric::Rmse,
            pole_length: 0.5,
            position_channel,
            angle_channel,
            write_rollouts: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// `[lo, hi]` per transition input; defaults to the inducing-input range.
    pub bounds: Option<Vec<[f64; 2]>>,
    /// Probe count per input (one value applies to every input).
    pub points: Vec<usize>,
    /// Export the prior instead of the learned posterior.
    pub prior_reset: bool,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            bounds: None,
            points: vec![201],
            prior_reset: false,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree: toml::Value = toml::from_str::<toml::Table>(text)
            .map(toml::Value::Table)
            .map_err(|e| {
                let key = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_default();
                Error::config(key, e.message().to_string())
            })?;
        for (key, value) in overrides {
            apply_override(&mut tree, key, value)?;
        }
        Self::from_tree(tree)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    fn from_tree(tree: toml::Value) -> Result<Self> {
        let cfg: Config = serde_path_to_error::deserialize(tree).map_err(|e| {
            let key = e.path().to_string();
            let msg = e.inner().to_string();
            if key == "." {
                if let Some(field) = unknown_field(&msg) {
                    return Error::config(field, msg);
                }
            }
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Count, positivity and consistency checks serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let at_least_one = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(key, "must be ≥ 1"))
            } else {
                Ok(())
            }
        };
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be > 0, got {v}")))
            }
        };
        let m = &self.model;
        at_least_one("model.state_dim", m.state_dim)?;
        at_least_one("model.num_inducing", m.num_inducing)?;
        positive("model.sigma_f2", m.sigma_f2)?;
        positive("model.sigma_g2", m.sigma_g2)?;
        positive("model.q_u_init_scale", m.q_u_init_scale)?;
        positive("model.inducing_min_width", m.inducing_min_width)?;
        m.kernel.validate("model.kernel")?;
        if let Some(w) = &m.emission_weight {
            if w.is_empty() || w.iter().any(|r| r.len() != m.state_dim) {
                return Err(Error::config(
                    "model.emission_weight",
                    format!("expected O rows of {} entries", m.state_dim),
                ));
            }
            if let Some(b) = &m.emission_bias {
                if b.len() != w.len() {
                    return Err(Error::config("model.emission_bias", "length must match emission_weight rows"));
                }
            }
        }
        at_least_one("recognition.hidden", self.recognition.hidden)?;
        let t = &self.training;
        at_least_one("training.batch_size", t.batch_size)?;
        at_least_one("training.num_samples", t.num_samples)?;
        positive("training.learning_rate", t.learning_rate)?;
        if let Some(c) = t.clip_grad_norm {
            positive("training.clip_grad_norm", c)?;
        }
        at_least_one("rollout.samples", self.rollout.samples)?;
        at_least_one("rollout.prefix", self.rollout.prefix)?;
        if let Some(h) = self.rollout.horizon {
            at_least_one("rollout.horizon", h)?;
        }
        positive("eval.pole_length", self.eval.pole_length)?;
        if self.export.points.is_empty() || self.export.points.contains(&0) {
            return Err(Error::config("export.points", "probe counts must be ≥ 1"));
        }
        if let Some(b) = &self.export.bounds {
            if b.iter().any(|[lo, hi]| !(lo <= hi)) {
                return Err(Error::config("export.bounds", "each entry must be [lo, hi] with lo ≤ hi"));
            }
        }
        if let Some(g) = &self.data.generator {
            g.validate()?;
        }
        Ok(())
    }

    /// Referenced input files must exist before a command starts.
    pub fn check_files(&self, train: bool, test: bool) -> Result<()> {
        let need = |key: &str, p: &Option<PathBuf>| match p {
            Some(p) if !p.is_file() => Err(Error::config(key, format!("file {} does not exist", p.display()))),
            _ => Ok(()),
        };
        if train {
            need("data.train", &self.data.train)?;
            if self.data.train.is_none() && self.data.generator.is_none() {
                return Err(Error::config("data.train", "set a dataset path or data.generator"));
            }
        }
        if test {
            need("data.test", &self.data.test)?;
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&json);
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Fresh `<output_dir>/<hash>-<UTC timestamp>` directory.
    pub fn create_run_dir(&self) -> Result<PathBuf> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = self.output_dir.join(format!("{}-{stamp}", self.hash()));
        let mut dir = base.clone();
        let mut n = 1;
        while dir.exists() {
            dir = PathBuf::from(format!("{}-{n}", base.display()));
            n += 1;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(dir)
    }

    /// Training options with the parameter freezes implied by the model
    /// section added.
    pub fn train_options(&self) -> TrainOptions {
        let mut opts = self.training.clone();
        if self.model.emission == EmissionMode::Fixed {
            for p in ["emission.weight", "emission.bias"] {
                if !opts.freeze.iter().any(|f| f == p) {
                    opts.freeze.push(p.into());
                }
            }
        }
        opts
    }

    /// Configuration echo stored in checkpoints.
    pub fn echo(&self, obs_dim: usize, action_dim: usize) -> serde_json::Value {
        serde_json::json!({
            "config": self,
            "obs_dim": obs_dim,
            "action_dim": action_dim,
        })
    }

    fn emission(&self, obs_dim: usize) -> Result<EmissionModel> {
        let m = &self.model;
        let w = match &m.emission_weight {
            Some(rows) => {
                if rows.len() != obs_dim {
                    return Err(Error::config(
                        "model.emission_weight",
                        format!("has {} rows but the data has {obs_dim} channels", rows.len()),
                    ));
                }
                DMatrix::from_fn(obs_dim, m.state_dim, |i, j| rows[i][j])
            }
            None => DMatrix::identity(obs_dim, m.state_dim),
        };
        let b = match &m.emission_bias {
            Some(b) => DMatrix::from_row_slice(1, obs_dim, b),
            None => DMatrix::zeros(1, obs_dim),
        };
        EmissionModel::new(w, b, m.sigma_g2)
    }

    /// Initial model for `ds`: inducing inputs spread over the state and
    /// action ranges the data imply.
    pub fn build_model(&self, ds: &Dataset) -> Result<Gpssm> {
        let emission = self.emission(ds.obs_dim)?;
        let mut bounds = state_bounds(ds, &emission, self.model.inducing_min_width)?;
        bounds.extend(action_bounds(ds, self.model.inducing_min_width));
        self.assemble(emission, ds.action_dim, &bounds)
    }

    /// Model with the right shapes for `obs_dim`/`action_dim`; values are
    /// placeholders to be overwritten from a checkpoint.
    pub fn build_skeleton(&self, obs_dim: usize, action_dim: usize) -> Result<Gpssm> {
        let emission = self.emission(obs_dim)?;
        let bounds = vec![(-1.0, 1.0); self.model.state_dim + action_dim];
        self.assemble(emission, action_dim, &bounds)
    }

    fn assemble(&self, emission: EmissionModel, action_dim: usize, bounds: &[(f64, f64)]) -> Result<Gpssm> {
        let m = &self.model;
        let mut rng = ChaCha8Rng::seed_from_u64(self.training.seed);
        rng.set_stream(1);
        let input_dim = m.state_dim + action_dim;
        let kernel = m.kernel.build(input_dim, &mut rng)?;
        let z = inducing_in_bounds(m.num_inducing, bounds, &mut rng);
        let gp = SparseGp::new(kernel, m.state_dim, action_dim, z, m.sigma_f2, m.q_u_init_scale)?;
        let obs_dim = emission.obs_dim();
        let rec = RecognitionNet::new(obs_dim + action_dim, self.recognition.hidden, m.state_dim, &mut rng)?;
        let mut model = Gpssm::new(gp, emission, rec)?;
        model.pin_transition = m.pin_transition;
        Ok(model)
    }
}

/// Model stored in a checkpoint, rebuilt from its configuration echo.
pub fn model_from_checkpoint(cp: &Checkpoint) -> Result<(Config, Gpssm)> {
    let bad = |msg: &str| Error::Checkpoint(format!("configuration echo: {msg}"));
    let cfg_value = cp.config.get("config").ok_or_else(|| bad("missing `config`"))?;
    let cfg: Config = serde_json::from_value(cfg_value.clone()).map_err(|e| bad(&e.to_string()))?;
    let dim = |k: &str| {
        cp.config
            .get(k)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| bad(&format!("missing `{k}`")))
    };
    let mut model = cfg.build_skeleton(dim("obs_dim")?, dim("action_dim")?)?;
    cp.params.apply_to(&mut model)?;
    Ok((cfg, model))
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// Parse `value` as a TOML literal, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Set `key` (dotted, numeric segments index arrays) in `tree`, creating
/// intermediate tables as needed.
pub fn apply_override(tree: &mut toml::Value, key: &str, value: &str) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(key, "malformed override key"));
    }
    let mut node = tree;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let here = segments[..=i].join(".");
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert(seg.to_string(), parse_value(value));
                    return Ok(());
                }
                t.entry(seg.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| Error::config(&here, "array elements are addressed by index"))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(&here, format!("index out of range (length {len})")))?;
                if last {
                    *slot = parse_value(value);
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::config(&here, "cannot set a field inside a scalar")),
        };
    }
    unreachable!("loop returns on the last segment")
}
