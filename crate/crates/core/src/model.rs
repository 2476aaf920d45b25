//! The full state-space model: transition GP, linear emission and the
//! recognition network that proposes the state posterior of each episode.

use crate::data::{Dataset, Episode};
use crate::elbo::EmissionModel;
use crate::error::{Error, Result};
use crate::params::{join, Parameterized};
use crate::recognition::RecognitionNet;
use crate::sparse_gp::SparseGp;
use nalgebra::DMatrix;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Gpssm {
    pub gp: SparseGp,
    pub emission: EmissionModel,
    pub recognition: RecognitionNet,
    /// Replace the learned transition by its prior mean with no function
    /// uncertainty, turning the model into a linear-Gaussian one.
    pub pin_transition: bool,
}

impl Gpssm {
    pub fn new(gp: SparseGp, emission: EmissionModel, recognition: RecognitionNet) -> Result<Self> {
        let (d, p, o) = (gp.state_dim(), gp.action_dim(), emission.obs_dim());
        if emission.state_dim() != d || recognition.state_dim() != d {
            return Err(Error::Dimension(format!(
                "state dimension differs between components: GP {d}, emission {}, recognition {}",
                emission.state_dim(),
                recognition.state_dim()
            )));
        }
        if recognition.input_dim() != o + p {
            return Err(Error::Dimension(format!(
                "recognition input is {}, expected observations + actions = {}",
                recognition.input_dim(),
                o + p
            )));
        }
        Ok(Self {
            gp,
            emission,
            recognition,
            pin_transition: false,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.gp.state_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.emission.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.gp.action_dim()
    }

    pub fn check_episode(&self, ep: &Episode) -> Result<()> {
        if ep.obs_dim() != self.obs_dim() || ep.action_dim() != self.action_dim() {
            return Err(Error::Dimension(format!(
                "episode has O={}, P={}; model expects O={}, P={}",
                ep.obs_dim(),
                ep.action_dim(),
                self.obs_dim(),
                self.action_dim()
            )));
        }
        if ep.is_empty() {
            return Err(Error::Input("empty episode".into()));
        }
        Ok(())
    }
}

impl Parameterized for Gpssm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &DMatrix<f64>)) {
        self.gp.visit_params(&join(prefix, "gp"), f);
        self.emission.visit_params(&join(prefix, "emission"), f);
        self.recognition.visit_params(&join(prefix, "recognition"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DMatrix<f64>)) {
        self.gp.visit_params_mut(&join(prefix, "gp"), f);
        self.emission.visit_params_mut(&join(prefix, "emission"), f);
        self.recognition.visit_params_mut(&join(prefix, "recognition"), f);
    }
}

/// Per-coordinate `(lo, hi)` of the states implied by the observations,
/// mapping each `y` back through the pseudo-inverse of the emission. Spans
/// narrower than `min_width` are widened symmetrically.
pub fn state_bounds(ds: &Dataset, emission: &EmissionModel, min_width: f64) -> Result<Vec<(f64, f64)>> {
    let pinv = emission
        .w
        .clone()
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Numerical(format!("emission pseudo-inverse: {e}")))?;
    let d = emission.state_dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for ep in &ds.episodes {
        for t in 0..ep.len() {
            let y = ep.y.row(t) - &emission.b;
            let x = &pinv * y.transpose();
            for k in 0..d {
                lo[k] = lo[k].min(x[k]);
                hi[k] = hi[k].max(x[k]);
            }
        }
    }
    Ok(widen(lo, hi, min_width))
}

/// Per-channel range of the actions in `ds`.
pub fn action_bounds(ds: &Dataset, min_width: f64) -> Vec<(f64, f64)> {
    let p = ds.action_dim;
    let mut lo = vec![f64::INFINITY; p];
    let mut hi = vec![f64::NEG_INFINITY; p];
    for ep in &ds.episodes {
        for t in 0..ep.len() {
            for k in 0..p {
                lo[k] = lo[k].min(ep.a[(t, k)]);
                hi[k] = hi[k].max(ep.a[(t, k)]);
            }
        }
    }
    widen(lo, hi, min_width)
}

fn widen(lo: Vec<f64>, hi: Vec<f64>, min_width: f64) -> Vec<(f64, f64)> {
    lo.into_iter()
        .zip(hi)
        .map(|(l, h)| {
            if !l.is_finite() || !h.is_finite() {
                return (-min_width / 2.0, min_width / 2.0);
            }
            if h - l < min_width {
                let c = 0.5 * (l + h);
                (c - min_width / 2.0, c + min_width / 2.0)
            } else {
                (l, h)
            }
        })
        .collect()
}

/// `m` inducing inputs spread over the box `bounds`: an even grid when the
/// input space is one-dimensional, independent uniform draws otherwise.
pub fn inducing_in_bounds(m: usize, bounds: &[(f64, f64)], rng: &mut impl Rng) -> DMatrix<f64> {
    if bounds.len() == 1 {
        let (l, h) = bounds[0];
        return DMatrix::from_fn(m, 1, |i, _| {
            if m == 1 {
                0.5 * (l + h)
            } else {
                l + (h - l) * i as f64 / (m - 1) as f64
            }
        });
    }
    DMatrix::from_fn(m, bounds.len(), |_, j| {
        let (l, h) = bounds[j];
        rng.random_range(l..=h)
    })
}
