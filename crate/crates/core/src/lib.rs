pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod elbo;
pub mod error;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod recognition;
pub mod rollout;
pub mod sparse_gp;
pub mod state_posterior;
