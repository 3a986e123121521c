//! Inverse Chafee–Infante laboratory.
//!
//! Forward-Euler data generation, physics-informed losses, a U-Net / PatchGAN
//! WGAN-GP, training with validation-MAE model selection, and evaluation.

pub mod adversarial_models;
pub mod autograd;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod field_io;
pub mod forward_solver;
pub mod grid_field;
pub mod physics_losses;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use forward_solver::{check_stability, euler_step, simulate, simulate_trajectory, StabilityMargins};
pub use grid_field::{field_stats, laplacian_dirichlet, make_field, Field, PdeParams};
