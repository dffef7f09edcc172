//! Model predictive control: a single-shooting solver, learned-residual
//! prediction models, contouring control for the race car, and closed-loop
//! simulation drivers with online adaptation.

pub mod adaptive;
pub mod closed_loop;
pub mod mpcc;
pub mod solver;

pub use adaptive::{adaptive_dynamics, FeatureSource, ResidualModel};
pub use closed_loop::{
    apply_adapter, run_closed_loop_car, run_closed_loop_mountain_car, Adapter, CarRunConfig,
    LogStep, MountainCarRunConfig, TrajectoryLog,
};
pub use mpcc::{
    build_mpcc_ocp, fit_tire_posterior, mpcc_initial_state, projected_velocity, MpccConfig,
    TireModel,
};
pub use solver::{solve_ocp, Ocp, SolveResult};
