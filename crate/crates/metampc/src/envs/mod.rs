//! Simulated plants and ground-truth residuals: the mountain-car benchmark
//! and a miniature race car with Pacejka tires on a closed track.

mod car;
mod mountain_car;
mod track;

pub use car::{
    car_derivatives_with_forces, car_step, car_step_euler, car_step_model,
    make_task_tires,
    pacejka_force, pacejka_slip_forces, slip_angles, CarParams, CarState, PacejkaParams, V_FLOOR,
};
pub use mountain_car::{mountain_car_residual, mountain_car_step, MountainCarParams};
pub use track::{default_track, Track, TrackPoint};
