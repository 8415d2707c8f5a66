//! Desk-scale single-target license plate detector.

pub mod anchorer;
pub mod autodiff;
pub mod check;
pub mod data;
pub mod engine;
pub mod geom;
pub mod loss;
pub mod net;
