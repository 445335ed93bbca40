//! Geodesics in the space of Kähler potentials on circle-symmetric model
//! surfaces (flat torus and round sphere).

pub mod config;
pub mod disc;
pub mod foliation;
pub mod harness;
pub mod interp;
pub mod kenergy;
pub mod model;
pub mod numeric;
pub mod solver;
pub mod suite;
