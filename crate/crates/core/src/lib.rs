//! Photon-to-phonon conversion simulator: Fock-space states, heterodyne
//! sampling, maximum-likelihood tomography, process fidelity, bootstrap
//! error bars and the classical electromechanical dynamics.

pub mod bootstrap;
pub mod capture;
pub mod dynamics;
pub mod error;
pub mod fixtures;
pub mod fock;
pub mod metrics;
pub mod pipeline;
pub mod povm;
pub mod quadrature;
pub mod rng;
pub mod sampling;
pub mod storage;
pub mod tomography;

pub use error::{Error, Result};
