//! Quantitative fluorescence photoacoustic tomography at desk scale.
//!
//! The library couples a 2-D discrete-ordinates solver for the
//! excitation/emission radiative transfer system with three reconstruction
//! methods for the fluorophore absorption coefficient: a squeeze iteration
//! that pinches the coefficient between two monotone envelopes, a
//! Barzilai-Borwein gradient descent on a log-type misfit driven by adjoint
//! solves, and the hybrid of the two (squeeze first, gradient polish after).
//!
//! Modules follow the pipeline: [`geometry`] holds the disc grid and angular
//! quadrature, [`transport`] the sweep solver and scattering kernel,
//! [`forward`] the coupled forward map and data handling, [`phantom`] the
//! synthetic test fields, and [`sim`] / [`opt`] / [`hybrid`] the
//! reconstruction drivers. [`experiment`] wires everything to datasets on
//! disk for the `fpat` binary.

pub mod config;
pub mod experiment;
pub mod forward;
pub mod geometry;
pub mod hybrid;
pub mod opt;
mod par;
pub mod phantom;
pub mod sim;
pub mod trace;
pub mod transport;
