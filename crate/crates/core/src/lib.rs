//! Simulation and estimation suite for a four-photodiode planar odometry
//! sensor.
//!
//! Four downward-facing detectors look at the ground through printed
//! Gabor masks (a cosine and a sine Gabor, each split into a positive and
//! a negative transmittance mask). Motion over texture turns the masks
//! into spatial band-pass filters whose output oscillates at
//! `f = xi_ground * v`; the signed frequency of `s_cos + i s_sin` gives
//! the forward speed, and a gyroscope supplies yaw rate.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`texture`] ground reflectance fields
//! * [`mask`] Gabor model and printable mask rasters
//! * [`sensor`] detector rendering and the optical/electronic chain
//! * [`trajectory`] planar paths, resampling and a gyroscope model
//! * [`decoder`] DAQ conditioning and spectral speed decoding
//! * [`optimizer`] derivative-free mask parameter search
//! * [`odometry`] dead reckoning and trajectory scoring
//! * [`config`] / [`experiment`] config-driven pipelines

pub mod config;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod io;
pub mod mask;
pub mod odometry;
pub mod optimizer;
pub mod rng;
pub mod sensor;
pub mod svg;
pub mod texture;
pub mod trajectory;

pub use error::{Error, Result};
