//! Radar odometry with a learned keypoint frontend and a Gauss-Newton
//! sliding-window estimator on SE(3).
//!
//! The crate is organized bottom-up: [`lie`] provides the group machinery,
//! [`prior`] the white-noise-on-acceleration motion prior, [`scan`] polar
//! radar preprocessing, [`features`] the learned detector/descriptor/weight
//! network with its hand-rolled autodiff, [`estimator`] the robust
//! sliding-window solver, [`trainer`] the unsupervised training loop,
//! [`simworld`] a planar radar simulator for end-to-end tests, and [`eval`]
//! trajectory-drift metrics.

pub mod config;

pub mod lie;

pub mod prior;

pub mod estimator;

pub mod eval;

pub mod features;

pub mod scan;

pub mod simworld;

pub mod trainer;
