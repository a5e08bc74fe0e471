//! Estimation of treatment effects after interim subpopulation selection in
//! two-stage adaptive enrichment trials.

pub mod cli;
pub mod config;
pub mod error;
pub mod estimators;
pub mod normal;
pub mod oracle;
pub mod population;
pub mod quadrature;
pub mod selection;
pub mod simulation;
pub mod verify;

pub use error::{Error, Result};
