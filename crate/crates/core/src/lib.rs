pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod error;
pub mod events;
pub mod fitter;
pub mod lipnet;
pub mod optim;
pub mod ot;
pub mod shapes;
pub mod svg;

pub use error::{Error, Result};
