pub mod energy;
pub mod backprop;
pub mod error;
pub mod forward;
pub mod lbfgs;
pub mod mesh;
pub mod optim;
pub mod scene;
pub mod scenes;
pub mod sparse;
pub mod tasks;

pub use error::{Error, Result};
