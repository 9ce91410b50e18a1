pub mod dataset;
pub mod estimator;
pub mod eval;
pub mod model;
pub mod theory;
pub mod train;
pub mod experiment;
