pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod idx;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod results;
pub mod rng;
pub mod sas;
pub mod tensor;
pub mod train;
pub mod variants;
