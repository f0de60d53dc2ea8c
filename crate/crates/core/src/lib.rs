pub mod autodiff;
pub mod config;
pub mod episode;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod gaussian;
pub mod kg;
pub mod model;
pub mod objectives;
pub mod params;
pub mod train;
pub mod urgnn;
