pub mod error;
pub mod experiment;
pub mod fd;
pub mod linalg;
pub mod losses;
pub mod manifold;
pub mod model;
pub mod optimizer;
pub mod rng;
