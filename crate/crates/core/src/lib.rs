pub mod curation;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod se3;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tokens;
pub mod trainer;
