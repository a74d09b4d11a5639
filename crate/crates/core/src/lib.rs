pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod training;
