pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod eval;
pub mod losses;
pub mod model;
pub mod objective;
pub mod optim;
pub mod tensor;
pub mod trainer;
