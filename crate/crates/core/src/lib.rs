pub mod ambient;
pub mod cli;
pub mod cr_tensors;
pub mod jets;
pub mod monge_ampere;
pub mod variation;
pub mod volume;
