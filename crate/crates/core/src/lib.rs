pub mod autodiff;
pub mod checkpoint;
pub mod cnp;
pub mod envs;
pub mod harness;
pub mod metatest;
pub mod nets;
pub mod norml;
pub mod optim;
pub mod rl;
pub mod seed;
