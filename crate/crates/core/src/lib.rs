pub mod evidence;
pub mod harness;
pub mod masking;
pub mod predictor;
pub mod rng;
pub mod spectra;
