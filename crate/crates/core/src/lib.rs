pub mod audio_io;
pub mod curation;
pub mod dsp;
pub mod gmm;
pub mod harness;
pub mod models;
pub mod store;
pub mod synthgen;
