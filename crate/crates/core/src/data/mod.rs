pub mod manifest;
pub mod pnm;
pub mod synth;
