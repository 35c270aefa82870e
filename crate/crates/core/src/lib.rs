pub mod datasets;
pub mod diffusion;
pub mod linop;
pub mod metrics;
pub mod modem;
pub mod nullspace;
pub mod ofdma;
pub mod harness;
