pub mod bench;
pub mod eval;
pub mod histogram;
pub mod sweep;
pub mod train;
