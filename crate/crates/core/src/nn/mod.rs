pub mod arch;
pub mod checkpoint;
pub mod cost;
pub mod layer;
pub mod network;
pub mod train;
