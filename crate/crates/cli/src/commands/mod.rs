pub mod conflict;
pub mod forgetting;
pub mod gate;
pub mod merge_bench;
pub mod overlap;
pub mod packet;
pub mod privacy;
