pub mod gradcheck;
pub mod openset;
pub mod replay_demo;
pub mod report;
pub mod train;
