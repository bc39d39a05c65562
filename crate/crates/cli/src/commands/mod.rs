pub mod eval;
pub mod gridsearch;
pub mod long_video;
pub mod sample;
pub mod surgery;
pub mod train;
