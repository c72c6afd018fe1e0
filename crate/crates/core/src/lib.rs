pub mod convnet;
pub mod detector;
pub mod edgemap;
pub mod evaluation;
pub mod grid;
pub mod orientation;
pub mod patch;
pub mod phantom;
pub mod pipeline;
pub mod volume;
