pub mod metrics;
pub mod model;
pub mod scene;
pub mod tensor;
pub mod train;
