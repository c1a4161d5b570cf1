pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod pool;
pub mod shape;
pub mod spectral;
