mod conv;
mod elementwise;
mod linalg;
mod reduce;
mod shape;
mod softmax;
mod sparse;

pub use conv::ConvSpec;
pub use sparse::SparseMap;
