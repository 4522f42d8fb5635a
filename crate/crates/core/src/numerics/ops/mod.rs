mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod pool;
mod shape;

pub use conv::ConvGeometry;
pub use elementwise::Activation;
pub use loss::CrossEntropyStats;
pub use norm::softmax_rows;
pub use pool::adaptive_bin;
pub use shape::{permute_index, GATHER_ZERO};
