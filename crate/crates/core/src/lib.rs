pub mod checkpoint;
pub mod degradation;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph_attention;
pub mod imageio;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod patching;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{MagnError, Result};
pub use exec::{BranchMode, Eager, Exec};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{Real, Tensor};
