//! Expert-choice mixture-of-experts routing.
//!
//! * [`routing`]: expert choice, token choice (top-1/top-2), hash
//! * [`capped`]: expert choice with a per-token expert cap, solved as an
//!   entropy-regularised LP with Dykstra's projections
//! * [`moe`]: gated FFN layer with forward and backward passes
//! * [`metrics`]: load balance and experts-per-token statistics
//! * [`harness`]: synthetic data, toy training and report I/O
//!
//! ```
//! use ecmoe::routing::{capacity, expert_choice_route};
//! use ecmoe::tensor::Matrix;
//!
//! let s = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.4, 0.6]]).unwrap();
//! let k = capacity(4, 1.0, 2).unwrap();
//! let a = expert_choice_route(&s, k).unwrap();
//! assert_eq!(a.indices.row(1), &[2, 3]);
//! ```

pub mod capped;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod moe;
pub mod routing;
pub mod tensor;

pub use error::{Error, Result};
