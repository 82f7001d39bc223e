//! Element-wise attention layers on a small reverse-mode autodiff tensor.
//!
//! [`tensor`] holds the differentiable operations, [`attention`] the heads and
//! layers built from them, [`models`] the attention and convolutional
//! classifiers, [`optim`] initialization and Adam, [`data`] the dataset
//! readers and [`harness`] training, metrics and activation dumps.
//!
//! ```
//! use attnwise::models::{Model, ModelSpec};
//! use attnwise::{Mode, Tensor};
//!
//! let mut model = Model::<f32>::build(&ModelSpec::preset("attn-B").unwrap()).unwrap();
//! let x = Tensor::new(&[2, 1, 28, 28], vec![0.5; 2 * 784]).unwrap();
//! assert_eq!(model.forward(&x, Mode::Eval).unwrap().shape(), &[2, 10]);
//! ```

pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod models;
pub mod optim;
pub mod params;
mod scalar;
pub mod tensor;

pub use attention::{attn_layer_param_count, AttnHead, AttnWiseLayer, HeadTrace, LayerTrace};
pub use error::{Error, Result};
pub use params::{NamedParam, ParamRole};
pub use scalar::Scalar;
pub use tensor::{no_grad, BatchNorm, Mode, SoftmaxAxis, Tensor};

// The guide's Rust snippets run as doctests of these modules.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/gradcheck.md")]
    mod gradcheck {}
    #[doc = include_str!("../../../book/src/dumps.md")]
    mod dumps {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
