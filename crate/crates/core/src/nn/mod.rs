//! Fixed-topology dense networks with hand-written reverse mode.
//!
//! Layers compute `act(x · W + b)` on row-major batches. [`DenseNet::forward`]
//! keeps what [`DenseNet::backward`] needs; optimizers update any model that
//! exposes its parameters through [`Trainable`].

mod dense;
mod io;
mod loss;
mod optim;

pub use dense::{Activation, Dense, DenseNet, ForwardCache, Gradients, LayerGradient};
pub use io::{read_params, write_params, LayerHeader, NamedNets, NetHeader, ParamHeader, PARAM_MAGIC};
pub use loss::{softmax_cross_entropy, squared_error};
pub use optim::{Optimizer, OptimizerKind, TrainConfig, Trainable};
