//! DAG computational skeletons, parameters, forward passes, builders,
//! initializers and weight-norm bounds.

mod forward;
mod init;
mod params;
mod skeleton;

pub use forward::{forward, ForwardTrace};
#[allow(unused_imports)]
pub(crate) use forward::forward_unchecked;
pub use init::{
    glorot_cap_sq, init_variance, initialize, norm_bounds, scheme_mu_sq, spectral_norm,
    spectral_norm_with, Scheme, WeightBoundSpec,
};
pub use params::Parameters;
pub use skeleton::{build_feedforward_relu, build_resnet, EdgeRef, NodeId, NodeSpec, Skeleton, INPUT};
