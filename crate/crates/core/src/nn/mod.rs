//! Layer primitives with hand-written backward passes.

pub mod attention;
pub mod conv;
pub mod pool;

pub use attention::{
    apply_attention, channel_attention, channel_descriptors, spatial_attention, AttentionWeights,
    GateCache,
};
pub use conv::{conv_backward, conv_forward, ConvGeometry};
pub use pool::{avg_pool, mixed_pool, sigmoid, MixedPoolOutput};

pub(crate) fn relu_in_place(data: &mut [f64]) {
    data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the rectified activation was not positive.
pub(crate) fn relu_backward_in_place(grad: &mut [f64], activation: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}
