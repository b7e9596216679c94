//! Convolutional building blocks: dilated convolution, max-pooling,
//! activations, normalization, bilinear upsampling and the pixelwise loss.
//!
//! Every op accepts `[C,H,W]` maps or `[N,C,H,W]` minibatches. Each forward
//! has a matching backward; reductions run in a fixed order so results do not
//! depend on how work is split across threads.

mod conv;
mod norm;
mod pool;
mod softmax;
mod upsample;

pub use conv::{conv2d, conv2d_backward, ConvConfig, ConvGrads, Padding};
pub use norm::{
    batch_norm, batch_norm_backward, l2_normalize_backward, l2_normalize_scale, BatchNormCache, BatchNormGrads,
    L2Cache, NormConfig, NormMode, Phase, RunningStats, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM, DEFAULT_L2_SCALE,
    L2_NORM_GUARD,
};
pub use pool::{maxpool, maxpool_backward, PoolConfig};
pub use softmax::{
    cross_entropy_backward, cross_entropy_loss, softmax_backward, softmax_cross_entropy,
    softmax_cross_entropy_backward, softmax_pixelwise, IGNORE_LABEL,
};
pub use upsample::{bilinear_upsample, bilinear_upsample_backward, bilinear_upsample_to};

use crate::tensor::{Scalar, Tensor};

/// `max(x, 0)`.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient where the input was strictly positive; the subgradient at
/// zero is taken as zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(gy, |xv, g| if xv > T::zero() { g } else { T::zero() })
        .expect("relu gradient shape matches input")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_and_gates() {
        let x = Tensor::<f64>::from_vec(&[4], vec![-3.0, 0.0, 2.0, -0.1]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0, 0.0]);
        let g = Tensor::full(&[4], 1.0).unwrap();
        assert_eq!(relu_backward(&x, &g).data(), &[0.0, 0.0, 1.0, 0.0]);
    }
}
