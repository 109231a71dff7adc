//! Differentiable operations over tape variables.

mod conv;
mod distance;
mod elementwise;
mod layout;
mod matmul;
mod norm;
mod reduce;
mod resample;
mod softmax;

pub use conv::{add_channel_bias, conv2d, conv_transpose2d, conv_transpose_output_len};
pub use distance::{
    margin_from_distances, pairwise_distance, trust_from_distances, TrustBatchInfo, NORM_EPS,
};
pub use elementwise::{
    abs, add, add_scalar, div, leaky_relu, mul, neg, relu, scale, square, sub, tanh,
};
pub use layout::{nchw_to_rows, rows_to_nchw};
pub use matmul::{linear, matmul};
pub use norm::{batch_norm_eval, batch_norm_train, BatchStats};
pub use reduce::{mean, sum};
pub use resample::{bilinear_resize, bilinear_upsample, box_mean};
pub use softmax::{softmax, softmax_rows, sparsify_rows};

pub(crate) use distance::{euclidean, trust_label, two_nearest};
pub(crate) use softmax::{softmax_row, topk_indices};
