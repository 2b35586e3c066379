pub mod conv;
pub mod elementwise;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv2d_backward};
pub use elementwise::{
    add3, concat_channel, downsample2, dropout, mul_broadcast, relu, sigmoid, sum_all,
};
pub use loss::softmax_xent;
pub use norm::{batch_stats, batchnorm_eval, batchnorm_train, batchnorm_train_update};
pub use pool::{pool, PoolAxis, PoolMode};
