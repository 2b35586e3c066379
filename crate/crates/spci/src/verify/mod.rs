//! Independent oracles: definitional convolution, central-difference
//! gradients, closed-form cost counting. Nothing here shares kernels with
//! the production code paths it checks.

pub mod cost;
pub mod gradcheck;
pub mod oracle;

pub use cost::{conv_cost, count_cost_backbone, count_cost_spci, CostLine, CostReport};
pub use gradcheck::{
    finite_diff_grad, gradcheck_spci, gradcheck_spci_seeded, rel_err, smooth_probe,
    GradCheckEntry, GradCheckReport,
};
pub use oracle::naive_conv_oracle;
