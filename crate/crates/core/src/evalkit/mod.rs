//! Analysis tools: synthetic videos with ground truth, PCA of token
//! features, reconstruction through correspondences, and metrics.

mod metrics;
mod pca;
mod recon;
mod synth;

pub use metrics::{
    edit_residual, encode_ppm, latent_tokens, metrics_csv, mse, psnr, token_trajectory_variance,
    video_psnr, write_metrics_csv, write_ppm, MetricRow, PSNR_PEAK,
};
pub use pca::{pca_tokens, symmetric_eigen, xt_slice, PcaResult, RANK_TOL};
pub use recon::{feature_swap_reconstruct, rgb_warp};
pub use synth::{make_synthetic, SyntheticKind, SyntheticSpec, SyntheticVideo};
