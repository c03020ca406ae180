//! Frame-quality metrics, pose/content swap grids, the centroid pose oracle,
//! MIG sampling and rollout reports.

mod metrics;
mod mig;
mod plot;
mod report;
mod swap;

pub use metrics::{mse, psnr, ssim, ssim_range, FrameShape, PSNR_CAP_DB, SSIM_SIGMA, SSIM_WINDOW};
pub use mig::{balanced_frames, encode_frames, evaluate_mig, pooled_frames, pose_label, MigConfig, MigSampling};
pub use plot::{curves_svg, write_svg};
pub use report::{
    evaluate, evaluate_rollout, evaluate_swaps, score_sequences, write_report_csv, Curve, EvalConfig, EvalReport,
    RolloutCurves, SwapConfig, REPORT_CSV_HEADER, REPORT_METRICS,
};
pub use swap::{centroid_oracle, save_frame_grid, swap_grid, SwapGrid, CENTROID_THRESHOLD, SWAP_TOLERANCE_PX};
