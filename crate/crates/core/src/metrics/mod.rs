//! Image quality, disentanglement, semantic loss and attention probing.

pub mod probe;
pub mod quality;
pub mod sde;
pub mod semantic_loss;

pub use probe::{
    build_probe_dataset, eval_transfer, split_holdout, train_probe, LinearProbe, ProbeConfig,
    ProbeRecord, ProbeResult, ProbeSet,
};
pub use quality::{masked_background_metrics, psnr, ssim, PSNR_CAP};
pub use sde::{pixel_rms, sde_flip_average, sde_metric, SDEReport, SdeConfig};
pub use semantic_loss::{semantic_loss_sweep, write_semantic_loss_csv, SemanticLossRow};
