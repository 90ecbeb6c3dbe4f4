//! Benchmark samplers with analytic ground truth, the MI staircase schedule,
//! IDX image ingestion and the self-consistency pair constructions.

mod consistency;
mod gaussian;
mod mnist;

pub use consistency::{consistency_batch, mask_rows, ConsistencySetting};
pub use gaussian::{
    gaussian_mi, log_density_ratio_1d, mi_to_rho, sample_pair, GaussianTaskSpec,
    StaircaseSchedule,
};
pub use mnist::{
    load_idx, parse_idx, synthetic_digits_idx, ImageDataset, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC,
};
