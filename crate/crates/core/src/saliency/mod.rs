//! The two attention priors: a trainable token scorer for questions and the
//! alignment of precomputed image saliency maps onto the feature grid.

mod map;
mod tsm;

pub use map::{
    aggregate_to_grid, cell_sums, crop_letterbox, load_msal, load_pgm, parse_pgm, pgm_sidecar, read_msal, save_msal,
    write_msal, GridGeometry, SaliencyMap,
};
pub use tsm::{TextSaliencyNet, TsmConfig};
