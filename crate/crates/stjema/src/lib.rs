//! Self-supervised pretraining engine for dynamic functional-connectivity
//! graphs.
//!
//! The crate turns region-of-interest (ROI) time series into sequences of
//! correlation graphs, masks contiguous blocks of nodes and edges, and
//! trains a joint-embedding predictive model: an online encoder sees the
//! masked graphs, a momentum-averaged target encoder sees the originals,
//! and lightweight decoders reconstruct the target's node embeddings and
//! adjacency structure in latent space — both within a timestep and
//! across pairs of non-overlapping windows. Pretrained encoders can then
//! be fine-tuned or linearly probed on downstream labels.
//!
//! Modules follow the pipeline order:
//!
//! * [`signal`] — ROI time-series containers, file formats, and the
//!   synthetic cohort generator used for verification.
//! * [`graphbuild`] — sliding-window Pearson correlation and density
//!   thresholding into dynamic graphs.
//! * [`masking`] — contiguous block masks over nodes and adjacency.
//! * [`nn`] — dense kernels with reverse-mode differentiation.
//! * [`model`] — parameter layout and the two encoders.
//! * [`objective`] — the four reconstruction losses and the momentum
//!   target update.
//! * [`trainer`] — optimization loops, metrics, and checkpoints.
//! * [`cli`] — configuration, container formats, and the command-line
//!   entry points.

pub mod cli;
pub mod graphbuild;
pub mod masking;
pub mod model;
pub mod nn;
pub mod objective;
pub mod signal;
pub mod trainer;
