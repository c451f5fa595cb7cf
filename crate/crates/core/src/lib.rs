//! Multi-annotator semi-supervised segmentation ensembles.
//!
//! K pixel classifiers are trained together: each learns from the pixels
//! where a pair of annotators agree, from disagreement pixels where it and a
//! randomly chosen peer predict the same label, and from unannotated pixels
//! where all of its peers agree. Predictions are fused by averaging the
//! networks' probability maps.

pub mod adam;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod trainer;

pub use dataset::{Dataset, DatasetSpec, LabeledSample, MultiAnnotatedSample, UnannotatedSample};
pub use error::{Error, Result};
pub use fusion::{average_fuse, fuse_annotations, majority_vote, staple, FusionStrategy, StapleConfig};
pub use loss::{masked_cross_entropy, ramp_lambda, LossBreakdown, ProbMap, RampUp};
pub use mask::{argmax_mask, LabelMask, PixelSet, SparseLabels};
pub use metrics::EvalReport;
pub use model::{init_params, ArchDescriptor, ConvNet, ImageTensor, ModelParams, PixelClassifier};
pub use trainer::{run_training, EnsembleState, Selection, TrainConfig, TrainData, TrainOutcome};
