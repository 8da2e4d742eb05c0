//! Nighttime person re-identification at desk scale: zero-reference
//! curve-based illumination enhancement, a two-branch feature extractor,
//! bottleneck fusion with online illumination distillation, joint SGD
//! training, and cross-camera CMC/mAP evaluation on procedurally
//! generated toy data.

pub mod autodiff;
pub mod branches;
pub mod config;
pub mod dataset;
pub mod distill;
pub mod enhancer;
pub mod error;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod retrieval;
pub(crate) mod rng;
pub mod synth;
pub mod trainer;

pub use branches::{
    classify, id_loss, Backbone, BackboneConfig, Branch, FeatureVector, IdentityDistribution,
};
pub use config::{KvConfig, RunConfig};
pub use dataset::{
    classify_illumination, classify_lightness, classify_scale, IlluminationLevel, Manifest,
    ManifestEntry, PersonRecord, ScaleLevel,
};
pub use distill::{
    idm_loss, ifd_loss, rec_loss, DistillationConfig, FusionConfig, FusionModule, FusionState,
};
pub use enhancer::{curve_step, enhance, CurveEnhancer, CurveParameterMaps, EnhancerConfig};
pub use error::{Error, Result};
pub use image::{
    channel_histogram, gamma_degrade, load_and_resize, mean_lightness, resize_bilinear, Image,
};
pub use losses::{loss_col, loss_dce, loss_exp, loss_spa, loss_tva, EnhancementLossConfig};
pub use model::{IdfModel, ModelConfig};
pub use retrieval::{
    assemble_features, build_split, distance, evaluate, EvalMetrics, GalleryIndex, Metric,
    RecordMeta, RetrievalSplit,
};
pub use synth::SynthConfig;
pub use trainer::{
    grad_check, load_checkpoint, save_checkpoint, sgd_step, total_loss, train, GradCheckReport,
    LoadedCheckpoint, LossBreakdown, SgdOptimizer, TrainConfig, TrainMode, TrainReport, TrainSet,
};
