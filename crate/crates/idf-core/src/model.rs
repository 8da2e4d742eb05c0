//! The assembled model: curve enhancer, master branch, enhancement branch
//! and the distillation module, with a named parameter registry shared by
//! the optimizer, checkpoints and gradient checking.

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::branches::{BackboneConfig, Branch};
use crate::distill::{FusionConfig, FusionModule};
use crate::enhancer::{CurveEnhancer, EnhancerConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamMut, ParamRef};

/// Dimensions and architecture switches of the whole model.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Number of training identities (classifier width C).
    pub num_classes: usize,
    pub enhancer: EnhancerConfig,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    /// Default full-size configuration.
    pub fn new(num_classes: usize) -> Self {
        let backbone = BackboneConfig::default();
        let fusion = FusionConfig::with_feature_dim(backbone.feature_dim);
        Self {
            num_classes,
            enhancer: EnhancerConfig::default(),
            backbone,
            fusion,
        }
    }

    /// A reduced configuration sized for single-core experimentation:
    /// narrow enhancer and backbone, small feature dimension.
    pub fn desk(num_classes: usize) -> Self {
        let backbone = BackboneConfig {
            widths: [8, 16, 32, 64],
            feature_dim: 64,
        };
        let fusion = FusionConfig::with_feature_dim(backbone.feature_dim);
        Self {
            num_classes,
            enhancer: EnhancerConfig {
                width: 8,
                n_iter: 8,
                zero_init_final: false,
                init_std: 0.02,
            },
            backbone,
            fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 identity classes".into()));
        }
        self.enhancer.validate()?;
        self.backbone.validate()?;
        self.fusion.validate()?;
        if self.fusion.feature_dim != self.backbone.feature_dim {
            return Err(Error::Config(format!(
                "fusion feature dim {} disagrees with backbone feature dim {}",
                self.fusion.feature_dim, self.backbone.feature_dim
            )));
        }
        Ok(())
    }
}

/// Enhancer, both branches and the distillation module.
///
/// The four components hold disjoint parameter sets; checkpoint blobs are
/// keyed `enhancer`, `mbranch`, `iebranch` and `idm`.
#[derive(Debug, Clone)]
pub struct IdfModel {
    pub config: ModelConfig,
    pub enhancer: CurveEnhancer,
    pub mbranch: Branch,
    pub iebranch: Branch,
    pub idm: FusionModule,
}

impl IdfModel {
    /// Deterministic initialization from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x49_44_46_4d); // "IDFM"
        let enhancer = CurveEnhancer::init(config.enhancer.clone(), &mut rng)?;
        let mbranch = Branch::init(config.backbone.clone(), config.num_classes, &mut rng)?;
        let iebranch = Branch::init(config.backbone.clone(), config.num_classes, &mut rng)?;
        let idm = FusionModule::init(config.fusion.clone(), config.num_classes, &mut rng)?;
        Ok(Self {
            config,
            enhancer,
            mbranch,
            iebranch,
            idm,
        })
    }

    /// Fills every trainable parameter with zero (feature outputs collapse
    /// to biases). Running statistics are left untouched.
    pub fn zero_all(&mut self) {
        for (_, p, trainable) in self.named_params_mut() {
            if trainable {
                p.fill(0.0);
            }
        }
    }

    /// Adds uniform noise to every trainable parameter.
    ///
    /// Gradient checks need this: zero-initialized biases leave rectifier
    /// pre-activations exactly zero over dead patches, so the loss sits on
    /// a kink where finite differences and the one-sided analytic
    /// convention legitimately disagree.
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        let mut rng = crate::rng::sub_rng(seed, &[0x6e75]);
        for (_, p, trainable) in self.named_params_mut() {
            if trainable {
                p.mapv_inplace(|v| v + scale * rand::Rng::random_range(&mut rng, -1.0..1.0));
            }
        }
    }

    /// All parameters and buffers with stable hierarchical names.
    pub fn named_params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.enhancer.collect("enhancer", &mut out);
        self.mbranch.collect("mbranch", &mut out);
        self.iebranch.collect("iebranch", &mut out);
        self.idm.collect("idm", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        self.enhancer.collect_mut("enhancer", &mut out);
        self.mbranch.collect_mut("mbranch", &mut out);
        self.iebranch.collect_mut("iebranch", &mut out);
        self.idm.collect_mut("idm", &mut out);
        out
    }

    /// Trainable parameters as an owned name → tensor vector (gradient
    /// checking works on this representation).
    pub fn trainable_vec(&self) -> Vec<(String, ArrayD<f64>)> {
        self.named_params()
            .into_iter()
            .filter(|(_, _, t)| *t)
            .map(|(n, v, _)| (n, v.clone()))
            .collect()
    }

    /// Writes a parameter vector produced by [`IdfModel::trainable_vec`]
    /// back into the model.
    pub fn load_trainable_vec(&mut self, vec: &[(String, ArrayD<f64>)]) -> Result<()> {
        let mut params = self.named_params_mut();
        for (name, value) in vec {
            let slot = params
                .iter_mut()
                .find(|(n, _, t)| *t && n == name)
                .ok_or_else(|| Error::State(format!("unknown trainable parameter `{name}`")))?;
            if slot.1.shape() != value.shape() {
                return Err(Error::Dimension(format!(
                    "parameter `{name}`: shape {:?} vs {:?}",
                    slot.1.shape(),
                    value.shape()
                )));
            }
            slot.1.assign(value);
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, _, t)| *t)
            .map(|(_, v, _)| v.len())
            .sum()
    }
}
