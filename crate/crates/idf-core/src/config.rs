//! Flat key-value run configuration: `section.key=value` lines with `#`
//! comments, merged as defaults ← file ← command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use crate::branches::BackboneConfig;
use crate::distill::FusionConfig;
use crate::enhancer::EnhancerConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::retrieval::Metric;
use crate::synth::SynthConfig;
use crate::trainer::{TrainConfig, TrainMode};

/// Parsed `key=value` file contents.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got `{raw}`",
                    lineno + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("key `{key}`: cannot parse `{raw}`"))
            }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

/// Everything a command needs, with spec defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub feature_dim: usize,
    pub backbone_widths: [usize; 4],
    pub enhancer_width: usize,
    pub n_iter: usize,
    pub zero_init_final: bool,
    pub init_std: f64,
    pub fusion_hidden: Option<usize>,
    pub fusion_bottleneck: Option<usize>,
    pub fusion_dropout: f64,
    pub train_frac: f64,
    pub probes_per_view: usize,
    pub metric: Metric,
    pub synth: SynthConfig,
    pub hist_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let enhancer = EnhancerConfig::default();
        Self {
            train: TrainConfig::default(),
            feature_dim: backbone.feature_dim,
            backbone_widths: backbone.widths,
            enhancer_width: enhancer.width,
            n_iter: enhancer.n_iter,
            zero_init_final: enhancer.zero_init_final,
            init_std: enhancer.init_std,
            fusion_hidden: None,
            fusion_bottleneck: None,
            fusion_dropout: 0.5,
            train_frac: 0.5,
            probes_per_view: 3,
            metric: Metric::Cosine,
            synth: SynthConfig::default(),
            hist_bins: 32,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.batch_size",
    "train.epochs",
    "train.seed",
    "train.mode",
    "loss.spa_region",
    "loss.exp_region",
    "loss.exposure_target",
    "loss.exp_squared",
    "loss.w_spa",
    "loss.w_exp",
    "loss.w_tva",
    "loss.w_col",
    "distill.lambda1",
    "distill.lambda2",
    "model.feature_dim",
    "model.backbone_widths",
    "model.enhancer_width",
    "model.n_iter",
    "model.zero_init_final",
    "model.init_std",
    "model.fusion_hidden",
    "model.fusion_bottleneck",
    "model.dropout",
    "data.train_frac",
    "data.probes_per_view",
    "eval.metric",
    "stats.bins",
    "synth.identities",
    "synth.images_per_identity",
    "synth.cameras",
    "synth.gamma_lo",
    "synth.gamma_hi",
    "synth.height_lo",
    "synth.height_hi",
];

impl RunConfig {
    /// Folds file values over the defaults. Unknown keys are an error so
    /// typos fail loudly.
    pub fn apply_file(&mut self, kv: &KvConfig) -> Result<()> {
        for key in kv.keys() {
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!("unknown configuration key `{key}`")));
            }
        }
        let t = &mut self.train;
        if let Some(v) = kv.parsed("train.lr")? {
            t.learning_rate = v;
        }
        if let Some(v) = kv.parsed("train.momentum")? {
            t.momentum = v;
        }
        if let Some(v) = kv.parsed("train.weight_decay")? {
            t.weight_decay = v;
        }
        if let Some(v) = kv.parsed("train.batch_size")? {
            t.batch_size = v;
        }
        if let Some(v) = kv.parsed("train.epochs")? {
            t.epochs = v;
        }
        if let Some(v) = kv.parsed("train.seed")? {
            t.seed = v;
        }
        if let Some(v) = kv.get("train.mode") {
            t.mode = TrainMode::parse(v)?;
        }
        if let Some(v) = kv.parsed("loss.spa_region")? {
            t.losses.spa_region = v;
        }
        if let Some(v) = kv.parsed("loss.exp_region")? {
            t.losses.exp_region = v;
        }
        if let Some(v) = kv.parsed("loss.exposure_target")? {
            t.losses.exposure_target = v;
        }
        if let Some(v) = kv.parsed("loss.exp_squared")? {
            t.losses.exp_squared = v;
        }
        if let Some(v) = kv.parsed("loss.w_spa")? {
            t.losses.w_spa = v;
        }
        if let Some(v) = kv.parsed("loss.w_exp")? {
            t.losses.w_exp = v;
        }
        if let Some(v) = kv.parsed("loss.w_tva")? {
            t.losses.w_tva = v;
        }
        if let Some(v) = kv.parsed("loss.w_col")? {
            t.losses.w_col = v;
        }
        if let Some(v) = kv.parsed("distill.lambda1")? {
            t.distill.lambda1 = v;
        }
        if let Some(v) = kv.parsed("distill.lambda2")? {
            t.distill.lambda2 = v;
        }
        if let Some(v) = kv.parsed("model.feature_dim")? {
            self.feature_dim = v;
        }
        if let Some(raw) = kv.get("model.backbone_widths") {
            let parts: Vec<usize> = raw
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        Error::Config(format!("model.backbone_widths: bad entry `{p}`"))
                    })
                })
                .collect::<Result<_>>()?;
            if parts.len() != 4 {
                return Err(Error::Config(
                    "model.backbone_widths needs exactly 4 comma-separated widths".into(),
                ));
            }
            self.backbone_widths = [parts[0], parts[1], parts[2], parts[3]];
        }
        if let Some(v) = kv.parsed("model.enhancer_width")? {
            self.enhancer_width = v;
        }
        if let Some(v) = kv.parsed("model.n_iter")? {
            self.n_iter = v;
        }
        if let Some(v) = kv.parsed("model.zero_init_final")? {
            self.zero_init_final = v;
        }
        if let Some(v) = kv.parsed("model.init_std")? {
            self.init_std = v;
        }
        if let Some(v) = kv.parsed("model.fusion_hidden")? {
            self.fusion_hidden = Some(v);
        }
        if let Some(v) = kv.parsed("model.fusion_bottleneck")? {
            self.fusion_bottleneck = Some(v);
        }
        if let Some(v) = kv.parsed("model.dropout")? {
            self.fusion_dropout = v;
        }
        if let Some(v) = kv.parsed("data.train_frac")? {
            self.train_frac = v;
        }
        if let Some(v) = kv.parsed("data.probes_per_view")? {
            self.probes_per_view = v;
        }
        if let Some(v) = kv.get("eval.metric") {
            self.metric = Metric::parse(v)?;
        }
        if let Some(v) = kv.parsed("stats.bins")? {
            self.hist_bins = v;
        }
        if let Some(v) = kv.parsed("synth.identities")? {
            self.synth.identities = v;
        }
        if let Some(v) = kv.parsed("synth.images_per_identity")? {
            self.synth.images_per_identity = v;
        }
        if let Some(v) = kv.parsed("synth.cameras")? {
            self.synth.cameras = v;
        }
        if let Some(v) = kv.parsed("synth.gamma_lo")? {
            self.synth.gamma_range.0 = v;
        }
        if let Some(v) = kv.parsed("synth.gamma_hi")? {
            self.synth.gamma_range.1 = v;
        }
        if let Some(v) = kv.parsed("synth.height_lo")? {
            self.synth.height_range.0 = v;
        }
        if let Some(v) = kv.parsed("synth.height_hi")? {
            self.synth.height_range.1 = v;
        }
        Ok(())
    }

    /// The model architecture this run configures.
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let feature_dim = self.feature_dim;
        ModelConfig {
            num_classes,
            enhancer: EnhancerConfig {
                width: self.enhancer_width,
                n_iter: self.n_iter,
                zero_init_final: self.zero_init_final,
                init_std: self.init_std,
            },
            backbone: BackboneConfig {
                widths: self.backbone_widths,
                feature_dim,
            },
            fusion: FusionConfig {
                feature_dim,
                hidden: self.fusion_hidden.unwrap_or(2 * feature_dim),
                bottleneck: self.fusion_bottleneck.unwrap_or(feature_dim),
                dropout: self.fusion_dropout,
            },
        }
    }
}
