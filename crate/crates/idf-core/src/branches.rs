//! The master and illumination-enhancement branches: a small strided
//! convolutional backbone per branch (parameters never shared), a linear
//! identity classifier per branch, and the cross-entropy identity loss.

use ndarray::{Array1, Axis};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, PROB_FLOOR};
use crate::enhancer::{image_batch, CurveEnhancer, EnhancerLeaves};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Conv2d, Conv2dLeaves, Linear, LinearLeaves, ParamMut, ParamRef};

/// A branch embedding of fixed dimension with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Array1<f64>,
}

impl FeatureVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("feature vector contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }
}

/// A softmax probability vector over the training identities.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityDistribution {
    probs: Array1<f64>,
}

impl IdentityDistribution {
    pub fn new(probs: Array1<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Contract("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = probs.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "probabilities sum to {sum}, expected 1 within 1e-6"
            )));
        }
        Ok(Self { probs })
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.probs
    }
}

/// Backbone architecture: four stride-2 convolution blocks and a linear
/// projection to the feature dimension.
#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub widths: [usize; 4],
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            feature_dim: 128,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) || self.feature_dim == 0 {
            return Err(Error::Config("backbone widths and feature dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Small convolutional encoder mapping `3×H×W` images to `D` features.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    convs: Vec<Conv2d>,
    proj: Linear,
}

pub struct BackboneLeaves {
    convs: Vec<Conv2dLeaves>,
    proj: LinearLeaves,
}

impl BackboneLeaves {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self.convs.iter().flat_map(|c| c.ids()).collect();
        out.extend(self.proj.ids());
        out
    }
}

impl Backbone {
    pub fn init(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut cin = 3;
        for &w in &config.widths {
            convs.push(Conv2d::he_init(cin, w, 3, 2, rng));
            cin = w;
        }
        let proj = Linear::he_init(cin, config.feature_dim, rng);
        Ok(Self { config, convs, proj })
    }

    pub fn leaves(&self, g: &mut Graph) -> BackboneLeaves {
        BackboneLeaves {
            convs: self.convs.iter().map(|c| c.leaves(g)).collect(),
            proj: self.proj.leaves(g),
        }
    }

    /// `[B, 3, H, W]` → `[B, D]`.
    pub fn forward_graph(&self, g: &mut Graph, l: &BackboneLeaves, x: NodeId) -> NodeId {
        let mut cur = x;
        for (conv, leaves) in self.convs.iter().zip(&l.convs) {
            cur = conv.forward(g, leaves, cur);
            cur = g.relu(cur);
        }
        let pooled = g.mean_spatial(cur);
        self.proj.forward(g, &l.proj, pooled)
    }

    /// Evaluation-mode feature extraction for one image.
    pub fn extract_features(&self, img: &Image) -> Result<FeatureVector> {
        let mut g = Graph::new();
        let x = g.constant(image_batch(&[img]));
        let l = self.leaves(&mut g);
        let f = self.forward_graph(&mut g, &l, x);
        let row = g
            .value(f)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .index_axis(Axis(0), 0)
            .to_owned();
        FeatureVector::new(row)
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.collect(&format!("{prefix}.conv{}", i + 1), out);
        }
        self.proj.collect(&format!("{prefix}.proj"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.collect_mut(&format!("{prefix}.conv{}", i + 1), out);
        }
        self.proj.collect_mut(&format!("{prefix}.proj"), out);
    }
}

/// Softmax classification of a feature vector (evaluation mode).
pub fn classify(head: &Linear, f: &FeatureVector) -> Result<IdentityDistribution> {
    if f.dim() != head.in_dim() {
        return Err(Error::Dimension(format!(
            "feature dim {} does not match classifier input {}",
            f.dim(),
            head.in_dim()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(f.values().clone().insert_axis(Axis(0)).into_dyn());
    let l = head.leaves(&mut g);
    let logits = head.forward(&mut g, &l, x);
    let probs = g.softmax(logits);
    let row = g
        .value(probs)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .index_axis(Axis(0), 0)
        .to_owned();
    IdentityDistribution::new(row)
}

/// Mean negative log probability of the true identity over a batch, with
/// probabilities floored at 1e-12 before the logarithm.
pub fn id_loss(probs: &[IdentityDistribution], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "id loss needs matching non-empty batches, got {} probs and {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let classes = probs[0].classes();
    let mut acc = 0.0;
    for (p, &label) in probs.iter().zip(labels) {
        if label >= classes {
            return Err(Error::Parameter(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        acc -= p.probs()[label].max(PROB_FLOOR).ln();
    }
    Ok(acc / labels.len() as f64)
}

/// One branch: a backbone plus its identity classifier. The master branch
/// consumes raw nighttime images; the enhancement branch consumes
/// curve-enhanced images. The two branches never share parameters.
#[derive(Debug, Clone)]
pub struct Branch {
    pub backbone: Backbone,
    pub head: Linear,
}

pub struct BranchLeaves {
    pub backbone: BackboneLeaves,
    pub head: LinearLeaves,
}

impl BranchLeaves {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = self.backbone.ids();
        out.extend(self.head.ids());
        out
    }
}

impl Branch {
    pub fn init(config: BackboneConfig, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("need at least 2 identity classes".into()));
        }
        let backbone = Backbone::init(config, rng)?;
        let head = Linear::he_init(backbone.config.feature_dim, num_classes, rng);
        Ok(Self { backbone, head })
    }

    pub fn leaves(&self, g: &mut Graph) -> BranchLeaves {
        BranchLeaves {
            backbone: self.backbone.leaves(g),
            head: self.head.leaves(g),
        }
    }

    /// `[B, 3, H, W]` → (features `[B, D]`, probabilities `[B, C]`).
    pub fn forward_graph(&self, g: &mut Graph, l: &BranchLeaves, x: NodeId) -> (NodeId, NodeId) {
        let f = self.backbone.forward_graph(g, &l.backbone, x);
        let logits = self.head.forward(g, &l.head, f);
        let probs = g.softmax(logits);
        (f, probs)
    }

    /// Evaluation-mode forward for one image.
    pub fn forward(&self, img: &Image) -> Result<(FeatureVector, IdentityDistribution)> {
        let f = self.backbone.extract_features(img)?;
        let p = classify(&self.head, &f)?;
        Ok((f, p))
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.backbone.collect(&format!("{prefix}.backbone"), out);
        self.head.collect(&format!("{prefix}.head"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.backbone.collect_mut(&format!("{prefix}.backbone"), out);
        self.head.collect_mut(&format!("{prefix}.head"), out);
    }
}

/// The enhancement branch forward pass in evaluation mode: enhance, then
/// extract and classify.
pub fn iebranch_forward(
    enhancer: &CurveEnhancer,
    branch: &Branch,
    img: &Image,
) -> Result<(Image, FeatureVector, IdentityDistribution)> {
    let (enhanced, _maps) = enhancer.enhance_image(img)?;
    let (f, p) = branch.forward(&enhanced)?;
    Ok((enhanced, f, p))
}

/// Graph builder for the enhancement branch: returns the enhanced batch,
/// the stacked maps, features and probabilities.
pub fn iebranch_graph(
    enhancer: &CurveEnhancer,
    enhancer_leaves: &EnhancerLeaves,
    branch: &Branch,
    branch_leaves: &BranchLeaves,
    g: &mut Graph,
    x: NodeId,
) -> (NodeId, NodeId, NodeId, NodeId) {
    let maps = enhancer.forward_maps(g, enhancer_leaves, x);
    let enhanced = CurveEnhancer::apply_curves(g, x, maps, enhancer.config.n_iter);
    let (f, probs) = branch.forward_graph(g, branch_leaves, enhanced);
    (enhanced, maps, f, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::new(Array3::from_shape_fn((3, h, w), |_| rng.random::<f64>())).unwrap()
    }

    fn micro_backbone(rng: &mut ChaCha8Rng) -> Backbone {
        Backbone::init(
            BackboneConfig { widths: [2, 2, 3, 3], feature_dim: 5 },
            rng,
        )
        .unwrap()
    }

    #[test]
    fn features_are_deterministic_with_expected_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = micro_backbone(&mut rng);
        let img = random_image(&mut rng, 16, 8);
        let a = bb.extract_features(&img).unwrap();
        let b = bb.extract_features(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 5);
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = micro_backbone(&mut rng);
        let img = random_image(&mut rng, 8, 8);
        let proj = ndarray::Array2::from_shape_fn((1, 5), |_| rng.random_range(-1.0..1.0)).into_dyn();

        let eval = |bb: &Backbone| -> f64 {
            let mut g = Graph::new();
            let x = g.constant(image_batch(&[&img]));
            let l = bb.leaves(&mut g);
            let f = bb.forward_graph(&mut g, &l, x);
            let p = g.constant(proj.clone());
            let prod = g.mul(f, p);
            let s = g.sum_all(prod);
            g.scalar_value(s)
        };

        let mut g = Graph::new();
        let x = g.constant(image_batch(&[&img]));
        let l = bb.leaves(&mut g);
        let f = bb.forward_graph(&mut g, &l, x);
        let p = g.constant(proj.clone());
        let prod = g.mul(f, p);
        let s = g.sum_all(prod);
        g.backward(s);

        let analytic = g.grad(l.convs[0].w).unwrap().clone();
        let step = 1e-4;
        for _ in 0..8 {
            let flat = rng.random_range(0..bb.convs[0].w.len());
            let mut plus = bb.clone();
            plus.convs[0].w.as_slice_mut().unwrap()[flat] += step;
            let mut minus = bb.clone();
            minus.convs[0].w.as_slice_mut().unwrap()[flat] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic.as_slice().unwrap()[flat];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(((a - fd) / denom).abs() < 1e-3, "analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn classify_uniform_dominant_and_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // zero weights and biases → uniform
        let head = Linear::zeros(4, 10);
        let f = FeatureVector::new(Array1::from_shape_fn(4, |_| rng.random::<f64>())).unwrap();
        let p = classify(&head, &f).unwrap();
        for &v in p.probs() {
            assert!((v - 0.1).abs() < 1e-12);
        }

        // one dominant logit → probability ≈ 1
        let mut head = Linear::zeros(1, 3);
        head.w[[1, 0]] = 50.0;
        let f = FeatureVector::new(Array1::from_elem(1, 1.0)).unwrap();
        let p = classify(&head, &f).unwrap();
        assert!((p.probs()[1] - 1.0).abs() < 1e-6);

        // logits (1, 2, 3) against a scalar softmax oracle
        let mut head = Linear::zeros(1, 3);
        head.b[[0]] = 1.0;
        head.b[[1]] = 2.0;
        head.b[[2]] = 3.0;
        let f = FeatureVector::new(Array1::zeros(1)).unwrap();
        let p = classify(&head, &f).unwrap();
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        for (i, &v) in p.probs().iter().enumerate() {
            let want = ((i + 1) as f64).exp() / z;
            assert!((v - want).abs() < 1e-12);
        }

        // dimension mismatch
        let f = FeatureVector::new(Array1::zeros(7)).unwrap();
        assert!(classify(&head, &f).is_err());
    }

    #[test]
    fn id_loss_cases() {
        let sure = IdentityDistribution::new(ndarray::arr1(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(id_loss(&[sure.clone(), sure.clone()], &[0, 0]).unwrap(), 0.0);

        let uniform = IdentityDistribution::new(Array1::from_elem(10, 0.1)).unwrap();
        let got = id_loss(&[uniform], &[7]).unwrap();
        assert!((got - 10f64.ln()).abs() < 1e-12);

        let a = IdentityDistribution::new(ndarray::arr1(&[0.5, 0.5])).unwrap();
        let b = IdentityDistribution::new(ndarray::arr1(&[0.25, 0.75])).unwrap();
        let got = id_loss(&[a, b], &[0, 0]).unwrap();
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((got - want).abs() < 1e-12);

        let c = IdentityDistribution::new(ndarray::arr1(&[0.5, 0.5])).unwrap();
        assert!(id_loss(&[c], &[5]).is_err());
    }

    #[test]
    fn id_loss_non_negative_zero_iff_certain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut v = Array1::from_shape_fn(6, |_| rng.random::<f64>() + 1e-3);
            let s = v.sum();
            v.mapv_inplace(|x| x / s);
            let p = IdentityDistribution::new(v.clone()).unwrap();
            let label = rng.random_range(0..6);
            let loss = id_loss(&[p], &[label]).unwrap();
            assert!(loss >= 0.0);
            if v[label] < 1.0 {
                assert!(loss > 0.0);
            }
        }
    }

    #[test]
    fn branch_parameters_are_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = BackboneConfig { widths: [2, 2, 2, 2], feature_dim: 4 };
        let mb = Branch::init(cfg.clone(), 3, &mut rng).unwrap();
        let mut ieb = Branch::init(cfg, 3, &mut rng).unwrap();
        let img = random_image(&mut rng, 16, 8);

        let before = mb.forward(&img).unwrap();
        // mutate the other branch heavily
        for w in ieb.backbone.convs.iter_mut() {
            w.w.fill(0.123);
        }
        let after = mb.forward(&img).unwrap();
        assert_eq!(before.0, after.0, "mbranch output must be bit-identical");
        assert_eq!(before.1.probs(), after.1.probs());
    }

    #[test]
    fn identity_enhancer_makes_iebranch_match_plain_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enh = CurveEnhancer::init(
            crate::enhancer::EnhancerConfig { width: 2, n_iter: 4, zero_init_final: true, init_std: 0.02 },
            &mut rng,
        )
        .unwrap();
        let branch = Branch::init(BackboneConfig { widths: [2, 2, 2, 2], feature_dim: 4 }, 3, &mut rng).unwrap();
        let img = random_image(&mut rng, 16, 8);
        let (enhanced, f, p) = iebranch_forward(&enh, &branch, &img).unwrap();
        assert_eq!(enhanced, img);
        let (f2, p2) = branch.forward(&img).unwrap();
        assert_eq!(f, f2);
        assert_eq!(p.probs(), p2.probs());
    }
}
