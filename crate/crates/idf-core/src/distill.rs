//! The illumination distillation module: bottleneck fusion of the two
//! branch embeddings, feature reconstruction, a fused classifier that acts
//! as the online distillation teacher, and the KL distillation loss.

use ndarray::{Array1, Axis};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, PROB_FLOOR};
use crate::branches::{FeatureVector, IdentityDistribution};
use crate::error::{Error, Result};
use crate::nn::{
    dropout_mask, BatchNorm1d, BatchNorm1dLeaves, Linear, LinearLeaves, ParamMut, ParamRef,
};

/// Balancing factors of the combined distillation objective.
#[derive(Debug, Clone)]
pub struct DistillationConfig {
    /// Weight of the reconstruction loss.
    pub lambda1: f64,
    /// Weight of the illumination-fused distillation loss.
    pub lambda2: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self { lambda1: 0.1, lambda2: 0.1 }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "lambda weights must be non-negative, got ({}, {})",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Dimensions of the bottleneck fusion model and its classifier.
#[derive(Debug, Clone)]
pub struct FusionConfig {
    /// Branch feature dimension D (the encoder input is 2D).
    pub feature_dim: usize,
    /// Hidden width of encoder and decoder.
    pub hidden: usize,
    /// Bottleneck (compact fused feature) dimension; must be < 2D.
    pub bottleneck: usize,
    /// Dropout rate of the classifier (training mode only).
    pub dropout: f64,
}

impl FusionConfig {
    pub fn with_feature_dim(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            hidden: 2 * feature_dim,
            bottleneck: feature_dim,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.bottleneck == 0 {
            return Err(Error::Config("fusion dimensions must be >= 1".into()));
        }
        if self.bottleneck >= 2 * self.feature_dim {
            return Err(Error::Config(format!(
                "bottleneck dim {} must be smaller than the concatenated input 2D = {}",
                self.bottleneck,
                2 * self.feature_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Concatenated, compact and reconstructed features for one sample.
#[derive(Debug, Clone)]
pub struct FusionState {
    pub z_in: Array1<f64>,
    pub z_cf: Array1<f64>,
    pub z_out: Array1<f64>,
}

/// Bottleneck encoder/decoder plus the fused-feature classifier.
///
/// Encoder and decoder are mirrored two-layer perceptrons with a rectifier
/// between the layers; the classifier is linear → batch norm → dropout →
/// linear.
#[derive(Debug, Clone)]
pub struct FusionModule {
    pub config: FusionConfig,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    cls1: Linear,
    cls_bn: BatchNorm1d,
    cls2: Linear,
}

pub struct FusionLeaves {
    enc1: LinearLeaves,
    enc2: LinearLeaves,
    dec1: LinearLeaves,
    dec2: LinearLeaves,
    cls1: LinearLeaves,
    cls_bn: BatchNorm1dLeaves,
    cls2: LinearLeaves,
}

impl FusionLeaves {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = self.enc1.ids();
        out.extend(self.enc2.ids());
        out.extend(self.dec1.ids());
        out.extend(self.dec2.ids());
        out.extend(self.cls1.ids());
        out.extend(self.cls_bn.ids());
        out.extend(self.cls2.ids());
        out
    }
}

/// Graph nodes produced by the fusion forward pass.
pub struct FusionNodes {
    pub z_in: NodeId,
    pub z_cf: NodeId,
    pub z_out: NodeId,
    pub probs: NodeId,
}

impl FusionModule {
    pub fn init(config: FusionConfig, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d2 = 2 * config.feature_dim;
        let (h, cf) = (config.hidden, config.bottleneck);
        Ok(Self {
            enc1: Linear::he_init(d2, h, rng),
            enc2: Linear::he_init(h, cf, rng),
            dec1: Linear::he_init(cf, h, rng),
            dec2: Linear::he_init(h, d2, rng),
            cls1: Linear::he_init(cf, cf, rng),
            cls_bn: BatchNorm1d::new(cf),
            cls2: Linear::he_init(cf, num_classes, rng),
            config,
        })
    }

    pub fn leaves(&self, g: &mut Graph) -> FusionLeaves {
        FusionLeaves {
            enc1: self.enc1.leaves(g),
            enc2: self.enc2.leaves(g),
            dec1: self.dec1.leaves(g),
            dec2: self.dec2.leaves(g),
            cls1: self.cls1.leaves(g),
            cls_bn: self.cls_bn.leaves(g),
            cls2: self.cls2.leaves(g),
        }
    }

    /// Builds the fusion forward pass from branch feature nodes
    /// (`[B, D]` each). Training mode uses batch-norm batch statistics and
    /// dropout; evaluation mode is deterministic.
    pub fn forward_graph(
        &mut self,
        g: &mut Graph,
        l: &FusionLeaves,
        f_mb: NodeId,
        f_ieb: NodeId,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> FusionNodes {
        let z_in = g.concat1(&[f_mb, f_ieb]);
        let e1 = self.enc1.forward(g, &l.enc1, z_in);
        let e1a = g.relu(e1);
        let z_cf = self.enc2.forward(g, &l.enc2, e1a);
        let d1 = self.dec1.forward(g, &l.dec1, z_cf);
        let d1a = g.relu(d1);
        let z_out = self.dec2.forward(g, &l.dec2, d1a);

        let c1 = self.cls1.forward(g, &l.cls1, z_cf);
        let bn = self.cls_bn.forward(g, &l.cls_bn, c1, training);
        let dropped = if training {
            let rng = rng.expect("training-mode fusion forward needs an rng for dropout");
            let rows = g.value(bn).shape()[0];
            let mask = dropout_mask(rows, self.config.bottleneck, self.config.dropout, rng);
            g.dropout(bn, mask)
        } else {
            bn
        };
        let logits = self.cls2.forward(g, &l.cls2, dropped);
        let probs = g.softmax(logits);
        FusionNodes { z_in, z_cf, z_out, probs }
    }

    /// Evaluation-mode fusion of one sample's branch features.
    pub fn fuse(&self, f_mb: &FeatureVector, f_ieb: &FeatureVector) -> Result<FusionState> {
        let d = self.config.feature_dim;
        if f_mb.dim() != d || f_ieb.dim() != d {
            return Err(Error::Dimension(format!(
                "fusion expects two {d}-dim features, got {} and {}",
                f_mb.dim(),
                f_ieb.dim()
            )));
        }
        let mut g = Graph::new();
        let a = g.constant(f_mb.values().clone().insert_axis(Axis(0)).into_dyn());
        let b = g.constant(f_ieb.values().clone().insert_axis(Axis(0)).into_dyn());
        let l = self.leaves(&mut g);
        // clone dance: forward_graph takes &mut self only for batch-norm
        // running stats, which evaluation mode never touches
        let mut me = self.clone();
        let nodes = me.forward_graph(&mut g, &l, a, b, false, None);
        let row = |id: NodeId| -> Array1<f64> {
            g.value(id)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .index_axis(Axis(0), 0)
                .to_owned()
        };
        Ok(FusionState {
            z_in: row(nodes.z_in),
            z_cf: row(nodes.z_cf),
            z_out: row(nodes.z_out),
        })
    }

    /// Evaluation-mode teacher distribution for one sample.
    pub fn classify_fused(&self, state: &FusionState) -> Result<IdentityDistribution> {
        let mut g = Graph::new();
        let z = g.constant(state.z_cf.clone().insert_axis(Axis(0)).into_dyn());
        let l = self.leaves(&mut g);
        let c1 = self.cls1.forward(&mut g, &l.cls1, z);
        let mut me = self.clone();
        let bn = me.cls_bn.forward(&mut g, &l.cls_bn, c1, false);
        let logits = self.cls2.forward(&mut g, &l.cls2, bn);
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

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.enc1.collect(&format!("{prefix}.enc1"), out);
        self.enc2.collect(&format!("{prefix}.enc2"), out);
        self.dec1.collect(&format!("{prefix}.dec1"), out);
        self.dec2.collect(&format!("{prefix}.dec2"), out);
        self.cls1.collect(&format!("{prefix}.cls1"), out);
        self.cls_bn.collect(&format!("{prefix}.cls_bn"), out);
        self.cls2.collect(&format!("{prefix}.cls2"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.enc1.collect_mut(&format!("{prefix}.enc1"), out);
        self.enc2.collect_mut(&format!("{prefix}.enc2"), out);
        self.dec1.collect_mut(&format!("{prefix}.dec1"), out);
        self.dec2.collect_mut(&format!("{prefix}.dec2"), out);
        self.cls1.collect_mut(&format!("{prefix}.cls1"), out);
        self.cls_bn.collect_mut(&format!("{prefix}.cls_bn"), out);
        self.cls2.collect_mut(&format!("{prefix}.cls2"), out);
    }
}

/// Squared Euclidean reconstruction error `‖z_out − z_in‖²`.
pub fn rec_loss(state: &FusionState) -> f64 {
    state
        .z_out
        .iter()
        .zip(state.z_in.iter())
        .map(|(&o, &i)| (o - i) * (o - i))
        .sum()
}

/// Graph form of the reconstruction loss, averaged over the batch.
pub fn rec_loss_graph(g: &mut Graph, z_in: NodeId, z_out: NodeId) -> NodeId {
    let b = g.value(z_in).shape()[0];
    let d = g.sub(z_out, z_in);
    let sq = g.square(d);
    let s = g.sum_all(sq);
    g.scale(s, 1.0 / b as f64)
}

/// Summed KL divergence from the teacher to each student distribution,
/// `Σ_s Σ_n P_t(n)·ln(P_t(n)/P_s(n))`, with student probabilities floored
/// at 1e-12 and the convention `0·ln 0 = 0`.
pub fn ifd_loss(teacher: &IdentityDistribution, students: &[IdentityDistribution]) -> Result<f64> {
    let classes = teacher.classes();
    let mut acc = 0.0;
    for s in students {
        if s.classes() != classes {
            return Err(Error::Dimension(format!(
                "student has {} classes, teacher has {classes}",
                s.classes()
            )));
        }
        for (&pt, &ps) in teacher.probs().iter().zip(s.probs().iter()) {
            if pt > 0.0 {
                acc += pt * (pt.ln() - ps.max(PROB_FLOOR).ln());
            }
        }
    }
    Ok(acc)
}

/// Graph form of the distillation loss: the teacher probabilities enter as
/// constants (no gradient flows into the teacher), student probability
/// nodes are differentiated through. Per-sample KL values are averaged
/// over the batch and summed over students.
pub fn ifd_loss_graph(g: &mut Graph, teacher_probs: NodeId, students: &[NodeId]) -> NodeId {
    let teacher = g.detach(teacher_probs);
    let tv = g
        .value(teacher)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    let b = tv.nrows();
    // Σ P_t ln P_t is constant w.r.t. everything differentiable
    let t_entropy_term: f64 = tv
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum();
    let mut total: Option<NodeId> = None;
    for &s in students {
        let ls = g.log_clamped(s);
        let cross = g.mul(teacher, ls);
        let cs = g.sum_all(cross);
        let neg = g.scale(cs, -1.0);
        let kl = g.add_const(neg, t_entropy_term);
        total = Some(match total {
            Some(t) => g.add(t, kl),
            None => kl,
        });
    }
    g.scale(total.expect("at least one student"), 1.0 / b as f64)
}

/// The combined distillation objective
/// `L_ID + λ1·L_REC + λ2·L_IFD` for one sample.
pub fn idm_loss(
    probs_idm: &IdentityDistribution,
    label: usize,
    state: &FusionState,
    teacher: &IdentityDistribution,
    students: &[IdentityDistribution],
    cfg: &DistillationConfig,
) -> Result<f64> {
    cfg.validate()?;
    let id = crate::branches::id_loss(std::slice::from_ref(probs_idm), &[label])?;
    Ok(id + cfg.lambda1 * rec_loss(state) + cfg.lambda2 * ifd_loss(teacher, students)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;

    fn dist(v: &[f64]) -> IdentityDistribution {
        IdentityDistribution::new(Array1::from_vec(v.to_vec())).unwrap()
    }

    fn random_dist(rng: &mut ChaCha8Rng, c: usize) -> IdentityDistribution {
        let mut v = Array1::from_shape_fn(c, |_| rng.random::<f64>() + 1e-3);
        let s = v.sum();
        v.mapv_inplace(|x| x / s);
        IdentityDistribution::new(v).unwrap()
    }

    #[test]
    fn fusion_shapes_and_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut fm = FusionModule::init(FusionConfig::with_feature_dim(4), 3, &mut rng).unwrap();
        let f = FeatureVector::new(Array1::from_shape_fn(4, |_| rng.random::<f64>())).unwrap();
        let g_ = FeatureVector::new(Array1::from_shape_fn(4, |_| rng.random::<f64>())).unwrap();
        let state = fm.fuse(&f, &g_).unwrap();
        assert_eq!(state.z_in.len(), 8);
        assert_eq!(state.z_cf.len(), 4);
        assert_eq!(state.z_out.len(), 8);
        // z_in keeps the fixed order (mbranch, iebranch)
        for i in 0..4 {
            assert_eq!(state.z_in[i], f.values()[i]);
            assert_eq!(state.z_in[4 + i], g_.values()[i]);
        }

        // zero features with zero biases stay zero through the bottleneck
        fm.enc1.b.fill(0.0);
        fm.enc2.b.fill(0.0);
        fm.dec1.b.fill(0.0);
        fm.dec2.b.fill(0.0);
        let zero = FeatureVector::new(Array1::zeros(4)).unwrap();
        let state = fm.fuse(&zero, &zero).unwrap();
        assert!(state.z_cf.iter().all(|&v| v == 0.0));
        assert!(state.z_out.iter().all(|&v| v == 0.0));

        let bad = FeatureVector::new(Array1::zeros(5)).unwrap();
        assert!(fm.fuse(&bad, &zero).is_err());
    }

    #[test]
    fn bottleneck_contract_is_enforced() {
        let cfg = FusionConfig {
            feature_dim: 4,
            hidden: 8,
            bottleneck: 8, // == 2D, not a bottleneck
            dropout: 0.5,
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = FusionConfig { bottleneck: 7, ..cfg };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn rec_loss_cases() {
        let state = FusionState {
            z_in: ndarray::arr1(&[1.0, 0.0]),
            z_out: ndarray::arr1(&[1.0, 0.0]),
            z_cf: ndarray::arr1(&[0.0]),
        };
        assert_eq!(rec_loss(&state), 0.0);

        let state = FusionState {
            z_in: ndarray::arr1(&[1.0, 0.0]),
            z_out: ndarray::arr1(&[0.0, 0.0]),
            z_cf: ndarray::arr1(&[0.0]),
        };
        assert_eq!(rec_loss(&state), 1.0);

        // scaling the residual by 2 quadruples the loss
        let state2 = FusionState {
            z_in: ndarray::arr1(&[2.0, 0.0]),
            z_out: ndarray::arr1(&[0.0, 0.0]),
            z_cf: ndarray::arr1(&[0.0]),
        };
        assert_eq!(rec_loss(&state2), 4.0 * rec_loss(&state));
    }

    #[test]
    fn ifd_loss_cases() {
        let t = dist(&[1.0, 0.0]);
        let s = dist(&[0.5, 0.5]);
        let got = ifd_loss(&t, std::slice::from_ref(&s)).unwrap();
        assert!((got - 2f64.ln()).abs() < 1e-12);

        // identical students double the value
        let both = ifd_loss(&t, &[s.clone(), s.clone()]).unwrap();
        assert!((both - 2.0 * got).abs() < 1e-12);

        // students equal to the teacher give exactly zero
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_dist(&mut rng, 5);
        assert_eq!(ifd_loss(&t, &[t.clone(), t.clone()]).unwrap(), 0.0);

        // non-negative, strictly positive when any student differs
        for _ in 0..50 {
            let t = random_dist(&mut rng, 4);
            let s1 = random_dist(&mut rng, 4);
            let v = ifd_loss(&t, &[s1.clone()]).unwrap();
            assert!(v >= 0.0);
            if t.probs() != s1.probs() {
                assert!(v > 0.0);
            }
        }

        let bad = random_dist(&mut rng, 3);
        assert!(ifd_loss(&t, &[bad]).is_err());
    }

    #[test]
    fn ifd_graph_matches_pure_and_blocks_teacher_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = 3;
        let c = 4;
        let t_logits = Array2::from_shape_fn((b, c), |_| rng.random_range(-1.0..1.0)).into_dyn();
        let s_logits = Array2::from_shape_fn((b, c), |_| rng.random_range(-1.0..1.0)).into_dyn();

        let mut g = Graph::new();
        let tl = g.leaf(t_logits.clone());
        let sl = g.leaf(s_logits.clone());
        let tp = g.softmax(tl);
        let sp = g.softmax(sl);
        let loss = ifd_loss_graph(&mut g, tp, &[sp]);

        // batched graph value equals the mean of per-sample pure values
        let tv = g.value(tp).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let sv = g.value(sp).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut want = 0.0;
        for bi in 0..b {
            let td = IdentityDistribution::new(tv.row(bi).to_owned()).unwrap();
            let sd = IdentityDistribution::new(sv.row(bi).to_owned()).unwrap();
            want += ifd_loss(&td, std::slice::from_ref(&sd)).unwrap();
        }
        want /= b as f64;
        assert!((g.scalar_value(loss) - want).abs() < 1e-12);

        g.backward(loss);
        assert!(g.grad(tl).is_none(), "teacher logits must receive no gradient");
        let sg = g.grad(sl).expect("students receive gradient");
        assert!(sg.iter().any(|&v| v != 0.0));

        // student gradient against central differences
        let step = 1e-5;
        let eval = |sl_val: &ndarray::ArrayD<f64>| -> f64 {
            let mut g = Graph::new();
            let tl = g.leaf(t_logits.clone());
            let sl = g.leaf(sl_val.clone());
            let tp = g.softmax(tl);
            let sp = g.softmax(sl);
            let l = ifd_loss_graph(&mut g, tp, &[sp]);
            g.scalar_value(l)
        };
        for _ in 0..12 {
            let flat = rng.random_range(0..b * c);
            let mut plus = s_logits.clone();
            plus.as_slice_mut().unwrap()[flat] += step;
            let mut minus = s_logits.clone();
            minus.as_slice_mut().unwrap()[flat] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = sg.as_slice().unwrap()[flat];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(((a - fd) / denom).abs() < 1e-3, "analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn idm_loss_is_the_weighted_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probs = random_dist(&mut rng, 4);
        let teacher = random_dist(&mut rng, 4);
        let students = [random_dist(&mut rng, 4), random_dist(&mut rng, 4)];
        let state = FusionState {
            z_in: Array1::from_shape_fn(6, |_| rng.random::<f64>()),
            z_cf: Array1::from_shape_fn(3, |_| rng.random::<f64>()),
            z_out: Array1::from_shape_fn(6, |_| rng.random::<f64>()),
        };

        let cfg = DistillationConfig { lambda1: 0.1, lambda2: 0.1 };
        let got = idm_loss(&probs, 2, &state, &teacher, &students, &cfg).unwrap();
        let want = crate::branches::id_loss(std::slice::from_ref(&probs), &[2]).unwrap()
            + 0.1 * rec_loss(&state)
            + 0.1 * ifd_loss(&teacher, &students).unwrap();
        assert!((got - want).abs() < 1e-12);

        // degenerate weights reduce to the ID loss alone
        let cfg = DistillationConfig { lambda1: 0.0, lambda2: 0.0 };
        let got = idm_loss(&probs, 2, &state, &teacher, &students, &cfg).unwrap();
        let want = crate::branches::id_loss(std::slice::from_ref(&probs), &[2]).unwrap();
        assert_eq!(got, want);

        let bad = DistillationConfig { lambda1: -0.1, lambda2: 0.1 };
        assert!(idm_loss(&probs, 2, &state, &teacher, &students, &bad).is_err());
    }

    #[test]
    fn fusion_gradcheck_through_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut fm = FusionModule::init(FusionConfig::with_feature_dim(3), 3, &mut rng).unwrap();
        let f_mb = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0)).into_dyn();
        let f_ieb = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0)).into_dyn();

        let eval = |fm: &FusionModule| -> f64 {
            let mut g = Graph::new();
            let a = g.constant(f_mb.clone());
            let b = g.constant(f_ieb.clone());
            let l = fm.leaves(&mut g);
            let mut me = fm.clone();
            let nodes = me.forward_graph(&mut g, &l, a, b, false, None);
            let r = rec_loss_graph(&mut g, nodes.z_in, nodes.z_out);
            g.scalar_value(r)
        };

        let mut g = Graph::new();
        let a = g.constant(f_mb.clone());
        let b = g.constant(f_ieb.clone());
        let l = fm.leaves(&mut g);
        let mut me = fm.clone();
        let nodes = me.forward_graph(&mut g, &l, a, b, false, None);
        let r = rec_loss_graph(&mut g, nodes.z_in, nodes.z_out);
        g.backward(r);
        let analytic = g.grad(l.enc1.w).unwrap().clone();

        let step = 1e-5;
        for _ in 0..10 {
            let flat = rng.random_range(0..fm.enc1.w.len());
            let orig = fm.enc1.w.as_slice().unwrap()[flat];
            fm.enc1.w.as_slice_mut().unwrap()[flat] = orig + step;
            let up = eval(&fm);
            fm.enc1.w.as_slice_mut().unwrap()[flat] = orig - step;
            let down = eval(&fm);
            fm.enc1.w.as_slice_mut().unwrap()[flat] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic.as_slice().unwrap()[flat];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(((a - fd) / denom).abs() < 1e-3, "analytic {a} vs fd {fd}");
        }
    }
}
