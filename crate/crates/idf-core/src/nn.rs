//! Trainable layer primitives: parameter storage, deterministic
//! initialization and graph builders.
//!
//! Parameters are plain `ArrayD<f64>` tensors owned by layer structs; each
//! training step copies them into graph leaves, and the optimizer writes
//! updates back through the named registry (see [`collect`] /
//! [`collect_mut`] on each layer).

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId};

/// A named parameter reference; `trainable` distinguishes optimizer-managed
/// tensors from running-statistic buffers.
pub type ParamRef<'a> = (String, &'a ArrayD<f64>, bool);
pub type ParamMut<'a> = (String, &'a mut ArrayD<f64>, bool);

pub fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(shape.to_vec(), || normal.sample(rng))
}

/// He-style fan-in scaled Gaussian, for layers followed by a rectifier.
pub fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    gaussian(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Same-padded square convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
    pub stride: usize,
}

pub struct Conv2dLeaves {
    pub w: NodeId,
    pub b: NodeId,
}

impl Conv2dLeaves {
    /// Leaf ids in the same order as [`Conv2d::collect`]'s trainable entries.
    pub fn ids(&self) -> Vec<NodeId> {
        vec![self.w, self.b]
    }
}

impl Conv2d {
    pub fn gaussian_init(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: gaussian(&[cout, cin, k, k], std, rng),
            b: ArrayD::zeros(vec![cout]),
            stride,
        }
    }

    pub fn he_init(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: he(&[cout, cin, k, k], cin * k * k, rng),
            b: ArrayD::zeros(vec![cout]),
            stride,
        }
    }

    pub fn zeros(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            w: ArrayD::zeros(vec![cout, cin, k, k]),
            b: ArrayD::zeros(vec![cout]),
            stride,
        }
    }

    pub fn zero_fill(&mut self) {
        self.w.fill(0.0);
        self.b.fill(0.0);
    }

    pub fn leaves(&self, g: &mut Graph) -> Conv2dLeaves {
        Conv2dLeaves {
            w: g.leaf(self.w.clone()),
            b: g.leaf(self.b.clone()),
        }
    }

    pub fn forward(&self, g: &mut Graph, l: &Conv2dLeaves, x: NodeId) -> NodeId {
        g.conv2d(x, l.w, l.b, self.stride)
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push((format!("{prefix}.w"), &self.w, true));
        out.push((format!("{prefix}.b"), &self.b, true));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push((format!("{prefix}.w"), &mut self.w, true));
        out.push((format!("{prefix}.b"), &mut self.b, true));
    }
}

/// Fully-connected layer `x · wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
}

pub struct LinearLeaves {
    pub w: NodeId,
    pub b: NodeId,
}

impl LinearLeaves {
    pub fn ids(&self) -> Vec<NodeId> {
        vec![self.w, self.b]
    }
}

impl Linear {
    pub fn he_init(din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: he(&[dout, din], din, rng),
            b: ArrayD::zeros(vec![dout]),
        }
    }

    pub fn zeros(din: usize, dout: usize) -> Self {
        Self {
            w: ArrayD::zeros(vec![dout, din]),
            b: ArrayD::zeros(vec![dout]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn leaves(&self, g: &mut Graph) -> LinearLeaves {
        LinearLeaves {
            w: g.leaf(self.w.clone()),
            b: g.leaf(self.b.clone()),
        }
    }

    pub fn forward(&self, g: &mut Graph, l: &LinearLeaves, x: NodeId) -> NodeId {
        g.linear(x, l.w, l.b)
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push((format!("{prefix}.w"), &self.w, true));
        out.push((format!("{prefix}.b"), &self.b, true));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push((format!("{prefix}.w"), &mut self.w, true));
        out.push((format!("{prefix}.b"), &mut self.b, true));
    }
}

/// 1-d batch normalization with running statistics.
///
/// Training mode normalizes by batch statistics and folds them into the
/// running buffers (momentum 0.1, unbiased running variance); evaluation
/// mode uses the running buffers and is deterministic.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ArrayD<f64>,
    pub beta: ArrayD<f64>,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub momentum: f64,
}

pub struct BatchNorm1dLeaves {
    pub gamma: NodeId,
    pub beta: NodeId,
}

impl BatchNorm1dLeaves {
    pub fn ids(&self) -> Vec<NodeId> {
        vec![self.gamma, self.beta]
    }
}

impl BatchNorm1d {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: ArrayD::ones(vec![dim]),
            beta: ArrayD::zeros(vec![dim]),
            running_mean: ArrayD::zeros(vec![dim]),
            running_var: ArrayD::ones(vec![dim]),
            momentum: 0.1,
        }
    }

    pub fn leaves(&self, g: &mut Graph) -> BatchNorm1dLeaves {
        BatchNorm1dLeaves {
            gamma: g.leaf(self.gamma.clone()),
            beta: g.leaf(self.beta.clone()),
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        l: &BatchNorm1dLeaves,
        x: NodeId,
        training: bool,
    ) -> NodeId {
        if training {
            // fold this batch's statistics into the running buffers
            let xv = g
                .value(x)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("batch norm input 2d");
            let bsz = xv.nrows();
            let mean = xv.mean_axis(ndarray::Axis(0)).unwrap();
            let mut var = Array1::<f64>::zeros(xv.ncols());
            for row in xv.rows() {
                for (vi, (&v, &m)) in row.iter().zip(mean.iter()).enumerate() {
                    var[vi] += (v - m) * (v - m);
                }
            }
            let biased = var.mapv(|v| v / bsz as f64);
            let unbiased = if bsz > 1 {
                var.mapv(|v| v / (bsz - 1) as f64)
            } else {
                biased.clone()
            };
            let m = self.momentum;
            ndarray::Zip::from(&mut self.running_mean)
                .and(&mean.into_dyn())
                .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
            ndarray::Zip::from(&mut self.running_var)
                .and(&unbiased.into_dyn())
                .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
            g.batch_norm(x, l.gamma, l.beta, None)
        } else {
            let rm = self
                .running_mean
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned();
            let rv = self
                .running_var
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned();
            g.batch_norm(x, l.gamma, l.beta, Some((&rm, &rv)))
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push((format!("{prefix}.gamma"), &self.gamma, true));
        out.push((format!("{prefix}.beta"), &self.beta, true));
        out.push((format!("{prefix}.running_mean"), &self.running_mean, false));
        out.push((format!("{prefix}.running_var"), &self.running_var, false));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma, true));
        out.push((format!("{prefix}.beta"), &mut self.beta, true));
        out.push((format!("{prefix}.running_mean"), &mut self.running_mean, false));
        out.push((format!("{prefix}.running_var"), &mut self.running_var, false));
    }
}

/// Inverted-dropout keep mask: entries are 0 with probability `rate`,
/// otherwise `1/(1-rate)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate in [0,1)");
    let keep = 1.0 - rate;
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}
