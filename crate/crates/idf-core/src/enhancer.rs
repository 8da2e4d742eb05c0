//! The illumination enhancement network and the iterative pixel-wise
//! curve mapping it drives.
//!
//! A seven-layer fully-convolutional estimator with symmetric skip
//! concatenation emits, per pixel and channel, one curve coefficient in
//! `(-1, 1)` for each of `n_iter` iterations; the quadratic adjustment
//! `I ← I + A ⊙ I ⊙ (1 − I)` is then applied `n_iter` times. With
//! coefficients in `[-1, 1]` every iterate provably stays in `[0, 1]`
//! (the extremes are `I²` at `A = −1` and `1 − (1 − I)²` at `A = 1`).

use ndarray::{Array3, Array4, ArrayD, Axis};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Conv2d, Conv2dLeaves, ParamMut, ParamRef};

/// Architecture of the curve estimator.
#[derive(Debug, Clone)]
pub struct EnhancerConfig {
    /// Hidden channels per convolutional layer.
    pub width: usize,
    /// Number of curve iterations (and per-channel coefficient maps).
    pub n_iter: usize,
    /// Zero-initialize the final layer so the whole stage starts as the
    /// identity mapping.
    pub zero_init_final: bool,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self {
            width: 32,
            n_iter: 8,
            zero_init_final: false,
            init_std: 0.02,
        }
    }
}

impl EnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("enhancer width must be >= 1".into()));
        }
        if self.n_iter == 0 {
            return Err(Error::Config("enhancer needs at least one iteration".into()));
        }
        if !(self.init_std > 0.0) || !self.init_std.is_finite() {
            return Err(Error::Config(format!(
                "enhancer init std must be positive, got {}",
                self.init_std
            )));
        }
        Ok(())
    }
}

/// Per-iteration, per-pixel, per-channel curve coefficients in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveParameterMaps {
    maps: Vec<Array3<f64>>,
}

impl CurveParameterMaps {
    pub fn new(maps: Vec<Array3<f64>>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Parameter("need at least one curve map".into()));
        }
        let dim = maps[0].dim();
        if dim.0 != 3 {
            return Err(Error::Dimension(format!(
                "curve maps must have 3 channels, got {}",
                dim.0
            )));
        }
        for m in &maps {
            if m.dim() != dim {
                return Err(Error::Dimension("curve maps disagree on shape".into()));
            }
            for &v in m {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Contract(format!(
                        "curve coefficient {v} outside [-1, 1]"
                    )));
                }
            }
        }
        Ok(Self { maps })
    }

    /// Splits a stacked `[3·n, H, W]` tensor into `n` maps, iteration-major.
    pub fn from_stacked(stacked: &Array3<f64>, n_iter: usize) -> Result<Self> {
        let (c, _, _) = stacked.dim();
        if c != 3 * n_iter {
            return Err(Error::Dimension(format!(
                "expected {} stacked channels, got {c}",
                3 * n_iter
            )));
        }
        let maps = (0..n_iter)
            .map(|n| {
                stacked
                    .slice(ndarray::s![3 * n..3 * (n + 1), .., ..])
                    .to_owned()
            })
            .collect();
        Self::new(maps)
    }

    /// All-zero maps (the identity enhancement).
    pub fn zeros(n_iter: usize, height: usize, width: usize) -> Self {
        Self {
            maps: (0..n_iter).map(|_| Array3::zeros((3, height, width))).collect(),
        }
    }

    pub fn n_iter(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[Array3<f64>] {
        &self.maps
    }

    pub fn height(&self) -> usize {
        self.maps[0].dim().1
    }

    pub fn width(&self) -> usize {
        self.maps[0].dim().2
    }
}

/// One curve adjustment `I + A ⊙ I ⊙ (1 − I)`, clamped against float dust.
pub fn curve_step(img: &Image, map: &Array3<f64>) -> Result<Image> {
    let (c, h, w) = map.dim();
    if (c, h, w) != (3, img.height(), img.width()) {
        return Err(Error::Dimension(format!(
            "curve map {c}x{h}x{w} does not match image 3x{}x{}",
            img.height(),
            img.width()
        )));
    }
    for &a in map {
        if !(-1.0..=1.0).contains(&a) {
            return Err(Error::Contract(format!("curve coefficient {a} outside [-1, 1]")));
        }
    }
    let mut out = img.data().to_owned();
    ndarray::Zip::from(&mut out).and(map).for_each(|i, &a| {
        *i = (*i + a * *i * (1.0 - *i)).clamp(0.0, 1.0);
    });
    Image::new(out)
}

/// Applies [`curve_step`] once per map, threading the intermediate image.
pub fn enhance(img: &Image, maps: &CurveParameterMaps) -> Result<Image> {
    let mut cur = img.clone();
    for map in maps.maps() {
        cur = curve_step(&cur, map)?;
    }
    Ok(cur)
}

/// The trainable curve estimator.
///
/// Layers 1–6 are width-`w` 3×3 stride-1 convolutions with rectifier
/// activations; layers 5–7 consume skip concatenations with layers 3, 2
/// and 1 respectively; layer 7 emits `3·n_iter` channels squashed by tanh.
#[derive(Debug, Clone)]
pub struct CurveEnhancer {
    pub config: EnhancerConfig,
    convs: Vec<Conv2d>,
}

pub struct EnhancerLeaves {
    convs: Vec<Conv2dLeaves>,
}

impl EnhancerLeaves {
    pub fn ids(&self) -> Vec<crate::autodiff::NodeId> {
        self.convs.iter().flat_map(|c| c.ids()).collect()
    }
}

impl CurveEnhancer {
    pub fn init(config: EnhancerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let std = config.init_std;
        let mut convs = vec![Conv2d::gaussian_init(3, w, 3, 1, std, rng)];
        for _ in 0..3 {
            convs.push(Conv2d::gaussian_init(w, w, 3, 1, std, rng));
        }
        convs.push(Conv2d::gaussian_init(2 * w, w, 3, 1, std, rng));
        convs.push(Conv2d::gaussian_init(2 * w, w, 3, 1, std, rng));
        let mut last = Conv2d::gaussian_init(2 * w, 3 * config.n_iter, 3, 1, std, rng);
        if config.zero_init_final {
            last.zero_fill();
        }
        convs.push(last);
        Ok(Self { config, convs })
    }

    pub fn leaves(&self, g: &mut Graph) -> EnhancerLeaves {
        EnhancerLeaves {
            convs: self.convs.iter().map(|c| c.leaves(g)).collect(),
        }
    }

    /// Builds the estimator on the graph: `[B, 3, H, W]` → tanh-squashed
    /// stacked maps `[B, 3·n_iter, H, W]`.
    pub fn forward_maps(&self, g: &mut Graph, l: &EnhancerLeaves, x: NodeId) -> NodeId {
        let c1 = self.convs[0].forward(g, &l.convs[0], x);
        let a1 = g.relu(c1);
        let c2 = self.convs[1].forward(g, &l.convs[1], a1);
        let a2 = g.relu(c2);
        let c3 = self.convs[2].forward(g, &l.convs[2], a2);
        let a3 = g.relu(c3);
        let c4 = self.convs[3].forward(g, &l.convs[3], a3);
        let a4 = g.relu(c4);
        let in5 = g.concat1(&[a4, a3]);
        let c5 = self.convs[4].forward(g, &l.convs[4], in5);
        let a5 = g.relu(c5);
        let in6 = g.concat1(&[a5, a2]);
        let c6 = self.convs[5].forward(g, &l.convs[5], in6);
        let a6 = g.relu(c6);
        let in7 = g.concat1(&[a6, a1]);
        let c7 = self.convs[6].forward(g, &l.convs[6], in7);
        g.tanh(c7)
    }

    /// Applies the stacked maps iteratively on the graph.
    pub fn apply_curves(g: &mut Graph, img: NodeId, stacked_maps: NodeId, n_iter: usize) -> NodeId {
        let mut cur = img;
        for n in 0..n_iter {
            let map = g.slice1(stacked_maps, 3 * n, 3 * (n + 1));
            cur = g.curve_step(cur, map);
        }
        cur
    }

    /// Estimates the curve maps for one image (evaluation mode).
    pub fn estimate_curves(&self, img: &Image) -> Result<CurveParameterMaps> {
        self.check_finite()?;
        let mut g = Graph::new();
        let x = self.image_batch_node(&mut g, &[img]);
        let l = self.leaves(&mut g);
        let maps = self.forward_maps(&mut g, &l, x);
        let v = g.value(maps);
        let stacked = v
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .index_axis(Axis(0), 0)
            .to_owned();
        CurveParameterMaps::from_stacked(&stacked, self.config.n_iter)
    }

    /// Full enhancement of one image: estimate curves, then apply them.
    pub fn enhance_image(&self, img: &Image) -> Result<(Image, CurveParameterMaps)> {
        let maps = self.estimate_curves(img)?;
        Ok((enhance(img, &maps)?, maps))
    }

    /// Packs images into a constant `[B, 3, H, W]` node.
    pub fn image_batch_node(&self, g: &mut Graph, imgs: &[&Image]) -> NodeId {
        g.constant(image_batch(imgs))
    }

    fn check_finite(&self) -> Result<()> {
        for conv in &self.convs {
            if conv.w.iter().chain(conv.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::State(
                    "enhancer parameters contain non-finite values".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.collect(&format!("{prefix}.conv{}", i + 1), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.collect_mut(&format!("{prefix}.conv{}", i + 1), out);
        }
    }
}

/// Stacks images into a `[B, 3, H, W]` tensor.
pub fn image_batch(imgs: &[&Image]) -> ArrayD<f64> {
    assert!(!imgs.is_empty());
    let (h, w) = (imgs[0].height(), imgs[0].width());
    let mut out = Array4::zeros((imgs.len(), 3, h, w));
    for (bi, img) in imgs.iter().enumerate() {
        assert_eq!((img.height(), img.width()), (h, w), "mixed image sizes in batch");
        out.index_axis_mut(Axis(0), bi).assign(&img.data());
    }
    out.into_dyn()
}
