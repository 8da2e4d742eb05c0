//! Self-supervised enhancement losses: spatial consistency, exposure
//! control, illumination smoothness and color constancy, plus their
//! weighted combination.
//!
//! Each loss exists in two forms that share one implementation: a graph
//! builder operating on `[B, ...]` nodes (batch mean), and a plain
//! per-image function that wraps a single-element batch and returns the
//! scalar.

use ndarray::Array4;

use crate::autodiff::{Graph, NodeId};
use crate::enhancer::CurveParameterMaps;
use crate::error::{Error, Result};
use crate::image::Image;

/// Region sizes, exposure target and combination weights.
#[derive(Debug, Clone)]
pub struct EnhancementLossConfig {
    /// Side of the spatial-consistency pooling regions (pixels).
    pub spa_region: usize,
    /// Side of the exposure-control pooling regions (pixels).
    pub exp_region: usize,
    /// Well-exposed intensity the region means are pulled towards.
    pub exposure_target: f64,
    /// Square the exposure distance instead of taking its absolute value.
    pub exp_squared: bool,
    pub w_spa: f64,
    pub w_exp: f64,
    pub w_tva: f64,
    pub w_col: f64,
}

impl Default for EnhancementLossConfig {
    fn default() -> Self {
        Self {
            spa_region: 4,
            exp_region: 16,
            exposure_target: 0.6,
            exp_squared: false,
            w_spa: 1.0,
            w_exp: 1.0,
            w_tva: 1.0,
            w_col: 1.0,
        }
    }
}

impl EnhancementLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spa_region < 1 || self.exp_region < 1 {
            return Err(Error::Config("loss region sizes must be >= 1".into()));
        }
        if !(self.exposure_target > 0.0 && self.exposure_target < 1.0) {
            return Err(Error::Config(format!(
                "exposure target must lie in (0,1), got {}",
                self.exposure_target
            )));
        }
        for (name, w) in [
            ("w_spa", self.w_spa),
            ("w_exp", self.w_exp),
            ("w_tva", self.w_tva),
            ("w_col", self.w_col),
        ] {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Spatial consistency over `region`-sized tiles of the channel-averaged
/// images: for every ordered pair of axis-aligned neighboring regions the
/// change in absolute contrast between enhanced and original is squared;
/// the sum is divided by the region count (and the batch size).
///
/// Boundary regions simply have fewer neighbors; trailing pixels that do
/// not fill a region are ignored.
pub fn spa_graph(g: &mut Graph, original: NodeId, enhanced: NodeId, region: usize) -> NodeId {
    let y0 = g.mean_channels(original);
    let yn = g.mean_channels(enhanced);
    let p0 = g.avg_pool(y0, region);
    let pn = g.avg_pool(yn, region);
    let shape = g.value(p0).shape().to_vec();
    let (b, mh, mw) = (shape[0], shape[2], shape[3]);
    let mut terms: Vec<NodeId> = Vec::new();
    if mw >= 2 {
        let dn = g.diff_x(pn);
        let d0 = g.diff_x(p0);
        let an = g.abs(dn);
        let a0 = g.abs(d0);
        let d = g.sub(an, a0);
        let sq = g.square(d);
        terms.push(g.sum_all(sq));
    }
    if mh >= 2 {
        let dn = g.diff_y(pn);
        let d0 = g.diff_y(p0);
        let an = g.abs(dn);
        let a0 = g.abs(d0);
        let d = g.sub(an, a0);
        let sq = g.square(d);
        terms.push(g.sum_all(sq));
    }
    let total = match terms.len() {
        0 => return g.constant(ndarray::ArrayD::zeros(vec![])),
        1 => terms[0],
        _ => g.add(terms[0], terms[1]),
    };
    // each unordered neighbor pair appears once per direction; the ordered
    // sum counts it twice
    g.scale(total, 2.0 / (b * mh * mw) as f64)
}

/// Exposure control: mean absolute (or squared) distance of the
/// channel-averaged region means from the target intensity.
///
/// The target is subtracted before averaging (equivalent by linearity),
/// so an image exactly at the target yields an exact zero.
pub fn exp_graph(
    g: &mut Graph,
    enhanced: NodeId,
    region: usize,
    target: f64,
    squared: bool,
) -> NodeId {
    let d = g.add_const(enhanced, -target);
    let yn = g.mean_channels(d);
    let pn = g.avg_pool(yn, region);
    let dist = if squared { g.square(pn) } else { g.abs(pn) };
    g.mean_all(dist)
}

/// Illumination smoothness of the stacked curve maps `[B, 3·N, H, W]`:
/// per channel map, the mean absolute forward differences in x and y are
/// summed and squared; channel terms are summed and divided by the
/// iteration count `N` (and the batch size).
pub fn tva_graph(g: &mut Graph, stacked_maps: NodeId, n_iter: usize) -> NodeId {
    let shape = g.value(stacked_maps).shape().to_vec();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let zeros2 = || ndarray::ArrayD::zeros(vec![b, c]);
    let mx = if w >= 2 {
        let d = g.diff_x(stacked_maps);
        let a = g.abs(d);
        g.mean_spatial(a)
    } else {
        g.constant(zeros2())
    };
    let my = if h >= 2 {
        let d = g.diff_y(stacked_maps);
        let a = g.abs(d);
        g.mean_spatial(a)
    } else {
        g.constant(zeros2())
    };
    let s = g.add(mx, my);
    let sq = g.square(s);
    let total = g.sum_all(sq);
    g.scale(total, 1.0 / (n_iter * b) as f64)
}

/// Gray-world color constancy: squared pairwise differences of the global
/// channel means.
pub fn col_graph(g: &mut Graph, enhanced: NodeId) -> NodeId {
    let b = g.value(enhanced).shape()[0];
    let means = g.mean_spatial(enhanced); // [B, 3]
    let cr = g.slice1(means, 0, 1);
    let cg = g.slice1(means, 1, 2);
    let cb = g.slice1(means, 2, 3);
    let mut acc: Option<NodeId> = None;
    for (a, b_) in [(cr, cg), (cr, cb), (cg, cb)] {
        let d = g.sub(a, b_);
        let sq = g.square(d);
        let s = g.sum_all(sq);
        acc = Some(match acc {
            Some(prev) => g.add(prev, s),
            None => s,
        });
    }
    g.scale(acc.unwrap(), 1.0 / b as f64)
}

/// The weighted combination; returns the total and the four unweighted
/// component nodes `(spa, exp, tva, col)`.
pub fn dce_graph(
    g: &mut Graph,
    original: NodeId,
    enhanced: NodeId,
    stacked_maps: NodeId,
    n_iter: usize,
    cfg: &EnhancementLossConfig,
) -> (NodeId, [NodeId; 4]) {
    let spa = spa_graph(g, original, enhanced, cfg.spa_region);
    let exp = exp_graph(g, enhanced, cfg.exp_region, cfg.exposure_target, cfg.exp_squared);
    let tva = tva_graph(g, stacked_maps, n_iter);
    let col = col_graph(g, enhanced);
    let ws = g.scale(spa, cfg.w_spa);
    let we = g.scale(exp, cfg.w_exp);
    let wt = g.scale(tva, cfg.w_tva);
    let wc = g.scale(col, cfg.w_col);
    let s1 = g.add(ws, we);
    let s2 = g.add(wt, wc);
    let total = g.add(s1, s2);
    (total, [spa, exp, tva, col])
}

fn single_image_node(g: &mut Graph, img: &Image) -> NodeId {
    let (h, w) = (img.height(), img.width());
    let mut t = Array4::zeros((1, 3, h, w));
    t.index_axis_mut(ndarray::Axis(0), 0).assign(&img.data());
    g.constant(t.into_dyn())
}

fn stacked_maps_node(g: &mut Graph, maps: &CurveParameterMaps) -> NodeId {
    let (h, w) = (maps.height(), maps.width());
    let n = maps.n_iter();
    let mut t = Array4::zeros((1, 3 * n, h, w));
    for (i, m) in maps.maps().iter().enumerate() {
        t.slice_mut(ndarray::s![0, 3 * i..3 * (i + 1), .., ..]).assign(m);
    }
    g.constant(t.into_dyn())
}

fn check_region(img: &Image, region: usize, what: &str) -> Result<()> {
    if img.height() < region || img.width() < region {
        return Err(Error::Parameter(format!(
            "{what}: image {}x{} smaller than one {region}x{region} region",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Spatial consistency of one enhanced image against its original.
pub fn loss_spa(original: &Image, enhanced: &Image, cfg: &EnhancementLossConfig) -> Result<f64> {
    if (original.height(), original.width()) != (enhanced.height(), enhanced.width()) {
        return Err(Error::Dimension("spatial loss: image sizes differ".into()));
    }
    check_region(original, cfg.spa_region, "spatial loss")?;
    let mut g = Graph::new();
    let i0 = single_image_node(&mut g, original);
    let i_n = single_image_node(&mut g, enhanced);
    let l = spa_graph(&mut g, i0, i_n, cfg.spa_region);
    Ok(g.scalar_value(l))
}

/// Exposure control for one enhanced image.
pub fn loss_exp(enhanced: &Image, cfg: &EnhancementLossConfig) -> Result<f64> {
    check_region(enhanced, cfg.exp_region, "exposure loss")?;
    let mut g = Graph::new();
    let i_n = single_image_node(&mut g, enhanced);
    let l = exp_graph(&mut g, i_n, cfg.exp_region, cfg.exposure_target, cfg.exp_squared);
    Ok(g.scalar_value(l))
}

/// Illumination smoothness of one set of curve maps.
pub fn loss_tva(maps: &CurveParameterMaps) -> f64 {
    let mut g = Graph::new();
    let m = stacked_maps_node(&mut g, maps);
    let l = tva_graph(&mut g, m, maps.n_iter());
    g.scalar_value(l)
}

/// Color constancy of one enhanced image.
pub fn loss_col(enhanced: &Image) -> f64 {
    let mut g = Graph::new();
    let i_n = single_image_node(&mut g, enhanced);
    let l = col_graph(&mut g, i_n);
    g.scalar_value(l)
}

/// The combined enhancement loss for one image.
pub fn loss_dce(
    original: &Image,
    enhanced: &Image,
    maps: &CurveParameterMaps,
    cfg: &EnhancementLossConfig,
) -> Result<f64> {
    if (original.height(), original.width()) != (enhanced.height(), enhanced.width()) {
        return Err(Error::Dimension("combined loss: image sizes differ".into()));
    }
    check_region(original, cfg.spa_region, "spatial loss")?;
    check_region(enhanced, cfg.exp_region, "exposure loss")?;
    let mut g = Graph::new();
    let i0 = single_image_node(&mut g, original);
    let i_n = single_image_node(&mut g, enhanced);
    let m = stacked_maps_node(&mut g, maps);
    let (l, _) = dce_graph(&mut g, i0, i_n, m, maps.n_iter(), cfg);
    Ok(g.scalar_value(l))
}
