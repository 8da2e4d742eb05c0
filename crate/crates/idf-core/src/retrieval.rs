//! Inference-time feature assembly and cross-camera retrieval evaluation:
//! query/gallery split construction, distance computation and CMC /
//! mean-average-precision scoring.

use rand::seq::SliceRandom;

use crate::branches::FeatureVector;
use crate::dataset::PersonRecord;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::IdfModel;
use crate::rng::sub_rng;

/// Identity and camera labels carried through evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordMeta {
    pub identity: u32,
    pub camera: u32,
    pub frame: u32,
}

impl RecordMeta {
    pub fn of(rec: &PersonRecord) -> Self {
        Self {
            identity: rec.identity,
            camera: rec.camera,
            frame: rec.frame,
        }
    }
}

/// Gallery entries with their assembled feature vectors, in insertion
/// order (ties in distance are broken by this order).
#[derive(Debug, Clone, Default)]
pub struct GalleryIndex {
    pub entries: Vec<(RecordMeta, Vec<f64>)>,
}

/// Cross-camera retrieval split: probe (query) and gallery records.
#[derive(Debug, Clone)]
pub struct RetrievalSplit {
    pub query: Vec<PersonRecord>,
    pub gallery: Vec<PersonRecord>,
    /// Identities dropped because they appear under a single camera.
    pub excluded_single_camera: usize,
}

/// Samples `probes_per_view` probes from every (identity, camera) group
/// that has at least that many images; the remainder forms the gallery.
///
/// Identities visible under only one camera are excluded entirely and
/// counted. Deterministic in `seed`: groups are processed in sorted
/// (identity, camera) order and records within a group in frame order.
pub fn build_split(records: &[PersonRecord], probes_per_view: usize, seed: u64) -> Result<RetrievalSplit> {
    if probes_per_view == 0 {
        return Err(Error::Parameter("probes_per_view must be >= 1".into()));
    }
    let mut by_group: std::collections::BTreeMap<(u32, u32), Vec<&PersonRecord>> =
        std::collections::BTreeMap::new();
    let mut cameras_per_identity: std::collections::BTreeMap<u32, std::collections::BTreeSet<u32>> =
        std::collections::BTreeMap::new();
    for r in records {
        by_group.entry((r.identity, r.camera)).or_default().push(r);
        cameras_per_identity.entry(r.identity).or_default().insert(r.camera);
    }

    let mut split = RetrievalSplit {
        query: Vec::new(),
        gallery: Vec::new(),
        excluded_single_camera: 0,
    };
    let single_camera: std::collections::BTreeSet<u32> = cameras_per_identity
        .iter()
        .filter(|(_, cams)| cams.len() < 2)
        .map(|(&id, _)| id)
        .collect();
    split.excluded_single_camera = single_camera.len();

    for ((identity, camera), mut group) in by_group {
        if single_camera.contains(&identity) {
            continue;
        }
        group.sort_by_key(|r| r.frame);
        if group.len() >= probes_per_view {
            let mut order: Vec<usize> = (0..group.len()).collect();
            order.shuffle(&mut sub_rng(seed, &[5, identity as u64, camera as u64]));
            let mut probe_idx: Vec<usize> = order[..probes_per_view].to_vec();
            probe_idx.sort_unstable();
            let probe_set: std::collections::BTreeSet<usize> = probe_idx.iter().copied().collect();
            for (i, r) in group.into_iter().enumerate() {
                if probe_set.contains(&i) {
                    split.query.push(r.clone());
                } else {
                    split.gallery.push(r.clone());
                }
            }
        } else {
            for r in group {
                split.gallery.push(r.clone());
            }
        }
    }
    Ok(split)
}

/// Distance metric for similarity ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Config(format!(
                "unknown metric `{other}` (expected cosine|euclidean)"
            ))),
        }
    }
}

/// Cosine distance `1 − ⟨a,b⟩/(‖a‖‖b‖)` or Euclidean distance `‖a−b‖`.
pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "distance between {}-dim and {}-dim vectors",
            a.len(),
            b.len()
        )));
    }
    match metric {
        Metric::Euclidean => {
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b) {
                acc += (x - y) * (x - y);
            }
            Ok(acc.sqrt())
        }
        Metric::Cosine => {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Parameter(
                    "cosine distance is undefined for zero vectors".into(),
                ));
            }
            Ok(1.0 - dot / (na.sqrt() * nb.sqrt()))
        }
    }
}

/// Retrieval quality over a query set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// Queries skipped because no valid cross-camera positive exists.
    pub skipped: usize,
    /// Queries actually scored.
    pub evaluated: usize,
}

/// Scores a query set against a gallery.
///
/// For each query the gallery is ranked by ascending distance with stable
/// ties broken by gallery insertion order; entries sharing both identity
/// and camera with the query are excluded. Rank-k counts queries whose
/// first correct match appears within the top k; average precision is
/// accumulated over each query's valid positives. Queries with no valid
/// positive are skipped and counted.
pub fn evaluate(
    queries: &[(RecordMeta, Vec<f64>)],
    gallery: &[(RecordMeta, Vec<f64>)],
    metric: Metric,
) -> Result<EvalMetrics> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Parameter("evaluation needs non-empty query and gallery sets".into()));
    }
    let mut hits = [0u64; 3]; // rank-1, rank-5, rank-10
    let mut ap_sum = 0.0;
    let mut skipped = 0usize;
    let mut evaluated = 0usize;

    for (qmeta, qfeat) in queries {
        // rank the valid gallery (same-id same-camera entries excluded)
        let mut order: Vec<(f64, usize, bool)> = Vec::with_capacity(gallery.len());
        let mut positives = 0usize;
        for (gi, (gmeta, gfeat)) in gallery.iter().enumerate() {
            if gmeta.identity == qmeta.identity && gmeta.camera == qmeta.camera {
                continue;
            }
            let is_positive = gmeta.identity == qmeta.identity;
            positives += is_positive as usize;
            order.push((distance(qfeat, gfeat, metric)?, gi, is_positive));
        }
        if positives == 0 {
            skipped += 1;
            continue;
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut first_correct = None;
        let mut ap = 0.0;
        let mut seen_positives = 0usize;
        for (rank, (_, _, is_positive)) in order.iter().enumerate() {
            if *is_positive {
                if first_correct.is_none() {
                    first_correct = Some(rank);
                }
                seen_positives += 1;
                ap += seen_positives as f64 / (rank + 1) as f64;
            }
        }
        let first = first_correct.expect("positives exist");
        if first < 1 {
            hits[0] += 1;
        }
        if first < 5 {
            hits[1] += 1;
        }
        if first < 10 {
            hits[2] += 1;
        }
        ap_sum += ap / positives as f64;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Protocol(
            "every query was skipped: no cross-camera positives in the gallery".into(),
        ));
    }
    let n = evaluated as f64;
    Ok(EvalMetrics {
        rank1: hits[0] as f64 / n,
        rank5: hits[1] as f64 / n,
        rank10: hits[2] as f64 / n,
        map: ap_sum / n,
        skipped,
        evaluated,
    })
}

/// Assembles the inference feature for one image: both branch embeddings
/// and the bottleneck code, concatenated as
/// `(f_mbranch, f_iebranch, z_cf)` — dimension `2D + D_cf`.
pub fn assemble_features(model: &IdfModel, img: &Image) -> Result<Vec<f64>> {
    let (f_mb, _) = model.mbranch.forward(img)?;
    let (_enhanced, f_ieb, _) =
        crate::branches::iebranch_forward(&model.enhancer, &model.iebranch, img)?;
    let state = model.idm.fuse(&f_mb, &f_ieb)?;
    let mut out = Vec::with_capacity(2 * f_mb.dim() + state.z_cf.len());
    out.extend(f_mb.values().iter());
    out.extend(f_ieb.values().iter());
    out.extend(state.z_cf.iter());
    Ok(out)
}

/// Like [`assemble_features`] but returning the slices for verification.
pub fn assemble_features_parts(
    model: &IdfModel,
    img: &Image,
) -> Result<(FeatureVector, FeatureVector, Vec<f64>)> {
    let (f_mb, _) = model.mbranch.forward(img)?;
    let (_enhanced, f_ieb, _) =
        crate::branches::iebranch_forward(&model.enhancer, &model.iebranch, img)?;
    let state = model.idm.fuse(&f_mb, &f_ieb)?;
    Ok((f_mb, f_ieb, state.z_cf.to_vec()))
}

/// Builds the gallery index for a record set.
pub fn index_records(model: &IdfModel, records: &[PersonRecord]) -> Result<GalleryIndex> {
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        entries.push((RecordMeta::of(rec), assemble_features(model, &rec.image)?));
    }
    Ok(GalleryIndex { entries })
}

/// Top-k ranked gallery metadata for one query (for qualitative dumps).
pub fn ranked_list(
    query: &(RecordMeta, Vec<f64>),
    gallery: &[(RecordMeta, Vec<f64>)],
    metric: Metric,
    k: usize,
) -> Result<Vec<(RecordMeta, f64)>> {
    let mut order: Vec<(f64, usize)> = Vec::new();
    for (gi, (gmeta, gfeat)) in gallery.iter().enumerate() {
        if gmeta.identity == query.0.identity && gmeta.camera == query.0.camera {
            continue;
        }
        order.push((distance(&query.1, gfeat, metric)?, gi));
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|(d, gi)| (gallery[gi].0, d))
        .collect())
}
