//! Dataset records, the Market-style file naming convention, manifest I/O
//! and the benchmark-style statistics (illumination / scale binning).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{self, Image};

/// One ingested sample: identity and camera labels plus the resized image.
#[derive(Debug, Clone)]
pub struct PersonRecord {
    pub identity: u32,
    pub camera: u32,
    pub frame: u32,
    /// Height in pixels of the raster before ingestion resizing.
    pub original_height: u32,
    /// Resized to 3×256×128.
    pub image: Image,
}

/// Illumination bin on the 0–255 mean-lightness scale.
///
/// Low is below 255/10, High above 255/5, Medium in between; values exactly
/// on a threshold fall in Medium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IlluminationLevel {
    Low,
    Medium,
    High,
}

impl fmt::Display for IlluminationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IlluminationLevel::Low => "low",
            IlluminationLevel::Medium => "medium",
            IlluminationLevel::High => "high",
        })
    }
}

/// Scale bin from the pre-resize raster height: Small below 100 px, Big
/// above 200 px, Medium in between (boundaries inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScaleLevel {
    Small,
    Medium,
    Big,
}

impl fmt::Display for ScaleLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleLevel::Small => "small",
            ScaleLevel::Medium => "medium",
            ScaleLevel::Big => "big",
        })
    }
}

/// Bins an image by mean lightness. Boundary values land in Medium.
pub fn classify_illumination(img: &Image) -> IlluminationLevel {
    classify_lightness(image::mean_lightness(img))
}

/// Bins a 0–255 mean-lightness value.
pub fn classify_lightness(m: f64) -> IlluminationLevel {
    if m < 255.0 / 10.0 {
        IlluminationLevel::Low
    } else if m > 255.0 / 5.0 {
        IlluminationLevel::High
    } else {
        IlluminationLevel::Medium
    }
}

/// Bins a record by its pre-resize height. Boundary values land in Medium.
pub fn classify_scale(rec: &PersonRecord) -> ScaleLevel {
    classify_scale_height(rec.original_height)
}

pub fn classify_scale_height(original_height: u32) -> ScaleLevel {
    if original_height < 100 {
        ScaleLevel::Small
    } else if original_height > 200 {
        ScaleLevel::Big
    } else {
        ScaleLevel::Medium
    }
}

/// Formats the Market-style file stem `<identity>_c<camera>_<frame>`.
pub fn sample_file_name(identity: u32, camera: u32, frame: u32, ext: &str) -> String {
    format!("{identity:04}_c{camera}_{frame:04}.{ext}")
}

/// Parses `<identity>_c<camera>_<frame>.<ext>` back into labels.
pub fn parse_sample_file_name(name: &str) -> Result<(u32, u32, u32)> {
    let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
    let mut parts = stem.split('_');
    let bad = || Error::Parameter(format!("file name `{name}` is not <id>_c<cam>_<frame>.<ext>"));
    let identity = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let cam = parts.next().ok_or_else(bad)?;
    let camera = cam
        .strip_prefix('c')
        .ok_or_else(bad)?
        .parse()
        .map_err(|_| bad())?;
    let frame = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok((identity, camera, frame))
}

/// One manifest row: sample path plus labels, prior to image loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub identity: u32,
    pub camera: u32,
    pub frame: u32,
    pub original_height: u32,
}

/// The dataset manifest: one entry per sample file, with paths stored
/// relative to the manifest's own directory.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Writes `path,identity,camera,frame,original_height` lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.path.display(),
                e.identity,
                e.camera,
                e.frame,
                e.original_height
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Ingestion {
                    path: path.to_path_buf(),
                    reason: format!("line {}: expected 5 fields, got {}", lineno + 1, fields.len()),
                });
            }
            let num = |s: &str| -> Result<u32> {
                s.parse().map_err(|_| Error::Ingestion {
                    path: path.to_path_buf(),
                    reason: format!("line {}: bad number `{s}`", lineno + 1),
                })
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                identity: num(fields[1])?,
                camera: num(fields[2])?,
                frame: num(fields[3])?,
                original_height: num(fields[4])?,
            });
        }
        Ok(Self { entries })
    }

    /// Distinct identities in ascending order.
    pub fn identities(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.entries.iter().map(|e| e.identity).collect();
        set.into_iter().collect()
    }

    /// Splits identities into a training prefix and testing suffix.
    ///
    /// Identities are sorted ascending; the first `ceil(frac * n)` go to
    /// training. `frac = 1.0` trains on everything (empty test set).
    pub fn split_identities(&self, train_frac: f64) -> Result<(Vec<u32>, Vec<u32>)> {
        if !(0.0..=1.0).contains(&train_frac) {
            return Err(Error::Parameter(format!(
                "train fraction must be in [0,1], got {train_frac}"
            )));
        }
        let ids = self.identities();
        let cut = ((ids.len() as f64) * train_frac).ceil() as usize;
        let cut = cut.min(ids.len());
        Ok((ids[..cut].to_vec(), ids[cut..].to_vec()))
    }
}

/// Number of worker threads for image ingestion, bounded by the
/// `IDF_NUM_WORKERS` environment variable (default 1).
pub fn ingest_workers() -> usize {
    std::env::var("IDF_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Loads every manifest entry (optionally restricted to `identities`),
/// resizing each image to the ingestion shape.
///
/// Decoding may run on up to [`ingest_workers`] threads; results are
/// returned in manifest order regardless of scheduling.
pub fn load_records(
    manifest: &Manifest,
    manifest_path: &Path,
    identities: Option<&[u32]>,
) -> Result<Vec<PersonRecord>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let wanted: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| identities.map_or(true, |ids| ids.contains(&e.identity)))
        .collect();

    let load_one = |e: &ManifestEntry| -> Result<PersonRecord> {
        let full = if e.path.is_absolute() {
            e.path.clone()
        } else {
            base.join(&e.path)
        };
        Ok(PersonRecord {
            identity: e.identity,
            camera: e.camera,
            frame: e.frame,
            original_height: e.original_height,
            image: image::load_and_resize(&full)?,
        })
    };

    let workers = ingest_workers().min(wanted.len().max(1));
    if workers <= 1 {
        return wanted.into_iter().map(load_one).collect();
    }

    let mut slots: Vec<Option<Result<PersonRecord>>> = (0..wanted.len()).map(|_| None).collect();
    let chunk = wanted.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (entries, out) in wanted.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (e, slot) in entries.iter().zip(out.iter_mut()) {
                    *slot = Some(load_one(e));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

/// Counts records per illumination and scale bin for one partition.
#[derive(Debug, Clone, Default)]
pub struct PartitionStats {
    pub illumination: [u64; 3],
    pub scale: [u64; 3],
}

impl PartitionStats {
    pub fn add(&mut self, rec: &PersonRecord) {
        match classify_illumination(&rec.image) {
            IlluminationLevel::Low => self.illumination[0] += 1,
            IlluminationLevel::Medium => self.illumination[1] += 1,
            IlluminationLevel::High => self.illumination[2] += 1,
        }
        match classify_scale(rec) {
            ScaleLevel::Small => self.scale[0] += 1,
            ScaleLevel::Medium => self.scale[1] += 1,
            ScaleLevel::Big => self.scale[2] += 1,
        }
    }
}

/// Writes the `partition,level,count` CSV for illumination or scale bins.
pub fn write_level_csv(
    path: &Path,
    rows: &[(&str, &PartitionStats)],
    which: LevelKind,
) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "partition,level,count")?;
    for (name, stats) in rows {
        let (labels, counts): (&[&str; 3], &[u64; 3]) = match which {
            LevelKind::Illumination => (&["low", "medium", "high"], &stats.illumination),
            LevelKind::Scale => (&["small", "medium", "big"], &stats.scale),
        };
        for (label, count) in labels.iter().zip(counts.iter()) {
            writeln!(f, "{name},{label},{count}")?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub enum LevelKind {
    Illumination,
    Scale,
}

/// Writes the `partition,channel,bin,count` CSV of summed channel
/// histograms over a partition's records.
pub fn write_histogram_csv(
    path: &Path,
    rows: &[(&str, &[PersonRecord])],
    bins: usize,
) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "partition,channel,bin,count")?;
    for (name, records) in rows {
        let mut sums = [vec![0u64; bins], vec![0u64; bins], vec![0u64; bins]];
        for rec in records.iter() {
            let hist = image::channel_histogram(&rec.image, bins)?;
            for c in 0..3 {
                for b in 0..bins {
                    sums[c][b] += hist[c][b];
                }
            }
        }
        for (c, channel) in ["r", "g", "b"].iter().enumerate() {
            for b in 0..bins {
                writeln!(f, "{name},{channel},{b},{}", sums[c][b])?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn illumination_thresholds() {
        // mean lightness 10 -> Low
        assert_eq!(classify_lightness(10.0), IlluminationLevel::Low);
        // boundary values land in Medium
        assert_eq!(classify_lightness(255.0 / 10.0), IlluminationLevel::Medium);
        assert_eq!(classify_lightness(255.0 / 5.0), IlluminationLevel::Medium);
        assert_eq!(classify_lightness(52.0), IlluminationLevel::High);
        // and through the image path
        let img = Image::splat(10.0 / 255.0, 4, 4).unwrap();
        assert_eq!(classify_illumination(&img), IlluminationLevel::Low);
        let img = Image::splat(0.5, 4, 4).unwrap();
        assert_eq!(classify_illumination(&img), IlluminationLevel::High);
    }

    #[test]
    fn scale_thresholds() {
        assert_eq!(classify_scale_height(99), ScaleLevel::Small);
        assert_eq!(classify_scale_height(100), ScaleLevel::Medium);
        assert_eq!(classify_scale_height(200), ScaleLevel::Medium);
        assert_eq!(classify_scale_height(201), ScaleLevel::Big);
        assert_eq!(classify_scale_height(250), ScaleLevel::Big);
    }

    #[test]
    fn illumination_monotone_under_gamma() {
        let img = Image::splat(0.35, 4, 4).unwrap();
        let mut last = classify_illumination(&img);
        for gamma in [1.0, 1.5, 2.5, 4.0, 8.0] {
            let level = classify_illumination(&crate::image::gamma_degrade(&img, gamma).unwrap());
            assert!(level <= last, "level must not increase with gamma");
            last = level;
        }
        assert_eq!(last, IlluminationLevel::Low);
    }

    #[test]
    fn file_name_roundtrip() {
        let name = sample_file_name(17, 3, 42, "png");
        assert_eq!(name, "0017_c3_0042.png");
        assert_eq!(parse_sample_file_name(&name).unwrap(), (17, 3, 42));
        assert!(parse_sample_file_name("junk.png").is_err());
        assert!(parse_sample_file_name("1_2_3.png").is_err());
    }

    #[test]
    fn manifest_roundtrip_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let manifest = Manifest {
            entries: (0..6)
                .map(|i| ManifestEntry {
                    path: PathBuf::from(format!("{i:04}_c1_0000.png")),
                    identity: i,
                    camera: 1,
                    frame: 0,
                    original_height: 120,
                })
                .collect(),
        };
        manifest.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.entries, manifest.entries);
        let (train, test) = back.split_identities(0.5).unwrap();
        assert_eq!(train, vec![0, 1, 2]);
        assert_eq!(test, vec![3, 4, 5]);
        assert!(back.split_identities(1.5).is_err());
    }

    #[test]
    fn manifest_rejects_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "a.png,1,2\n").unwrap();
        assert!(Manifest::load(&path).is_err());
    }
}
