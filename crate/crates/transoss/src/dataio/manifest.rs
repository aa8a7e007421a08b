//! Split manifests (tab-separated, one item per line) and the dataset
//! statistics sidecar used for standardization.
//!
//! Record layout: `path  object_id  sequence_id  camera_id  modality
//! gsd_m  src_h  src_w  role` with role one of train/query/gallery.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataio::raster::{load_raster, Raster};
use crate::error::{Error, Result};
use crate::model::ModalityTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Query,
    Gallery,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Query => "query",
            Role::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Role::Train),
            "query" => Some(Role::Query),
            "gallery" => Some(Role::Gallery),
            _ => None,
        }
    }
}

/// One manifest line; `path` is relative to the manifest's directory.
#[derive(Debug, Clone)]
pub struct ItemRecord {
    pub path: PathBuf,
    pub object_id: i64,
    pub sequence_id: u32,
    pub camera_id: u32,
    pub modality: ModalityTag,
    pub gsd_m: f64,
    pub src_h: u32,
    pub src_w: u32,
    pub role: Role,
}

/// A decoded image plus the metadata the pipeline needs downstream.
#[derive(Debug, Clone)]
pub struct ImageItem {
    pub pixels: Raster,
    pub modality: ModalityTag,
    pub object_id: i64,
    pub sequence_id: u32,
    pub camera_id: u32,
    pub gsd_m: f64,
    pub source_h_px: u32,
    pub source_w_px: u32,
}

#[derive(Debug, Clone)]
pub struct SplitManifest {
    /// Directory all item paths are relative to.
    pub root: PathBuf,
    pub items: Vec<ItemRecord>,
}

impl SplitManifest {
    pub fn new(root: PathBuf) -> Self {
        SplitManifest {
            root,
            items: Vec::new(),
        }
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = (usize, &ItemRecord)> {
        self.items
            .iter()
            .enumerate()
            .filter(move |(_, it)| it.role == role)
    }

    pub fn item_path(&self, item: &ItemRecord) -> PathBuf {
        self.root.join(&item.path)
    }

    /// Sorted distinct training object ids; position = dense class index.
    pub fn train_identities(&self) -> Vec<i64> {
        let mut ids: Vec<i64> = self
            .with_role(Role::Train)
            .map(|(_, it)| it.object_id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Structural checks: queries are never distractors, and every query
    /// identity has at least one gallery entry.
    pub fn validate(&self) -> Result<()> {
        let mut gallery_ids = std::collections::BTreeSet::new();
        for (_, it) in self.with_role(Role::Gallery) {
            gallery_ids.insert(it.object_id);
        }
        for (idx, it) in self.with_role(Role::Query) {
            if it.object_id == -1 {
                return Err(Error::Invalid(format!(
                    "manifest line {idx}: query items must not be distractors"
                )));
            }
            if !gallery_ids.contains(&it.object_id) {
                return Err(Error::Invalid(format!(
                    "manifest line {idx}: query identity {} missing from gallery",
                    it.object_id
                )));
            }
        }
        for (idx, it) in self.with_role(Role::Train) {
            if it.object_id == -1 {
                return Err(Error::Invalid(format!(
                    "manifest line {idx}: distractors are gallery-only"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for it in &self.items {
            writeln!(
                text,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                it.path.display(),
                it.object_id,
                it.sequence_id,
                it.camera_id,
                it.modality.as_str(),
                it.gsd_m,
                it.src_h,
                it.src_w,
                it.role.as_str()
            )
            .expect("string write");
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut manifest = SplitManifest::new(root);
        let perr = |line: usize, message: String| Error::Parse {
            what: format!("manifest {}", path.display()),
            position: line,
            message,
        };
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 9 {
                return Err(perr(
                    lineno + 1,
                    format!("expected 9 tab-separated fields, found {}", fields.len()),
                ));
            }
            let parse_num = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| perr(lineno + 1, format!("bad {what} '{s}'")))
            };
            let modality = ModalityTag::parse(fields[4])
                .ok_or_else(|| perr(lineno + 1, format!("bad modality '{}'", fields[4])))?;
            let role = Role::parse(fields[8])
                .ok_or_else(|| perr(lineno + 1, format!("bad role '{}'", fields[8])))?;
            manifest.items.push(ItemRecord {
                path: PathBuf::from(fields[0]),
                object_id: fields[1]
                    .parse()
                    .map_err(|_| perr(lineno + 1, format!("bad object id '{}'", fields[1])))?,
                sequence_id: parse_num(fields[2], "sequence id")? as u32,
                camera_id: parse_num(fields[3], "camera id")? as u32,
                modality,
                gsd_m: parse_num(fields[5], "gsd")?,
                src_h: parse_num(fields[6], "src_h")? as u32,
                src_w: parse_num(fields[7], "src_w")? as u32,
                role,
            });
        }
        manifest.validate()?;
        Ok(manifest)
    }

    /// Loads the pixels for one record and checks that the stored raster
    /// matches the manifest's source dimensions.
    pub fn load_item(&self, item: &ItemRecord) -> Result<ImageItem> {
        let path = self.item_path(item);
        let pixels = load_raster(&path, item.modality)?;
        if pixels.h != item.src_h as usize || pixels.w != item.src_w as usize {
            return Err(Error::Invalid(format!(
                "{}: raster is {}x{} but manifest records {}x{}",
                path.display(),
                pixels.h,
                pixels.w,
                item.src_h,
                item.src_w
            )));
        }
        Ok(ImageItem {
            pixels,
            modality: item.modality,
            object_id: item.object_id,
            sequence_id: item.sequence_id,
            camera_id: item.camera_id,
            gsd_m: item.gsd_m,
            source_h_px: item.src_h,
            source_w_px: item.src_w,
        })
    }
}

/// Training-split statistics for pixel and metric-size standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub opt_mean: [f64; 3],
    pub opt_std: [f64; 3],
    pub sar_mean: f64,
    pub sar_std: f64,
    /// Metric ship length (long extent) moments in meters.
    pub len_mean: f64,
    pub len_std: f64,
    /// Metric ship width (short extent) moments in meters.
    pub wid_mean: f64,
    pub wid_std: f64,
}

impl DatasetStats {
    /// Neutral statistics: zero means, unit scales.
    pub fn identity() -> Self {
        DatasetStats {
            opt_mean: [0.0; 3],
            opt_std: [1.0; 3],
            sar_mean: 0.0,
            sar_std: 1.0,
            len_mean: 0.0,
            len_std: 1.0,
            wid_mean: 0.0,
            wid_std: 1.0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        let mut kv = |k: &str, v: f64| writeln!(text, "{k}={v}").expect("string write");
        kv("opt_mean_r", self.opt_mean[0]);
        kv("opt_mean_g", self.opt_mean[1]);
        kv("opt_mean_b", self.opt_mean[2]);
        kv("opt_std_r", self.opt_std[0]);
        kv("opt_std_g", self.opt_std[1]);
        kv("opt_std_b", self.opt_std[2]);
        kv("sar_mean", self.sar_mean);
        kv("sar_std", self.sar_std);
        kv("len_mean", self.len_mean);
        kv("len_std", self.len_std);
        kv("wid_mean", self.wid_mean);
        kv("wid_std", self.wid_std);
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                what: format!("stats {}", path.display()),
                position: lineno + 1,
                message: "expected key=value".into(),
            })?;
            let value: f64 = v.parse().map_err(|_| Error::Parse {
                what: format!("stats {}", path.display()),
                position: lineno + 1,
                message: format!("bad float '{v}'"),
            })?;
            map.insert(k.to_string(), value);
        }
        let get = |k: &str| -> Result<f64> {
            map.get(k).copied().ok_or_else(|| {
                Error::Config(format!("stats file {} missing key {k}", path.display()))
            })
        };
        Ok(DatasetStats {
            opt_mean: [get("opt_mean_r")?, get("opt_mean_g")?, get("opt_mean_b")?],
            opt_std: [get("opt_std_r")?, get("opt_std_g")?, get("opt_std_b")?],
            sar_mean: get("sar_mean")?,
            sar_std: get("sar_std")?,
            len_mean: get("len_mean")?,
            len_std: get("len_std")?,
            wid_mean: get("wid_mean")?,
            wid_std: get("wid_std")?,
        })
    }
}

fn moments(sum: f64, sumsq: f64, n: f64) -> (f64, f64) {
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    (mean, var.sqrt())
}

/// Computes pixel and size statistics over the training split only.
pub fn compute_stats(manifest: &SplitManifest) -> Result<DatasetStats> {
    let mut opt_sum = [0.0f64; 3];
    let mut opt_sumsq = [0.0f64; 3];
    let mut opt_n = 0f64;
    let mut sar_sum = 0.0f64;
    let mut sar_sumsq = 0.0f64;
    let mut sar_n = 0f64;
    let mut len_sum = 0.0;
    let mut len_sumsq = 0.0;
    let mut wid_sum = 0.0;
    let mut wid_sumsq = 0.0;
    let mut size_n = 0f64;
    for (_, it) in manifest.with_role(Role::Train) {
        let img = manifest.load_item(it)?;
        match it.modality {
            ModalityTag::Optical => {
                for px in img.pixels.data.chunks_exact(3) {
                    for ch in 0..3 {
                        opt_sum[ch] += px[ch] as f64;
                        opt_sumsq[ch] += (px[ch] as f64) * (px[ch] as f64);
                    }
                }
                opt_n += (img.pixels.h * img.pixels.w) as f64;
            }
            ModalityTag::Sar => {
                for &v in &img.pixels.data {
                    sar_sum += v as f64;
                    sar_sumsq += (v as f64) * (v as f64);
                }
                sar_n += img.pixels.data.len() as f64;
            }
        }
        let a = it.src_h as f64 * it.gsd_m;
        let b = it.src_w as f64 * it.gsd_m;
        let (len_m, wid_m) = if a >= b { (a, b) } else { (b, a) };
        len_sum += len_m;
        len_sumsq += len_m * len_m;
        wid_sum += wid_m;
        wid_sumsq += wid_m * wid_m;
        size_n += 1.0;
    }
    if size_n == 0.0 {
        return Err(Error::Invalid("manifest has no training items".into()));
    }
    let mut stats = DatasetStats::identity();
    if opt_n > 0.0 {
        for ch in 0..3 {
            let (m, s) = moments(opt_sum[ch], opt_sumsq[ch], opt_n);
            stats.opt_mean[ch] = m;
            stats.opt_std[ch] = s.max(1e-6);
        }
    }
    if sar_n > 0.0 {
        let (m, s) = moments(sar_sum, sar_sumsq, sar_n);
        stats.sar_mean = m;
        stats.sar_std = s.max(1e-6);
    }
    let (lm, ls) = moments(len_sum, len_sumsq, size_n);
    let (wm, ws) = moments(wid_sum, wid_sumsq, size_n);
    stats.len_mean = lm;
    stats.len_std = ls.max(1e-6);
    stats.wid_mean = wm;
    stats.wid_std = ws.max(1e-6);
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(oid: i64, role: Role, modality: ModalityTag) -> ItemRecord {
        ItemRecord {
            path: PathBuf::from(format!(
                "images/{}",
                crate::dataio::naming::format_item_name(oid, 0, 1, modality, "png")
            )),
            object_id: oid,
            sequence_id: 0,
            camera_id: 1,
            modality,
            gsd_m: 0.75,
            src_h: 40,
            src_w: 80,
            role,
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = SplitManifest::new(dir.path().to_path_buf());
        m.items.push(record(3, Role::Train, ModalityTag::Optical));
        m.items.push(record(3, Role::Query, ModalityTag::Optical));
        m.items.push(record(3, Role::Gallery, ModalityTag::Sar));
        m.items.push(record(-1, Role::Gallery, ModalityTag::Sar));
        let path = dir.path().join("manifest.tsv");
        m.save(&path).unwrap();
        let back = SplitManifest::load(&path).unwrap();
        assert_eq!(back.items.len(), 4);
        assert_eq!(back.items[0].object_id, 3);
        assert_eq!(back.items[3].object_id, -1);
        assert_eq!(back.items[3].role, Role::Gallery);
        assert_eq!(back.root, dir.path());
    }

    #[test]
    fn validation_rejects_distractor_queries_and_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = SplitManifest::new(dir.path().to_path_buf());
        m.items.push(record(-1, Role::Query, ModalityTag::Optical));
        assert!(m.validate().is_err());

        let mut m2 = SplitManifest::new(dir.path().to_path_buf());
        m2.items.push(record(5, Role::Query, ModalityTag::Optical));
        m2.items.push(record(6, Role::Gallery, ModalityTag::Sar));
        assert!(m2.validate().is_err());

        let mut m3 = SplitManifest::new(dir.path().to_path_buf());
        m3.items.push(record(5, Role::Query, ModalityTag::Optical));
        m3.items.push(record(5, Role::Gallery, ModalityTag::Sar));
        assert!(m3.validate().is_ok());
    }

    #[test]
    fn stats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = DatasetStats::identity();
        s.opt_mean = [0.25, 0.5, 0.75];
        s.sar_std = 0.125;
        s.len_mean = 62.5;
        let path = dir.path().join("stats.txt");
        s.save(&path).unwrap();
        let back = DatasetStats::load(&path).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn train_identities_are_sorted_dense() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = SplitManifest::new(dir.path().to_path_buf());
        m.items.push(record(9, Role::Train, ModalityTag::Optical));
        m.items.push(record(2, Role::Train, ModalityTag::Sar));
        m.items.push(record(9, Role::Train, ModalityTag::Sar));
        assert_eq!(m.train_identities(), vec![2, 9]);
    }
}
