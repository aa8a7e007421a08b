//! ReID protocol engine: feature extraction over query/gallery splits,
//! Euclidean distance matrix, mode filtering (including cross-modal
//! directions and distractor handling), CMC and mAP.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataio::manifest::{DatasetStats, Role, SplitManifest};
use crate::dataio::preprocess::{preprocess, PreprocessConfig};
use crate::error::{Error, Result};
use crate::model::{extract_feature, ForwardInput, ModalityTag, ModelConfig, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    All,
    OptToSar,
    SarToOpt,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::All => "all",
            EvalMode::OptToSar => "opt2sar",
            EvalMode::SarToOpt => "sar2opt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(EvalMode::All),
            "opt2sar" => Some(EvalMode::OptToSar),
            "sar2opt" => Some(EvalMode::SarToOpt),
            _ => None,
        }
    }
}

/// Identity and provenance needed to score one item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Descriptor {
    pub object_id: i64,
    pub sequence_id: u32,
    pub camera_id: u32,
    pub modality: ModalityTag,
}

#[derive(Debug, Clone)]
pub struct EvalSet {
    pub query: Vec<Descriptor>,
    pub gallery: Vec<Descriptor>,
    pub query_features: Vec<Vec<f64>>,
    pub gallery_features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// L2-normalize features before computing distances.
    pub normalize_features: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            normalize_features: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub mode: EvalMode,
    pub map: f64,
    /// CMC over gallery ranks, index 0 = rank 1.
    pub cmc: Vec<f64>,
    /// (query index within the eval set, AP) for every retained query.
    pub per_query_ap: Vec<(usize, f64)>,
    pub dropped_queries: usize,
}

impl EvalResult {
    pub fn rank_k(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

fn l2_normalized(feature: &[f64]) -> Vec<f64> {
    let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        feature.to_vec()
    } else {
        feature.iter().map(|v| v / norm).collect()
    }
}

/// Extracts features for every query and gallery item in the manifest.
/// Deterministic: no augmentation, fixed iteration order.
pub fn embed_set(
    manifest: &SplitManifest,
    params: &Params,
    cfg: &ModelConfig,
    stats: &DatasetStats,
    eval_cfg: &EvalConfig,
) -> Result<EvalSet> {
    let pp = PreprocessConfig::for_model(cfg.input_h, cfg.input_w);
    let embed_role = |role: Role| -> Result<(Vec<Descriptor>, Vec<Vec<f64>>)> {
        let mut descriptors = Vec::new();
        let mut features = Vec::new();
        for (_, it) in manifest.with_role(role) {
            let item = manifest.load_item(it)?;
            let (image, size) = preprocess(&item, &pp, Some(stats))?;
            let input = ForwardInput {
                image: &image,
                modality: it.modality,
                size: cfg.use_size_embed.then(|| size.as_array()),
            };
            let mut feature = extract_feature(params, input, cfg)?;
            if eval_cfg.normalize_features {
                feature = l2_normalized(&feature);
            }
            descriptors.push(Descriptor {
                object_id: it.object_id,
                sequence_id: it.sequence_id,
                camera_id: it.camera_id,
                modality: it.modality,
            });
            features.push(feature);
        }
        Ok((descriptors, features))
    };
    let (query, query_features) = embed_role(Role::Query)?;
    let (gallery, gallery_features) = embed_role(Role::Gallery)?;
    Ok(EvalSet {
        query,
        gallery,
        query_features,
        gallery_features,
    })
}

/// Dense Q x G Euclidean distances.
pub fn distance_matrix(set: &EvalSet) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(set.query_features.len());
    for qf in &set.query_features {
        let mut row = Vec::with_capacity(set.gallery_features.len());
        for gf in &set.gallery_features {
            if qf.len() != gf.len() {
                return Err(Error::Dimension {
                    op: "distance_matrix",
                    lhs: vec![qf.len()],
                    rhs: vec![gf.len()],
                });
            }
            let d2: f64 = qf
                .iter()
                .zip(gf)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            row.push(d2.sqrt());
        }
        out.push(row);
    }
    Ok(out)
}

/// Per-query gallery validity under a mode. `mask[q][g]` is true when
/// gallery item `g` may be ranked for query `q`. Self matches (same
/// object, sequence, and camera) are always excluded; cross-modal modes
/// additionally restrict query modality and gallery modality.
pub fn apply_mode_filter(set: &EvalSet, mode: EvalMode) -> Vec<Vec<bool>> {
    set.query
        .iter()
        .map(|q| {
            let query_active = match mode {
                EvalMode::All => true,
                EvalMode::OptToSar => q.modality == ModalityTag::Optical,
                EvalMode::SarToOpt => q.modality == ModalityTag::Sar,
            };
            set.gallery
                .iter()
                .map(|g| {
                    if !query_active {
                        return false;
                    }
                    let self_match = g.object_id == q.object_id
                        && g.sequence_id == q.sequence_id
                        && g.camera_id == q.camera_id;
                    if self_match {
                        return false;
                    }
                    match mode {
                        EvalMode::All => true,
                        EvalMode::OptToSar => g.modality == ModalityTag::Sar,
                        EvalMode::SarToOpt => g.modality == ModalityTag::Optical,
                    }
                })
                .collect()
        })
        .collect()
}

/// Ascending-distance gallery order for one query, ties broken by
/// gallery index (stable).
fn ranked_gallery(distances: &[f64], mask: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).filter(|&g| mask[g]).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

fn is_match(query: &Descriptor, gallery: &Descriptor) -> bool {
    gallery.object_id != -1 && gallery.object_id == query.object_id
}

/// Scored protocol state shared by CMC and mAP: for each retained
/// query, the match flags of its valid gallery in ranked order.
///
/// Queries whose mask row is entirely false were excluded by the mode
/// itself and are skipped silently; queries that kept valid gallery
/// items but no positive are counted as dropped.
fn ranked_matches(
    set: &EvalSet,
    distances: &[Vec<f64>],
    mask: &[Vec<bool>],
) -> (Vec<(usize, Vec<bool>)>, usize) {
    let mut retained = Vec::new();
    let mut dropped = 0usize;
    for (qi, q) in set.query.iter().enumerate() {
        let has_positive = set
            .gallery
            .iter()
            .enumerate()
            .any(|(gi, g)| mask[qi][gi] && is_match(q, g));
        if !has_positive {
            if mask[qi].iter().any(|&v| v) {
                dropped += 1;
            }
            continue;
        }
        let order = ranked_gallery(&distances[qi], &mask[qi]);
        let flags: Vec<bool> = order.iter().map(|&gi| is_match(q, &set.gallery[gi])).collect();
        retained.push((qi, flags));
    }
    (retained, dropped)
}

/// CMC curve over `0..gallery_len` ranks for the retained queries.
pub fn cmc_curve(set: &EvalSet, distances: &[Vec<f64>], mask: &[Vec<bool>]) -> Result<Vec<f64>> {
    let (retained, _) = ranked_matches(set, distances, mask);
    if retained.is_empty() {
        return Err(Error::EmptyProtocol);
    }
    let max_len = retained
        .iter()
        .map(|(_, flags)| flags.len())
        .max()
        .unwrap_or(0);
    let mut hits = vec![0usize; max_len];
    for (_, flags) in &retained {
        if let Some(first) = flags.iter().position(|&m| m) {
            for slot in hits.iter_mut().skip(first) {
                *slot += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| h as f64 / retained.len() as f64)
        .collect())
}

/// AP of one ranked match list: mean over relevant positions of
/// precision at that rank.
fn average_precision(flags: &[bool]) -> f64 {
    let mut relevant = 0usize;
    let mut sum = 0.0f64;
    for (rank0, &m) in flags.iter().enumerate() {
        if m {
            relevant += 1;
            sum += relevant as f64 / (rank0 + 1) as f64;
        }
    }
    if relevant == 0 {
        0.0
    } else {
        sum / relevant as f64
    }
}

/// Mean AP plus the per-query APs (indexed into the eval set's query
/// list) and the count of dropped queries.
pub fn mean_ap(
    set: &EvalSet,
    distances: &[Vec<f64>],
    mask: &[Vec<bool>],
) -> Result<(f64, Vec<(usize, f64)>, usize)> {
    let (retained, dropped) = ranked_matches(set, distances, mask);
    if retained.is_empty() {
        return Err(Error::EmptyProtocol);
    }
    let per_query: Vec<(usize, f64)> = retained
        .iter()
        .map(|(qi, flags)| (*qi, average_precision(flags)))
        .collect();
    let map = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64;
    Ok((map, per_query, dropped))
}

/// Runs one mode end to end on an embedded set.
pub fn evaluate_set(set: &EvalSet, mode: EvalMode) -> Result<EvalResult> {
    let distances = distance_matrix(set)?;
    let mask = apply_mode_filter(set, mode);
    let cmc = cmc_curve(set, &distances, &mask)?;
    let (map, per_query_ap, dropped_queries) = mean_ap(set, &distances, &mask)?;
    Ok(EvalResult {
        mode,
        map,
        cmc,
        per_query_ap,
        dropped_queries,
    })
}

/// CSV artifacts: CMC curve, per-query AP table, and a one-line summary
/// matching the mAP / R1 / R5 / R10 reporting layout.
pub fn write_artifacts(result: &EvalResult, set: &EvalSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tag = result.mode.as_str();

    let mut cmc = String::from("rank,value\n");
    for (i, v) in result.cmc.iter().enumerate() {
        writeln!(cmc, "{},{v}", i + 1).expect("string write");
    }
    let cmc_path = dir.join(format!("cmc_{tag}.csv"));
    std::fs::write(&cmc_path, cmc).map_err(|e| Error::io(&cmc_path, e))?;

    let mut ap = String::from("object_id,sequence_id,camera_id,modality,ap\n");
    for &(qi, v) in &result.per_query_ap {
        let d = &set.query[qi];
        writeln!(
            ap,
            "{},{},{},{},{v}",
            d.object_id,
            d.sequence_id,
            d.camera_id,
            d.modality.as_str()
        )
        .expect("string write");
    }
    let ap_path = dir.join(format!("ap_{tag}.csv"));
    std::fs::write(&ap_path, ap).map_err(|e| Error::io(&ap_path, e))?;

    let summary = format!(
        "mode,mAP,R1,R5,R10\n{tag},{},{},{},{}\n",
        result.map,
        result.rank_k(1),
        result.rank_k(5),
        result.rank_k(10)
    );
    let sum_path = dir.join(format!("summary_{tag}.csv"));
    std::fs::write(&sum_path, summary).map_err(|e| Error::io(&sum_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn desc(oid: i64, sid: u32, cid: u32, modality: ModalityTag) -> Descriptor {
        Descriptor {
            object_id: oid,
            sequence_id: sid,
            camera_id: cid,
            modality,
        }
    }

    fn set_from(
        query: Vec<(Descriptor, Vec<f64>)>,
        gallery: Vec<(Descriptor, Vec<f64>)>,
    ) -> EvalSet {
        let (query, query_features): (Vec<_>, Vec<_>) = query.into_iter().unzip();
        let (gallery, gallery_features): (Vec<_>, Vec<_>) = gallery.into_iter().unzip();
        EvalSet {
            query,
            gallery,
            query_features,
            gallery_features,
        }
    }

    use ModalityTag::{Optical as O, Sar as S};

    #[test]
    fn distance_matrix_geometry() {
        let set = set_from(
            vec![(desc(1, 0, 1, O), vec![1.0, 0.0])],
            vec![
                (desc(1, 1, 1, O), vec![1.0, 0.0]),
                (desc(2, 0, 1, O), vec![0.0, 1.0]),
            ],
        );
        let d = distance_matrix(&set).unwrap();
        assert_eq!(d[0][0], 0.0);
        assert!((d[0][1] - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn distance_matches_brute_force() {
        let mut rng = crate::stream::named_rng(4, "test/dist");
        let qf: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let gf: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let set = set_from(
            qf.iter()
                .map(|f| (desc(1, 0, 1, O), f.clone()))
                .collect(),
            gf.iter()
                .map(|f| (desc(1, 1, 1, O), f.clone()))
                .collect(),
        );
        let d = distance_matrix(&set).unwrap();
        for (i, q) in qf.iter().enumerate() {
            for (j, g) in gf.iter().enumerate() {
                let manual = q
                    .iter()
                    .zip(g)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert_eq!(d[i][j], manual);
            }
        }
    }

    #[test]
    fn self_match_is_masked_in_all_mode() {
        let set = set_from(
            vec![(desc(1, 0, 1, O), vec![1.0])],
            vec![
                (desc(1, 0, 1, O), vec![1.0]), // same triple: self
                (desc(1, 0, 2, S), vec![1.0]), // pair, different camera
                (desc(2, 0, 1, O), vec![0.0]),
            ],
        );
        let mask = apply_mode_filter(&set, EvalMode::All);
        assert_eq!(mask[0], vec![false, true, true]);
    }

    #[test]
    fn cross_modal_masks_restrict_both_sides() {
        let set = set_from(
            vec![
                (desc(1, 0, 1, O), vec![1.0]),
                (desc(1, 0, 2, S), vec![1.0]),
            ],
            vec![
                (desc(1, 1, 1, O), vec![1.0]),
                (desc(1, 1, 2, S), vec![1.0]),
            ],
        );
        let o2s = apply_mode_filter(&set, EvalMode::OptToSar);
        // optical query sees only SAR gallery
        assert_eq!(o2s[0], vec![false, true]);
        // SAR query is excluded entirely
        assert_eq!(o2s[1], vec![false, false]);
        let s2o = apply_mode_filter(&set, EvalMode::SarToOpt);
        assert_eq!(s2o[0], vec![false, false]);
        assert_eq!(s2o[1], vec![true, false]);
    }

    #[test]
    fn cmc_hand_case_first_match_at_rank_two() {
        let set = set_from(
            vec![(desc(1, 0, 1, O), vec![0.0, 0.0])],
            vec![
                (desc(2, 0, 1, O), vec![0.1, 0.0]), // rank 1, wrong id
                (desc(1, 1, 1, O), vec![0.5, 0.0]), // rank 2, correct
                (desc(3, 0, 1, O), vec![0.9, 0.0]),
            ],
        );
        let d = distance_matrix(&set).unwrap();
        let mask = apply_mode_filter(&set, EvalMode::All);
        let cmc = cmc_curve(&set, &d, &mask).unwrap();
        assert_eq!(cmc, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn ap_hand_case_relevant_at_ranks_one_and_three() {
        let set = set_from(
            vec![(desc(1, 0, 1, O), vec![0.0])],
            vec![
                (desc(1, 1, 1, O), vec![0.1]),
                (desc(2, 0, 1, O), vec![0.2]),
                (desc(1, 2, 1, O), vec![0.3]),
                (desc(3, 0, 1, O), vec![0.4]),
            ],
        );
        let d = distance_matrix(&set).unwrap();
        let mask = apply_mode_filter(&set, EvalMode::All);
        let (map, per_query, dropped) = mean_ap(&set, &d, &mask).unwrap();
        let expected = (1.0 + 2.0 / 3.0) / 2.0;
        assert!((map - expected).abs() < 1e-12);
        assert_eq!(per_query.len(), 1);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn distractors_are_never_correct() {
        let set = set_from(
            vec![(desc(1, 0, 1, O), vec![0.0])],
            vec![
                (desc(-1, 0, 1, O), vec![0.05]), // distractor at rank 1
                (desc(1, 1, 1, O), vec![0.1]),
            ],
        );
        let d = distance_matrix(&set).unwrap();
        let mask = apply_mode_filter(&set, EvalMode::All);
        let cmc = cmc_curve(&set, &d, &mask).unwrap();
        assert_eq!(cmc[0], 0.0);
        assert_eq!(cmc[1], 1.0);
        let (map, _, _) = mean_ap(&set, &d, &mask).unwrap();
        assert!((map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn queries_without_positives_are_dropped() {
        let set = set_from(
            vec![
                (desc(1, 0, 1, O), vec![0.0]),
                (desc(9, 0, 1, O), vec![0.0]), // identity absent from gallery
            ],
            vec![
                (desc(1, 1, 1, O), vec![0.1]),
                (desc(2, 0, 1, O), vec![0.2]),
            ],
        );
        let d = distance_matrix(&set).unwrap();
        let mask = apply_mode_filter(&set, EvalMode::All);
        let (map, per_query, dropped) = mean_ap(&set, &d, &mask).unwrap();
        assert_eq!(per_query.len(), 1);
        assert_eq!(dropped, 1);
        assert_eq!(map, 1.0);
    }

    #[test]
    fn empty_protocol_is_an_error() {
        let set = set_from(
            vec![(desc(1, 0, 1, S), vec![0.0])],
            vec![(desc(1, 1, 2, S), vec![0.1])],
        );
        let d = distance_matrix(&set).unwrap();
        // SAR query, but OptToSar only scores optical queries
        let mask = apply_mode_filter(&set, EvalMode::OptToSar);
        assert!(matches!(
            cmc_curve(&set, &d, &mask),
            Err(Error::EmptyProtocol)
        ));
    }

    #[test]
    fn cmc_is_monotone_and_bounded() {
        let mut rng = crate::stream::named_rng(9, "test/cmcprop");
        for _ in 0..50 {
            let q = rng.gen_range(2..8);
            let g = rng.gen_range(4..15);
            let set = random_instance(&mut rng, q, g);
            let d = distance_matrix(&set).unwrap();
            let mask = apply_mode_filter(&set, EvalMode::All);
            if let Ok(cmc) = cmc_curve(&set, &d, &mask) {
                for w in cmc.windows(2) {
                    assert!(w[0] <= w[1] + 1e-15);
                }
                assert!(cmc.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    fn random_instance(rng: &mut rand_chacha::ChaCha8Rng, q: usize, g: usize) -> EvalSet {
        let dim = 3usize;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, allow_distractor: bool| {
            let oid = if allow_distractor && rng.gen_bool(0.2) {
                -1
            } else {
                rng.gen_range(1..5)
            };
            let modality = if rng.gen_bool(0.5) { O } else { S };
            (
                desc(oid, rng.gen_range(0..3), rng.gen_range(1..3), modality),
                (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            )
        };
        set_from(
            (0..q).map(|_| mk(rng, false)).collect(),
            (0..g).map(|_| mk(rng, true)).collect(),
        )
    }

    #[test]
    fn rank_order_matches_cosine_on_normalized_features() {
        let mut rng = crate::stream::named_rng(21, "test/cosine");
        let dim = 5;
        let norm = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let q: Vec<f64> = norm((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let gallery: Vec<Vec<f64>> = (0..10)
            .map(|_| norm((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let dists: Vec<f64> = gallery
            .iter()
            .map(|g| {
                q.iter()
                    .zip(g)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let cosines: Vec<f64> = gallery
            .iter()
            .map(|g| q.iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let mut by_dist: Vec<usize> = (0..10).collect();
        by_dist.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]));
        let mut by_cos: Vec<usize> = (0..10).collect();
        by_cos.sort_by(|&a, &b| cosines[b].total_cmp(&cosines[a]));
        assert_eq!(by_dist, by_cos);
    }

    #[test]
    fn artifacts_are_deterministic_bytes() {
        let set = set_from(
            vec![(desc(1, 0, 1, O), vec![0.0])],
            vec![
                (desc(1, 1, 1, O), vec![0.1]),
                (desc(2, 0, 1, O), vec![0.2]),
            ],
        );
        let result = evaluate_set(&set, EvalMode::All).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_artifacts(&result, &set, d1.path()).unwrap();
        write_artifacts(&result, &set, d2.path()).unwrap();
        for name in ["cmc_all.csv", "ap_all.csv", "summary_all.csv"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert!(!a.is_empty());
            assert_eq!(a, b);
        }
        let summary = std::fs::read_to_string(d1.path().join("summary_all.csv")).unwrap();
        assert!(summary.starts_with("mode,mAP,R1,R5,R10\n"));
    }
}
