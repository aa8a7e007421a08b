//! Deterministic synthetic paired-modality ship chips.
//!
//! Each identity owns a procedural hull (length, beam, bow/stern shape,
//! paint tint, superstructure layout). Each sighting perturbs pose and
//! renders the same geometry as a shaded RGB chip and as a speckled SAR
//! reflectivity chip, so cross-modal pairs share ground truth exactly.
//! Radar brightness is drawn per structure independently of the optical
//! paint: the modalities share geometry but not appearance, as a bright
//! deck is not a strong radar reflector. File bytes depend only on the
//! spec.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::dataio::manifest::{ItemRecord, Role, SplitManifest};
use crate::dataio::naming::format_item_name;
use crate::dataio::raster::{save_gray_png, save_optical_png, write_sarf, Raster};
use crate::error::{Error, Result};
use crate::model::ModalityTag;
use crate::stream::named_rng;

const WATER_REFLECTIVITY: f64 = 0.08;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub identities: usize,
    pub sightings: usize,
    /// Probability that a sighting is rendered in both modalities;
    /// otherwise a single modality is chosen at random.
    pub both_modality_prob: f64,
    pub gsd_m: f64,
    /// Number of looks for the multiplicative gamma speckle.
    pub speckle_looks: f64,
    /// Hull length range in pixels (per identity).
    pub hull_len_px: (f64, f64),
    /// Length/beam ratio range (per identity).
    pub hull_aspect: (f64, f64),
    pub superstructures: (usize, usize),
    /// Water margin around the rotated hull bounding box.
    pub margin_px: usize,
    /// Gallery-only objects labeled -1.
    pub distractors: usize,
    /// Leading sightings per identity whose renderings also serve as
    /// queries.
    pub query_sightings: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            identities: 8,
            sightings: 6,
            both_modality_prob: 1.0,
            gsd_m: 0.75,
            speckle_looks: 4.0,
            hull_len_px: (40.0, 120.0),
            hull_aspect: (2.6, 4.5),
            superstructures: (1, 4),
            margin_px: 6,
            distractors: 4,
            query_sightings: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.identities == 0 || self.sightings == 0 {
            return bad("synth spec needs at least one identity and sighting".into());
        }
        if !(0.0..=1.0).contains(&self.both_modality_prob) {
            return bad(format!(
                "both_modality_prob {} outside [0,1]",
                self.both_modality_prob
            ));
        }
        if self.gsd_m <= 0.0 {
            return bad(format!("gsd_m {} must be positive", self.gsd_m));
        }
        if self.speckle_looks < 0.5 {
            return bad(format!("speckle_looks {} too small", self.speckle_looks));
        }
        if self.hull_len_px.0 < 8.0 || self.hull_len_px.1 < self.hull_len_px.0 {
            return bad(format!("bad hull_len_px range {:?}", self.hull_len_px));
        }
        if self.hull_aspect.0 < 1.1 || self.hull_aspect.1 < self.hull_aspect.0 {
            return bad(format!("bad hull_aspect range {:?}", self.hull_aspect));
        }
        if self.superstructures.1 < self.superstructures.0 {
            return bad(format!("bad superstructures range {:?}", self.superstructures));
        }
        if self.query_sightings > self.sightings {
            return bad(format!(
                "query_sightings {} exceeds sightings {}",
                self.query_sightings, self.sightings
            ));
        }
        Ok(())
    }

    pub fn to_kv_block(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("identities", self.identities.to_string());
        kv("sightings", self.sightings.to_string());
        kv("both_modality_prob", self.both_modality_prob.to_string());
        kv("gsd_m", self.gsd_m.to_string());
        kv("speckle_looks", self.speckle_looks.to_string());
        kv("hull_len_min", self.hull_len_px.0.to_string());
        kv("hull_len_max", self.hull_len_px.1.to_string());
        kv("hull_aspect_min", self.hull_aspect.0.to_string());
        kv("hull_aspect_max", self.hull_aspect.1.to_string());
        kv("superstructures_min", self.superstructures.0.to_string());
        kv("superstructures_max", self.superstructures.1.to_string());
        kv("margin_px", self.margin_px.to_string());
        kv("distractors", self.distractors.to_string());
        kv("query_sightings", self.query_sightings.to_string());
        s
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let err = |what: &str| Error::Config(format!("synth key {key}: bad {what} '{value}'"));
        macro_rules! num {
            ($t:ty, $what:literal) => {
                value.parse::<$t>().map_err(|_| err($what))?
            };
        }
        match key {
            "seed" => self.seed = num!(u64, "integer"),
            "identities" => self.identities = num!(usize, "integer"),
            "sightings" => self.sightings = num!(usize, "integer"),
            "both_modality_prob" => self.both_modality_prob = num!(f64, "float"),
            "gsd_m" => self.gsd_m = num!(f64, "float"),
            "speckle_looks" => self.speckle_looks = num!(f64, "float"),
            "hull_len_min" => self.hull_len_px.0 = num!(f64, "float"),
            "hull_len_max" => self.hull_len_px.1 = num!(f64, "float"),
            "hull_aspect_min" => self.hull_aspect.0 = num!(f64, "float"),
            "hull_aspect_max" => self.hull_aspect.1 = num!(f64, "float"),
            "superstructures_min" => self.superstructures.0 = num!(usize, "integer"),
            "superstructures_max" => self.superstructures.1 = num!(usize, "integer"),
            "margin_px" => self.margin_px = num!(usize, "integer"),
            "distractors" => self.distractors = num!(usize, "integer"),
            "query_sightings" => self.query_sightings = num!(usize, "integer"),
            _ => return Err(Error::Config(format!("unknown synth key '{key}'"))),
        }
        Ok(())
    }
}

struct Superstructure {
    cx: f64,
    half_len: f64,
    half_wid: f64, // fraction of half-beam
    height: f64,
    rcs: f64,
}

struct Identity {
    len_px: f64,
    half_beam: f64, // in length units
    bow_frac: f64,
    bow_exp: f64,
    stern_frac: f64,
    stern_pinch: f64,
    deck_gray: f64,
    deck_rcs: f64,
    tint: [f64; 3],
    blocks: Vec<Superstructure>,
}

impl Identity {
    fn draw(rng: &mut ChaCha8Rng, spec: &SynthSpec, len_range: (f64, f64), aspect: (f64, f64)) -> Self {
        let len_px = rng.gen_range(len_range.0..=len_range.1);
        let ar = rng.gen_range(aspect.0..=aspect.1);
        let n_blocks = rng.gen_range(spec.superstructures.0..=spec.superstructures.1);
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            blocks.push(Superstructure {
                cx: rng.gen_range(-0.38..0.32),
                half_len: rng.gen_range(0.03..0.10),
                half_wid: rng.gen_range(0.25..0.45),
                height: rng.gen_range(0.4..1.0),
                rcs: rng.gen_range(0.15..1.0),
            });
        }
        Identity {
            len_px,
            half_beam: 0.5 / ar,
            bow_frac: rng.gen_range(0.18..0.30),
            bow_exp: rng.gen_range(0.55..1.10),
            stern_frac: rng.gen_range(0.08..0.16),
            stern_pinch: rng.gen_range(0.75..0.95),
            deck_gray: rng.gen_range(0.35..0.75),
            deck_rcs: rng.gen_range(0.15..0.55),
            tint: [
                rng.gen_range(0.90..1.10),
                rng.gen_range(0.90..1.10),
                rng.gen_range(0.90..1.10),
            ],
            blocks,
        }
    }

    /// Half-width of the hull at longitudinal position `x` in [-0.5, 0.5].
    fn half_width(&self, x: f64) -> f64 {
        if x.abs() > 0.5 {
            return 0.0;
        }
        let bow_start = 0.5 - self.bow_frac;
        let stern_end = -0.5 + self.stern_frac;
        if x > bow_start {
            let t = ((0.5 - x) / self.bow_frac).clamp(0.0, 1.0);
            self.half_beam * t.powf(self.bow_exp)
        } else if x < stern_end {
            let t = ((x + 0.5) / self.stern_frac).clamp(0.0, 1.0);
            self.half_beam * (self.stern_pinch + (1.0 - self.stern_pinch) * t)
        } else {
            self.half_beam
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        x.abs() <= 0.5 && y.abs() <= self.half_width(x)
    }

    /// Structure height above deck at a hull point, in [0, 1].
    fn height(&self, x: f64, y: f64) -> f64 {
        let mut h: f64 = 0.25;
        for blk in &self.blocks {
            if (x - blk.cx).abs() <= blk.half_len && y.abs() <= blk.half_wid * self.half_beam {
                h = h.max(blk.height);
            }
        }
        h
    }

    /// Radar reflectivity at a hull point, decoupled from optical shading.
    fn radar(&self, x: f64, y: f64) -> f64 {
        let mut r = self.deck_rcs;
        for blk in &self.blocks {
            if (x - blk.cx).abs() <= blk.half_len && y.abs() <= blk.half_wid * self.half_beam {
                r = r.max(blk.rcs);
            }
        }
        r
    }
}

struct Pose {
    scale: f64,
    theta: f64,
    dx: f64,
    dy: f64,
}

struct Sighting {
    pose: Pose,
    look_angle: f64,
    water_phase: (f64, f64),
    render_opt: bool,
    render_sar: bool,
}

impl Sighting {
    fn draw(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Self {
        let scale = rng.gen_range(0.92..1.08);
        let mut theta = rng.gen_range(-0.15..0.15);
        if rng.gen_bool(0.5) {
            theta += std::f64::consts::PI; // reversed heading
        }
        let dx = rng.gen_range(-2.5..2.5);
        let dy = rng.gen_range(-2.5..2.5);
        let look_angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let water_phase = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
        let both = rng.gen_bool(spec.both_modality_prob.clamp(0.0, 1.0));
        let single_is_sar = rng.gen_bool(0.5);
        Sighting {
            pose: Pose {
                scale,
                theta,
                dx,
                dy,
            },
            look_angle,
            water_phase,
            render_opt: both || !single_is_sar,
            render_sar: both || single_is_sar,
        }
    }
}

/// Geometry rasterized once per sighting and shared by both modalities.
struct Scene {
    h: usize,
    w: usize,
    coverage: Vec<f64>,
    height: Vec<f64>,
    radar: Vec<f64>,
}

fn rasterize(identity: &Identity, sighting: &Sighting, margin: usize) -> Scene {
    let len = identity.len_px * sighting.pose.scale;
    let beam = 2.0 * identity.half_beam * len;
    let (sin_t, cos_t) = sighting.pose.theta.sin_cos();
    let bbox_w = len * cos_t.abs() + beam * sin_t.abs();
    let bbox_h = len * sin_t.abs() + beam * cos_t.abs();
    let w = bbox_w.ceil() as usize + 2 * margin;
    let h = bbox_h.ceil() as usize + 2 * margin;
    let cx = w as f64 / 2.0 + sighting.pose.dx;
    let cy = h as f64 / 2.0 + sighting.pose.dy;
    let mut coverage = vec![0.0f64; h * w];
    let mut height = vec![0.0f64; h * w];
    let mut radar = vec![0.0f64; h * w];
    // inverse pose: pixel -> unit ship coords
    let to_ship = |px: f64, py: f64| -> (f64, f64) {
        let rx = px - cx;
        let ry = py - cy;
        let sx = (rx * cos_t + ry * sin_t) / len;
        let sy = (-rx * sin_t + ry * cos_t) / len;
        (sx, sy)
    };
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0u32;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let (sx, sy) = to_ship(x as f64 + ox, y as f64 + oy);
                if identity.inside(sx, sy) {
                    hits += 1;
                }
            }
            if hits > 0 {
                coverage[y * w + x] = hits as f64 / 4.0;
                let (sx, sy) = to_ship(x as f64 + 0.5, y as f64 + 0.5);
                height[y * w + x] = identity.height(sx, sy);
                radar[y * w + x] = identity.radar(sx, sy);
            }
        }
    }
    Scene {
        h,
        w,
        coverage,
        height,
        radar,
    }
}

fn render_optical(
    scene: &Scene,
    identity: &Identity,
    sighting: &Sighting,
    rng: &mut ChaCha8Rng,
) -> Raster {
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut out = Raster::new(scene.h, scene.w, 3);
    let water_base = [0.06f64, 0.11, 0.18];
    for y in 0..scene.h {
        for x in 0..scene.w {
            let idx = y * scene.w + x;
            let ripple = 0.02 * (0.35 * x as f64 + sighting.water_phase.0).sin()
                + 0.015 * (0.23 * y as f64 + sighting.water_phase.1).sin();
            let cov = scene.coverage[idx];
            let gray = (identity.deck_gray + 0.45 * scene.height[idx]).min(1.0);
            for ch in 0..3 {
                let water = water_base[ch] + ripple;
                let ship = gray * identity.tint[ch];
                let n: f64 = noise.sample(rng);
                let v = cov * ship + (1.0 - cov) * water + 0.015 * n;
                *out.at_mut(y, x, ch) = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Mean-one multiplicative gamma speckle with `looks` looks.
pub fn speckle_field(rng: &mut ChaCha8Rng, n: usize, looks: f64) -> Vec<f64> {
    let gamma = Gamma::new(looks, 1.0 / looks).expect("valid gamma");
    (0..n).map(|_| gamma.sample(rng)).collect()
}

fn render_sar(scene: &Scene, sighting: &Sighting, looks: f64, rng: &mut ChaCha8Rng) -> Raster {
    let (h, w) = (scene.h, scene.w);
    // facet brightening toward the sensor look direction
    let (sin_l, cos_l) = sighting.look_angle.sin_cos();
    let ox = (1.5 * cos_l).round() as isize;
    let oy = (1.5 * sin_l).round() as isize;
    let cov = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            scene.coverage[y as usize * w + x as usize]
        }
    };
    let speckle = speckle_field(rng, h * w, looks);
    let mut out = Raster::new(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let mut refl = WATER_REFLECTIVITY
                + scene.coverage[idx] * (0.35 + 0.70 * scene.radar[idx] - WATER_REFLECTIVITY);
            let facing =
                cov(y as isize - oy, x as isize - ox) - cov(y as isize + oy, x as isize + ox);
            if facing > 0.0 {
                refl += 1.6 * facing * scene.coverage[idx].max(0.25);
            }
            *out.at_mut(y, x, 0) = (refl * speckle[idx]) as f32;
        }
    }
    out
}

fn mask_raster(scene: &Scene) -> Raster {
    let data: Vec<f32> = scene
        .coverage
        .iter()
        .map(|&c| if c > 0.5 { 1.0 } else { 0.0 })
        .collect();
    Raster::from_data(scene.h, scene.w, 1, data)
}

fn mask_path(images_dir: &Path, item_name: &str) -> PathBuf {
    let stem = item_name.rsplit_once('.').map(|(s, _)| s).unwrap_or(item_name);
    images_dir.join(format!("{stem}_mask.png"))
}

struct Emitter<'a> {
    spec: &'a SynthSpec,
    images_dir: PathBuf,
    manifest: SplitManifest,
}

impl Emitter<'_> {
    fn emit(
        &mut self,
        raster: &Raster,
        scene: &Scene,
        object_id: i64,
        sequence_id: u32,
        modality: ModalityTag,
        roles: &[Role],
    ) -> Result<()> {
        let camera_id = match modality {
            ModalityTag::Optical => 1,
            ModalityTag::Sar => 2,
        };
        let ext = match modality {
            ModalityTag::Optical => "png",
            ModalityTag::Sar => "sarf",
        };
        let name = format_item_name(object_id, sequence_id, camera_id, modality, ext);
        let path = self.images_dir.join(&name);
        match modality {
            ModalityTag::Optical => save_optical_png(&path, raster)?,
            ModalityTag::Sar => write_sarf(&path, raster)?,
        }
        save_gray_png(&mask_path(&self.images_dir, &name), &mask_raster(scene))?;
        for &role in roles {
            self.manifest.items.push(ItemRecord {
                path: PathBuf::from("images").join(&name),
                object_id,
                sequence_id,
                camera_id,
                modality,
                gsd_m: self.spec.gsd_m,
                src_h: raster.h as u32,
                src_w: raster.w as u32,
                role,
            });
        }
        Ok(())
    }
}

/// Generates the dataset tree under `out_dir`:
/// `images/` with chips and `_mask.png` ground truth, `manifest.tsv`,
/// and `stats.txt` computed from the training split.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<SplitManifest> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut emitter = Emitter {
        spec,
        images_dir: images_dir.clone(),
        manifest: SplitManifest::new(out_dir.to_path_buf()),
    };
    for oid in 1..=spec.identities as i64 {
        let mut id_rng = named_rng(spec.seed, &format!("synth/identity/{oid}"));
        let identity = Identity::draw(&mut id_rng, spec, spec.hull_len_px, spec.hull_aspect);
        for sid in 0..spec.sightings as u32 {
            let mut s_rng = named_rng(spec.seed, &format!("synth/sighting/{oid}/{sid}"));
            let sighting = Sighting::draw(&mut s_rng, spec);
            let scene = rasterize(&identity, &sighting, spec.margin_px);
            let mut roles = vec![Role::Train, Role::Gallery];
            if (sid as usize) < spec.query_sightings {
                roles.push(Role::Query);
            }
            if sighting.render_opt {
                let mut rng = named_rng(spec.seed, &format!("synth/noise/{oid}/{sid}"));
                let raster = render_optical(&scene, &identity, &sighting, &mut rng);
                emitter.emit(&raster, &scene, oid, sid, ModalityTag::Optical, &roles)?;
            }
            if sighting.render_sar {
                let mut rng = named_rng(spec.seed, &format!("synth/speckle/{oid}/{sid}"));
                let raster = render_sar(&scene, &sighting, spec.speckle_looks, &mut rng);
                emitter.emit(&raster, &scene, oid, sid, ModalityTag::Sar, &roles)?;
            }
        }
    }
    // distractors: gallery-only clutter with its own shape family
    for k in 0..spec.distractors as u32 {
        let mut rng = named_rng(spec.seed, &format!("synth/distractor/{k}"));
        let identity = Identity::draw(&mut rng, spec, (25.0, 60.0), (1.5, 2.6));
        let sighting = Sighting::draw(&mut rng, spec);
        let scene = rasterize(&identity, &sighting, spec.margin_px);
        if k % 2 == 0 {
            let raster = render_optical(&scene, &identity, &sighting, &mut rng);
            emitter.emit(&raster, &scene, -1, k, ModalityTag::Optical, &[Role::Gallery])?;
        } else {
            let raster = render_sar(&scene, &sighting, spec.speckle_looks, &mut rng);
            emitter.emit(&raster, &scene, -1, k, ModalityTag::Sar, &[Role::Gallery])?;
        }
    }
    emitter.manifest.validate()?;
    emitter.manifest.save(&out_dir.join("manifest.tsv"))?;
    let stats = crate::dataio::manifest::compute_stats(&emitter.manifest)?;
    stats.save(&out_dir.join("stats.txt"))?;
    Ok(emitter.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::manifest::DatasetStats;
    use crate::dataio::raster::read_sarf;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            seed: 11,
            identities: 2,
            sightings: 2,
            distractors: 1,
            query_sightings: 1,
            hull_len_px: (30.0, 60.0),
            ..SynthSpec::default()
        }
    }

    fn tree_digest(dir: &Path) -> Vec<(String, u64)> {
        let mut files: Vec<PathBuf> = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        files.sort();
        files
            .into_iter()
            .map(|p| {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                let bytes = std::fs::read(&p).unwrap();
                let mut hash = 0xcbf29ce484222325u64;
                for b in bytes {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x100000001b3);
                }
                (rel, hash)
            })
            .collect()
    }

    #[test]
    fn same_spec_yields_identical_trees() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_generate(&tiny_spec(), a.path()).unwrap();
        synth_generate(&tiny_spec(), b.path()).unwrap();
        let da = tree_digest(a.path());
        let db = tree_digest(b.path());
        assert!(!da.is_empty());
        assert_eq!(da, db);
    }

    #[test]
    fn counts_match_spec() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let m = synth_generate(&spec, dir.path()).unwrap();
        // both modalities for every sighting (both_modality_prob = 1)
        let train: Vec<_> = m.with_role(Role::Train).collect();
        assert_eq!(train.len(), spec.identities * spec.sightings * 2);
        let queries: Vec<_> = m.with_role(Role::Query).collect();
        assert_eq!(queries.len(), spec.identities * spec.query_sightings * 2);
        let gallery: Vec<_> = m.with_role(Role::Gallery).collect();
        assert_eq!(
            gallery.len(),
            spec.identities * spec.sightings * 2 + spec.distractors
        );
        let distractors = gallery.iter().filter(|(_, it)| it.object_id == -1).count();
        assert_eq!(distractors, spec.distractors);
    }

    #[test]
    fn masks_agree_across_modalities() {
        let dir = tempfile::tempdir().unwrap();
        synth_generate(&tiny_spec(), dir.path()).unwrap();
        let images = dir.path().join("images");
        let opt_mask = std::fs::read(images.join("0001_s00_c1_opt_mask.png")).unwrap();
        let sar_mask = std::fs::read(images.join("0001_s00_c2_sar_mask.png")).unwrap();
        assert_eq!(opt_mask, sar_mask);
    }

    #[test]
    fn artifacts_load_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        synth_generate(&tiny_spec(), dir.path()).unwrap();
        let m = SplitManifest::load(&dir.path().join("manifest.tsv")).unwrap();
        let stats = DatasetStats::load(&dir.path().join("stats.txt")).unwrap();
        assert!(stats.len_mean > 0.0);
        assert!(stats.len_std > 0.0);
        // every referenced file exists and decodes
        for it in &m.items {
            let item = m.load_item(it).unwrap();
            assert_eq!(item.pixels.h as u32, it.src_h);
            match it.modality {
                ModalityTag::Optical => assert_eq!(item.pixels.c, 3),
                ModalityTag::Sar => assert_eq!(item.pixels.c, 1),
            }
            assert!(item.pixels.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn sar_amplitudes_nonnegative() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(&tiny_spec(), dir.path()).unwrap();
        for (_, it) in m.with_role(Role::Train) {
            if it.modality == ModalityTag::Sar {
                let raw = read_sarf(&m.item_path(it)).unwrap();
                assert!(raw.data.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn radar_field_decoupled_from_height() {
        let mut rng = named_rng(4, "test/radar");
        let spec = SynthSpec::default();
        let identity = Identity::draw(&mut rng, &spec, spec.hull_len_px, spec.hull_aspect);
        let sighting = Sighting::draw(&mut rng, &spec);
        let scene = rasterize(&identity, &sighting, spec.margin_px);
        let ship: Vec<usize> = (0..scene.coverage.len())
            .filter(|&i| scene.coverage[i] > 0.5)
            .collect();
        assert!(!ship.is_empty());
        assert!(ship
            .iter()
            .any(|&i| (scene.radar[i] - scene.height[i]).abs() > 0.05));
    }

    #[test]
    fn speckle_field_mean_is_one() {
        let mut rng = named_rng(123, "test/speckle");
        for looks in [1.0, 4.0] {
            let field = speckle_field(&mut rng, 200_000, looks);
            let mean: f64 = field.iter().sum::<f64>() / field.len() as f64;
            assert!((mean - 1.0).abs() < 0.005, "looks={looks} mean={mean}");
            assert!(field.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn water_border_speckle_mean_matches_reflectivity() {
        // Monte-Carlo over generated tiles: a 4-pixel frame is pure
        // water * speckle (ship bbox sits >= margin away, facet boost
        // reaches at most 2 px outside the hull).
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            seed: 5,
            identities: 6,
            sightings: 4,
            distractors: 0,
            ..SynthSpec::default()
        };
        let m = synth_generate(&spec, dir.path()).unwrap();
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (_, it) in m.with_role(Role::Train) {
            if it.modality != ModalityTag::Sar {
                continue;
            }
            let raw = read_sarf(&m.item_path(it)).unwrap();
            for y in 0..raw.h {
                for x in 0..raw.w {
                    let edge = y < 4 || x < 4 || y >= raw.h - 4 || x >= raw.w - 4;
                    if edge {
                        sum += raw.at(y, x, 0) as f64;
                        n += 1;
                    }
                }
            }
        }
        assert!(n > 20_000, "need a large water sample, got {n}");
        let mean = sum / n as f64;
        let rel = (mean / WATER_REFLECTIVITY - 1.0).abs();
        assert!(rel < 0.01, "border mean {mean} vs {WATER_REFLECTIVITY} (rel {rel})");
    }

    #[test]
    fn spec_kv_round_trip() {
        let mut spec = SynthSpec::default();
        spec.seed = 99;
        spec.hull_len_px = (33.0, 77.0);
        spec.both_modality_prob = 0.8;
        let block = spec.to_kv_block();
        let mut back = SynthSpec::default();
        for line in block.lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.set_key(k, v).unwrap();
        }
        assert_eq!(spec, back);
        assert!(back.set_key("bogus", "1").is_err());
    }

    #[test]
    fn single_modality_mix_produces_unpaired_sightings() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            seed: 3,
            identities: 4,
            sightings: 5,
            both_modality_prob: 0.3,
            distractors: 0,
            query_sightings: 0,
            ..SynthSpec::default()
        };
        let m = synth_generate(&spec, dir.path()).unwrap();
        let train = m.with_role(Role::Train).count();
        // strictly between all-single and all-paired
        assert!(train > spec.identities * spec.sightings);
        assert!(train < spec.identities * spec.sightings * 2);
    }
}
