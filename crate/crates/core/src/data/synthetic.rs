//! Procedural two-modality ship chips.
//!
//! Each identity owns a latent hull polygon plus superstructure strokes. The
//! optical rendering is a blurred greyscale silhouette; the radar rendering
//! is the gradient magnitude of the same scene over a weak reflectivity
//! floor, multiplied by unit-mean exponential speckle.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use super::manifest::{Manifest, SampleRecord, Split, DISTRACTOR};
use super::pnm::{encode_pnm, PnmImage};
use crate::error::{Error, Result};
use crate::init::{child_rng, DriRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RenderStyle {
    /// Box-blurred silhouette with additive Gaussian noise.
    Smooth { blur_passes: usize, noise: f64 },
    /// `(floor · scene + gain · |∇scene|) × Exp(1)`, then `blur_passes`
    /// box blurs standing in for the sensor point-spread function.
    Speckle { floor: f64, edge_gain: f64, blur_passes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    pub style: RenderStyle,
}

impl ModalitySpec {
    pub fn optical() -> Self {
        ModalitySpec {
            name: "opt".into(),
            style: RenderStyle::Smooth {
                blur_passes: 1,
                noise: 0.02,
            },
        }
    }

    pub fn radar() -> Self {
        ModalitySpec {
            name: "sar".into(),
            style: RenderStyle::Speckle {
                floor: 0.35,
                edge_gain: 1.5,
                blur_passes: 1,
            },
        }
    }
}

/// Per-image pose jitter around the identity's heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub rotate_deg: f64,
    pub scale: f64,
    pub shift_px: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            rotate_deg: 10.0,
            scale: 0.1,
            shift_px: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Labelled identities; the last `test_ids` of them form query and gallery.
    pub num_ids: usize,
    pub test_ids: usize,
    /// Gallery-only identities written with id −1.
    pub distractor_ids: usize,
    pub images_per_id_per_modality: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub modalities: Vec<ModalitySpec>,
    pub jitter: Jitter,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_ids: 40,
            test_ids: 8,
            distractor_ids: 4,
            images_per_id_per_modality: 4,
            height: 32,
            width: 32,
            channels: 1,
            seed: 42,
            modalities: vec![ModalitySpec::optical(), ModalitySpec::radar()],
            jitter: Jitter::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_ids < 2 {
            return bad(format!("num_ids must be at least 2, got {}", self.num_ids));
        }
        if self.test_ids == 0 || self.test_ids >= self.num_ids {
            return bad(format!(
                "test_ids must lie in 1..{}, got {}",
                self.num_ids, self.test_ids
            ));
        }
        if self.images_per_id_per_modality == 0 {
            return bad("images_per_id_per_modality must be positive".into());
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("image size {}x{} is below 8x8", self.height, self.width));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.name.is_empty() || !m.name.chars().all(|c| c.is_ascii_alphanumeric()) {
                return bad(format!("modality name {:?} must be non-empty alphanumeric", m.name));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return bad(format!("modality {:?} listed twice", m.name));
            }
        }
        Ok(())
    }

    pub fn train_ids(&self) -> usize {
        self.num_ids - self.test_ids
    }

    pub fn image_count(&self) -> usize {
        (self.num_ids + self.distractor_ids) * self.images_per_id_per_modality * self.modalities.len()
    }
}

type Pt = (f64, f64);

/// Ship-like scene in hull-local pixel coordinates, bow along +x.
#[derive(Clone, Debug)]
struct Latent {
    hull: Vec<Pt>,
    length: f64,
    beam: f64,
    heading: f64,
    hull_level: f64,
    strokes: Vec<(Pt, Pt, f64)>,
}

const BACKGROUND: f64 = 0.12;

impl Latent {
    fn sample(rng: &mut DriRng, h: usize, w: usize) -> Self {
        let span = h.min(w) as f64;
        let length = span * rng.gen_range(0.45..0.8);
        let beam = length * rng.gen_range(0.18..0.42);
        let n = rng.gen_range(6..=9);
        let hull = (0..n)
            .map(|i| {
                let t = 2.0 * PI * (i as f64 + rng.gen_range(-0.3..0.3)) / n as f64;
                let r = rng.gen_range(0.85..1.1);
                let bow = if t.cos() > 0.0 { 1.0 + 0.25 * t.cos() } else { 1.0 };
                (0.5 * length * r * bow * t.cos() / 1.25, 0.5 * beam * r * t.sin())
            })
            .collect();
        let strokes = (0..rng.gen_range(2..=4))
            .map(|_| {
                let mut p = || {
                    (
                        rng.gen_range(-0.35..0.35) * length,
                        rng.gen_range(-0.3..0.3) * beam,
                    )
                };
                let (a, b) = (p(), p());
                let level = if rng.gen_bool(0.7) {
                    rng.gen_range(0.85..1.0)
                } else {
                    rng.gen_range(0.0..0.2)
                };
                (a, b, level)
            })
            .collect();
        Latent {
            hull,
            length,
            beam,
            heading: rng.gen_range(-0.5..0.5),
            hull_level: rng.gen_range(0.4..0.7),
            strokes,
        }
    }

    fn value(&self, p: Pt) -> f64 {
        if !inside(&self.hull, p) {
            return BACKGROUND;
        }
        self.strokes
            .iter()
            .find(|(a, b, _)| segment_dist(p, *a, *b) <= 0.75)
            .map_or(self.hull_level, |s| s.2)
    }
}

fn inside(poly: &[Pt], (x, y): Pt) -> bool {
    let mut c = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            c = !c;
        }
        j = i;
    }
    c
}

fn segment_dist(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

struct Pose {
    angle: f64,
    scale: f64,
    shift: Pt,
}

/// Noise-free scene with 2×2 supersampling.
fn rasterize(latent: &Latent, pose: &Pose, h: usize, w: usize) -> Vec<f64> {
    let (c, s) = (pose.angle.cos(), pose.angle.sin());
    let (cx, cy) = (w as f64 / 2.0 + pose.shift.0, h as f64 / 2.0 + pose.shift.1);
    let mut out = vec![0.0; h * w];
    for (i, v) in out.iter_mut().enumerate() {
        let (py, px) = ((i / w) as f64, (i % w) as f64);
        let mut acc = 0.0;
        for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
            let (x, y) = ((px + ox - cx) / pose.scale, (py + oy - cy) / pose.scale);
            acc += latent.value((c * x + s * y, -s * x + c * y));
        }
        *v = acc / 4.0;
    }
    out
}

fn box_blur(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    acc += img[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = acc / n;
        }
    }
    out
}

fn gradient_magnitude(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: usize, x: usize| img[y * w + x];
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
            0.5 * (gx * gx + gy * gy).sqrt()
        })
        .collect()
}

fn render(latent: &Latent, style: RenderStyle, cfg: &SyntheticConfig, rng: &mut DriRng) -> PnmImage {
    let (h, w) = (cfg.height, cfg.width);
    let j = cfg.jitter;
    let pose = Pose {
        angle: latent.heading + j.rotate_deg.to_radians() * rng.gen_range(-1.0..=1.0),
        scale: 1.0 + j.scale * rng.gen_range(-1.0..=1.0),
        shift: (
            j.shift_px * rng.gen_range(-1.0..=1.0),
            j.shift_px * rng.gen_range(-1.0..=1.0),
        ),
    };
    let scene = rasterize(latent, &pose, h, w);
    let values: Vec<f64> = match style {
        RenderStyle::Smooth { blur_passes, noise } => {
            let mut img = scene;
            for _ in 0..blur_passes {
                img = box_blur(&img, h, w);
            }
            img.into_iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v + noise * z
                })
                .collect()
        }
        RenderStyle::Speckle {
            floor,
            edge_gain,
            blur_passes,
        } => {
            let grad = gradient_magnitude(&scene, h, w);
            let mut img: Vec<f64> = scene
                .iter()
                .zip(&grad)
                .map(|(&v, &g)| {
                    let e: f64 = Exp1.sample(rng);
                    (floor * v + edge_gain * g) * e
                })
                .collect();
            for _ in 0..blur_passes {
                img = box_blur(&img, h, w);
            }
            img
        }
    };
    let grey: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let pixels = if cfg.channels == 3 {
        grey.iter().flat_map(|&g| [g, g, g]).collect()
    } else {
        grey
    };
    PnmImage {
        width: w,
        height: h,
        channels: cfg.channels,
        pixels,
    }
}

/// Generated images with their manifest, before anything touches disk.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub manifest: Manifest,
    /// `(relative path, image)`, one entry per distinct file.
    pub images: Vec<(String, PnmImage)>,
}

struct Job {
    label: String,
    path: String,
    id: i64,
    modality: usize,
    splits: &'static [Split],
}

pub fn synthesize(cfg: &SyntheticConfig) -> Result<SyntheticSet> {
    cfg.validate()?;
    let ext = if cfg.channels == 3 { "ppm" } else { "pgm" };
    let train = cfg.train_ids();
    let mut jobs = Vec::with_capacity(cfg.image_count());
    let owners = (0..cfg.num_ids)
        .map(|i| (format!("id{i:04}"), i as i64))
        .chain((0..cfg.distractor_ids).map(|i| (format!("dis{i:04}"), DISTRACTOR)));
    for (n, (tag, id)) in owners.enumerate() {
        let splits: &'static [Split] = if id == DISTRACTOR {
            &[Split::Gallery]
        } else if n < train {
            &[Split::Train]
        } else {
            &[Split::Query, Split::Gallery]
        };
        for (mi, m) in cfg.modalities.iter().enumerate() {
            for k in 0..cfg.images_per_id_per_modality {
                jobs.push(Job {
                    label: tag.clone(),
                    path: format!("imgs/{tag}_{}_{k:02}.{ext}", m.name),
                    id,
                    modality: mi,
                    splits,
                });
            }
        }
    }
    let rendered: Vec<(PnmImage, f64, f64)> = jobs
        .par_iter()
        .map(|job| {
            let latent = Latent::sample(&mut child_rng(cfg.seed, &format!("shape/{}", job.label)), cfg.height, cfg.width);
            let mut r = child_rng(cfg.seed, &format!("render/{}", job.path));
            let img = render(&latent, cfg.modalities[job.modality].style, cfg, &mut r);
            (img, latent.length, latent.beam / latent.length)
        })
        .collect();

    let mut records = Vec::new();
    let mut images = Vec::with_capacity(jobs.len());
    for (job, (img, size, aspect)) in jobs.iter().zip(rendered) {
        for &split in job.splits {
            records.push(SampleRecord {
                path: job.path.clone(),
                id: job.id,
                modality: cfg.modalities[job.modality].name.clone(),
                split,
                size: Some(round4(size)),
                aspect: Some(round4(aspect)),
            });
        }
        images.push((job.path.clone(), img));
    }
    let manifest = Manifest { records };
    manifest.validate()?;
    Ok(SyntheticSet { manifest, images })
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Writes `<root>/imgs/*` and `<root>/manifest.csv`.
pub fn generate_synthetic(cfg: &SyntheticConfig, root: &Path) -> Result<Manifest> {
    let set = synthesize(cfg)?;
    let imgs = root.join("imgs");
    std::fs::create_dir_all(&imgs).map_err(|e| Error::io(&imgs, e))?;
    set.images.par_iter().try_for_each(|(rel, img)| {
        let path = root.join(rel);
        std::fs::write(&path, encode_pnm(img)).map_err(|e| Error::io(&path, e))
    })?;
    set.manifest.save(&root.join(super::MANIFEST_FILE))?;
    Ok(set.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_ids: 8,
            test_ids: 2,
            distractor_ids: 0,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn counts_follow_the_config() {
        let set = synthesize(&small()).unwrap();
        assert_eq!(set.images.len(), 64);
        let m = &set.manifest;
        assert_eq!(m.split(Split::Train).count(), 6 * 8);
        assert_eq!(m.split(Split::Query).count(), 2 * 8);
        assert_eq!(m.split(Split::Gallery).count(), 2 * 8);

        let cfg = SyntheticConfig::default();
        let set = synthesize(&cfg).unwrap();
        let m = &set.manifest;
        assert_eq!(set.images.len(), cfg.image_count());
        assert_eq!(m.split(Split::Gallery).filter(|r| r.is_distractor()).count(), 4 * 8);
        assert!(m.split(Split::Query).all(|r| !r.is_distractor()));
        let train_ids: std::collections::BTreeSet<_> = m.split(Split::Train).map(|r| r.id).collect();
        assert_eq!(train_ids.len(), 32);
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let a = synthesize(&small()).unwrap();
        let b = synthesize(&small()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.manifest.to_csv(), b.manifest.to_csv());
        let c = synthesize(&SyntheticConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn files_on_disk_match_memory() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&small(), dir.path()).unwrap();
        let back = Manifest::load(&dir.path().join(crate::data::MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        let set = synthesize(&small()).unwrap();
        for (rel, img) in &set.images {
            assert_eq!(std::fs::read(dir.path().join(rel)).unwrap(), encode_pnm(img));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SyntheticConfig { num_ids: 1, test_ids: 0, ..small() },
            SyntheticConfig { test_ids: 8, ..small() },
            SyntheticConfig { images_per_id_per_modality: 0, ..small() },
            SyntheticConfig { modalities: vec![], ..small() },
            SyntheticConfig { height: 4, ..small() },
        ] {
            assert!(matches!(synthesize(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    fn dist(a: &PnmImage, b: &PnmImage) -> f64 {
        a.pixels
            .iter()
            .zip(&b.pixels)
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Same-identity pairs are farther apart across modalities than within
    /// one, measured over every such pair in the default set.
    #[test]
    fn modality_gap_exceeds_intra_modal_spread() {
        let set = synthesize(&SyntheticConfig::default()).unwrap();
        let by_path: std::collections::HashMap<_, _> = set.images.iter().map(|(p, i)| (p.as_str(), i)).collect();
        let mut recs: Vec<_> = set.manifest.records.iter().filter(|r| r.id >= 0).collect();
        recs.sort_by(|a, b| a.path.cmp(&b.path));
        recs.dedup_by(|a, b| a.path == b.path);
        let (mut cross, mut nc, mut intra, mut ni) = (0.0, 0usize, 0.0, 0usize);
        for (i, a) in recs.iter().enumerate() {
            for b in &recs[i + 1..] {
                if a.id != b.id {
                    continue;
                }
                let d = dist(by_path[a.path.as_str()], by_path[b.path.as_str()]);
                if a.modality == b.modality {
                    intra += d;
                    ni += 1;
                } else {
                    cross += d;
                    nc += 1;
                }
            }
        }
        let (cross, intra) = (cross / nc as f64, intra / ni as f64);
        assert!(cross > intra, "cross {cross} intra {intra}");
    }

    #[test]
    fn metadata_comes_from_the_latent_shape() {
        let set = synthesize(&small()).unwrap();
        for r in &set.manifest.records {
            let (size, aspect) = r.meta().unwrap();
            assert!(size > 0.4 * 32.0 && size < 0.81 * 32.0);
            assert!((0.17..0.43).contains(&aspect));
        }
        let sizes = |id: i64| -> Vec<f64> { set.manifest.records.iter().filter(|r| r.id == id).map(|r| r.size.unwrap()).collect() };
        assert!(sizes(0).windows(2).all(|w| w[0] == w[1]));
    }
}
