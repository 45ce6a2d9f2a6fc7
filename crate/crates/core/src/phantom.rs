//! Synthetic renal cohort with recoverable ground truth.
//!
//! Every case carries a fully known latent feature set. Images are rendered
//! from it. The manifest then sees a masked copy in which features are turned
//! to unknown at the configured missingness rates. Volumes are rendered on
//! demand from the stored geometry, never held for the whole cohort.
//!
//! Image layout follows the radiological convention: the patient's left
//! kidney sits on the right-hand side of the image (larger column index).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::stub_generate;
use crate::ingest::{series_dir, write_dicom_slice, CtSlice, CtVolume, IngestError, SeriesInfo};
use crate::prompt::format_size_cm;
use crate::schema::{
    save_manifest, Annotation, Attenuation, CohortManifest, Enhancement, FeatureSet, Growth, ManifestError, Position,
    Provenance, SliceRef,
};

pub const AIR_HU: f64 = -1000.0;
pub const SOFT_TISSUE_HU: f64 = 40.0;
pub const KIDNEY_HU: f64 = 150.0;
pub const HYPO_LESION_HU: f64 = 10.0;
pub const ISO_LESION_HU: f64 = KIDNEY_HU;
pub const HYPER_LESION_HU: f64 = 230.0;
/// Corner block value is `MARKER_BASE_HU + slice index`.
pub const MARKER_BASE_HU: f64 = 2000.0;
pub const MARKER_SIZE: usize = 4;
pub const RESCALE_INTERCEPT: f64 = -1024.0;
pub const SLICE_THICKNESS_MM: f64 = 2.5;
pub const SERIES_NUMBER: u32 = 2;
const SUPERSAMPLE: usize = 4;

/// Probabilities of each known value over the whole cohort; the remainder of
/// each group is the unknown rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub left: f64,
    pub right: f64,
    pub size_known: f64,
    pub exophytic: f64,
    pub endophytic: f64,
    pub hypoattenuating: f64,
    pub hyperattenuating: f64,
    pub isoattenuating: f64,
    pub enhancement: f64,
    pub non_enhancement: f64,
    pub cyst: f64,
    pub mass: f64,
    pub tumor: f64,
}

impl Default for Marginals {
    /// Counts of the reference 130-lesion cohort.
    fn default() -> Self {
        let p = |c: f64| c / 130.0;
        Marginals {
            left: p(61.0),
            right: p(68.0),
            size_known: p(112.0),
            exophytic: p(26.0),
            endophytic: p(2.0),
            hypoattenuating: p(43.0),
            hyperattenuating: p(30.0),
            isoattenuating: p(6.0),
            enhancement: p(26.0),
            non_enhancement: p(10.0),
            cyst: p(78.0),
            mass: p(15.0),
            tumor: p(7.0),
        }
    }
}

impl Marginals {
    fn groups(&self) -> [(&'static str, Vec<f64>); 8] {
        [
            ("position", vec![self.left, self.right]),
            ("size", vec![self.size_known]),
            ("growth", vec![self.exophytic, self.endophytic]),
            ("attenuation", vec![self.hypoattenuating, self.hyperattenuating, self.isoattenuating]),
            ("enhancement", vec![self.enhancement, self.non_enhancement]),
            ("cyst", vec![self.cyst]),
            ("mass", vec![self.mass]),
            ("tumor", vec![self.tumor]),
        ]
    }
}

/// How label counts are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalMode {
    /// Independent draws per case.
    #[default]
    Sampled,
    /// Counts fixed at the nearest integers to `p · n` (largest remainder), then shuffled.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub n_annotations: usize,
    pub seed: u64,
    pub fov_cm: f64,
    pub matrix: usize,
    pub slices_per_series: usize,
    pub marginals: Marginals,
    pub marginal_mode: MarginalMode,
    pub size_mean_cm: f64,
    pub size_sd_cm: f64,
    pub size_min_cm: f64,
    pub size_max_cm: f64,
    /// Consecutive annotations sharing one patient id.
    pub annotations_per_patient: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_annotations: 130,
            seed: 7,
            fov_cm: 40.0,
            matrix: 512,
            slices_per_series: 3,
            marginals: Marginals::default(),
            marginal_mode: MarginalMode::Sampled,
            size_mean_cm: 1.71,
            size_sd_cm: 1.20,
            size_min_cm: 0.28,
            size_max_cm: 7.4,
            annotations_per_patient: 1,
        }
    }
}

impl PhantomConfig {
    pub fn spacing_cm(&self) -> f64 {
        self.fov_cm / self.matrix as f64
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Config(m));
        if self.n_annotations < 1 {
            return bad("n_annotations must be at least 1".into());
        }
        if self.matrix < 64 {
            return bad(format!("matrix {} is below 64", self.matrix));
        }
        if !(self.fov_cm > 0.0) || self.slices_per_series < 1 || self.annotations_per_patient < 1 {
            return bad("fov_cm, slices_per_series and annotations_per_patient must be positive".into());
        }
        if !(self.size_sd_cm > 0.0 && self.size_mean_cm > 0.0 && 0.0 < self.size_min_cm && self.size_min_cm <= self.size_max_cm) {
            return bad("invalid size distribution".into());
        }
        for (name, ps) in self.marginals.groups() {
            if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ps.iter().sum::<f64>() > 1.0 + 1e-9 {
                return Err(PhantomError::Marginals(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("phantom config: {0}")]
    Config(String),
    #[error("infeasible marginals for {0}: probabilities must lie in [0, 1] and sum to at most 1")]
    Marginals(&'static str),
    #[error("{id}: geometry leaves the field of view")]
    Geometry { id: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("phantom i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Kidney and lesion placement in pixel units, (row, col).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionGeometry {
    pub kidney_center: (f64, f64),
    /// Semi-axes (row, col).
    pub kidney_axes: (f64, f64),
    pub lesion_center: (f64, f64),
    pub lesion_radius_px: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub annotation: Annotation,
    /// Complete truth the images are rendered from.
    pub latent: FeatureSet,
    pub geometry: LesionGeometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub manifest: CohortManifest,
    pub cases: Vec<PhantomCase>,
}

fn case_rng(seed: u64, annotation_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(annotation_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Largest-remainder allocation of `n` items over `probs` plus a trailing remainder class.
fn exact_counts(n: usize, probs: &[f64]) -> Vec<usize> {
    let mut all: Vec<f64> = probs.to_vec();
    all.push((1.0 - probs.iter().sum::<f64>()).max(0.0));
    let raw: Vec<f64> = all.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut short = n - counts.iter().sum::<usize>().min(n);
    for &i in order.iter().cycle().take(all.len() * 2) {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }
    counts
}

/// Category index per case; the last index is "unknown"/"absent".
fn categories(cfg: &PhantomConfig, probs: &[f64], master: &mut ChaCha8Rng, rngs: &mut [ChaCha8Rng]) -> Vec<usize> {
    match cfg.marginal_mode {
        MarginalMode::Exact => {
            let mut v: Vec<usize> = exact_counts(cfg.n_annotations, probs)
                .into_iter()
                .enumerate()
                .flat_map(|(i, c)| std::iter::repeat_n(i, c))
                .collect();
            v.shuffle(master);
            v
        }
        MarginalMode::Sampled => rngs
            .iter_mut()
            .map(|rng| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
                probs.len()
            })
            .collect(),
    }
}

/// Draws a latent value for a masked case in proportion to the known probabilities.
fn latent_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return rng.gen_range(0..probs.len());
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn kidney_layout(cfg: &PhantomConfig, position: Position) -> ((f64, f64), (f64, f64)) {
    let m = cfg.matrix as f64;
    let offset = 0.195 * m;
    let col = if position == Position::Left { m / 2.0 + offset } else { m / 2.0 - offset };
    ((m / 2.0, col), (0.15 * m, 0.08 * m))
}

fn inside_ellipse(p: (f64, f64), c: (f64, f64), axes: (f64, f64)) -> bool {
    let dr = (p.0 - c.0) / axes.0;
    let dc = (p.1 - c.1) / axes.1;
    dr * dr + dc * dc <= 1.0
}

fn disk_inside_ellipse(center: (f64, f64), r: f64, c: (f64, f64), axes: (f64, f64)) -> bool {
    (0..72).all(|i| {
        let t = i as f64 * PI / 36.0;
        inside_ellipse((center.0 + r * t.sin(), center.1 + r * t.cos()), c, axes)
    })
}

/// Interior margin, in pixels, kept between an endophytic lesion and the kidney edge.
const ENDOPHYTIC_MARGIN_PX: f64 = 2.0;

/// Largest endophytic diameter (cm) that fits the kidney at `cfg`'s resolution.
pub fn max_endophytic_cm(cfg: &PhantomConfig) -> f64 {
    let (_, axes) = kidney_layout(cfg, Position::Left);
    let r_px = axes.0.min(axes.1) - ENDOPHYTIC_MARGIN_PX;
    (2.0 * r_px * cfg.spacing_cm() * 100.0).floor() / 100.0
}

fn place_lesion(cfg: &PhantomConfig, latent: &FeatureSet, rng: &mut ChaCha8Rng) -> LesionGeometry {
    let (kc, axes) = kidney_layout(cfg, latent.position);
    let r = latent.size_cm.expect("latent size") / cfg.spacing_cm() / 2.0;
    let lateral = if latent.position == Position::Left { 1.0 } else { -1.0 };
    let center = if latent.exophytic == Growth::Exophytic {
        let theta = rng.gen_range(-PI / 3.0..PI / 3.0);
        (kc.0 + axes.0 * theta.sin(), kc.1 + lateral * axes.1 * theta.cos())
    } else {
        let (u, v): (f64, f64) = loop {
            let (u, v) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if u * u + v * v <= 1.0 {
                break (u, v);
            }
        };
        let reach = (axes.0 - r - ENDOPHYTIC_MARGIN_PX).max(0.0);
        let reach_c = (axes.1 - r - ENDOPHYTIC_MARGIN_PX).max(0.0);
        let mut scale = 1.0;
        let shrunk = (axes.0 - ENDOPHYTIC_MARGIN_PX, axes.1 - ENDOPHYTIC_MARGIN_PX);
        loop {
            let c = (kc.0 + v * reach * scale, kc.1 + u * reach_c * scale);
            if scale < 1e-3 || disk_inside_ellipse(c, r, kc, shrunk) {
                break if scale < 1e-3 { kc } else { c };
            }
            scale *= 0.5;
        }
    };
    LesionGeometry {
        kidney_center: kc,
        kidney_axes: axes,
        lesion_center: center,
        lesion_radius_px: r,
    }
}

fn round_cm(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// A uniformly drawn valid feature set, size on a 0.01 cm grid in `[0.1, 15]`
/// or absent. Used for law checks over the generator and extractor.
pub fn random_feature_set<R: Rng + ?Sized>(rng: &mut R) -> FeatureSet {
    let size = rng.gen_bool(0.8).then(|| f64::from(rng.gen_range(10..=1500u32)) / 100.0);
    FeatureSet {
        position: Position::ALL[rng.gen_range(0..Position::ALL.len())],
        raw_size: size.map(|cm| format!("{} cm", format_size_cm(cm))),
        size_cm: size,
        size_unparseable: false,
        exophytic: Growth::ALL[rng.gen_range(0..Growth::ALL.len())],
        attenuation: Attenuation::ALL[rng.gen_range(0..Attenuation::ALL.len())],
        enhancement: Enhancement::ALL[rng.gen_range(0..Enhancement::ALL.len())],
        cyst: rng.gen(),
        mass: rng.gen(),
        tumor: rng.gen(),
    }
}

/// Samples a cohort: latent truth, geometry, masked manifest features, and sentences.
pub fn sample_cohort(cfg: &PhantomConfig) -> Result<Cohort, PhantomError> {
    cfg.validate()?;
    let n = cfg.n_annotations;
    let ids: Vec<String> = (1..=n).map(|i| format!("ph-{i:04}")).collect();
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rngs: Vec<ChaCha8Rng> = ids.iter().map(|id| case_rng(cfg.seed, id)).collect();
    let m = &cfg.marginals;

    let pos_p = [m.left, m.right];
    let growth_p = [m.exophytic, m.endophytic];
    let att_p = [m.hypoattenuating, m.hyperattenuating, m.isoattenuating];
    let enh_p = [m.enhancement, m.non_enhancement];
    let pos = categories(cfg, &pos_p, &mut master, &mut rngs);
    let size_known = categories(cfg, &[m.size_known], &mut master, &mut rngs);
    let growth = categories(cfg, &growth_p, &mut master, &mut rngs);
    let att = categories(cfg, &att_p, &mut master, &mut rngs);
    let enh = categories(cfg, &enh_p, &mut master, &mut rngs);
    let cyst = categories(cfg, &[m.cyst], &mut master, &mut rngs);
    let mass = categories(cfg, &[m.mass], &mut master, &mut rngs);
    let tumor = categories(cfg, &[m.tumor], &mut master, &mut rngs);

    let sigma2 = (1.0 + (cfg.size_sd_cm / cfg.size_mean_cm).powi(2)).ln();
    let lognormal = LogNormal::new(cfg.size_mean_cm.ln() - sigma2 / 2.0, sigma2.sqrt())
        .map_err(|e| PhantomError::Config(e.to_string()))?;
    let max_endo = max_endophytic_cm(cfg);

    let mut cases = Vec::with_capacity(n);
    for (i, id) in ids.iter().enumerate() {
        let rng = &mut rngs[i];
        let pick = |k: usize, probs: &[f64], rng: &mut ChaCha8Rng| if k < probs.len() { k } else { latent_index(probs, rng) };
        let position = [Position::Left, Position::Right][pick(pos[i], &pos_p, rng)];
        let exophytic = [Growth::Exophytic, Growth::Endophytic][pick(growth[i], &growth_p, rng)];
        let attenuation =
            [Attenuation::Hypoattenuating, Attenuation::Hyperattenuating, Attenuation::Isoattenuating][pick(att[i], &att_p, rng)];
        let enhancement = [Enhancement::Enhancement, Enhancement::NonEnhancement][pick(enh[i], &enh_p, rng)];
        let mut size = round_cm(lognormal.sample(rng).clamp(cfg.size_min_cm, cfg.size_max_cm));
        if exophytic == Growth::Endophytic {
            size = size.min(max_endo);
        }
        let latent = FeatureSet {
            position,
            raw_size: Some(format!("{} cm", format_size_cm(size))),
            size_cm: Some(size),
            size_unparseable: false,
            exophytic,
            attenuation,
            enhancement,
            cyst: cyst[i] == 0,
            mass: mass[i] == 0,
            tumor: tumor[i] == 0,
        };
        let mut masked = latent.clone();
        if pos[i] == pos_p.len() {
            masked.position = Position::Unknown;
        }
        if size_known[i] != 0 {
            masked.size_cm = None;
            masked.raw_size = None;
        }
        if growth[i] == growth_p.len() {
            masked.exophytic = Growth::Unknown;
        }
        if att[i] == att_p.len() {
            masked.attenuation = Attenuation::Unknown;
        }
        if enh[i] == enh_p.len() {
            masked.enhancement = Enhancement::Unknown;
        }
        let geometry = place_lesion(cfg, &latent, rng);
        let center_image = (cfg.slices_per_series / 2 + 1) as u32;
        let annotation = Annotation {
            annotation_id: id.clone(),
            patient_id: format!("pt-{:04}", i / cfg.annotations_per_patient + 1),
            report_id: format!("rpt-{:04}", i + 1),
            sentence: stub_generate(&masked),
            slice: SliceRef::coronal(SERIES_NUMBER, center_image),
            features: masked,
            split_fold: None,
        };
        cases.push(PhantomCase {
            annotation,
            latent,
            geometry,
        });
    }
    let manifest = CohortManifest::new(Provenance::Phantom, cases.iter().map(|c| c.annotation.clone()).collect());
    manifest.validate()?;
    Ok(Cohort { manifest, cases })
}

/// One rendered slice: HU values and the lesion's fractional pixel coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSlice {
    pub hu: Array2<f64>,
    pub lesion_coverage: Array2<f64>,
    pub kidney_mask: Array2<bool>,
}

pub fn lesion_hu(a: Attenuation) -> f64 {
    match a {
        Attenuation::Hypoattenuating => HYPO_LESION_HU,
        Attenuation::Hyperattenuating => HYPER_LESION_HU,
        Attenuation::Isoattenuating | Attenuation::Unknown => ISO_LESION_HU,
    }
}

/// Lesion radius (px) on slice `index`, modelling the lesion as a sphere cut by the slice plane.
pub fn slice_radius_px(case: &PhantomCase, cfg: &PhantomConfig, index: usize) -> f64 {
    let center = cfg.slices_per_series / 2;
    let dz_px = (index as f64 - center as f64).abs() * SLICE_THICKNESS_MM / 10.0 / cfg.spacing_cm();
    let r = case.geometry.lesion_radius_px;
    (r * r - dz_px * dz_px).max(0.0).sqrt()
}

/// Renders slice `index` (0-based, ascending slice location) of a case.
pub fn render_slice(case: &PhantomCase, cfg: &PhantomConfig, index: usize) -> Result<RenderedSlice, PhantomError> {
    let m = cfg.matrix;
    let g = &case.geometry;
    let r = slice_radius_px(case, cfg, index);
    let (lr, lc) = g.lesion_center;
    let reach = g.lesion_radius_px + 1.0;
    if lr - reach < MARKER_SIZE as f64 || lc - reach < 0.0 || lr + reach > m as f64 || lc + reach > m as f64 {
        return Err(PhantomError::Geometry {
            id: case.annotation.annotation_id.clone(),
        });
    }
    let mf = m as f64;
    let body_axes = (0.36 * mf, 0.45 * mf);
    let body_center = (mf / 2.0, mf / 2.0);
    let mut hu = Array2::from_elem((m, m), AIR_HU);
    let mut kidney_mask = Array2::from_elem((m, m), false);
    let (other_center, _) = kidney_layout(
        cfg,
        if case.latent.position == Position::Left { Position::Right } else { Position::Left },
    );
    for ((row, col), v) in hu.indexed_iter_mut() {
        let p = (row as f64 + 0.5, col as f64 + 0.5);
        if inside_ellipse(p, body_center, body_axes) {
            *v = SOFT_TISSUE_HU;
        }
        if inside_ellipse(p, g.kidney_center, g.kidney_axes) || inside_ellipse(p, other_center, g.kidney_axes) {
            *v = KIDNEY_HU;
            kidney_mask[(row, col)] = true;
        }
    }

    let mut coverage = Array2::zeros((m, m));
    if r > 0.0 {
        let target = lesion_hu(case.latent.attenuation);
        let r0 = (lr - r).floor().max(0.0) as usize;
        let r1 = ((lr + r).ceil() as usize).min(m - 1);
        let c0 = (lc - r).floor().max(0.0) as usize;
        let c1 = ((lc + r).ceil() as usize).min(m - 1);
        let step = 1.0 / SUPERSAMPLE as f64;
        for row in r0..=r1 {
            for col in c0..=c1 {
                let mut inside = 0usize;
                for sr in 0..SUPERSAMPLE {
                    for sc in 0..SUPERSAMPLE {
                        let y = row as f64 + (sr as f64 + 0.5) * step - lr;
                        let x = col as f64 + (sc as f64 + 0.5) * step - lc;
                        if x * x + y * y <= r * r {
                            inside += 1;
                        }
                    }
                }
                let frac = inside as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                if frac > 0.0 {
                    coverage[(row, col)] = frac;
                    let v = &mut hu[(row, col)];
                    *v = *v * (1.0 - frac) + target * frac;
                }
            }
        }
    }
    for row in 0..MARKER_SIZE {
        for col in 0..MARKER_SIZE {
            hu[(row, col)] = MARKER_BASE_HU + index as f64;
        }
    }
    Ok(RenderedSlice {
        hu,
        lesion_coverage: coverage,
        kidney_mask,
    })
}

/// Equivalent-circle diameter (cm) of a coverage map.
pub fn measured_diameter_cm(coverage: &Array2<f64>, spacing_cm: f64) -> f64 {
    let area: f64 = coverage.sum();
    2.0 * (area / PI).sqrt() * spacing_cm
}

/// Corner-marker slice index of a HU grid, if the marker is intact.
pub fn marker_index(hu: &Array2<f64>) -> Option<usize> {
    let v = hu[(0, 0)];
    let ok = (0..MARKER_SIZE).all(|r| (0..MARKER_SIZE).all(|c| hu[(r, c)] == v));
    (ok && v >= MARKER_BASE_HU).then(|| (v - MARKER_BASE_HU).round() as usize)
}

/// Rendered slice as stored integers (`HU − RESCALE_INTERCEPT`, rounded).
pub fn to_ct_slice(hu: &Array2<f64>, cfg: &PhantomConfig, index: usize, source: PathBuf) -> CtSlice {
    let (rows, cols) = hu.dim();
    let spacing_mm = cfg.spacing_cm() * 10.0;
    CtSlice {
        source,
        slice_location: index as f64 * SLICE_THICKNESS_MM,
        instance_number: index as i32 + 1,
        rescale_slope: 1.0,
        rescale_intercept: RESCALE_INTERCEPT,
        rows,
        cols,
        pixel_spacing: Some((spacing_mm, spacing_mm)),
        stored: hu.iter().map(|&h| (h - RESCALE_INTERCEPT).round() as i32).collect(),
    }
}

/// The full series of a case, in memory.
pub fn render_volume(case: &PhantomCase, cfg: &PhantomConfig) -> Result<CtVolume, PhantomError> {
    let slices = (0..cfg.slices_per_series)
        .map(|k| Ok(to_ct_slice(&render_slice(case, cfg, k)?.hu, cfg, k, PathBuf::new())))
        .collect::<Result<Vec<_>, PhantomError>>()?;
    Ok(CtVolume::from_slices(slices)?)
}

fn uid_root(seed: u64, id: &str) -> String {
    let d = Sha256::digest(format!("{seed}/{id}").as_bytes());
    let n = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    format!("2.25.{n}")
}

/// Writes one case's series as part-10 files under `root/{report_id}/series_{n}/`.
pub fn export_case(case: &PhantomCase, cfg: &PhantomConfig, root: &Path) -> Result<Vec<PathBuf>, PhantomError> {
    let a = &case.annotation;
    let dir = series_dir(root, &a.report_id, a.slice.series_number);
    fs::create_dir_all(&dir)?;
    let base = uid_root(cfg.seed, &a.annotation_id);
    let info = SeriesInfo {
        patient_id: a.patient_id.clone(),
        study_uid: format!("{base}.1"),
        series_uid: format!("{base}.{}", a.slice.series_number),
        series_number: a.slice.series_number,
    };
    let mut written = Vec::new();
    for k in 0..cfg.slices_per_series {
        let path = dir.join(format!("IM{:04}.dcm", k + 1));
        let slice = to_ct_slice(&render_slice(case, cfg, k)?.hu, cfg, k, path.clone());
        write_dicom_slice(&path, &slice, &info)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes `manifest.jsonl` and every case's DICOM series under `root`.
pub fn export_cohort(cohort: &Cohort, cfg: &PhantomConfig, root: &Path) -> Result<Vec<PathBuf>, PhantomError> {
    fs::create_dir_all(root)?;
    save_manifest(&cohort.manifest, root.join("manifest.jsonl"))?;
    let mut written = Vec::new();
    for case in &cohort.cases {
        written.extend(export_case(case, cfg, &root.join("dicom"))?);
    }
    Ok(written)
}

/// SHA-256 of every file below `root`, keyed by `/`-separated relative path.
pub fn tree_hashes(root: &Path) -> Result<BTreeMap<String, String>, PhantomError> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) -> std::io::Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(&p, root, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("below root");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.insert(key, format!("{:x}", Sha256::digest(fs::read(&p)?)));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> PhantomConfig {
        PhantomConfig {
            n_annotations: n,
            ..Default::default()
        }
    }

    #[test]
    fn exact_counts_hit_reference_marginals() {
        let cfg = PhantomConfig {
            marginal_mode: MarginalMode::Exact,
            ..Default::default()
        };
        let c = sample_cohort(&cfg).unwrap();
        let fs: Vec<&FeatureSet> = c.manifest.annotations.iter().map(|a| &a.features).collect();
        let count = |p: &dyn Fn(&FeatureSet) -> bool| fs.iter().filter(|f| p(f)).count();
        assert_eq!(count(&|f| f.position == Position::Left), 61);
        assert_eq!(count(&|f| f.position == Position::Right), 68);
        assert_eq!(count(&|f| f.size_cm.is_some()), 112);
        assert_eq!(count(&|f| f.exophytic == Growth::Endophytic), 2);
        assert_eq!(count(&|f| f.attenuation == Attenuation::Isoattenuating), 6);
        assert_eq!(count(&|f| f.enhancement == Enhancement::Unknown), 94);
        assert_eq!(count(&|f| f.cyst), 78);
        assert_eq!(count(&|f| f.tumor), 7);
    }

    #[test]
    fn single_case_and_determinism() {
        let one = sample_cohort(&small(1)).unwrap();
        assert_eq!(one.manifest.len(), 1);
        assert_eq!(sample_cohort(&small(20)).unwrap(), sample_cohort(&small(20)).unwrap());
    }

    #[test]
    fn infeasible_marginals_rejected() {
        let mut cfg = small(5);
        cfg.marginals.left = 0.7;
        cfg.marginals.right = 0.7;
        assert!(matches!(sample_cohort(&cfg), Err(PhantomError::Marginals("position"))));
    }

    #[test]
    fn two_centimetre_disk_measures_true() {
        let mut c = sample_cohort(&small(1)).unwrap().cases.remove(0);
        let cfg = small(1);
        c.geometry.lesion_radius_px = 2.0 / cfg.spacing_cm() / 2.0;
        assert!((c.geometry.lesion_radius_px * 2.0 - 25.6).abs() < 1e-12);
        let s = render_slice(&c, &cfg, 1).unwrap();
        let d = measured_diameter_cm(&s.lesion_coverage, cfg.spacing_cm());
        assert!((d - 2.0).abs() < 0.5 * cfg.spacing_cm());
    }

    #[test]
    fn hypo_lesion_darker_than_kidney() {
        let cfg = small(40);
        let cohort = sample_cohort(&cfg).unwrap();
        let case = cohort
            .cases
            .iter()
            .find(|c| c.latent.attenuation == Attenuation::Hypoattenuating && c.latent.size_cm.unwrap() > 1.0)
            .unwrap();
        let s = render_slice(case, &cfg, 1).unwrap();
        let lesion: Vec<f64> = s.hu.iter().zip(&s.lesion_coverage).filter(|(_, &c)| c == 1.0).map(|(h, _)| *h).collect();
        let kidney: Vec<f64> = s
            .hu
            .iter()
            .zip(s.kidney_mask.iter().zip(&s.lesion_coverage))
            .filter(|(_, (&k, &c))| k && c == 0.0)
            .map(|(h, _)| *h)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&lesion) < mean(&kidney));
        assert_eq!(marker_index(&s.hu), Some(1));
    }

    #[test]
    fn side_recoverable_from_lesion_column() {
        let cfg = small(30);
        for c in sample_cohort(&cfg).unwrap().cases {
            let left = c.geometry.lesion_center.1 > cfg.matrix as f64 / 2.0;
            assert_eq!(left, c.latent.position == Position::Left);
        }
    }
}
