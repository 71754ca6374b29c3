//! Ring-and-blob cardiac phantoms.
//!
//! Each short-axis slice holds a bright LV blood pool (disk), a dark MYO
//! annulus around it and a bright RV crescent on its left, inside a textured
//! body ellipse. Geometry is drawn in millimetres and rasterized at a
//! per-patient pixel spacing, so the same anatomy appears at different pixel
//! scales. Distribution `A` covers five pathology tags with moderate
//! variation; distribution `B` (tag `TOF`) enlarges the RV, roughens its
//! boundary and lowers its contrast.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetIndex, Phase, Volume, VolumeSample, LV, MYO, RV};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SeedPart, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distribution {
    A,
    B,
}

pub const PATHOLOGIES_A: [&str; 5] = ["NOR", "MINF", "DCM", "HCM", "ARV"];
pub const PATHOLOGY_B: &str = "TOF";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub distribution: Distribution,
    pub n_patients: usize,
    pub phases: Vec<Phase>,
    pub slices: usize,
    /// Inclusive range of in-plane extents (height and width drawn independently).
    pub image_size: [usize; 2],
    /// In-plane pixel spacing range in millimetres.
    pub spacing: [f64; 2],
    /// LV blood-pool radius range at end diastole, millimetres.
    pub lv_radius_mm: [f64; 2],
    /// Gaussian noise relative to the LV blood intensity.
    pub noise: f64,
    /// Fraction of voxels replaced by scanner-like outliers near 20000.
    pub outlier_fraction: f64,
    pub id_prefix: Option<String>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            distribution: Distribution::A,
            n_patients: 16,
            phases: vec![Phase::ED, Phase::ES],
            slices: 10,
            image_size: [60, 84],
            spacing: [1.2, 1.6],
            lv_radius_mm: [10.0, 14.0],
            noise: 0.06,
            outlier_fraction: 3e-4,
            id_prefix: None,
        }
    }
}

impl SynthSpec {
    pub fn new(distribution: Distribution, n_patients: usize) -> Self {
        Self { distribution, n_patients, ..Self::default() }
    }

    /// Same anatomy at a coarser pixel grid: extents and spacing scaled by `1/factor`
    /// and `factor` respectively.
    pub fn downscaled(mut self, factor: f64) -> Self {
        self.image_size = self.image_size.map(|s| ((s as f64 / factor).round() as usize).max(1));
        self.spacing = self.spacing.map(|s| s * factor);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 || self.slices == 0 || self.phases.is_empty() {
            return bad("phantoms need patients, slices and phases".into());
        }
        if self.image_size[0] < 16 || self.image_size[0] > self.image_size[1] {
            return bad(format!("image size range {:?} is degenerate", self.image_size));
        }
        let positive = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !positive(self.spacing) || !positive(self.lv_radius_mm) {
            return bad("spacing and radius ranges must be positive and ordered".into());
        }
        // LV, MYO and the RV beside them span about three outer myocardial radii
        let span_px = 3.0 * (self.lv_radius_mm[1] + 7.0) / self.spacing[0];
        if span_px > self.image_size[0] as f64 {
            return bad(format!(
                "phantom heart spans up to {span_px:.0} px, larger than {} px images",
                self.image_size[0]
            ));
        }
        if !(0.0..0.01).contains(&self.outlier_fraction) || self.noise < 0.0 {
            return bad("noise must be non-negative and outliers below 1%".into());
        }
        Ok(())
    }
}

/// Per-patient anatomy, millimetres.
struct Anatomy {
    lv_radius: f64,
    myo_thickness: f64,
    rv_scale: f64,
    rv_roughness: f64,
    rv_phase: [f64; 2],
    rv_intensity: f64,
    spacing: f64,
    center_jitter: [f64; 2],
}

fn phase_contraction(phase: Phase) -> f64 {
    match phase {
        Phase::ED => 1.0,
        Phase::MS => 0.86,
        Phase::ES => 0.76,
        Phase::PF => 0.82,
        Phase::MD => 0.94,
    }
}

fn anatomy(spec: &SynthSpec, pathology: &str, rng: &mut SeededRng) -> Anatomy {
    let mut a = Anatomy {
        lv_radius: rng.gen_range(spec.lv_radius_mm[0]..=spec.lv_radius_mm[1]),
        myo_thickness: rng.gen_range(5.0..7.0),
        rv_scale: rng.gen_range(0.95..1.1),
        rv_roughness: 0.0,
        rv_phase: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
        rv_intensity: 0.9,
        spacing: rng.gen_range(spec.spacing[0]..=spec.spacing[1]),
        center_jitter: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
    };
    match pathology {
        "DCM" => {
            a.lv_radius *= 1.15;
            a.myo_thickness *= 0.8;
        }
        "HCM" => {
            a.lv_radius *= 0.88;
            a.myo_thickness *= 1.3;
        }
        "MINF" => a.myo_thickness *= 0.9,
        "ARV" => a.rv_scale *= 1.15,
        PATHOLOGY_B => {
            a.rv_scale *= 1.5;
            a.rv_roughness = 0.16;
            a.rv_intensity = 0.72;
        }
        _ => {}
    }
    a
}

/// Rasterizes one slice; returns image intensities (before gain) and labels.
#[allow(clippy::too_many_arguments)]
fn slice(
    a: &Anatomy,
    h: usize,
    w: usize,
    contraction: f64,
    level: f64,
    texture: &[f64; 4],
    spacing: f64,
) -> (Vec<f64>, Vec<u8>) {
    let r_lv = a.lv_radius * contraction * level / spacing;
    let t = a.myo_thickness * (1.0 + 0.35 * (1.0 - contraction)) * level.sqrt() / spacing;
    let outer = r_lv + t;
    let cy = h as f64 / 2.0 + a.center_jitter[0] * 4.0 / spacing;
    let cx = w as f64 / 2.0 + (4.0 + 4.0 * a.center_jitter[1]) / spacing;
    let rv_r = outer * a.rv_scale * (0.9 + 0.1 * contraction);
    let (ry, rx) = (cy + 0.1 * outer, cx - 0.8 * outer);
    let (by, bx) = (h as f64 * 0.42, w as f64 * 0.44);
    let mut img = Vec::with_capacity(h * w);
    let mut lab = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let d = ((py - cy).powi(2) + (px - cx).powi(2)).sqrt();
            let (vy, vx) = (py - ry, px - rx);
            let theta = vy.atan2(vx);
            let rough = 1.0
                + a.rv_roughness * (3.0 * theta + a.rv_phase[0]).sin()
                + 0.5 * a.rv_roughness * (5.0 * theta + a.rv_phase[1]).sin();
            let in_rv = (vy * vy + vx * vx).sqrt() < rv_r * rough && d >= outer + 1.0;
            let body = ((py - h as f64 / 2.0) / by).powi(2) + ((px - w as f64 / 2.0) / bx).powi(2) < 1.0;
            let tissue = 0.35
                + 0.06 * (texture[0] * py / h as f64 + texture[1]).sin()
                + 0.06 * (texture[2] * px / w as f64 + texture[3]).cos();
            let (label, value) = if d < r_lv {
                (LV, 1.0)
            } else if d < outer {
                (MYO, 0.15)
            } else if in_rv {
                (RV, a.rv_intensity)
            } else if body {
                (0, tissue)
            } else {
                (0, 0.03)
            };
            img.push(value);
            lab.push(label);
        }
    }
    (img, lab)
}

fn patient(spec: &SynthSpec, i: usize, seed: u64) -> Vec<VolumeSample> {
    let (prefix, pathology) = match spec.distribution {
        Distribution::A => ("A", PATHOLOGIES_A[i % PATHOLOGIES_A.len()]),
        Distribution::B => ("B", PATHOLOGY_B),
    };
    let id = format!("{}{:03}", spec.id_prefix.as_deref().unwrap_or(prefix), i);
    let mut rng = rng_from_seed(derive_seed(seed, &[SeedPart::Str(prefix), SeedPart::from(i)]));
    let a = anatomy(spec, pathology, &mut rng);
    let h = rng.gen_range(spec.image_size[0]..=spec.image_size[1]);
    let w = rng.gen_range(spec.image_size[0]..=spec.image_size[1]);
    let z_spacing = rng.gen_range(6.0..10.0);
    let gain = rng.gen_range(300.0..900.0);
    let texture = [rng.gen_range(2.0..6.0), rng.gen_range(0.0..6.0), rng.gen_range(2.0..6.0), rng.gen_range(0.0..6.0)];
    let noise = Normal::new(0.0, spec.noise).unwrap();
    spec.phases
        .iter()
        .map(|&phase| {
            let mut rng = rng_from_seed(derive_seed(seed, &[SeedPart::Str(&id), SeedPart::Str(phase.as_str())]));
            let n = h * w;
            let mut image = Vec::with_capacity(spec.slices * n);
            let mut mask = Vec::with_capacity(spec.slices * n);
            for s in 0..spec.slices {
                let level = if spec.slices > 1 { 1.0 - 0.35 * s as f64 / (spec.slices - 1) as f64 } else { 1.0 };
                let (img, lab) = slice(&a, h, w, phase_contraction(phase), level, &texture, a.spacing);
                image.extend(img.iter().map(|&v| ((v + noise.sample(&mut rng)) * gain).max(0.0) as f32));
                mask.extend(lab);
            }
            let outliers = (spec.outlier_fraction * image.len() as f64).round() as usize;
            for _ in 0..outliers {
                let at = rng.gen_range(0..image.len());
                image[at] = rng.gen_range(19_000.0..21_000.0);
            }
            VolumeSample {
                patient_id: id.clone(),
                pathology: pathology.into(),
                phase,
                image: Volume { shape: [spec.slices, h, w], data: image },
                mask: Volume { shape: [spec.slices, h, w], data: mask },
                spacing: [z_spacing, a.spacing, a.spacing],
            }
        })
        .collect()
}

/// Generates `spec.n_patients` phantom patients deterministically from `seed`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<DatasetIndex> {
    spec.validate()?;
    let samples = (0..spec.n_patients).flat_map(|i| patient(spec, i, seed)).collect();
    let cohort = match spec.distribution {
        Distribution::A => "A",
        Distribution::B => "B",
    };
    DatasetIndex::from_samples(cohort, samples)
}
