//! Volumes, patients, dataset manifests and patient-level splits.

pub mod nifti;
pub mod raw;
pub mod splits;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::preprocess::Plane;

pub const NUM_CLASSES: usize = 4;
pub const BACKGROUND: u8 = 0;
pub const RV: u8 = 1;
pub const MYO: u8 = 2;
pub const LV: u8 = 3;
pub const LABEL_NAMES: [&str; NUM_CLASSES] = ["background", "RV", "MYO", "LV"];

/// Cardiac phase of a labeled volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// End diastole.
    ED,
    /// Mid systole.
    MS,
    /// End systole.
    ES,
    /// Peak flow.
    PF,
    /// Mid diastole.
    MD,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::ED, Phase::MS, Phase::ES, Phase::PF, Phase::MD];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::ED => "ED",
            Phase::MS => "MS",
            Phase::ES => "ES",
            Phase::PF => "PF",
            Phase::MD => "MD",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dense `[slices, height, width]` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub shape: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Copy> Volume<T> {
    pub fn new(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(shape_err!("volume shape {shape:?} with {} values", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn slices(&self) -> usize {
        self.shape[0]
    }

    pub fn slice(&self, s: usize) -> Plane<T> {
        let n = self.shape[1] * self.shape[2];
        Plane { height: self.shape[1], width: self.shape[2], data: self.data[s * n..(s + 1) * n].to_vec() }
    }
}

/// One patient-phase image with its label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub patient_id: String,
    pub pathology: String,
    pub phase: Phase,
    pub image: Volume<f32>,
    pub mask: Volume<u8>,
    /// `(z, y, x)` voxel size in millimetres.
    pub spacing: [f64; 3],
}

impl VolumeSample {
    pub fn validate(&self) -> Result<()> {
        if self.image.shape != self.mask.shape {
            return Err(Error::Validation(format!(
                "{} {}: image shape {:?} differs from mask shape {:?}",
                self.patient_id, self.phase, self.image.shape, self.mask.shape
            )));
        }
        if let Some(bad) = self.mask.data.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!(
                "{} {}: unknown label value {bad}",
                self.patient_id, self.phase
            )));
        }
        if !self.spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Validation(format!(
                "{} {}: spacing {:?} must be positive",
                self.patient_id, self.phase, self.spacing
            )));
        }
        if !self.image.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!("{} {}: non-finite voxel", self.patient_id, self.phase)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub pathology: String,
    pub volumes: Vec<VolumeSample>,
}

/// Patients of one cohort, each with all of their labeled phases.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    /// Provenance tag of the collection, e.g. `A` or `B`.
    pub cohort: String,
    pub patients: Vec<Patient>,
}

impl DatasetIndex {
    /// Groups samples by patient, keeping first-appearance order.
    pub fn from_samples(cohort: impl Into<String>, samples: Vec<VolumeSample>) -> Result<Self> {
        let mut patients: Vec<Patient> = Vec::new();
        let mut slot: BTreeMap<String, usize> = BTreeMap::new();
        for s in samples {
            s.validate()?;
            match slot.get(&s.patient_id) {
                Some(&i) => {
                    if patients[i].pathology != s.pathology {
                        return Err(Error::Validation(format!(
                            "patient {} has conflicting pathology tags",
                            s.patient_id
                        )));
                    }
                    patients[i].volumes.push(s);
                }
                None => {
                    slot.insert(s.patient_id.clone(), patients.len());
                    patients.push(Patient {
                        id: s.patient_id.clone(),
                        pathology: s.pathology.clone(),
                        volumes: vec![s],
                    });
                }
            }
        }
        Ok(Self { cohort: cohort.into(), patients })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.id.clone()).collect()
    }

    /// The listed patients, in this index's order.
    pub fn subset(&self, ids: &[String]) -> Self {
        Self {
            cohort: self.cohort.clone(),
            patients: self.patients.iter().filter(|p| ids.contains(&p.id)).cloned().collect(),
        }
    }

    /// Patients of both indices; `other`'s patients follow this index's.
    pub fn union(&self, other: &Self) -> Self {
        let mut patients = self.patients.clone();
        patients.extend(other.patients.iter().cloned());
        Self { cohort: format!("{}+{}", self.cohort, other.cohort), patients }
    }

    pub fn volumes(&self) -> impl Iterator<Item = &VolumeSample> {
        self.patients.iter().flat_map(|p| p.volumes.iter())
    }

    pub fn pathologies(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.patients.iter().map(|p| p.pathology.clone()).collect();
        tags.sort();
        tags.dedup();
        tags
    }
}

/// `[C, S, H, W]` indicator channels of a label volume.
pub fn one_hot(mask: &Volume<u8>, num_classes: usize) -> Result<Vec<u8>> {
    let n = mask.data.len();
    let mut out = vec![0u8; num_classes * n];
    for (i, &l) in mask.data.iter().enumerate() {
        if l as usize >= num_classes {
            return Err(Error::Validation(format!("label {l} outside {num_classes} classes")));
        }
        out[l as usize * n + i] = 1;
    }
    Ok(out)
}

/// One record of a dataset manifest; paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub pathology: String,
    pub phase: Phase,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    Raw,
    Nifti,
}

fn read_image(path: &Path) -> Result<(Volume<f32>, [f64; 3])> {
    if is_nifti(path) {
        nifti::read_nifti(path)
    } else {
        let (v, meta) = raw::read_raw(path)?;
        Ok((v, meta.spacing))
    }
}

fn is_nifti(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "nii")
}

/// Loads an image/mask pair in either supported format.
pub fn load_volume(
    image_path: &Path,
    mask_path: &Path,
    patient_id: &str,
    pathology: &str,
    phase: Phase,
) -> Result<VolumeSample> {
    let (image, spacing) = read_image(image_path)?;
    let (mask_values, _) = read_image(mask_path)?;
    let mut mask = Vec::with_capacity(mask_values.data.len());
    for &v in &mask_values.data {
        if v < 0.0 || v.fract() != 0.0 || v as usize >= NUM_CLASSES {
            return Err(Error::Validation(format!(
                "{}: unknown label value {v}",
                mask_path.display()
            )));
        }
        mask.push(v as u8);
    }
    let sample = VolumeSample {
        patient_id: patient_id.into(),
        pathology: pathology.into(),
        phase,
        image,
        mask: Volume { shape: mask_values.shape, data: mask },
        spacing,
    };
    sample.validate()?;
    Ok(sample)
}

/// Reads a dataset manifest and every volume it lists.
pub fn load_manifest(path: &Path, cohort: &str) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let root = path.parent().unwrap_or(Path::new("."));
    let samples = entries
        .iter()
        .map(|e| {
            load_volume(&root.join(&e.image_path), &root.join(&e.mask_path), &e.patient_id, &e.pathology, e.phase)
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetIndex::from_samples(cohort, samples)
}

/// Writes every volume of `index` under `dir` plus a `manifest.json`.
pub fn write_dataset(dir: &Path, index: &DatasetIndex, format: VolumeFormat) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut entries = Vec::new();
    for v in index.volumes() {
        let stem = format!("{}_{}", v.patient_id, v.phase);
        let (image_path, mask_path) = match format {
            VolumeFormat::Raw => {
                let img = PathBuf::from(format!("{stem}_image.json"));
                let msk = PathBuf::from(format!("{stem}_mask.json"));
                raw::write_raw(&dir.join(&img), &v.image, v.spacing, None)?;
                let labels: Vec<f32> = v.mask.data.iter().map(|&l| l as f32).collect();
                let mask = Volume { shape: v.mask.shape, data: labels };
                raw::write_raw(&dir.join(&msk), &mask, v.spacing, Some(&LABEL_NAMES))?;
                (img, msk)
            }
            VolumeFormat::Nifti => {
                let img = PathBuf::from(format!("{stem}_image.nii"));
                let msk = PathBuf::from(format!("{stem}_mask.nii"));
                nifti::write_nifti_f32(&dir.join(&img), &v.image, v.spacing)?;
                nifti::write_nifti_u8(&dir.join(&msk), &v.mask, v.spacing)?;
                (img, msk)
            }
        };
        entries.push(ManifestEntry {
            patient_id: v.patient_id.clone(),
            pathology: v.pathology.clone(),
            phase: v.phase,
            image_path,
            mask_path,
        });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries)?;
    std::fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}
