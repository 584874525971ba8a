//! On-disk cases: F32G grids plus a JSON manifest per case, and a case-set
//! index grouping cases into training and test splits.
//!
//! Paths inside manifests are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CineSequence, DisplacementField, LabelMap, Spacing};
use crate::io::{read_class_indices, read_field, read_image, read_labelmap, write_class_indices, write_field, write_image, write_labelmap};
use crate::phantom::{generate, PhantomConfig, SyntheticCase};
use crate::pipeline::TrainingCase;

pub const CASE_SCHEMA: &str = "phantom-v1";
pub const CASESET_SCHEMA: &str = "caseset-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub schema: String,
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub spacing: Spacing,
    pub reference_index: usize,
    pub frames: Vec<String>,
    /// K-channel gold anatomy at the reference frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anatomy: Option<String>,
    /// 3-channel gold pathology at the reference frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathology: Option<String>,
    /// Ground-truth fields, one per frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_fields: Option<Vec<String>>,
    /// Hard anatomy labels per frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_anatomy: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<PhantomConfig>,
}

/// A case read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub manifest: CaseManifest,
    pub sequence: CineSequence,
    pub anatomy: Option<LabelMap>,
    pub pathology: Option<LabelMap>,
    pub motion_fields: Option<Vec<DisplacementField>>,
    pub frame_anatomy: Option<Vec<Vec<usize>>>,
}

impl LoadedCase {
    pub fn training_case(&self) -> Result<TrainingCase> {
        let missing = |what: &str| Error::InvalidInput(format!("case {} has no gold {what}", self.manifest.name));
        TrainingCase::new(
            self.manifest.name.clone(),
            self.sequence.clone(),
            self.anatomy.clone().ok_or_else(|| missing("anatomy"))?,
            self.pathology.clone().ok_or_else(|| missing("pathology"))?,
        )
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Reads a JSON document whose `schema` field must equal `schema`.
pub fn read_versioned<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let found = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<none>");
    if found != schema {
        return Err(Error::Schema {
            expected: schema.into(),
            found: found.into(),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes every grid of `case` under `dir` and returns the manifest, which is
/// also saved as `dir/manifest.json`.
pub fn write_case(case: &SyntheticCase, name: &str, dir: &Path) -> Result<CaseManifest> {
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("truth"))?;
    let seq = &case.sequence;
    let mut frames = Vec::with_capacity(seq.len());
    let mut fields = Vec::with_capacity(seq.len());
    let mut labels = Vec::with_capacity(seq.len());
    for i in 0..seq.len() {
        let f = format!("frames/frame_{i:03}.f32g");
        write_image(&dir.join(&f), seq.frame(i))?;
        frames.push(f);
        let p = format!("truth/phi_{i:03}.f32g");
        write_field(&dir.join(&p), &case.motion_fields[i])?;
        fields.push(p);
        let l = format!("truth/anatomy_{i:03}.f32g");
        write_class_indices(&dir.join(&l), seq.width(), seq.height(), &case.frame_anatomy[i])?;
        labels.push(l);
    }
    write_labelmap(&dir.join("anatomy.f32g"), &case.anatomy)?;
    write_labelmap(&dir.join("pathology.f32g"), &case.pathology)?;
    let manifest = CaseManifest {
        schema: CASE_SCHEMA.into(),
        name: name.into(),
        width: seq.width(),
        height: seq.height(),
        spacing: seq.spacing(),
        reference_index: seq.reference_index(),
        frames,
        anatomy: Some("anatomy.f32g".into()),
        pathology: Some("pathology.f32g".into()),
        motion_fields: Some(fields),
        frame_anatomy: Some(labels),
        seed: Some(case.config.seed),
        config: Some(case.config.clone()),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn check_dims(path: &Path, w: usize, h: usize, m: &CaseManifest) -> Result<()> {
    if (w, h) != (m.width, m.height) {
        return Err(Error::DimensionMismatch {
            context: "case grid",
            expected: format!("{}x{}", m.width, m.height),
            found: format!("{w}x{h} in {}", path.display()),
        });
    }
    Ok(())
}

pub fn load_case(manifest_path: &Path) -> Result<LoadedCase> {
    let manifest: CaseManifest = read_versioned(manifest_path, CASE_SCHEMA)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let frames = manifest
        .frames
        .iter()
        .map(|f| {
            let img = read_image(&dir.join(f), manifest.spacing)?;
            check_dims(&dir.join(f), img.width(), img.height(), &manifest)?;
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    let sequence = CineSequence::new(frames, manifest.reference_index)?;
    let label = |f: &Option<String>| -> Result<Option<LabelMap>> {
        f.as_ref()
            .map(|f| {
                let l = read_labelmap(&dir.join(f))?;
                check_dims(&dir.join(f), l.width(), l.height(), &manifest)?;
                Ok(l)
            })
            .transpose()
    };
    let anatomy = label(&manifest.anatomy)?;
    let pathology = label(&manifest.pathology)?;
    let motion_fields = manifest
        .motion_fields
        .as_ref()
        .map(|fs| {
            fs.iter()
                .map(|f| {
                    let phi = read_field(&dir.join(f))?;
                    check_dims(&dir.join(f), phi.width(), phi.height(), &manifest)?;
                    Ok(phi)
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let frame_anatomy = manifest
        .frame_anatomy
        .as_ref()
        .map(|fs| {
            fs.iter()
                .map(|f| {
                    let (w, h, l) = read_class_indices(&dir.join(f))?;
                    check_dims(&dir.join(f), w, h, &manifest)?;
                    Ok(l)
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(LoadedCase {
        manifest,
        sequence,
        anatomy,
        pathology,
        motion_fields,
        frame_anatomy,
    })
}

/// How `synth` builds a case set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub phantom: PhantomConfig,
    pub train_cases: usize,
    pub test_cases: usize,
    /// Rotation of the scar sector from one case to the next, degrees.
    pub scar_step_deg: f64,
    /// Seeds the per-case phantom seeds.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            phantom: PhantomConfig::default(),
            train_cases: 4,
            test_cases: 2,
            scar_step_deg: 55.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_cases + self.test_cases == 0 {
            return Err(Error::InvalidConfig("a case set needs at least one case".into()));
        }
        if !self.scar_step_deg.is_finite() {
            return Err(Error::InvalidConfig("scar_step_deg must be finite".into()));
        }
        self.phantom.validate()
    }

    /// Phantom configuration of case `k`.
    pub fn case_configs(&self) -> Vec<PhantomConfig> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.train_cases + self.test_cases)
            .map(|k| PhantomConfig {
                seed: rng.random(),
                scar_start_deg: (self.phantom.scar_start_deg + k as f64 * self.scar_step_deg).rem_euclid(360.0),
                ..self.phantom.clone()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub name: String,
    pub manifest: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSet {
    pub schema: String,
    pub cases: Vec<CaseEntry>,
}

impl CaseSet {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let set: CaseSet = read_versioned(path, CASESET_SCHEMA)?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((set, dir))
    }

    pub fn manifests(&self, dir: &Path, split: Option<Split>) -> Vec<PathBuf> {
        self.cases
            .iter()
            .filter(|c| split.is_none_or(|s| c.split == s))
            .map(|c| dir.join(&c.manifest))
            .collect()
    }
}

/// Generates and writes a case set; cases land in `out/<name>/`.
pub fn write_case_set(cfg: &SynthConfig, out: &Path) -> Result<CaseSet> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut cases = Vec::new();
    for (k, pc) in cfg.case_configs().into_iter().enumerate() {
        let name = format!("case{k:03}");
        let case = generate(&pc).map_err(|e| e.with_context(name.clone()))?;
        write_case(&case, &name, &out.join(&name))?;
        cases.push(CaseEntry {
            manifest: format!("{name}/manifest.json"),
            split: if k < cfg.train_cases { Split::Train } else { Split::Test },
            name,
        });
    }
    let set = CaseSet {
        schema: CASESET_SCHEMA.into(),
        cases,
    };
    write_json(&out.join("caseset.json"), &set)?;
    Ok(set)
}
