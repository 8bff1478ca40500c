//! Synthetic retrospective-undersampling datasets and their on-disk layout.
//!
//! A dataset directory holds `manifest.json` plus one `case_NNNN/` directory
//! per case containing `x.melt` (ground truth), `y.melt` (k-space),
//! `mask.melt` and `sens.melt`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    make_kt_mask, make_phantom, make_poisson_disk_mask, make_sensitivities, EncodingOperator, PhantomKind,
    SamplingMask, SensitivityMaps,
};
use crate::error::{Error, Result};
use crate::tensor::{melt, ComplexTensor, C64};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "modl-mel-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Image shape: `[H, W]` for static cases, `[T, H, W]` for cine.
    pub shape: Vec<usize>,
    pub kind: PhantomKind,
    pub coils: usize,
    pub acceleration: f64,
    /// Side of the fully sampled square calibration region (static masks).
    pub calib: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Noise standard deviation relative to `max |y|`.
    pub noise_rel: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            shape: vec![32, 32],
            kind: PhantomKind::Static2d,
            coils: 4,
            acceleration: 4.0,
            calib: 6,
            n_train: 16,
            n_val: 4,
            n_test: 4,
            noise_rel: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidParameter(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Case {
    pub id: usize,
    pub split: Split,
    pub seed: u64,
    pub sigma: f64,
    pub x: ComplexTensor,
    pub y: ComplexTensor,
    pub mask: SamplingMask,
    pub sens: SensitivityMaps,
}

impl Case {
    pub fn operator(&self) -> Result<EncodingOperator> {
        EncodingOperator::new(&self.mask, &self.sens)
    }

    pub fn dir_name(&self) -> String {
        format!("case_{:04}", self.id)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Case> {
        self.cases.iter().filter(move |c| c.split == split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: usize,
    pub split: Split,
    pub seed: u64,
    pub sigma: f64,
    pub realized_acceleration: f64,
    pub dir: String,
    pub image_shape: Vec<usize>,
    pub kspace_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: DatasetConfig,
    pub cases: Vec<CaseEntry>,
}

/// Independent per-case stream derived from the dataset seed (SplitMix64).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates one case: phantom, sensitivities, mask, then `y = A x* + n`.
pub fn build_case(config: &DatasetConfig, id: usize, split: Split) -> Result<Case> {
    let seed = derive_seed(config.seed, id as u64);
    let x = make_phantom(&config.shape, config.kind, seed)?;
    let spatial = &config.shape[config.shape.len() - 2..];
    let sens = make_sensitivities(spatial, config.coils, seed ^ 0x5EE5)?;
    let mask = match config.kind {
        PhantomKind::Static2d => make_poisson_disk_mask(
            &config.shape,
            config.acceleration,
            &[config.calib, config.calib],
            seed ^ 0x3A5C,
        )?,
        PhantomKind::Cine { .. } => make_kt_mask(spatial, config.shape[0], config.acceleration, seed ^ 0x3A5C)?,
    };
    let op = EncodingOperator::new(&mask, &sens)?;
    let mut y = op.forward(&x)?;
    let sigma = config.noise_rel * y.max_abs();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4015E);
        let m = mask.values().data();
        let per = sigma / std::f64::consts::SQRT_2;
        let plane = m.len();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            if m[i % plane] != 0.0 {
                *v += C64::new(per * re, per * im);
            }
        }
    }
    Ok(Case {
        id,
        split,
        seed,
        sigma,
        x,
        y,
        mask,
        sens,
    })
}

pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.n_train == 0 || config.n_val == 0 || config.n_test == 0 {
        return Err(Error::InvalidParameter("every split needs at least one case".into()));
    }
    if config.coils == 0 {
        return Err(Error::InvalidParameter("coils must be >= 1".into()));
    }
    if !(config.noise_rel >= 0.0) {
        return Err(Error::InvalidParameter("noise_rel must be >= 0".into()));
    }
    let splits = std::iter::repeat_n(Split::Train, config.n_train)
        .chain(std::iter::repeat_n(Split::Val, config.n_val))
        .chain(std::iter::repeat_n(Split::Test, config.n_test));
    let cases = splits
        .enumerate()
        .map(|(id, split)| build_case(config, id, split))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: config.clone(),
        cases,
    })
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.cases.len());
    for case in &ds.cases {
        let cdir = dir.join(case.dir_name());
        fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        melt::write_complex(cdir.join("x.melt"), &case.x)?;
        melt::write_complex(cdir.join("y.melt"), &case.y)?;
        melt::write_real(cdir.join("mask.melt"), case.mask.values())?;
        melt::write_complex(cdir.join("sens.melt"), case.sens.maps())?;
        entries.push(CaseEntry {
            id: case.id,
            split: case.split,
            seed: case.seed,
            sigma: case.sigma,
            realized_acceleration: case.mask.realized_acceleration(),
            dir: case.dir_name(),
            image_shape: case.x.shape().to_vec(),
            kspace_shape: case.y.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        config: ds.config.clone(),
        cases: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let listing: Vec<&CaseEntry> = manifest.cases.iter().filter(|c| c.split == split).collect();
        let path = dir.join(split_manifest_file(split));
        let text = serde_json::to_string_pretty(&listing)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(manifest)
}

/// Per-split listing written next to the full manifest, e.g. `val.json`.
pub fn split_manifest_file(split: Split) -> String {
    format!("{split}.json")
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!("unknown dataset format {:?}", manifest.format)));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let cases = manifest
        .cases
        .iter()
        .map(|e| load_case(dir, &manifest.config, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: manifest.config,
        cases,
    })
}

fn load_case(dir: &Path, config: &DatasetConfig, e: &CaseEntry) -> Result<Case> {
    let cdir = dir.join(&e.dir);
    let x = melt::read_complex(cdir.join("x.melt"))?;
    let y = melt::read_complex(cdir.join("y.melt"))?;
    let mask = melt::read_real(cdir.join("mask.melt"))?;
    let sens = melt::read_complex(cdir.join("sens.melt"))?;
    if x.shape() != e.image_shape.as_slice()
        || y.shape() != e.kspace_shape.as_slice()
        || mask.shape() != e.image_shape.as_slice()
    {
        return Err(Error::Format(format!(
            "case {}: tensors do not match the manifest shapes",
            e.id
        )));
    }
    let calib = match config.kind {
        PhantomKind::Static2d => vec![config.calib, config.calib],
        PhantomKind::Cine { .. } => vec![],
    };
    Ok(Case {
        id: e.id,
        split: e.split,
        seed: e.seed,
        sigma: e.sigma,
        x,
        y,
        mask: SamplingMask::from_tensor(mask, config.acceleration, calib)?,
        sens: SensitivityMaps::new(sens)?,
    })
}
