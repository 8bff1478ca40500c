//! Imaging physics: the multi-coil encoding operator, sampling patterns,
//! synthetic coil sensitivities and phantoms, and dataset persistence.

mod dataset;
mod encoding;
mod mask;
mod phantom;
mod sens;

pub use dataset::{
    build_case, build_dataset, derive_seed, load_dataset, read_manifest, save_dataset, split_manifest_file, Case,
    CaseEntry, Dataset, DatasetConfig, Manifest, Split, MANIFEST_FILE, MANIFEST_FORMAT,
};
pub use encoding::EncodingOperator;
pub use mask::{make_kt_mask, make_poisson_disk_mask, SamplingMask, ACCELERATION_TOLERANCE, DENSITY_R0};
pub use phantom::{make_phantom, PhantomKind};
pub use sens::{make_sensitivities, SensitivityMaps};
