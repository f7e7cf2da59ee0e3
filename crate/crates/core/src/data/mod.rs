//! Label grids, synthetic phantoms, volume files and dataset manifests.

mod dataset;
mod labels;
mod phantom;
mod volume;

pub use dataset::{case_seed, generate_dataset, Case, CaseEntry, Dataset, Manifest, Split};
pub use labels::{binarize, gt_mask_image, LabelBatch};
pub use phantom::{
    generate_phantom, generate_phantom_with_geometry, PhantomGeometry, PhantomSpec, BACKGROUND, NUM_CLASSES, ORGAN,
    TUMOR,
};
pub use volume::{
    read_labels, read_volume, sidecar_path, write_labels, write_volume, LabelVolume, Sidecar, Volume, VoxelType,
    ORDER_X_FASTEST,
};
