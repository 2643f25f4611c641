//! Synthetic road-scene domains and their on-disk format.

mod io;
mod rng;
mod scene;
mod shift;

pub use io::{
    read_dataset, read_manifest, read_pgm, read_ppm, write_dataset, write_pgm, write_ppm, Dataset, Manifest,
    ManifestEntry, ShiftSpec, IGNORE_LABEL, MANIFEST,
};
pub use rng::{splitmix64, Rng};
pub use scene::{generate_scene, Image, Scene, SceneSpec, BACKGROUND, ROAD, SIGN, VEHICLE};
pub use shift::{apply_domain_shift, DomainShift, TEXTURE_AMPLITUDE};
