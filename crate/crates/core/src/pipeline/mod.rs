//! Files and formats around the core modules: manifests, splits, patch and
//! image files, synthetic datasets and run records.

mod formats;
mod io;
mod manifest;
mod run;
mod synthetic;

pub use formats::{
    decode_png, image_dimensions, load_patch, load_png, patch_from_bytes, patch_to_bytes, png_bytes, quantize, save_patch,
    save_png,
};
pub use io::{read_file, sha256_file, sha256_hex, write_atomic, write_json_atomic};
pub use manifest::{
    load_images, load_manifest, manifest_root, manifest_to_bytes, parse_manifest, resolve_image, save_manifest,
    split_dataset, ManifestEntry, Split,
};
pub use run::{RunConfig, Settings};
pub use synthetic::{render_dataset, render_victim_set, SyntheticConfig};
