//! Sequence ingestion, augmentation and the synthetic scene generator.

mod augment;
mod io;
mod synth;
mod triplets;

pub use augment::{augment, augment_with, color_jitter, flip_triplet, AugmentParams, AugmentationConfig};
pub use io::{
    find_frame, frame_file_name, load_image, read_f32_map, read_intrinsics, resize_intrinsics,
    save_image, to_rgb8, write_f32_map, write_intrinsics, DEPTH_DIR, INTRINSICS_FILE,
};
pub(crate) use io::ensure_parent;
pub use synth::{
    generate_synthetic, read_poses, write_synthetic, PlaneSpec, SplitIndices, Surface,
    SyntheticScene, SyntheticSequence, POSES_FILE,
};
pub use triplets::{
    filter_static, load_triplets, parse_split, parse_split_text, resolve_triplets, SplitEntry,
    TrainingTriplet, TripletFiles,
};
