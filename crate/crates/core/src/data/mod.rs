//! Synthetic grounded training data: paired scene frames, cross-frame
//! subject matching, filtering, padding and the dataset directory format.

mod forge;
mod hungarian;
mod io;
mod matching;
mod sample;
mod scene;

pub use forge::{Forge, ForgeConfig};
pub use hungarian::{hungarian_match, Assignment};
pub use io::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_dataset, read_file, read_manifest, read_ppm, write_dataset, write_file,
    write_pgm, write_ppm, Manifest, SampleRecord, SubjectRecord, DATASET_FORMAT_VERSION, MANIFEST,
};
pub use matching::{
    build_matched_sample, cosine_distance, crop_resize, match_embeddings, match_subjects, Correspondence, PatchEmbedder,
};
pub use sample::{
    caption_for, entity_positions, filter_and_pad, FilterConfig, MatchedSample, MatchedSubject, SubjectSlot, TrainingSample,
};
pub use scene::{draw_scene, render, symmetry_period, unit_area, synth_scene_pair, Annotation, Frame, SceneConfig, ScenePair, SceneSpec, SubjectSpec};
