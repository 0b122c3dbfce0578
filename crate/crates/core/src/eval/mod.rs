//! Handcrafted image metrics and the miniature multi-subject bench.

mod bench;
mod features;
mod scores;

pub use bench::{
    bench_run, mini_bench, parse_subject_id, preset_boxes, reference_crop, score_image, subject_id, Bench, BenchCase, CaseReport,
    EvalReport, ReportConfig, SampleScores, Scores, BENCH_FORMAT_VERSION, COMBO_TYPES, DEFAULT_BOX, DEFAULT_SAMPLES_PER_CASE,
    MINI_BENCH_TYPES, REPORT_FORMAT_VERSION, SINGLE,
};
pub use features::{cosine_similarity, crop_box, image_features, m_dino, subject_fidelity, COLOR_BINS, FEATURE_LEN, ORIENTATION_BINS};
pub use scores::{
    color_mask, layout_adherence, parse_mentions, shape_match, text_fidelity, COLOR_TOLERANCE, LAYOUT_EPS, PRESENCE_SATURATION,
};
