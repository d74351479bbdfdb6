//! Dataset ingestion: KITTI-format parsing and writing, LiDAR decoding,
//! detection filtering, and synthetic sequence generation.

pub mod kitti;
pub mod synth;
pub mod types;

pub use kitti::{
    filter_detections, parse_calib, parse_labels, read_point_cloud, write_label_lines,
    write_tracks, LabelRecord,
};
pub use synth::{
    generate_synthetic, load_dataset, load_dataset_dir, save_dataset, CorruptInterval, Interval,
    ScenarioConfig,
};
pub use types::{
    Box2d, Box3d, Calibration, Detection, Frame, ImagePatch, PointCloud, PointSet,
    SequenceDataset,
};

/// Detection score filter threshold applied before tracking.
pub const DEFAULT_DETECTION_FILTER: f64 = 0.3;
