//! Synthetic stereo generation and file codecs.

pub mod checkpoint;
pub mod image;
pub mod pfm;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use image::{read_kitti_disp_png, read_rgb_png, write_disparity_visualization, write_kitti_disp_png, write_rgb_png};
pub use pfm::{read_pfm, write_pfm, Pfm};
pub use synth::{generate_sample, DisparityField, SyntheticSpec, Texture};
