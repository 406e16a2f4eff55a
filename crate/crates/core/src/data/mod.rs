//! Images, DOTA-format annotations, synthetic scenes and on-disk datasets.

pub mod dataset;
pub mod dota;
pub mod image;
pub mod synth;

pub use dataset::{AnnotatedImage, Dataset};
pub use dota::{format_dota_annotation, parse_dota_annotation, quad_to_box, Instance, LabelMap, ParsedAnnotation};
pub use image::Image;
pub use synth::{synthesize_scene, SynthConfig, SynthScene};
