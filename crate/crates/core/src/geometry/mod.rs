//! Oriented boxes, their Gaussian view, Wasserstein scores and rotated IoU.

pub mod boxes;
pub mod gaussian;
pub mod min_rect;
pub mod ops;
pub mod polygon;

pub use boxes::{box_to_zr, fold_angle, normalize_angle, wrap_half_turn, zr_to_box, OrientedBox, QueryBox5};
pub use gaussian::{box_to_gaussian, wasserstein_distance, wasserstein_score, Gaussian2D};
pub use min_rect::{min_area_rect, RotatedRect};
pub use polygon::{rotated_iou, rotated_iou_checked, ConvexPolygon, IouOutcome};
