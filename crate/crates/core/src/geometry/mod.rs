//! Corner arithmetic, homographies, perspective warping and rim compositing.
//!
//! All coordinates use the pixel-edge convention: pixel `(row, col)` spans
//! `[col, col+1] × [row, row+1]`, so its centre is `(col+½, row+½)`.

mod composite;
mod homography;
mod quad;
mod warp;

pub use composite::{composite, composite_pixels, CompositeOptions, CompositeResult, Compositing, RHO_MAX};
pub use homography::{homography_from_corners, Homography};
pub use quad::{rim_bounding_box, scale_quad, Aabb, Point, Quad};
pub use warp::{rim_mask, warp_map, warp_perspective};
