//! Render-and-compare camera localization against a textured mesh.

// NaN-rejecting comparisons are written as `!(x > y)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod geom;
pub mod imaging;
pub mod matching;
pub mod mesh;
pub mod pipeline;
pub mod render;
pub mod solve;
