//! Differentiable Gaussian splatting with perspective and bird's-eye-view cameras.

#[cfg(test)]
#[macro_use]
mod test_util;

pub mod bev;
pub mod buffer;
pub mod camera;
pub mod check;
pub mod error;
pub mod gaussian;
pub mod grad;
pub mod io;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod projection;
pub mod raster;
pub mod seed;
pub mod synth;

pub use buffer::{DepthMap, Map, MaskSet, RenderOutput};
pub use camera::{Camera, Pose, ProjectionMode};
pub use error::{Error, FormatError, Result};
pub use gaussian::{Gaussian, ParamGroup, Scene, ShDegree};
pub use grad::{finite_diff_check, render_backward, FdConfig, FdReport, GaussianGrads, RenderLoss, RenderUpstream};
pub use loss::{LossConfig, ViewTarget};
pub use raster::{render, render_naive_oracle, render_with, Frame, RenderConfig};
