//! Procedural multi-view scene generation.
//!
//! Stands in for a mesh dataset: parametric primitives (sphere, cube,
//! two-primitive composites) are ray-cast under spherical camera poses, 12
//! views per scene, so the entire dataset regenerates byte-identically from
//! a seed.

mod dataset;
mod render;

pub use dataset::{
    image_png_bytes, load_dataset, make_dataset, Dataset, Manifest, ManifestEntry, SceneViews,
};
pub use render::{render_view, foreground_pixel_count, Primitive, Rgb, SceneSpec, Vec3};

use crate::tensor::Tensor;
use std::f64::consts::TAU;

/// Supported square render resolutions.
pub const RESOLUTIONS: [usize; 3] = [16, 32, 64];

#[derive(Debug, thiserror::Error)]
pub enum ScenesError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("resolution {0} unsupported (expected one of 16, 32, 64)")]
    BadResolution(usize),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("scene {scene} view {view} rendered with empty foreground")]
    EmptyForeground { scene: String, view: usize },
}

/// Camera position on a sphere around the scene origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    radius: f64,
    azimuth: f64,
    elevation: f64,
}

impl CameraPose {
    /// Azimuth is normalized into `[0, 2pi)`.
    pub fn new(radius: f64, azimuth: f64, elevation: f64) -> Self {
        assert!(radius > 0.0, "camera radius must be positive");
        assert!(
            elevation > -std::f64::consts::FRAC_PI_2 && elevation < std::f64::consts::FRAC_PI_2,
            "elevation must lie in (-pi/2, pi/2)"
        );
        let mut azimuth = azimuth % TAU;
        if azimuth < 0.0 {
            azimuth += TAU;
        }
        CameraPose {
            radius,
            azimuth,
            elevation,
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    /// World-space camera position.
    pub fn position(&self) -> Vec3 {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        Vec3::new(self.radius * ce * ca, self.radius * ce * sa, self.radius * se)
    }
}

/// Pose delta featurization: `(d_elevation, sin d_azimuth, cos d_azimuth,
/// d_radius)` for the condition -> target move. The sin/cos pair keeps the
/// feature continuous across the azimuth wrap.
pub fn relative_pose(condition: &CameraPose, target: &CameraPose) -> [f64; 4] {
    let daz = target.azimuth - condition.azimuth;
    [
        target.elevation - condition.elevation,
        daz.sin(),
        daz.cos(),
        target.radius - condition.radius,
    ]
}

/// One rendered image with the pose it was rendered from.
#[derive(Debug, Clone)]
pub struct ViewRecord {
    pub image: Tensor<f32>,
    pub pose: CameraPose,
    pub scene_id: String,
    pub view_id: usize,
}

/// A training sample: one target view plus its condition views.
#[derive(Debug, Clone)]
pub struct MultiViewSample {
    pub target: ViewRecord,
    pub conditions: Vec<ViewRecord>,
}
