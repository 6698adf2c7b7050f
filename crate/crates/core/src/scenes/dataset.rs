//! Dataset generation and loading.
//!
//! Layout: `<root>/<scene_id>/<view_id>.png` (8-bit RGB, row-major top to
//! bottom) plus `<root>/manifest.json` listing the pose of every view.

use super::render::{foreground_pixel_count, render_view, Primitive, Rgb, SceneSpec, Vec3};
use super::{CameraPose, ScenesError, ViewRecord, RESOLUTIONS};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

/// Pose sampling bands. Elevation avoids straight-down views and the upper
/// band stops short of the pole; radii keep every primitive in frame.
const ELEVATION_RANGE: (f64, f64) = (-std::f64::consts::FRAC_PI_6, std::f64::consts::FRAC_PI_2);
const RADIUS_RANGE: (f64, f64) = (1.5, 2.5);

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub view_id: usize,
    pub radius: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub n_scenes: usize,
    pub views_per_scene: usize,
    pub resolution: usize,
    pub entries: Vec<ManifestEntry>,
}

/// All views of one scene, indexed by view id.
#[derive(Debug, Clone)]
pub struct SceneViews {
    pub scene_id: String,
    pub views: Vec<ViewRecord>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub scenes: Vec<SceneViews>,
}

impl Dataset {
    pub fn resolution(&self) -> usize {
        self.manifest.resolution
    }
}

fn random_rgb(rng: &mut impl Rng) -> Rgb {
    [
        rng.gen_range(0.1..0.95),
        rng.gen_range(0.1..0.95),
        rng.gen_range(0.1..0.95),
    ]
}

fn random_unit_upper(rng: &mut impl Rng) -> Vec3 {
    // Directional light from the upper hemisphere.
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.2..1.0),
        );
        let n = v.norm();
        if n > 1e-3 {
            return v.scale(1.0 / n);
        }
    }
}

/// Draws a random scene. Every scene contains the origin so the look-at
/// center is always on the object.
pub fn random_scene(rng: &mut impl Rng) -> SceneSpec {
    let kind = rng.gen_range(0..3u32);
    let mut primitives = Vec::new();
    match kind {
        0 => {
            let albedo = std::array::from_fn(|_| random_rgb(rng));
            primitives.push(Primitive::Sphere {
                center: Vec3::new(0.0, 0.0, 0.0),
                radius: rng.gen_range(0.5..0.8),
                albedo,
            });
        }
        1 => {
            let albedo = std::array::from_fn(|_| random_rgb(rng));
            primitives.push(Primitive::Cube {
                center: Vec3::new(0.0, 0.0, 0.0),
                half: rng.gen_range(0.35..0.55),
                albedo,
            });
        }
        _ => {
            let cube_albedo = std::array::from_fn(|_| random_rgb(rng));
            let half = rng.gen_range(0.3..0.45);
            primitives.push(Primitive::Cube {
                center: Vec3::new(0.0, 0.0, 0.0),
                half,
                albedo: cube_albedo,
            });
            let sphere_albedo = std::array::from_fn(|_| random_rgb(rng));
            let radius = rng.gen_range(0.2..0.35);
            let angle = rng.gen_range(0.0..TAU);
            let dist = half + radius * 0.6;
            primitives.push(Primitive::Sphere {
                center: Vec3::new(dist * angle.cos(), dist * angle.sin(), half * 0.5),
                radius,
                albedo: sphere_albedo,
            });
        }
    }
    SceneSpec {
        primitives,
        light_dir: random_unit_upper(rng),
        background: [
            rng.gen_range(0.02..0.2),
            rng.gen_range(0.02..0.2),
            rng.gen_range(0.02..0.2),
        ],
    }
}

fn random_pose(rng: &mut impl Rng) -> CameraPose {
    let azimuth = rng.gen_range(0.0..TAU);
    let elevation = rng.gen_range(ELEVATION_RANGE.0..ELEVATION_RANGE.1);
    let radius = rng.gen_range(RADIUS_RANGE.0..RADIUS_RANGE.1);
    CameraPose::new(radius, azimuth, elevation)
}

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:03}")
}

pub fn view_file_name(view: usize) -> String {
    format!("view_{view:02}.png")
}

/// Encodes a `[3, res, res]` image in `[0,1]` as 8-bit RGB PNG bytes.
pub fn image_png_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let (_, res, _) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => unreachable!("render output is [3, res, res]"),
    };
    let plane = res * res;
    let mut buf = vec![0u8; 3 * plane];
    let d = t.data();
    for i in 0..plane {
        for ch in 0..3 {
            buf[i * 3 + ch] = (d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let img = image::RgbImage::from_raw(res as u32, res as u32, buf).expect("raw buffer size");
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("png encode");
    out.into_inner()
}

fn png_bytes_to_image(bytes: &[u8]) -> Result<Tensor<f32>, ScenesError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let raw = img.into_raw();
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = raw[i * 3 + ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h as usize, w as usize], data)
        .map_err(|e| ScenesError::BadManifest(e.to_string()))
}

/// Renders `n_scenes * views_per_scene` images to `root` plus a manifest.
/// The same seed regenerates the dataset byte-for-byte. Every view is
/// checked to contain a non-empty foreground.
pub fn make_dataset(
    root: &Path,
    n_scenes: usize,
    views_per_scene: usize,
    resolution: usize,
    seed: u64,
) -> Result<Manifest, ScenesError> {
    if !RESOLUTIONS.contains(&resolution) {
        return Err(ScenesError::BadResolution(resolution));
    }
    fs::create_dir_all(root)?;
    let mut entries = Vec::with_capacity(n_scenes * views_per_scene);
    for si in 0..n_scenes {
        // One independent stream per scene: scene layout first, then poses.
        let mut rng = rng::seeded_stream(seed, 1 + si as u64);
        let scene = random_scene(&mut rng);
        let scene_id = scene_dir_name(si);
        let dir = root.join(&scene_id);
        fs::create_dir_all(&dir)?;
        for vi in 0..views_per_scene {
            let pose = random_pose(&mut rng);
            if foreground_pixel_count(&scene, &pose, resolution) == 0 {
                return Err(ScenesError::EmptyForeground {
                    scene: scene_id.clone(),
                    view: vi,
                });
            }
            let view = render_view(&scene, &pose, resolution, &scene_id, vi)?;
            let file = view_file_name(vi);
            fs::write(dir.join(&file), image_png_bytes(&view.image))?;
            entries.push(ManifestEntry {
                scene_id: scene_id.clone(),
                view_id: vi,
                radius: pose.radius(),
                azimuth: pose.azimuth(),
                elevation: pose.elevation(),
                file: format!("{scene_id}/{file}"),
            });
        }
    }
    let manifest = Manifest {
        seed,
        n_scenes,
        views_per_scene,
        resolution,
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    fs::write(root.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Loads a dataset previously written by [`make_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset, ScenesError> {
    let manifest_path = root.join("manifest.json");
    let json = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| ScenesError::BadManifest(e.to_string()))?;

    let mut scenes: Vec<SceneViews> = Vec::with_capacity(manifest.n_scenes);
    for entry in &manifest.entries {
        let bytes = fs::read(root.join(&entry.file))?;
        let image = png_bytes_to_image(&bytes)?;
        let pose = CameraPose::new(entry.radius, entry.azimuth, entry.elevation);
        let record = ViewRecord {
            image,
            pose,
            scene_id: entry.scene_id.clone(),
            view_id: entry.view_id,
        };
        match scenes.last_mut() {
            Some(s) if s.scene_id == entry.scene_id => s.views.push(record),
            _ => scenes.push(SceneViews {
                scene_id: entry.scene_id.clone(),
                views: vec![record],
            }),
        }
    }
    for s in &scenes {
        if s.views.len() != manifest.views_per_scene {
            return Err(ScenesError::BadManifest(format!(
                "scene {} has {} views, expected {}",
                s.scene_id,
                s.views.len(),
                manifest.views_per_scene
            )));
        }
        for (i, v) in s.views.iter().enumerate() {
            if v.view_id != i {
                return Err(ScenesError::BadManifest(format!(
                    "scene {} views out of order",
                    s.scene_id
                )));
            }
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_scene_yields_twelve_views_and_entries() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_dataset(dir.path(), 1, 12, 16, 42).unwrap();
        assert_eq!(manifest.entries.len(), 12);
        let pngs = fs::read_dir(dir.path().join("scene_000"))
            .unwrap()
            .count();
        assert_eq!(pngs, 12);
    }

    #[test]
    fn same_seed_gives_byte_identical_manifest() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        make_dataset(d1.path(), 3, 12, 16, 7).unwrap();
        make_dataset(d2.path(), 3, 12, 16, 7).unwrap();
        let m1 = fs::read(d1.path().join("manifest.json")).unwrap();
        let m2 = fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        // And the images themselves.
        let p1 = fs::read(d1.path().join("scene_001/view_03.png")).unwrap();
        let p2 = fs::read(d2.path().join("scene_001/view_03.png")).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn counts_and_shapes_scale_with_scenes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_dataset(dir.path(), 4, 12, 32, 3).unwrap();
        assert_eq!(manifest.entries.len(), 48);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.scenes.len(), 4);
        for s in &ds.scenes {
            assert_eq!(s.views.len(), 12);
            for v in &s.views {
                assert_eq!(v.image.shape(), &[3, 32, 32]);
                assert!(v.image.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn rejects_unsupported_resolution() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            make_dataset(dir.path(), 1, 12, 20, 1),
            Err(ScenesError::BadResolution(20))
        ));
    }

    #[test]
    fn roundtrips_pixels_through_png() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path(), 1, 12, 16, 99).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let mut rng = rng::seeded_stream(99, 1);
        let scene = random_scene(&mut rng);
        let pose = random_pose(&mut rng);
        let fresh = render_view(&scene, &pose, 16, "scene_000", 0).unwrap();
        let loaded = &ds.scenes[0].views[0];
        // Loaded pixels differ from the fresh render only by 8-bit
        // quantization.
        let max_diff = fresh
            .image
            .data()
            .iter()
            .zip(loaded.image.data())
            .fold(0.0f32, |m, (&a, &b)| m.max((a - b).abs()));
        assert!(max_diff <= 0.5 / 255.0 + 1e-6, "max diff {max_diff}");
        assert!((loaded.pose.azimuth() - pose.azimuth()).abs() < 1e-12);
    }
}
