//! Perspective ray caster with Lambertian shading.

use super::{CameraPose, ScenesError, ViewRecord, RESOLUTIONS};
use crate::tensor::Tensor;

/// Half-angle of the square field of view. Wide enough that a bounding
/// radius of ~0.95 stays in frame from the closest sampled camera (r = 1.5).
const FOV_TAN: f64 = 1.0;
/// Ambient light floor so unlit faces keep their hue.
const AMBIENT: f64 = 0.25;
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        Vec3::new(self.x / n, self.y / n, self.z / n)
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Linear-light RGB, each channel in `[0, 1]`.
pub type Rgb = [f64; 3];

/// A shaded solid. Albedo varies per region so that front and back views of
/// the same object look different.
#[derive(Debug, Clone)]
pub enum Primitive {
    /// Sphere colored by the octant of the hit point around its center.
    Sphere {
        center: Vec3,
        radius: f64,
        albedo: [Rgb; 8],
    },
    /// Axis-aligned cube colored per face (-x,+x,-y,+y,-z,+z).
    Cube {
        center: Vec3,
        half: f64,
        albedo: [Rgb; 6],
    },
}

struct Hit {
    t: f64,
    normal: Vec3,
    albedo: Rgb,
}

impl Primitive {
    fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        match *self {
            Primitive::Sphere {
                center,
                radius,
                albedo,
            } => {
                let oc = origin.sub(center);
                let b = oc.dot(dir);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > HIT_EPS {
                    -b - sq
                } else if -b + sq > HIT_EPS {
                    -b + sq
                } else {
                    return None;
                };
                let p = origin.add(dir.scale(t));
                let normal = p.sub(center).normalized();
                let local = p.sub(center);
                let oct = (local.x >= 0.0) as usize
                    | ((local.y >= 0.0) as usize) << 1
                    | ((local.z >= 0.0) as usize) << 2;
                Some(Hit {
                    t,
                    normal,
                    albedo: albedo[oct],
                })
            }
            Primitive::Cube {
                center,
                half,
                albedo,
            } => {
                let mut tmin = f64::NEG_INFINITY;
                let mut tmax = f64::INFINITY;
                let mut axis = 0usize;
                let o = [origin.x - center.x, origin.y - center.y, origin.z - center.z];
                let d = [dir.x, dir.y, dir.z];
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a].abs() > half {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[a];
                    let mut t1 = (-half - o[a]) * inv;
                    let mut t2 = (half - o[a]) * inv;
                    if t1 > t2 {
                        std::mem::swap(&mut t1, &mut t2);
                    }
                    if t1 > tmin {
                        tmin = t1;
                        axis = a;
                    }
                    tmax = tmax.min(t2);
                    if tmin > tmax {
                        return None;
                    }
                }
                if tmin <= HIT_EPS {
                    return None; // camera inside or behind
                }
                let p = origin.add(dir.scale(tmin));
                let local = [p.x - center.x, p.y - center.y, p.z - center.z];
                let sign = if local[axis] >= 0.0 { 1.0 } else { -1.0 };
                let normal = match axis {
                    0 => Vec3::new(sign, 0.0, 0.0),
                    1 => Vec3::new(0.0, sign, 0.0),
                    _ => Vec3::new(0.0, 0.0, sign),
                };
                let face = axis * 2 + (sign > 0.0) as usize;
                Some(Hit {
                    t: tmin,
                    normal,
                    albedo: albedo[face],
                })
            }
        }
    }
}

/// One renderable scene: one or two primitives, a directional light and a
/// background color.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Unit vector pointing from surfaces toward the light.
    pub light_dir: Vec3,
    pub background: Rgb,
}

impl SceneSpec {
    fn trace(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for p in &self.primitives {
            if let Some(h) = p.intersect(origin, dir) {
                if best.as_ref().map_or(true, |b| h.t < b.t) {
                    best = Some(h);
                }
            }
        }
        best
    }
}

/// Orthonormal camera frame from a spherical pose: forward points at the
/// origin, right is the azimuth tangent, up is the elevation tangent. Well
/// defined for every elevation inside `(-pi/2, pi/2)`.
fn camera_frame(pose: &CameraPose) -> (Vec3, Vec3, Vec3) {
    let (sa, ca) = pose.azimuth().sin_cos();
    let (se, ce) = pose.elevation().sin_cos();
    let radial = Vec3::new(ce * ca, ce * sa, se);
    let forward = radial.scale(-1.0);
    let right = Vec3::new(-sa, ca, 0.0);
    let up = Vec3::new(-se * ca, -se * sa, ce);
    (forward, right, up)
}

/// Ray-casts `scene` from `pose` into a `[3, res, res]` image in `[0, 1]`.
/// Deterministic for identical inputs.
pub fn render_view(
    scene: &SceneSpec,
    pose: &CameraPose,
    resolution: usize,
    scene_id: &str,
    view_id: usize,
) -> Result<ViewRecord, ScenesError> {
    if !RESOLUTIONS.contains(&resolution) {
        return Err(ScenesError::BadResolution(resolution));
    }
    let (forward, right, up) = camera_frame(pose);
    let origin = pose.position();
    let res = resolution;
    let mut data = vec![0.0f32; 3 * res * res];
    for row in 0..res {
        let v = (1.0 - 2.0 * (row as f64 + 0.5) / res as f64) * FOV_TAN;
        for col in 0..res {
            let u = (2.0 * (col as f64 + 0.5) / res as f64 - 1.0) * FOV_TAN;
            let dir = forward
                .add(right.scale(u))
                .add(up.scale(v))
                .normalized();
            let rgb = match scene.trace(origin, dir) {
                Some(hit) => {
                    let lambert = hit.normal.dot(scene.light_dir).max(0.0);
                    let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
                    [
                        hit.albedo[0] * shade,
                        hit.albedo[1] * shade,
                        hit.albedo[2] * shade,
                    ]
                }
                None => scene.background,
            };
            for ch in 0..3 {
                data[ch * res * res + row * res + col] = rgb[ch].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(ViewRecord {
        image: Tensor::from_vec(vec![3, res, res], data).expect("render buffer shape"),
        pose: *pose,
        scene_id: scene_id.to_string(),
        view_id,
    })
}

/// Number of pixels whose ray hits a primitive. Used to assert the object
/// stays in frame for every sampled pose.
pub fn foreground_pixel_count(scene: &SceneSpec, pose: &CameraPose, resolution: usize) -> usize {
    let (forward, right, up) = camera_frame(pose);
    let origin = pose.position();
    let res = resolution;
    let mut count = 0usize;
    for row in 0..res {
        let v = (1.0 - 2.0 * (row as f64 + 0.5) / res as f64) * FOV_TAN;
        for col in 0..res {
            let u = (2.0 * (col as f64 + 0.5) / res as f64 - 1.0) * FOV_TAN;
            let dir = forward.add(right.scale(u)).add(up.scale(v)).normalized();
            if scene.trace(origin, dir).is_some() {
                count += 1;
            }
        }
    }
    count
}
