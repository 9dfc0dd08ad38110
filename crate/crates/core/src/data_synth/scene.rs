//! Procedural ray-cast scenes: a ground plane, a back wall, optional side
//! wall, and textured boxes and spheres under a pinhole camera with
//! Lambertian shading. Depth is the camera-frame z of the first hit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sample::{DepthMap, Sample};
use crate::error::{Error, Result};

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Clone, Copy, Debug)]
struct Material {
    albedo: V3,
    freq: f64,
    contrast: f64,
}

impl Material {
    fn random(rng: &mut ChaCha8Rng, scale: f64) -> Self {
        Self {
            albedo: [rng.gen_range(0.25..0.95), rng.gen_range(0.25..0.95), rng.gen_range(0.25..0.95)],
            freq: rng.gen_range(1.5..5.0) / scale,
            contrast: rng.gen_range(0.15..0.5),
        }
    }

    fn shade(&self, u: f64, v: f64) -> V3 {
        let check = ((u * self.freq).floor() + (v * self.freq).floor()).rem_euclid(2.0);
        let t = 1.0 - self.contrast * check;
        [self.albedo[0] * t, self.albedo[1] * t, self.albedo[2] * t]
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    /// Plane `p[axis] = offset`.
    Plane { axis: usize, offset: f64 },
    Sphere { center: V3, radius: f64 },
    Cuboid { lo: V3, hi: V3 },
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    material: Material,
}

struct Hit {
    t: f64,
    normal: V3,
    point: V3,
}

impl Shape {
    fn intersect(&self, dir: V3) -> Option<Hit> {
        match *self {
            Shape::Plane { axis, offset } => {
                let d = dir[axis];
                if d.abs() < 1e-12 {
                    return None;
                }
                let t = offset / d;
                if t <= 1e-9 {
                    return None;
                }
                let mut normal = [0.0; 3];
                normal[axis] = -d.signum();
                Some(Hit {
                    t,
                    normal,
                    point: [dir[0] * t, dir[1] * t, dir[2] * t],
                })
            }
            Shape::Sphere { center, radius } => {
                // |t d - c|^2 = r^2
                let a = dot(dir, dir);
                let b = -2.0 * dot(dir, center);
                let c = dot(center, center) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t <= 1e-9 {
                    return None;
                }
                let p = [dir[0] * t, dir[1] * t, dir[2] * t];
                let normal = normalize([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
                Some(Hit { t, normal, point: p })
            }
            Shape::Cuboid { lo, hi } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0;
                for ax in 0..3 {
                    if dir[ax].abs() < 1e-12 {
                        if 0.0 < lo[ax] || 0.0 > hi[ax] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = lo[ax] / dir[ax];
                    let t2 = hi[ax] / dir[ax];
                    let (a, b) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if a > t_near {
                        t_near = a;
                        axis_near = ax;
                    }
                    t_far = t_far.min(b);
                }
                if t_near > t_far || t_near <= 1e-9 {
                    return None;
                }
                let mut normal = [0.0; 3];
                normal[axis_near] = -dir[axis_near].signum();
                let t = t_near;
                Some(Hit {
                    t,
                    normal,
                    point: [dir[0] * t, dir[1] * t, dir[2] * t],
                })
            }
        }
    }

    /// Two in-surface coordinates for texturing.
    fn uv(&self, hit: &Hit) -> (f64, f64) {
        let p = hit.point;
        match *self {
            Shape::Plane { axis, .. } => match axis {
                0 => (p[2], p[1]),
                1 => (p[0], p[2]),
                _ => (p[0], p[1]),
            },
            Shape::Sphere { center, radius } => {
                let q = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                (radius * q[1].atan2(q[0]), q[2])
            }
            Shape::Cuboid { .. } => {
                let n = hit.normal;
                if n[0] != 0.0 {
                    (p[2], p[1])
                } else if n[1] != 0.0 {
                    (p[0], p[2])
                } else {
                    (p[0], p[1])
                }
            }
        }
    }
}

/// Checks the geometry and depth-range preconditions shared by the generators.
pub fn check_geometry(geometry: (usize, usize), depth_range: (f64, f64)) -> Result<()> {
    let (h, w) = geometry;
    if h < 64 || w < 64 || h % 64 != 0 || w % 64 != 0 {
        return Err(Error::invalid(format!(
            "geometry {h}x{w} must be at least 64x64 and divisible by 64"
        )));
    }
    let (lo, hi) = depth_range;
    if !(lo > 0.0 && lo < hi && hi.is_finite()) {
        return Err(Error::invalid(format!("depth range ({lo}, {hi}) must satisfy 0 < min < max")));
    }
    Ok(())
}

/// Renders a random scene. The result has fully valid ground truth in
/// `[d_min, d_max]` and no sparse measurements yet.
pub fn generate_scene(seed: u64, geometry: (usize, usize), depth_range: (f64, f64)) -> Result<Sample> {
    check_geometry(geometry, depth_range)?;
    let (h, w) = geometry;
    let (d_min, d_max) = depth_range;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = d_max - d_min;

    let mut objects = Vec::new();
    let wall_z = d_min + span * rng.gen_range(0.7..0.98);
    let cam_height = wall_z * rng.gen_range(0.12..0.22);
    objects.push(Object {
        shape: Shape::Plane { axis: 1, offset: cam_height },
        material: Material::random(&mut rng, 0.08 * d_max),
    });
    objects.push(Object {
        shape: Shape::Plane { axis: 2, offset: wall_z },
        material: Material::random(&mut rng, 0.15 * d_max),
    });
    if rng.gen_bool(0.5) {
        let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        objects.push(Object {
            shape: Shape::Plane {
                axis: 0,
                offset: side * wall_z * rng.gen_range(0.25..0.45),
            },
            material: Material::random(&mut rng, 0.1 * d_max),
        });
    }
    let n_objects = rng.gen_range(3..=6);
    for _ in 0..n_objects {
        let z = rng.gen_range(d_min + 0.15 * span..(d_min + 0.85 * (wall_z - d_min)).max(d_min + 0.2 * span));
        let x = z * rng.gen_range(-0.4..0.4);
        let size = z * rng.gen_range(0.08..0.25);
        let material = Material::random(&mut rng, 0.25 * size.max(1e-3) * 4.0);
        let shape = if rng.gen_bool(0.5) {
            let half_w = size * rng.gen_range(0.4..1.0);
            let height = size * rng.gen_range(0.6..2.0);
            let depth = size * rng.gen_range(0.4..1.0);
            Shape::Cuboid {
                lo: [x - half_w, cam_height - height, z],
                hi: [x + half_w, cam_height, z + depth],
            }
        } else {
            let radius = size * rng.gen_range(0.4..0.8);
            Shape::Sphere {
                center: [x, cam_height - radius, z + radius],
                radius,
            }
        };
        objects.push(Object { shape, material });
    }

    let light = normalize([rng.gen_range(-0.6..0.6), -1.0, -rng.gen_range(0.3..0.9)]);
    let ambient = rng.gen_range(0.25..0.4);
    let focal = 0.9 * w as f64;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);

    let n = h * w;
    let mut image = vec![0f32; 3 * n];
    let mut depth = vec![0f32; n];
    for v in 0..h {
        for u in 0..w {
            let dir = [(u as f64 + 0.5 - cx) / focal, (v as f64 + 0.5 - cy) / focal, 1.0];
            let mut best: Option<(Hit, &Object)> = None;
            for obj in &objects {
                if let Some(hit) = obj.shape.intersect(dir) {
                    if best.as_ref().is_none_or(|(b, _)| hit.t < b.t) {
                        best = Some((hit, obj));
                    }
                }
            }
            // The back wall intersects every forward ray.
            let (hit, obj) = best.expect("back wall is always hit");
            let (tu, tv) = obj.shape.uv(&hit);
            let albedo = obj.material.shade(tu, tv);
            let lambert = dot(hit.normal, light).max(0.0);
            let shading = ambient + (1.0 - ambient) * lambert;
            let p = v * w + u;
            for c in 0..3 {
                image[3 * p + c] = (albedo[c] * shading).clamp(0.0, 1.0) as f32;
            }
            depth[p] = (hit.t.clamp(d_min, d_max)) as f32;
        }
    }

    Ok(Sample {
        frame_id: format!("scene-{seed}"),
        height: h,
        width: w,
        image,
        sparse: DepthMap::empty(n),
        gt: Some(DepthMap {
            values: depth,
            mask: vec![true; n],
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let a = generate_scene(7, (128, 128), (1.0, 10.0)).unwrap();
        let b = generate_scene(7, (128, 128), (1.0, 10.0)).unwrap();
        assert_eq!(a, b);
        assert!(a.image.iter().zip(&b.image).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn depth_within_range_and_valid() {
        for seed in 0..8 {
            let s = generate_scene(seed, (64, 128), (1.0, 10.0)).unwrap();
            s.validate().unwrap();
            let gt = s.gt.unwrap();
            assert!(gt.fully_valid());
            let lo = gt.values.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = gt.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(lo >= 1.0 && hi <= 10.0, "range [{lo}, {hi}]");
        }
    }

    #[test]
    fn different_seeds_give_different_images() {
        let a = generate_scene(7, (128, 128), (1.0, 10.0)).unwrap();
        let b = generate_scene(8, (128, 128), (1.0, 10.0)).unwrap();
        assert!(a.image.iter().zip(&b.image).any(|(x, y)| x != y));
    }

    #[test]
    fn rejects_bad_geometry_and_range() {
        assert!(generate_scene(0, (60, 64), (1.0, 10.0)).is_err());
        assert!(generate_scene(0, (32, 32), (1.0, 10.0)).is_err());
        assert!(generate_scene(0, (64, 96), (1.0, 10.0)).is_err());
        assert!(generate_scene(0, (64, 64), (0.0, 10.0)).is_err());
        assert!(generate_scene(0, (64, 64), (5.0, 5.0)).is_err());
    }

    #[test]
    fn image_edges_follow_depth_discontinuities() {
        // Large depth jumps should mostly coincide with visible image change.
        let s = generate_scene(3, (64, 64), (1.0, 10.0)).unwrap();
        let gt = s.gt.as_ref().unwrap();
        let (mut jumps, mut with_edge) = (0, 0);
        for y in 0..64 {
            for x in 0..63 {
                let p = y * 64 + x;
                if (gt.values[p + 1] - gt.values[p]).abs() > 0.5 {
                    jumps += 1;
                    let d: f32 = (0..3).map(|c| (s.image[3 * (p + 1) + c] - s.image[3 * p + c]).abs()).sum();
                    if d > 1e-3 {
                        with_edge += 1;
                    }
                }
            }
        }
        assert!(jumps > 0);
        assert!(with_edge * 10 >= jumps * 7, "{with_edge}/{jumps}");
    }
}
