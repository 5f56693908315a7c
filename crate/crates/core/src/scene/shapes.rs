//! Analytic scene models. Each model answers: where does this ray first hit
//! a surface, and what color does the surface show toward the ray? Colors
//! may depend on the view direction (the glossy patch does).

use nalgebra::Vector3;

use crate::geometry::Ray;

/// Closest surface intersection along a ray.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    /// Distance along the (unit) ray direction.
    pub t: f64,
    pub rgb: [f64; 3],
}

pub trait SceneModel: Send + Sync {
    /// First intersection strictly after the ray origin, if any.
    fn trace(&self, ray: &Ray) -> Option<Hit>;
}

/// Distance beyond which a hit at the origin itself is ignored.
const T_MIN: f64 = 1e-9;

/// A rectangular decal on a wall, in the wall's `(u, v) in [0,1]^2` chart.
#[derive(Debug, Clone)]
struct Poster {
    u0: f64,
    v0: f64,
    u1: f64,
    v1: f64,
    rgb: [f64; 3],
}

/// One axis-aligned wall: corner colors for a bilinear ramp plus posters.
#[derive(Debug, Clone)]
struct Wall {
    /// Colors at (u,v) = (0,0), (1,0), (0,1), (1,1).
    corners: [[f64; 3]; 4],
    posters: Vec<Poster>,
}

impl Wall {
    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        for p in &self.posters {
            if u >= p.u0 && u < p.u1 && v >= p.v0 && v < p.v1 {
                return p.rgb;
            }
        }
        let mut rgb = [0.0; 3];
        for c in 0..3 {
            let top = self.corners[0][c] * (1.0 - u) + self.corners[1][c] * u;
            let bot = self.corners[2][c] * (1.0 - u) + self.corners[3][c] * u;
            rgb[c] = top * (1.0 - v) + bot * v;
        }
        rgb
    }
}

/// The interior of an axis-aligned box; rays starting inside hit the walls.
/// Walls are indexed 0..6 as (-x, +x, -y, +y, -z, +z).
#[derive(Debug, Clone)]
pub struct CubeRoom {
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
    walls: Vec<Wall>,
}

impl CubeRoom {
    /// A room with distinct, strongly textured walls: bilinear color ramps
    /// with a few solid posters each.
    pub fn textbook(lo: Vector3<f64>, hi: Vector3<f64>) -> Self {
        assert!(lo < hi, "room must have positive extent");
        let ramp = |a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3]| [a, b, c, d];
        let walls = vec![
            // -x: warm ramp with a dark and a light poster.
            Wall {
                corners: ramp(
                    [0.85, 0.35, 0.25],
                    [0.95, 0.65, 0.25],
                    [0.55, 0.20, 0.30],
                    [0.75, 0.45, 0.45],
                ),
                posters: vec![
                    Poster { u0: 0.15, v0: 0.20, u1: 0.40, v1: 0.55, rgb: [0.10, 0.10, 0.35] },
                    Poster { u0: 0.60, v0: 0.55, u1: 0.85, v1: 0.80, rgb: [0.95, 0.95, 0.85] },
                ],
            },
            // +x: green ramp.
            Wall {
                corners: ramp(
                    [0.25, 0.75, 0.35],
                    [0.10, 0.55, 0.25],
                    [0.45, 0.90, 0.55],
                    [0.30, 0.65, 0.35],
                ),
                posters: vec![
                    Poster { u0: 0.25, v0: 0.30, u1: 0.55, v1: 0.50, rgb: [0.85, 0.15, 0.55] },
                    Poster { u0: 0.65, v0: 0.10, u1: 0.90, v1: 0.40, rgb: [0.05, 0.05, 0.10] },
                ],
            },
            // -y (floor): gray-blue ramp with a rug.
            Wall {
                corners: ramp(
                    [0.35, 0.35, 0.45],
                    [0.45, 0.45, 0.55],
                    [0.25, 0.25, 0.35],
                    [0.55, 0.55, 0.65],
                ),
                posters: vec![Poster {
                    u0: 0.30,
                    v0: 0.30,
                    u1: 0.70,
                    v1: 0.70,
                    rgb: [0.70, 0.25, 0.20],
                }],
            },
            // +y (ceiling): bright ramp.
            Wall {
                corners: ramp(
                    [0.90, 0.90, 0.85],
                    [0.75, 0.80, 0.90],
                    [0.85, 0.75, 0.70],
                    [0.95, 0.95, 0.95],
                ),
                posters: vec![Poster {
                    u0: 0.40,
                    v0: 0.40,
                    u1: 0.60,
                    v1: 0.60,
                    rgb: [0.20, 0.20, 0.25],
                }],
            },
            // -z: blue ramp.
            Wall {
                corners: ramp(
                    [0.20, 0.35, 0.80],
                    [0.35, 0.55, 0.95],
                    [0.10, 0.20, 0.55],
                    [0.25, 0.40, 0.70],
                ),
                posters: vec![
                    Poster { u0: 0.10, v0: 0.15, u1: 0.35, v1: 0.45, rgb: [0.95, 0.85, 0.20] },
                    Poster { u0: 0.55, v0: 0.50, u1: 0.80, v1: 0.85, rgb: [0.90, 0.45, 0.10] },
                ],
            },
            // +z: violet ramp.
            Wall {
                corners: ramp(
                    [0.60, 0.30, 0.70],
                    [0.45, 0.20, 0.55],
                    [0.80, 0.50, 0.90],
                    [0.65, 0.35, 0.70],
                ),
                posters: vec![
                    Poster { u0: 0.20, v0: 0.25, u1: 0.45, v1: 0.60, rgb: [0.15, 0.70, 0.65] },
                    Poster { u0: 0.60, v0: 0.15, u1: 0.85, v1: 0.35, rgb: [0.98, 0.98, 0.95] },
                ],
            },
        ];
        Self { lo, hi, walls }
    }

    /// Exit intersection for a ray starting inside the box: wall index,
    /// distance, and the wall-chart coordinates of the hit.
    fn wall_hit(&self, ray: &Ray) -> Option<(usize, f64, f64, f64)> {
        let o = ray.origin;
        let d = ray.direction;
        let mut best: Option<(usize, f64)> = None;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                continue;
            }
            let (plane, wall) = if d[a] > 0.0 { (self.hi[a], 2 * a + 1) } else { (self.lo[a], 2 * a) };
            let t = (plane - o[a]) / d[a];
            if t > T_MIN && best.map_or(true, |(_, bt)| t < bt) {
                best = Some((wall, t));
            }
        }
        let (wall, t) = best?;
        let p = ray.at(t);
        // Chart the wall by the two non-normal axes, normalized to [0,1].
        let axis = wall / 2;
        let (ua, va) = match axis {
            0 => (2, 1), // x-walls charted by (z, y)
            1 => (0, 2), // y-walls charted by (x, z)
            _ => (0, 1), // z-walls charted by (x, y)
        };
        let u = ((p[ua] - self.lo[ua]) / (self.hi[ua] - self.lo[ua])).clamp(0.0, 1.0);
        let v = ((p[va] - self.lo[va]) / (self.hi[va] - self.lo[va])).clamp(0.0, 1.0);
        Some((wall, t, u, v))
    }

    fn inside(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] > self.lo[a] && p[a] < self.hi[a])
    }
}

impl SceneModel for CubeRoom {
    fn trace(&self, ray: &Ray) -> Option<Hit> {
        if !self.inside(&ray.origin) {
            return None;
        }
        let (wall, t, u, v) = self.wall_hit(ray)?;
        Some(Hit { t, rgb: self.walls[wall].color(u, v) })
    }
}

/// A matte sphere inside a room. The sphere's color ramps with its surface
/// normal so its shape is visible from every direction.
#[derive(Debug, Clone)]
pub struct SphereRoom {
    pub room: CubeRoom,
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl SphereRoom {
    pub fn new(room: CubeRoom, center: Vector3<f64>, radius: f64) -> Self {
        assert!(radius > 0.0);
        Self { room, center, radius }
    }

    fn sphere_hit(&self, ray: &Ray) -> Option<(f64, Vector3<f64>)> {
        let oc = ray.origin - self.center;
        let b = oc.dot(&ray.direction);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let t = if -b - sq > T_MIN { -b - sq } else { -b + sq };
        if t <= T_MIN {
            return None;
        }
        let n = (ray.at(t) - self.center) / self.radius;
        Some((t, n))
    }
}

impl SceneModel for SphereRoom {
    fn trace(&self, ray: &Ray) -> Option<Hit> {
        let wall = self.room.trace(ray);
        let sphere = self.sphere_hit(ray).map(|(t, n)| {
            let rgb = [
                0.55 + 0.35 * n.x,
                0.25 + 0.20 * (n.y + 1.0) / 2.0,
                0.30 + 0.35 * (1.0 - n.z) / 2.0,
            ];
            Hit { t, rgb }
        });
        match (sphere, wall) {
            (Some(s), Some(w)) => Some(if s.t < w.t { s } else { w }),
            (Some(s), None) => Some(s),
            (None, w) => w,
        }
    }
}

/// A room whose `+z` wall carries a glossy patch: its color slides between a
/// base and a sheen tint with the square of the incidence cosine, so heads-on
/// views and grazing views disagree strongly.
#[derive(Debug, Clone)]
pub struct GlossyRoom {
    pub room: CubeRoom,
    /// Patch extent in the wall chart.
    pub patch: (f64, f64, f64, f64),
    pub base: [f64; 3],
    pub sheen: [f64; 3],
}

impl GlossyRoom {
    pub fn new(room: CubeRoom) -> Self {
        Self {
            room,
            patch: (0.25, 0.25, 0.75, 0.75),
            base: [0.15, 0.20, 0.70],
            sheen: [0.65, 0.70, 0.20],
        }
    }

    /// The wall the patch sits on: +z, inward normal -z.
    const PATCH_WALL: usize = 5;
}

impl SceneModel for GlossyRoom {
    fn trace(&self, ray: &Ray) -> Option<Hit> {
        if !self.room.inside(&ray.origin) {
            return None;
        }
        let (wall, t, u, v) = self.room.wall_hit(ray)?;
        let (u0, v0, u1, v1) = self.patch;
        if wall == Self::PATCH_WALL && u >= u0 && u < u1 && v >= v0 && v < v1 {
            // Inward normal of the +z wall.
            let n = Vector3::new(0.0, 0.0, -1.0);
            let w = (-ray.direction).dot(&n).clamp(0.0, 1.0).powi(2);
            let rgb = [
                self.base[0] * (1.0 - w) + self.sheen[0] * w,
                self.base[1] * (1.0 - w) + self.sheen[1] * w,
                self.base[2] * (1.0 - w) + self.sheen[2] * w,
            ];
            return Some(Hit { t, rgb });
        }
        Some(Hit { t, rgb: self.room.walls[wall].color(u, v) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room() -> CubeRoom {
        CubeRoom::textbook(Vector3::new(-1.0, -0.5, -1.0), Vector3::new(1.0, 0.5, 1.0))
    }

    #[test]
    fn ray_from_center_hits_the_facing_wall_at_the_right_distance() {
        let r = room();
        let ray = Ray { origin: Vector3::zeros(), direction: Vector3::new(1.0, 0.0, 0.0) };
        let hit = r.trace(&ray).unwrap();
        assert!((hit.t - 1.0).abs() < 1e-12);
        let ray = Ray { origin: Vector3::zeros(), direction: Vector3::new(0.0, -1.0, 0.0) };
        let hit = r.trace(&ray).unwrap();
        assert!((hit.t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rays_from_outside_the_room_miss() {
        let r = room();
        let ray =
            Ray { origin: Vector3::new(5.0, 0.0, 0.0), direction: Vector3::new(1.0, 0.0, 0.0) };
        assert!(r.trace(&ray).is_none());
    }

    #[test]
    fn different_walls_show_different_colors() {
        let r = room();
        let dirs = [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, -1.0),
        ];
        let colors: Vec<[f64; 3]> = dirs
            .iter()
            .map(|d| r.trace(&Ray { origin: Vector3::zeros(), direction: *d }).unwrap().rgb)
            .collect();
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                let diff: f64 =
                    (0..3).map(|c| (colors[i][c] - colors[j][c]).abs()).sum();
                assert!(diff > 0.05, "walls {i} and {j} too similar");
            }
        }
    }

    #[test]
    fn sphere_occludes_the_wall_behind_it() {
        let s = SphereRoom::new(room(), Vector3::zeros(), 0.25);
        let ray =
            Ray { origin: Vector3::new(-0.8, 0.0, 0.0), direction: Vector3::new(1.0, 0.0, 0.0) };
        let hit = s.trace(&ray).unwrap();
        // Sphere surface at x = -0.25: distance 0.55, well before the wall at 1.8.
        assert!((hit.t - 0.55).abs() < 1e-12);
        // A ray past the sphere reaches the wall.
        let ray = Ray {
            origin: Vector3::new(-0.8, 0.4, 0.0),
            direction: Vector3::new(1.0, 0.0, 0.0),
        };
        let hit = s.trace(&ray).unwrap();
        assert!((hit.t - 1.8).abs() < 1e-12);
    }

    #[test]
    fn glossy_patch_color_depends_on_view_direction() {
        let g = GlossyRoom::new(room());
        // Head-on: from the patch center looking straight at +z.
        let head_on = g
            .trace(&Ray { origin: Vector3::new(0.0, 0.0, 0.0), direction: Vector3::new(0.0, 0.0, 1.0) })
            .unwrap();
        // Grazing: hits the same wall region from a steep angle.
        let grazing = g
            .trace(&Ray {
                origin: Vector3::new(-0.9, 0.0, 0.7),
                direction: Vector3::new(0.95, 0.0, 0.3).normalize(),
            })
            .unwrap();
        let diff: f64 = (0..3).map(|c| (head_on.rgb[c] - grazing.rgb[c]).abs()).sum();
        assert!(diff > 0.3, "view dependence too weak: {diff}");
        // Head-on must be near the sheen color.
        assert!((head_on.rgb[0] - 0.65).abs() < 1e-9);
    }

    #[test]
    fn glossy_room_off_patch_matches_plain_room() {
        let g = GlossyRoom::new(room());
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(1.0, 0.0, 0.0),
        };
        let a = g.trace(&ray).unwrap();
        let b = g.room.trace(&ray).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.t, b.t);
    }
}
