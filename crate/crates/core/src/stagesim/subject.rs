use serde::{Deserialize, Serialize};

use crate::envlight::{RadianceTable, Vec3};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Parametric subject silhouette in camera units: the orthographic frame
/// spans `[-1, 1]` horizontally (`+x` right) and vertically (`+y` up).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Sphere { center: [f64; 2], radius: f64 },
    /// Vertical capsule: a segment of `2 * half_length` swept by `radius`.
    Capsule { center: [f64; 2], radius: f64, half_length: f64 },
    /// Head and shoulders as two spheres.
    Bust { head: [f64; 2], head_radius: f64, body: [f64; 2], body_radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject_id: u32,
    pub geometry: Geometry,
    pub albedo: [f32; 3],
    pub specular_strength: f32,
    pub specular_exponent: f32,
}

/// Visible surface sample of one primitive at an image-plane point.
struct Hit {
    /// Distance inside the silhouette, camera units (negative outside).
    inside: f64,
    /// Depth along `+z`; the smaller, the closer to the camera.
    depth: f64,
    normal: Vec3,
}

fn sphere_hit(p: [f64; 2], c: [f64; 2], r: f64) -> Hit {
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    let d = (dx * dx + dy * dy).sqrt();
    let inside = r - d;
    // Points outside the silhouette (antialiased band) shade as the rim.
    let (dx, dy, d) = if d > r { (dx * r / d, dy * r / d, r) } else { (dx, dy, d) };
    let nz = (r * r - d * d).max(0.0).sqrt();
    Hit { inside, depth: -nz, normal: [dx / r, dy / r, -nz / r] }
}

impl Geometry {
    fn hit(&self, p: [f64; 2]) -> Hit {
        match *self {
            Geometry::Sphere { center, radius } => sphere_hit(p, center, radius),
            Geometry::Capsule { center, radius, half_length } => {
                let sy = p[1].clamp(center[1] - half_length, center[1] + half_length);
                sphere_hit(p, [center[0], sy], radius)
            }
            Geometry::Bust { head, head_radius, body, body_radius } => {
                let a = sphere_hit(p, head, head_radius);
                let b = sphere_hit(p, body, body_radius);
                match (a.inside >= 0.0, b.inside >= 0.0) {
                    (true, true) => {
                        if a.depth <= b.depth {
                            a
                        } else {
                            b
                        }
                    }
                    (true, false) => a,
                    (false, true) => b,
                    (false, false) => {
                        if a.inside >= b.inside {
                            a
                        } else {
                            b
                        }
                    }
                }
            }
        }
    }

    /// Axis-aligned bounds `(xmin, xmax, ymin, ymax)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Geometry::Sphere { center, radius } => {
                (center[0] - radius, center[0] + radius, center[1] - radius, center[1] + radius)
            }
            Geometry::Capsule { center, radius, half_length } => (
                center[0] - radius,
                center[0] + radius,
                center[1] - half_length - radius,
                center[1] + half_length + radius,
            ),
            Geometry::Bust { head, head_radius, body, body_radius } => (
                (head[0] - head_radius).min(body[0] - body_radius),
                (head[0] + head_radius).max(body[0] + body_radius),
                (head[1] - head_radius).min(body[1] - body_radius),
                (head[1] + head_radius).max(body[1] + body_radius),
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = match *self {
            Geometry::Sphere { radius, .. } => radius > 0.0,
            Geometry::Capsule { radius, half_length, .. } => radius > 0.0 && half_length >= 0.0,
            Geometry::Bust { head_radius, body_radius, .. } => head_radius > 0.0 && body_radius > 0.0,
        };
        if !positive {
            return Err(Error::InvalidInput("subject radii must be positive".into()));
        }
        Ok(())
    }
}

impl SubjectSpec {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidInput(format!("albedo {:?} outside [0, 1]", self.albedo)));
        }
        if !(0.0..=1.0).contains(&self.specular_strength) || !(self.specular_exponent >= 1.0) {
            return Err(Error::InvalidInput("specular parameters out of range".into()));
        }
        let (x0, x1, y0, y1) = self.geometry.bounds();
        if x0 < -1.0 || x1 > 1.0 || y0 < -1.0 || y1 > 1.0 {
            return Err(Error::SubjectOutOfFrame);
        }
        Ok(())
    }
}

/// Image-plane coordinates of the centre of pixel `(x, y)` in an `s x s` frame.
#[inline]
pub fn pixel_to_camera(x: usize, y: usize, s: usize) -> [f64; 2] {
    [(2 * x + 1) as f64 / s as f64 - 1.0, 1.0 - (2 * y + 1) as f64 / s as f64]
}

/// Renders `subject` lit by `radiance` in linear units, plus its coverage.
///
/// Diffuse `albedo / pi * E(n)` plus a Blinn-Phong lobe scaled by
/// `specular_strength`; uncovered pixels are zero.
pub fn render_linear(subject: &SubjectSpec, radiance: &RadianceTable, size: usize) -> Result<(Image, Mask)> {
    subject.validate()?;
    let mut color = Image::zeros(size, size, 3);
    let mut alpha = Image::zeros(size, size, 1);
    let half_px = size as f64 / 2.0;
    let view = [0.0, 0.0, -1.0];
    for y in 0..size {
        for x in 0..size {
            let hit = subject.geometry.hit(pixel_to_camera(x, y, size));
            let a = (hit.inside * half_px + 0.5).clamp(0.0, 1.0);
            if a <= 0.0 {
                continue;
            }
            alpha.pixel_mut(x, y)[0] = a as f32;
            let e = radiance.irradiance(hit.normal);
            let spec = if subject.specular_strength > 0.0 {
                radiance.blinn_phong(hit.normal, view, subject.specular_exponent as f64)
            } else {
                [0.0; 3]
            };
            let px = color.pixel_mut(x, y);
            for k in 0..3 {
                px[k] = (subject.albedo[k] as f64 / std::f64::consts::PI * e[k]
                    + subject.specular_strength as f64 * spec[k]) as f32;
            }
        }
    }
    Ok((color, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_bounds_are_enforced() {
        let s = SubjectSpec {
            subject_id: 0,
            geometry: Geometry::Sphere { center: [0.7, 0.0], radius: 0.5 },
            albedo: [0.5; 3],
            specular_strength: 0.0,
            specular_exponent: 1.0,
        };
        assert!(matches!(s.validate(), Err(Error::SubjectOutOfFrame)));
    }

    #[test]
    fn bust_prefers_the_nearer_sphere() {
        let g = Geometry::Bust { head: [0.0, 0.3], head_radius: 0.3, body: [0.0, -0.4], body_radius: 0.5 };
        // Overlap point: body is larger, so its surface is closer to the camera.
        let h = g.hit([0.0, 0.05]);
        assert!(h.inside > 0.0);
        assert!(h.normal[1] > 0.8, "{:?}", h.normal);
    }
}
