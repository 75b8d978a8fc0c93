//! Light-direction probe for sphere subjects.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Brightness coefficient of variation below which shading counts as flat.
pub const DIRECTIONAL_CV: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReading {
    /// Viewer-relative light azimuth: 0 = from the camera, `+` = from the
    /// image right, `-` = from the image left.
    pub azimuth: f64,
    /// Coefficient of variation of brightness over the sphere.
    pub contrast: f64,
}

impl ProbeReading {
    pub fn is_directional(&self) -> bool {
        self.contrast >= DIRECTIONAL_CV
    }

    /// `Some(+1/-1)` for a directional reading, `None` for flat shading.
    pub fn side(&self) -> Option<f64> {
        self.is_directional().then(|| self.azimuth.signum())
    }
}

/// Estimates the dominant light azimuth on a sphere silhouette.
///
/// The sphere is fitted from the mask (centroid and area), each interior
/// pixel gets its analytic normal, and the azimuth is read off the
/// brightness-weighted mean normal.
pub fn light_azimuth_probe(image: &Image, mask: &Mask) -> Result<ProbeReading> {
    if mask.channels != 1 || mask.width != image.width || mask.height != image.height {
        return Err(Error::shape((image.width, image.height, 1), (mask.width, mask.height, mask.channels)));
    }
    let (mut area, mut cx, mut cy) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let a = mask.pixel(x, y)[0] as f64;
            area += a;
            cx += a * (x as f64 + 0.5);
            cy += a * (y as f64 + 0.5);
        }
    }
    if area < 1.0 {
        return Err(Error::EmptyMask);
    }
    cx /= area;
    cy /= area;
    let r = (area / std::f64::consts::PI).sqrt();

    let mut samples = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.pixel(x, y)[0] < 0.99 {
                continue;
            }
            let dx = (x as f64 + 0.5 - cx) / r;
            let dy = (cy - y as f64 - 0.5) / r;
            let d2 = dx * dx + dy * dy;
            if d2 >= 1.0 {
                continue;
            }
            let p = image.pixel(x, y);
            let lum = if p.len() >= 3 { 0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64 } else { p[0] as f64 };
            samples.push(([dx, dy, -(1.0 - d2).sqrt()], lum));
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>() / n;
    let contrast = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    let mut nbar = [0.0f64; 3];
    for (normal, lum) in &samples {
        for k in 0..3 {
            nbar[k] += lum * normal[k];
        }
    }
    Ok(ProbeReading { azimuth: nbar[0].atan2(-nbar[2]), contrast })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envlight::{EnvMap, RadianceTable};
    use crate::stagesim::{render_linear, Geometry, SubjectSpec};

    fn sphere() -> SubjectSpec {
        SubjectSpec {
            subject_id: 0,
            geometry: Geometry::Sphere { center: [0.1, -0.05], radius: 0.6 },
            albedo: [0.7, 0.7, 0.7],
            specular_strength: 0.0,
            specular_exponent: 8.0,
        }
    }

    /// Single bright texel nearest the given viewer-relative azimuth on the
    /// horizon (the viewer looks along `+z`, so azimuth 0 is `-z`).
    fn point_light(azimuth: f64) -> EnvMap {
        let h = 32;
        let d = [azimuth.sin(), 0.0, -azimuth.cos()];
        let (u, v) = crate::envlight::dir_to_equirect(d, 2 * h, h).unwrap();
        let (col, row) = ((u as usize).min(2 * h - 1), (v as usize).min(h - 1));
        let mut data = vec![0.0; 2 * h * h * 3];
        data[(row * 2 * h + col) * 3..][..3].copy_from_slice(&[80.0; 3]);
        EnvMap::new(h, 2 * h, data).unwrap()
    }

    fn probe(env: &EnvMap) -> ProbeReading {
        let (img, m) = render_linear(&sphere(), &RadianceTable::new(env), 64).unwrap();
        light_azimuth_probe(&img, &m).unwrap()
    }

    #[test]
    fn frontal_light_reads_zero() {
        let r = probe(&point_light(0.0));
        assert!(r.is_directional());
        assert!(r.azimuth.abs() < 0.2, "{}", r.azimuth);
    }

    #[test]
    fn side_lights_read_their_side() {
        for az in [-1.2, -0.6, 0.6, 1.2] {
            let r = probe(&point_light(az));
            assert_eq!(r.side(), Some(az.signum()), "az {az}: {r:?}");
        }
    }

    #[test]
    fn flipping_negates_the_azimuth() {
        let (img, m) = render_linear(&sphere(), &RadianceTable::new(&point_light(0.7)), 64).unwrap();
        let a = light_azimuth_probe(&img, &m).unwrap();
        let b = light_azimuth_probe(&img.flip_horizontal(), &m.flip_horizontal()).unwrap();
        assert!((a.azimuth + b.azimuth).abs() < 0.2, "{a:?} {b:?}");
    }

    #[test]
    fn constant_env_is_non_directional() {
        let r = probe(&EnvMap::constant(16, [1.0; 3]));
        assert!(!r.is_directional(), "{r:?}");
        assert_eq!(r.side(), None);
    }

    #[test]
    fn empty_mask_errors() {
        let img = Image::zeros(8, 8, 3);
        assert!(matches!(light_azimuth_probe(&img, &Image::zeros(8, 8, 1)), Err(Error::EmptyMask)));
    }
}
