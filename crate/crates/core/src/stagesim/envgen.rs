//! Procedural environment maps: a sky/ground ambient gradient plus soft
//! Gaussian light blobs on the sphere.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envlight::{dot, EnvMap, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvStyle {
    /// 1-3 blobs anywhere above the horizon band, moderate ambient.
    LightStage,
    /// One strong blob to the left or right of the forward direction, in view
    /// of a wide background camera; weak ambient.
    Directional,
    /// Sun plus sky and ground tints: the distribution of "natural" scenes.
    Natural,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub direction: Vec3,
    /// Angular width in radians.
    pub width: f64,
    pub radiance: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvRecipe {
    pub sky: [f32; 3],
    pub ground: [f32; 3],
    pub blobs: Vec<Blob>,
}

pub fn direction_from_angles(azimuth: f64, elevation: f64) -> Vec3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [ce * sa, se, ce * ca]
}

impl EnvRecipe {
    pub fn render(&self, height: usize) -> EnvMap {
        EnvMap::from_fn(height, |d| {
            let t = ((d[1] + 1.0) * 0.5) as f32;
            let mut rgb: [f32; 3] = std::array::from_fn(|k| self.ground[k] * (1.0 - t) + self.sky[k] * t);
            for b in &self.blobs {
                let c = dot(d, b.direction);
                let f = ((c - 1.0) / (b.width * b.width)).exp() as f32;
                for (v, r) in rgb.iter_mut().zip(b.radiance) {
                    *v += r * f;
                }
            }
            rgb
        })
    }

    /// Signed azimuth of the brightest blob (radians, `+` = right of forward).
    pub fn key_light_azimuth(&self) -> Option<f64> {
        self.blobs
            .iter()
            .max_by(|a, b| {
                let la: f32 = a.radiance.iter().sum();
                let lb: f32 = b.radiance.iter().sum();
                la.total_cmp(&lb)
            })
            .map(|b| b.direction[0].atan2(b.direction[2]))
    }
}

fn tint(rng: &mut impl Rng, spread: f32) -> [f32; 3] {
    [
        1.0 + rng.random_range(-spread..=spread),
        1.0 + rng.random_range(-spread..=spread),
        1.0 + rng.random_range(-spread..=spread),
    ]
}

fn scaled(c: [f32; 3], k: f32) -> [f32; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

pub fn sample_recipe(style: EnvStyle, rng: &mut impl Rng) -> EnvRecipe {
    match style {
        EnvStyle::LightStage => {
            let ambient = rng.random_range(0.08..0.3f32);
            let sky = scaled(tint(rng, 0.2), ambient);
            let ground = scaled(tint(rng, 0.2), ambient * rng.random_range(0.3..0.9f32));
            let n = rng.random_range(1..=3usize);
            let blobs = (0..n)
                .map(|i| {
                    let az = rng.random_range(-PI..PI);
                    let el = rng.random_range(-0.2..1.0f64);
                    let peak = if i == 0 { rng.random_range(6.0..16.0f32) } else { rng.random_range(1.0..6.0f32) };
                    Blob {
                        direction: direction_from_angles(az, el),
                        width: rng.random_range(0.15..0.35f64),
                        radiance: scaled(tint(rng, 0.25), peak),
                    }
                })
                .collect();
            EnvRecipe { sky, ground, blobs }
        }
        EnvStyle::Directional => {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let az = side * rng.random_range(0.6..1.0f64);
            let el = rng.random_range(0.0..0.4f64);
            let ambient = rng.random_range(0.03..0.08f32);
            EnvRecipe {
                sky: scaled(tint(rng, 0.1), ambient),
                ground: scaled(tint(rng, 0.1), ambient * 0.5),
                blobs: vec![Blob {
                    direction: direction_from_angles(az, el),
                    width: rng.random_range(0.2..0.3f64),
                    radiance: scaled(tint(rng, 0.1), rng.random_range(10.0..18.0f32)),
                }],
            }
        }
        EnvStyle::Natural => {
            let sky_level = rng.random_range(0.3..0.8f32);
            let sky = [0.55 * sky_level, 0.7 * sky_level, 1.0 * sky_level];
            let g = rng.random_range(0.1..0.3f32);
            let ground = [g * 0.9, g * rng.random_range(0.8..1.2f32), g * 0.6];
            let sun = Blob {
                direction: direction_from_angles(rng.random_range(-PI..PI), rng.random_range(0.1..1.1f64)),
                width: rng.random_range(0.08..0.18f64),
                radiance: scaled([1.0, 0.92, 0.8], rng.random_range(20.0..40.0f32)),
            };
            let bounce = Blob {
                direction: direction_from_angles(rng.random_range(-PI..PI), rng.random_range(-0.3..0.3f64)),
                width: rng.random_range(0.4..0.7f64),
                radiance: scaled(tint(rng, 0.3), rng.random_range(0.3..1.2f32)),
            };
            EnvRecipe { sky, ground, blobs: vec![sun, bounce] }
        }
    }
}
