//! Equirectangular environment maps: rotation, perspective background
//! projection, diffuse irradiance and HDR to LDR conversion.
//!
//! Spherical convention: `+y` is up, `+z` is forward (panorama centre) and
//! `+x` is to the right. Row `v` maps to polar angle `theta = v / H * pi`
//! measured from `+y`; column `u` maps to azimuth `phi = u / W * 2pi - pi`
//! with `phi = atan2(x, z)`. Texel `(row, col)` has its centre at
//! `(col + 0.5, row + 0.5)`.

mod io;

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::Image;

pub use io::{read_envmap, write_envmap, ENVMAP_MAGIC};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[inline]
fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Linear HDR radiance on an `H x 2H` equirectangular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl EnvMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(Error::InvalidInput(format!("envmap must be H x 2H, got {height} x {width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(height * width * 3, data.len()));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!("radiance must be finite and >= 0, found {bad}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, rgb: [f32; 3]) -> Self {
        let width = 2 * height;
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    /// Builds a map by evaluating `f` at every texel centre direction.
    pub fn from_fn(height: usize, f: impl Fn(Vec3) -> [f32; 3]) -> Self {
        let width = 2 * height;
        let mut data = Vec::with_capacity(height * width * 3);
        for row in 0..height {
            for col in 0..width {
                let d = equirect_to_dir(col as f64 + 0.5, row as f64 + 0.5, width, height);
                data.extend(f(d).map(|v| v.max(0.0)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn texel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn max_radiance(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    /// Every radiance value multiplied by `k >= 0`.
    pub fn scaled(&self, k: f32) -> EnvMap {
        EnvMap { height: self.height, width: self.width, data: self.data.iter().map(|v| v * k).collect() }
    }

    /// Solid angle of a texel in `row`: `(pi / H) (2 pi / W) sin(theta)`.
    pub fn texel_solid_angle(&self, row: usize) -> f64 {
        let theta = (row as f64 + 0.5) / self.height as f64 * PI;
        (PI / self.height as f64) * (2.0 * PI / self.width as f64) * theta.sin()
    }

    pub fn texel_direction(&self, row: usize, col: usize) -> Vec3 {
        equirect_to_dir(col as f64 + 0.5, row as f64 + 0.5, self.width, self.height)
    }

    /// Bilinear lookup at continuous coordinates; wraps horizontally and
    /// clamps vertically.
    pub fn sample(&self, u: f64, v: f64) -> [f32; 3] {
        let x = u - 0.5;
        let y = v - 0.5;
        let xf = x.floor();
        let yf = y.floor();
        let tx = (x - xf) as f32;
        let ty = (y - yf) as f32;
        let w = self.width as i64;
        let x0 = (xf as i64).rem_euclid(w) as usize;
        let x1 = (xf as i64 + 1).rem_euclid(w) as usize;
        let last = self.height as i64 - 1;
        let y0 = (yf as i64).clamp(0, last) as usize;
        let y1 = (yf as i64 + 1).clamp(0, last) as usize;
        let (a, b, c, d) = (self.texel(y0, x0), self.texel(y0, x1), self.texel(y1, x0), self.texel(y1, x1));
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * tx;
            let bot = c[k] + (d[k] - c[k]) * tx;
            out[k] = top + (bot - top) * ty;
        }
        out
    }

    /// Radiance arriving from direction `d`.
    pub fn lookup(&self, d: Vec3) -> [f32; 3] {
        let (u, v) = dir_to_equirect_unchecked(d, self.width, self.height);
        self.sample(u, v)
    }

    /// LDR preview of the whole panorama at `width x height`.
    pub fn ldr_thumbnail(&self, width: usize, height: usize) -> Image {
        tonemap_ldr(&self.to_image().resize(width, height))
    }

    /// Linear radiance as an image (no tonemapping).
    pub fn to_image(&self) -> Image {
        Image { width: self.width, height: self.height, channels: 3, data: self.data.clone() }
    }
}

/// Field of view and orientation of a pinhole background camera.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CropSpec {
    pub fov_deg: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub out_w: usize,
    pub out_h: usize,
}

impl CropSpec {
    pub fn new(fov_deg: f64, yaw: f64, pitch: f64, out_w: usize, out_h: usize) -> Result<Self> {
        let c = Self { fov_deg, yaw, pitch, out_w, out_h };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 10.0 && self.fov_deg < 150.0) {
            return Err(Error::InvalidInput(format!("fov {} outside (10, 150) degrees", self.fov_deg)));
        }
        if !(self.pitch.abs() < PI / 2.0) {
            return Err(Error::InvalidInput(format!("pitch {} outside (-pi/2, pi/2)", self.pitch)));
        }
        if self.out_w < 8 || self.out_h < 8 {
            return Err(Error::InvalidInput(format!("output {}x{} smaller than 8x8", self.out_w, self.out_h)));
        }
        if !self.yaw.is_finite() {
            return Err(Error::InvalidInput("yaw must be finite".into()));
        }
        Ok(())
    }

    /// World-space ray through the centre of output pixel `(x, y)`.
    pub fn ray(&self, x: usize, y: usize) -> Vec3 {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let forward = [sy * cp, sp, cy * cp];
        let right = [cy, 0.0, -sy];
        let up = cross(forward, right);
        let half = (self.fov_deg.to_radians() * 0.5).tan();
        let aspect = self.out_h as f64 / self.out_w as f64;
        let px = ((2 * x + 1) as f64 / self.out_w as f64 - 1.0) * half;
        let py = (1.0 - (2 * y + 1) as f64 / self.out_h as f64) * half * aspect;
        normalize([
            forward[0] + px * right[0] + py * up[0],
            forward[1] + px * right[1] + py * up[1],
            forward[2] + px * right[2] + py * up[2],
        ])
    }
}

/// Rotates the panorama about the vertical axis so that azimuth `yaw`
/// comes to the front: the column at `u` moves to `u - round(yaw / 2pi * W)`
/// (mod W). Values are permuted, never resampled.
pub fn rotate_envmap(env: &EnvMap, yaw: f64) -> EnvMap {
    let w = env.width as i64;
    let shift = ((yaw / (2.0 * PI) * env.width as f64).round() as i64).rem_euclid(w) as usize;
    if shift == 0 {
        return env.clone();
    }
    let mut data = vec![0.0f32; env.data.len()];
    let row_len = env.width * 3;
    for (dst, src) in data.chunks_mut(row_len).zip(env.data.chunks(row_len)) {
        // new[col] = old[col + shift]
        let split = shift * 3;
        dst[..row_len - split].copy_from_slice(&src[split..]);
        dst[row_len - split..].copy_from_slice(&src[..split]);
    }
    EnvMap { height: env.height, width: env.width, data }
}

/// Continuous equirect coordinates `(u, v)` of a unit direction on a
/// `width x height` panorama. Poles map to `u = W / 2`.
pub fn dir_to_equirect(d: Vec3, width: usize, height: usize) -> Result<(f64, f64)> {
    let n = norm(d);
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(Error::NonUnitDirection(n));
    }
    Ok(dir_to_equirect_unchecked(d, width, height))
}

fn dir_to_equirect_unchecked(d: Vec3, width: usize, height: usize) -> (f64, f64) {
    let theta = d[1].clamp(-1.0, 1.0).acos();
    let phi = d[0].atan2(d[2]);
    let mut u = (phi + PI) / (2.0 * PI) * width as f64;
    if u >= width as f64 {
        u -= width as f64;
    }
    (u, theta / PI * height as f64)
}

pub fn equirect_to_dir(u: f64, v: f64, width: usize, height: usize) -> Vec3 {
    let theta = v / height as f64 * PI;
    let phi = u / width as f64 * 2.0 * PI - PI;
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [st * sp, ct, st * cp]
}

/// Perspective view of the panorama through `crop`, in linear radiance.
pub fn project_to_background(env: &EnvMap, crop: &CropSpec) -> Image {
    let mut out = Image::zeros(crop.out_w, crop.out_h, 3);
    for y in 0..crop.out_h {
        for x in 0..crop.out_w {
            let rgb = env.lookup(crop.ray(x, y));
            out.pixel_mut(x, y).copy_from_slice(&rgb);
        }
    }
    out
}

/// Per-texel direction, solid angle and radiance, prepared once so that many
/// irradiance queries against the same map stay cheap.
#[derive(Clone, Debug)]
pub struct RadianceTable {
    dirs: Vec<Vec3>,
    weighted: Vec<[f64; 3]>,
}

impl RadianceTable {
    pub fn new(env: &EnvMap) -> Self {
        let mut dirs = Vec::with_capacity(env.height * env.width);
        let mut weighted = Vec::with_capacity(env.height * env.width);
        for row in 0..env.height {
            let dw = env.texel_solid_angle(row);
            for col in 0..env.width {
                let l = env.texel(row, col);
                if l == [0.0; 3] {
                    continue;
                }
                dirs.push(env.texel_direction(row, col));
                weighted.push([l[0] as f64 * dw, l[1] as f64 * dw, l[2] as f64 * dw]);
            }
        }
        Self { dirs, weighted }
    }

    /// `sum L(w) max(0, n.w) dw` over all texels.
    pub fn irradiance(&self, n: Vec3) -> [f64; 3] {
        let mut e = [0.0; 3];
        for (d, lw) in self.dirs.iter().zip(&self.weighted) {
            let c = dot(n, *d);
            if c > 0.0 {
                e[0] += lw[0] * c;
                e[1] += lw[1] * c;
                e[2] += lw[2] * c;
            }
        }
        e
    }

    /// Blinn-Phong glossy response for normal `n` seen from `view`
    /// (unit vector towards the viewer), energy-normalised by `(p + 8) / 8pi`.
    pub fn blinn_phong(&self, n: Vec3, view: Vec3, exponent: f64) -> [f64; 3] {
        let k = (exponent + 8.0) / (8.0 * PI);
        let mut s = [0.0; 3];
        for (d, lw) in self.dirs.iter().zip(&self.weighted) {
            let c = dot(n, *d);
            if c <= 0.0 {
                continue;
            }
            let h = normalize([d[0] + view[0], d[1] + view[1], d[2] + view[2]]);
            let nh = dot(n, h).max(0.0);
            let f = k * nh.powf(exponent) * c;
            s[0] += lw[0] * f;
            s[1] += lw[1] * f;
            s[2] += lw[2] * f;
        }
        s
    }
}

/// Cosine-weighted hemisphere integral of the map's radiance about `n`.
pub fn irradiance(env: &EnvMap, n: Vec3) -> Result<[f64; 3]> {
    let len = norm(n);
    if !len.is_finite() || (len - 1.0).abs() > 1e-6 {
        return Err(Error::NonUnitDirection(len));
    }
    Ok(RadianceTable::new(env).irradiance(n))
}

/// Reinhard `x / (1 + x)` followed by gamma `1 / 2.2`, per channel.
#[inline]
pub fn tonemap_value(x: f32) -> f32 {
    let x = x.max(0.0) as f64;
    (x / (1.0 + x)).powf(1.0 / 2.2) as f32
}

pub fn tonemap_ldr(img: &Image) -> Image {
    img.map(tonemap_value)
}
