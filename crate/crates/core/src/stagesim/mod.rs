//! Procedural light-stage substitute: renders parametric subjects under
//! environment maps and assembles relighting training tuples.

mod dataset;
mod envgen;
mod subject;

use serde::{Deserialize, Serialize};

use crate::envlight::{project_to_background, tonemap_ldr, CropSpec, EnvMap, RadianceTable};
use crate::error::Result;
use crate::harmoneval::composite;
use crate::image::{Image, Mask};

pub use dataset::{
    build_dataset, load_dataset, manifest_hash, read_manifest, rerender_tuple, sample_subject, validate_dataset,
    Dataset, DatasetConfig, GeometryMix, ManifestRow, SubjectPool, TupleFiles, MANIFEST_FILE,
};
pub(crate) use dataset::{create_root, write_config, write_manifest, write_tuple};
pub use envgen::{direction_from_angles, sample_recipe, Blob, EnvRecipe, EnvStyle};
pub use subject::{pixel_to_camera, render_linear, Geometry, SubjectSpec};

/// Renders `subject` under `env` into an LDR foreground and its alpha.
pub fn render_subject(subject: &SubjectSpec, env: &EnvMap, size: usize) -> Result<(Image, Mask)> {
    let (linear, alpha) = render_linear(subject, &RadianceTable::new(env), size)?;
    Ok((tonemap_ldr(&linear), alpha))
}

/// Where a tuple's lighting came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightingRef {
    pub env_id: u32,
    /// Rotation applied with [`crate::envlight::rotate_envmap`].
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TupleMeta {
    pub id: String,
    pub subject: SubjectSpec,
    pub lighting_a: LightingRef,
    pub lighting_b: LightingRef,
    pub crop: CropSpec,
    pub seed: u64,
}

/// One relighting example: the subject lit by `a` over the target
/// background, and the same subject lit by `b` as the target.
#[derive(Clone, Debug)]
pub struct TrainingTuple {
    pub x_a: Image,
    pub m: Mask,
    pub y_b: Image,
    pub z_b: EnvMap,
    /// LDR `S x S` preview of `z_b`, the environment-conditioning input.
    pub z_b_thumb: Image,
    pub x_b: Image,
    pub meta: TupleMeta,
    pub provenance: Option<String>,
}

/// Renders a tuple. `env_a`/`env_b` are already rotated.
///
/// The input composite places the source-lit subject over the *target*
/// background, which is what the harmonizer sees at inference time.
pub fn render_tuple(
    subject: &SubjectSpec,
    env_a: &EnvMap,
    env_b: &EnvMap,
    crop_b: &CropSpec,
    size: usize,
    meta: TupleMeta,
) -> Result<TrainingTuple> {
    crop_b.validate()?;
    let (fg_a, m) = render_subject(subject, env_a, size)?;
    let (fg_b, _) = if env_a == env_b { (fg_a.clone(), m.clone()) } else { render_subject(subject, env_b, size)? };
    let crop = CropSpec { out_w: size, out_h: size, ..*crop_b };
    let y_b = tonemap_ldr(&project_to_background(env_b, &crop));
    let x_a = composite(&fg_a, &m, &y_b)?;
    let x_b = composite(&fg_b, &m, &y_b)?;
    Ok(TrainingTuple {
        x_a,
        m,
        y_b,
        z_b: env_b.clone(),
        z_b_thumb: env_b.ldr_thumbnail(size, size),
        x_b,
        meta: TupleMeta { crop, ..meta },
        provenance: None,
    })
}

impl TrainingTuple {
    /// Rounds every image to 8-bit levels (what a PNG round trip yields).
    pub fn quantized(mut self) -> Self {
        self.x_a = self.x_a.quantize8();
        self.m = self.m.quantize8();
        self.y_b = self.y_b.quantize8();
        self.z_b_thumb = self.z_b_thumb.quantize8();
        self.x_b = self.x_b.quantize8();
        self
    }

    pub fn size(&self) -> usize {
        self.x_b.width
    }

    /// Checks the compositing invariants: images in `[0, 1]`, equal sizes,
    /// and both composites equal to `y_b` wherever the mask is zero.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let s = self.x_b.width;
        for (name, img, ch) in [
            ("x_a", &self.x_a, 3),
            ("m", &self.m, 1),
            ("y_b", &self.y_b, 3),
            ("x_b", &self.x_b, 3),
            ("z_b_thumb", &self.z_b_thumb, 3),
        ] {
            if img.width != s || img.height != s || img.channels != ch {
                return Err(format!("{name} has shape {}x{}x{}", img.width, img.height, img.channels));
            }
            if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("{name} has values outside [0, 1]"));
            }
        }
        for y in 0..s {
            for x in 0..s {
                if self.m.pixel(x, y)[0] == 0.0 {
                    if self.x_b.pixel(x, y) != self.y_b.pixel(x, y) {
                        return Err(format!("x_b differs from y_b at unmasked pixel ({x}, {y})"));
                    }
                    if self.x_a.pixel(x, y) != self.y_b.pixel(x, y) {
                        return Err(format!("x_a differs from y_b at unmasked pixel ({x}, {y})"));
                    }
                }
            }
        }
        Ok(())
    }
}
