//! Dataset materialization: deterministic tuple sampling, on-disk layout,
//! manifest and validation.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! <root>/dataset.json            generator config
//! <root>/manifest.tsv            one row per tuple
//! <root>/<id>_xa.png             input composite
//! <root>/<id>_m.png              alpha mask
//! <root>/<id>_yb.png             target background
//! <root>/<id>_xb.png             target image
//! <root>/<id>_zb.png             LDR thumbnail of the target envmap
//! <root>/<id>_zb.envm            target envmap (ENVM binary)
//! ```

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::envgen::{sample_recipe, EnvStyle};
use super::{render_tuple, Geometry, LightingRef, SubjectSpec, TrainingTuple, TupleMeta};
use crate::envlight::{read_envmap, rotate_envmap, write_envmap, CropSpec, EnvMap};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const CONFIG_FILE: &str = "dataset.json";

const COLUMNS: [&str; 13] = [
    "id", "subject", "env_a", "yaw_a", "env_b", "yaw_b", "crop", "seed", "x_a", "m", "y_b", "x_b", "z_b_thumb",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryMix {
    /// Spheres, capsules and busts in equal proportion.
    Mixed,
    /// Spheres with a little positional jitter.
    Spheres,
    /// Spheres exactly centred in frame (mirror-symmetric silhouettes).
    CenteredSpheres,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub env_height: usize,
    pub n_subjects: u32,
    pub n_envs: u32,
    pub env_style: EnvStyle,
    pub geometry: GeometryMix,
    /// Horizontal field of view range in degrees.
    pub fov_deg: [f64; 2],
    pub pitch: [f64; 2],
    /// Random yaw rotation of both envmaps per tuple.
    pub rotate_envs: bool,
    /// Seed of the subject and envmap pools (tuples use the build seed).
    pub pool_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            env_height: 32,
            n_subjects: 10,
            n_envs: 20,
            env_style: EnvStyle::LightStage,
            geometry: GeometryMix::Mixed,
            fov_deg: [40.0, 90.0],
            pitch: [0.0, 0.0],
            rotate_envs: true,
            pool_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_size < 8 {
            return bad("image_size must be >= 8");
        }
        if self.env_height < 4 {
            return bad("env_height must be >= 4");
        }
        if self.n_subjects == 0 || self.n_envs == 0 {
            return bad("pools must be non-empty");
        }
        if !(self.fov_deg[0] > 10.0 && self.fov_deg[1] < 150.0 && self.fov_deg[0] <= self.fov_deg[1]) {
            return bad("fov range must lie in (10, 150)");
        }
        if self.pitch[0] > self.pitch[1] || self.pitch[0].abs() >= PI / 2.0 || self.pitch[1].abs() >= PI / 2.0 {
            return bad("pitch range must lie in (-pi/2, pi/2)");
        }
        Ok(())
    }
}

fn range(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

pub fn sample_subject(subject_id: u32, mix: GeometryMix, rng: &mut impl Rng) -> SubjectSpec {
    let kind = match mix {
        GeometryMix::Mixed => rng.random_range(0..3u32),
        _ => 0,
    };
    let geometry = match (mix, kind) {
        (GeometryMix::CenteredSpheres, _) => Geometry::Sphere { center: [0.0, 0.0], radius: rng.random_range(0.5..0.65) },
        (_, 0) => Geometry::Sphere {
            center: [rng.random_range(-0.05..0.05), rng.random_range(-0.1..0.05)],
            radius: rng.random_range(0.45..0.6),
        },
        (_, 1) => Geometry::Capsule {
            center: [rng.random_range(-0.05..0.05), rng.random_range(-0.15..0.0)],
            radius: rng.random_range(0.3..0.4),
            half_length: rng.random_range(0.2..0.35),
        },
        _ => {
            let head_radius = rng.random_range(0.25..0.32);
            Geometry::Bust {
                head: [rng.random_range(-0.03..0.03), rng.random_range(0.25..0.35)],
                head_radius,
                body: [0.0, -0.55],
                body_radius: rng.random_range(0.38..0.44),
            }
        }
    };
    SubjectSpec {
        subject_id,
        geometry,
        albedo: [rng.random_range(0.35..0.9), rng.random_range(0.25..0.8), rng.random_range(0.2..0.75)],
        specular_strength: rng.random_range(0.0..0.3),
        specular_exponent: rng.random_range(8.0..48.0),
    }
}

/// Subjects and envmaps shared by every tuple of a dataset.
#[derive(Clone, Debug)]
pub struct SubjectPool {
    pub subjects: Vec<SubjectSpec>,
    pub envs: Vec<EnvMap>,
}

impl SubjectPool {
    pub fn new(config: &DatasetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.pool_seed);
        let subjects = (0..config.n_subjects).map(|i| sample_subject(i, config.geometry, &mut rng)).collect();
        let mut env_rng = ChaCha8Rng::seed_from_u64(config.pool_seed ^ 0x9e37_79b9_7f4a_7c15);
        let envs = (0..config.n_envs)
            .map(|_| sample_recipe(config.env_style, &mut env_rng).render(config.env_height))
            .collect();
        Self { subjects, envs }
    }

    pub fn lit(&self, r: &LightingRef) -> EnvMap {
        rotate_envmap(&self.envs[r.env_id as usize], r.yaw)
    }
}

/// File names of one tuple, relative to the dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct TupleFiles {
    pub x_a: String,
    pub m: String,
    pub y_b: String,
    pub x_b: String,
    pub z_b_thumb: String,
    pub z_b: String,
}

impl TupleFiles {
    pub fn for_id(id: &str) -> Self {
        Self {
            x_a: format!("{id}_xa.png"),
            m: format!("{id}_m.png"),
            y_b: format!("{id}_yb.png"),
            x_b: format!("{id}_xb.png"),
            z_b_thumb: format!("{id}_zb.png"),
            z_b: format!("{id}_zb.envm"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub meta: TupleMeta,
    pub files: TupleFiles,
    pub provenance: Option<String>,
}

impl ManifestRow {
    fn header(with_provenance: bool) -> String {
        let mut h = COLUMNS.join("\t");
        h.push_str("\tz_b");
        if with_provenance {
            h.push_str("\tprovenance");
        }
        h
    }

    fn to_line(&self) -> String {
        let m = &self.meta;
        let mut line = String::new();
        let subject = serde_json::to_string(&m.subject).expect("subject serializes");
        let crop = serde_json::to_string(&m.crop).expect("crop serializes");
        write!(
            line,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            m.id,
            subject,
            m.lighting_a.env_id,
            m.lighting_a.yaw,
            m.lighting_b.env_id,
            m.lighting_b.yaw,
            crop,
            m.seed,
            self.files.x_a,
            self.files.m,
            self.files.y_b,
            self.files.x_b,
            self.files.z_b_thumb,
            self.files.z_b,
        )
        .unwrap();
        if let Some(p) = &self.provenance {
            line.push('\t');
            line.push_str(p);
        }
        line
    }

    fn parse(line: &str, header: &[&str]) -> Result<Self> {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |d: String| Error::Format { what: "manifest row", detail: d };
        if cols.len() != header.len() {
            return Err(bad(format!("expected {} columns, found {}", header.len(), cols.len())));
        }
        let get = |name: &str| -> Result<&str> {
            header.iter().position(|h| *h == name).map(|i| cols[i]).ok_or_else(|| bad(format!("missing column {name}")))
        };
        let num = |name: &str| -> Result<f64> { get(name)?.parse().map_err(|_| bad(format!("bad number in {name}"))) };
        let int = |name: &str| -> Result<u64> { get(name)?.parse().map_err(|_| bad(format!("bad integer in {name}"))) };
        let meta = TupleMeta {
            id: get("id")?.to_string(),
            subject: serde_json::from_str(get("subject")?).map_err(|e| bad(e.to_string()))?,
            lighting_a: LightingRef { env_id: int("env_a")? as u32, yaw: num("yaw_a")? },
            lighting_b: LightingRef { env_id: int("env_b")? as u32, yaw: num("yaw_b")? },
            crop: serde_json::from_str(get("crop")?).map_err(|e| bad(e.to_string()))?,
            seed: int("seed")?,
        };
        let files = TupleFiles {
            x_a: get("x_a")?.into(),
            m: get("m")?.into(),
            y_b: get("y_b")?.into(),
            x_b: get("x_b")?.into(),
            z_b_thumb: get("z_b_thumb")?.into(),
            z_b: get("z_b")?.into(),
        };
        let provenance = get("provenance").ok().map(str::to_string);
        Ok(Self { meta, files, provenance })
    }
}

/// Writes the tuple's images and envmap; returns its manifest row.
pub(crate) fn write_tuple(root: &Path, t: &TrainingTuple) -> Result<ManifestRow> {
    let files = TupleFiles::for_id(&t.meta.id);
    t.x_a.save_png(root.join(&files.x_a))?;
    t.m.save_png(root.join(&files.m))?;
    t.y_b.save_png(root.join(&files.y_b))?;
    t.x_b.save_png(root.join(&files.x_b))?;
    t.z_b_thumb.save_png(root.join(&files.z_b_thumb))?;
    write_envmap(&t.z_b, root.join(&files.z_b))?;
    Ok(ManifestRow { meta: t.meta.clone(), files, provenance: t.provenance.clone() })
}

pub(crate) fn write_manifest(root: &Path, rows: &[ManifestRow]) -> Result<()> {
    let with_prov = rows.iter().any(|r| r.provenance.is_some());
    let mut text = ManifestRow::header(with_prov);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format { what: "manifest", detail: "empty file".into() })?
        .split('\t')
        .collect();
    lines.filter(|l| !l.is_empty()).map(|l| ManifestRow::parse(l, &header)).collect()
}

pub(crate) fn write_config<T: Serialize>(root: &Path, name: &str, config: &T) -> Result<()> {
    let path = root.join(name);
    let json = serde_json::to_string_pretty(config).expect("config serializes");
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_root(root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))
}

/// Samples the metadata of tuple `index` from its own seed.
fn sample_meta(config: &DatasetConfig, pool: &SubjectPool, index: usize, seed: u64) -> Result<TupleMeta> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subject = pool.subjects[rng.random_range(0..pool.subjects.len())].clone();
    let n_envs = pool.envs.len() as u32;
    let env_a = rng.random_range(0..n_envs);
    let env_b = if n_envs > 1 { (env_a + rng.random_range(1..n_envs)) % n_envs } else { env_a };
    let width = (2 * config.env_height) as f64;
    let yaw = |rng: &mut ChaCha8Rng| {
        if config.rotate_envs {
            rng.random_range(0..width as u32) as f64 * 2.0 * PI / width
        } else {
            0.0
        }
    };
    let yaw_a = yaw(&mut rng);
    let yaw_b = yaw(&mut rng);
    let fov = range(&mut rng, config.fov_deg);
    let pitch = range(&mut rng, config.pitch);
    Ok(TupleMeta {
        id: format!("{index:06}"),
        subject,
        lighting_a: LightingRef { env_id: env_a, yaw: yaw_a },
        lighting_b: LightingRef { env_id: env_b, yaw: yaw_b },
        crop: CropSpec::new(fov, 0.0, pitch, config.image_size, config.image_size)?,
        seed,
    })
}

fn render_meta(config: &DatasetConfig, pool: &SubjectPool, meta: TupleMeta) -> Result<TrainingTuple> {
    let env_a = pool.lit(&meta.lighting_a);
    let env_b = pool.lit(&meta.lighting_b);
    let crop = meta.crop;
    let subject = meta.subject.clone();
    Ok(render_tuple(&subject, &env_a, &env_b, &crop, config.image_size, meta)?.quantized())
}

/// Renders `n_tuples` tuples into `root`. Identical `(config, seed)` give
/// byte-identical directories.
pub fn build_dataset(config: &DatasetConfig, n_tuples: usize, seed: u64, root: &Path) -> Result<Vec<ManifestRow>> {
    config.validate()?;
    if n_tuples == 0 {
        return Err(Error::InvalidInput("n_tuples must be >= 1".into()));
    }
    create_root(root)?;
    let pool = SubjectPool::new(config);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n_tuples).map(|_| master.next_u64()).collect();
    let tuples: Vec<TrainingTuple> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| render_meta(config, &pool, sample_meta(config, &pool, i, s)?))
        .collect::<Result<_>>()?;
    let rows = tuples.iter().map(|t| write_tuple(root, t)).collect::<Result<Vec<_>>>()?;
    write_config(root, CONFIG_FILE, config)?;
    write_manifest(root, &rows)?;
    Ok(rows)
}

/// Re-renders one manifest row from its metadata alone.
pub fn rerender_tuple(config: &DatasetConfig, meta: &TupleMeta) -> Result<TrainingTuple> {
    render_meta(config, &SubjectPool::new(config), meta.clone())
}

/// SHA-256 of the manifest file, hex encoded.
pub fn manifest_hash(root: &Path) -> Result<String> {
    let path = root.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub config: Option<DatasetConfig>,
    pub tuples: Vec<TrainingTuple>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.tuples.first().map_or(0, TrainingTuple::size)
    }
}

fn load_row(root: &Path, row: &ManifestRow) -> Result<TrainingTuple> {
    let f = &row.files;
    Ok(TrainingTuple {
        x_a: Image::load_png(root.join(&f.x_a), 3)?,
        m: Image::load_png(root.join(&f.m), 1)?,
        y_b: Image::load_png(root.join(&f.y_b), 3)?,
        z_b: read_envmap(root.join(&f.z_b))?,
        z_b_thumb: Image::load_png(root.join(&f.z_b_thumb), 3)?,
        x_b: Image::load_png(root.join(&f.x_b), 3)?,
        meta: row.meta.clone(),
        provenance: row.provenance.clone(),
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let rows = read_manifest(root)?;
    let tuples = rows.iter().map(|r| load_row(root, r)).collect::<Result<Vec<_>>>()?;
    let cfg_path = root.join(CONFIG_FILE);
    let config = match fs::read_to_string(&cfg_path) {
        Ok(s) => serde_json::from_str(&s).ok(),
        Err(_) => None,
    };
    Ok(Dataset { root: root.to_path_buf(), config, tuples })
}

/// Loads every tuple of the manifest and checks its invariants; returns the
/// number of valid tuples or the first violation.
pub fn validate_dataset(root: &Path) -> Result<usize> {
    let rows = read_manifest(root)?;
    for row in &rows {
        let t = load_row(root, row)?;
        t.check_invariants().map_err(|detail| Error::Format { what: "tuple", detail: format!("{}: {detail}", row.meta.id) })?;
    }
    Ok(rows.len())
}
