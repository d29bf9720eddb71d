//! Synthetic "a <color> <object>" scenes: factor vectors, anti-aliased
//! rendering, masks, patch latents, and PPM/PGM export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::PATCH_FEATURES;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::text::level_name;

pub const IMAGE_SIDE: usize = 16;
pub const PATCH_SIDE: usize = 4;
pub const BACKGROUND: f64 = 0.5;
pub const SIZE_RANGE: (f64, f64) = (0.3, 0.8);
pub const POSITION_RANGE: (f64, f64) = (0.2, 0.8);
const SUPERSAMPLE: usize = 4;

/// `IMAGE_SIDE x IMAGE_SIDE x 3` values in [0, 1].
pub type Raster = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Position on the normalized color axis: red 0, green 0.5, blue 1.
    pub fn coordinate(self) -> f64 {
        self.index() as f64 / 2.0
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::UnknownToken {
                attribute: "color".into(),
                value: name.into(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Square,
    Circle,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 2] = [ObjectKind::Square, ObjectKind::Circle];

    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Square => "square",
            ObjectKind::Circle => "circle",
        }
    }

    pub fn coordinate(self) -> f64 {
        match self {
            ObjectKind::Square => 0.0,
            ObjectKind::Circle => 1.0,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::UnknownToken {
                attribute: "object".into(),
                value: name.into(),
            })
    }
}

/// Ground-truth semantic factors of a scene. `size` is the side (or
/// diameter) and `x`, `y` the center, all as fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorVector {
    pub color: Color,
    pub object: ObjectKind,
    pub size: f64,
    pub x: f64,
    pub y: f64,
}

/// Factor names in coordinate order.
pub const FACTOR_NAMES: [&str; 5] = ["color", "object", "size", "x", "y"];

impl FactorVector {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "{name} = {v} outside [{lo}, {hi}]"
                )))
            }
        };
        check("size", self.size, SIZE_RANGE)?;
        check("x", self.x, POSITION_RANGE)?;
        check("y", self.y, POSITION_RANGE)
    }

    /// Every factor mapped to [0, 1] in the order of [`FACTOR_NAMES`].
    pub fn coordinates(&self) -> [f64; 5] {
        [
            self.color.coordinate(),
            self.object.coordinate(),
            normalize(self.size, SIZE_RANGE),
            normalize(self.x, POSITION_RANGE),
            normalize(self.y, POSITION_RANGE),
        ]
    }

    /// Nearest valid factor vector for (possibly out-of-range) coordinates.
    pub fn from_coordinates(c: &[f64]) -> Result<Self> {
        if c.len() != 5 || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("expected five finite coordinates".into()));
        }
        let color = Color::ALL[(c[0].clamp(0.0, 1.0) * 2.0).round() as usize];
        let object = if c[1] >= 0.5 {
            ObjectKind::Circle
        } else {
            ObjectKind::Square
        };
        Ok(Self {
            color,
            object,
            size: denormalize(c[2], SIZE_RANGE),
            x: denormalize(c[3], POSITION_RANGE),
            y: denormalize(c[4], POSITION_RANGE),
        })
    }

    /// Value name of a factor as used by the scene vocabulary; continuous
    /// factors are quantized to the nearest tenth of their coordinate.
    pub fn value_name(&self, factor: &str) -> Result<String> {
        let c = self.coordinates();
        let level = |v: f64| level_name((v * 10.0).round() as usize);
        Ok(match factor {
            "color" => self.color.name().into(),
            "object" => self.object.name().into(),
            "size" => level(c[2]),
            "x" => level(c[3]),
            "y" => level(c[4]),
            other => return Err(Error::UnknownAttribute(other.into())),
        })
    }

    /// `[color, object]`, plus quantized size and position when `full`.
    pub fn prompt(&self, full: bool) -> Vec<(String, String)> {
        let names: &[&str] = if full {
            &FACTOR_NAMES
        } else {
            &FACTOR_NAMES[..2]
        };
        names
            .iter()
            .map(|n| (n.to_string(), self.value_name(n).expect("known factor")))
            .collect()
    }
}

fn normalize(v: f64, (lo, hi): (f64, f64)) -> f64 {
    (v - lo) / (hi - lo)
}

fn denormalize(c: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + c.clamp(0.0, 1.0) * (hi - lo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub factors: FactorVector,
    #[serde(skip)]
    pub raster: Raster,
    #[serde(skip)]
    pub object_mask: Array2<bool>,
    #[serde(skip)]
    pub background_mask: Array2<bool>,
    pub prompt: Vec<(String, String)>,
}

/// Fraction of each pixel covered by the shape, from a regular 4 x 4
/// supersampling grid.
fn coverage(
    size: f64,
    cx: f64,
    cy: f64,
    inside: impl Fn(f64, f64, f64) -> bool,
) -> Array2<f64> {
    let n = IMAGE_SIDE as f64;
    let half = size / 2.0;
    let mut cov = Array2::zeros((IMAGE_SIDE, IMAGE_SIDE));
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let mut hits = 0;
            for i in 0..SUPERSAMPLE {
                for j in 0..SUPERSAMPLE {
                    let v = (r as f64 + (i as f64 + 0.5) / SUPERSAMPLE as f64) / n;
                    let u = (c as f64 + (j as f64 + 0.5) / SUPERSAMPLE as f64) / n;
                    if inside(u - cx, v - cy, half) {
                        hits += 1;
                    }
                }
            }
            cov[[r, c]] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    cov
}

fn square_coverage(size: f64, x: f64, y: f64) -> Array2<f64> {
    coverage(size, x, y, |du, dv, h| du.abs() <= h && dv.abs() <= h)
}

fn circle_coverage(size: f64, x: f64, y: f64) -> Array2<f64> {
    coverage(size, x, y, |du, dv, h| du * du + dv * dv <= h * h)
}

fn composite(cov: &Array2<f64>, rgb: [f64; 3]) -> Raster {
    Array3::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE, 3), |(r, c, k)| {
        BACKGROUND * (1.0 - cov[[r, c]]) + rgb[k] * cov[[r, c]]
    })
}

pub fn render_scene(factors: &FactorVector) -> Result<Scene> {
    factors.validate()?;
    let cov = match factors.object {
        ObjectKind::Square => square_coverage(factors.size, factors.x, factors.y),
        ObjectKind::Circle => circle_coverage(factors.size, factors.x, factors.y),
    };
    let raster = composite(&cov, factors.color.rgb());
    let object_mask = cov.mapv(|v| v > 0.5);
    let background_mask = object_mask.mapv(|v| !v);
    Ok(Scene {
        factors: *factors,
        raster,
        object_mask,
        background_mask,
        prompt: factors.prompt(false),
    })
}

/// Renders continuous coordinates: color interpolates red -> green -> blue
/// and the object coordinate blends square and circle coverage.
pub fn render_coordinates(coords: &[f64]) -> Result<Raster> {
    if coords.len() != 5 || coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("expected five finite coordinates".into()));
    }
    let c = coords[0].clamp(0.0, 1.0);
    let rgb = if c <= 0.5 {
        let w = c / 0.5;
        [1.0 - w, w, 0.0]
    } else {
        let w = (c - 0.5) / 0.5;
        [0.0, 1.0 - w, w]
    };
    let o = coords[1].clamp(0.0, 1.0);
    let size = denormalize(coords[2], SIZE_RANGE);
    let x = denormalize(coords[3], POSITION_RANGE);
    let y = denormalize(coords[4], POSITION_RANGE);
    let cov = square_coverage(size, x, y) * (1.0 - o) + circle_coverage(size, x, y) * o;
    Ok(composite(&cov, rgb))
}

/// 16 tokens of 4 x 4 x 3 patches, mapped from [0, 1] to [-1, 1].
pub fn patchify(raster: &Raster) -> Result<Array2<f64>> {
    if raster.dim() != (IMAGE_SIDE, IMAGE_SIDE, 3) {
        return Err(Error::InvalidParameter(format!(
            "raster must be {IMAGE_SIDE}x{IMAGE_SIDE}x3"
        )));
    }
    let per_row = IMAGE_SIDE / PATCH_SIDE;
    let mut out = Array2::zeros((per_row * per_row, PATCH_FEATURES));
    for (tok, mut row) in out.rows_mut().into_iter().enumerate() {
        let (pr, pc) = (tok / per_row, tok % per_row);
        let mut f = 0;
        for i in 0..PATCH_SIDE {
            for j in 0..PATCH_SIDE {
                for k in 0..3 {
                    row[f] = 2.0 * raster[[pr * PATCH_SIDE + i, pc * PATCH_SIDE + j, k]] - 1.0;
                    f += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`], clamping to [0, 1].
pub fn unpatchify(tokens: &Array2<f64>) -> Result<Raster> {
    let per_row = IMAGE_SIDE / PATCH_SIDE;
    if tokens.dim() != (per_row * per_row, PATCH_FEATURES) {
        return Err(Error::ShapeMismatch {
            expected: (per_row * per_row, PATCH_FEATURES),
            got: tokens.dim(),
        });
    }
    let mut raster = Array3::zeros((IMAGE_SIDE, IMAGE_SIDE, 3));
    for (tok, row) in tokens.rows().into_iter().enumerate() {
        let (pr, pc) = (tok / per_row, tok % per_row);
        let mut f = 0;
        for i in 0..PATCH_SIDE {
            for j in 0..PATCH_SIDE {
                for k in 0..3 {
                    raster[[pr * PATCH_SIDE + i, pc * PATCH_SIDE + j, k]] =
                        ((row[f] + 1.0) / 2.0).clamp(0.0, 1.0);
                    f += 1;
                }
            }
        }
    }
    Ok(raster)
}

/// Scenes with color stratified by index and every other factor uniform.
pub fn sample_dataset(n: usize, rng: &mut Stream) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::InvalidParameter("dataset size must be positive".into()));
    }
    (0..n)
        .map(|i| {
            let object = if rng.random::<bool>() {
                ObjectKind::Circle
            } else {
                ObjectKind::Square
            };
            let f = FactorVector {
                color: Color::ALL[i % 3],
                object,
                size: rng.random_range(SIZE_RANGE.0..=SIZE_RANGE.1),
                x: rng.random_range(POSITION_RANGE.0..=POSITION_RANGE.1),
                y: rng.random_range(POSITION_RANGE.0..=POSITION_RANGE.1),
            };
            render_scene(&f)
        })
        .collect()
}

/// Scenes whose size and position sit on the tenth-level grid of the
/// scene vocabulary, so a full prompt describes them exactly. Colors cycle
/// through `colors`.
pub fn sample_grid_scenes(n: usize, colors: &[Color], rng: &mut Stream) -> Result<Vec<Scene>> {
    if n == 0 || colors.is_empty() {
        return Err(Error::InvalidParameter("need a positive count and a color".into()));
    }
    (0..n)
        .map(|i| {
            let mut c = [0.0; 5];
            c[0] = colors[i % colors.len()].coordinate();
            c[1] = if rng.random::<bool>() { 1.0 } else { 0.0 };
            for v in &mut c[2..] {
                *v = rng.random_range(0..=10) as f64 / 10.0;
            }
            render_scene(&FactorVector::from_coordinates(&c)?)
        })
        .collect()
}

/// Reads factor coordinates back out of a raster: dominant channel for
/// color, fill ratio of the bounding box for the object, area for size,
/// and the centroid for position. Returns the five coordinates.
pub fn estimate_coordinates(raster: &Raster) -> [f64; 5] {
    let mut weight = 0.0;
    let (mut sr, mut sc) = (0.0, 0.0);
    let mut rgb = [0.0; 3];
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let dev: f64 = (0..3).map(|k| (raster[[r, c, k]] - BACKGROUND).abs()).sum();
            // a fully covered pixel deviates by 1.5 from the background
            let w = (dev / 1.5).clamp(0.0, 1.0);
            if w <= 0.0 {
                continue;
            }
            weight += w;
            sr += w * (r as f64 + 0.5);
            sc += w * (c as f64 + 0.5);
            for k in 0..3 {
                rgb[k] += w * raster[[r, c, k]];
            }
            if w > 0.5 {
                rmin = rmin.min(r as f64);
                rmax = rmax.max(r as f64 + 1.0);
                cmin = cmin.min(c as f64);
                cmax = cmax.max(c as f64 + 1.0);
            }
        }
    }
    if weight <= 0.0 {
        return [0.5; 5];
    }
    let n = IMAGE_SIDE as f64;
    let color = {
        let m: Vec<f64> = rgb.iter().map(|v| v / weight).collect();
        let best = (0..3).max_by(|a, b| m[*a].total_cmp(&m[*b])).unwrap_or(0);
        best as f64 / 2.0
    };
    let area = weight / (n * n);
    let bbox = if rmax > rmin && cmax > cmin {
        (rmax - rmin) * (cmax - cmin) / (n * n)
    } else {
        area
    };
    let fill = (area / bbox).clamp(0.0, 1.0);
    // square fill is 1, circle fill is pi / 4
    let object = ((1.0 - fill) / (1.0 - std::f64::consts::FRAC_PI_4)).clamp(0.0, 1.0);
    let side = if object >= 0.5 {
        (area * 4.0 / std::f64::consts::PI).sqrt()
    } else {
        area.sqrt()
    };
    [
        color,
        object,
        normalize(side, SIZE_RANGE),
        normalize(sc / weight / n, POSITION_RANGE),
        normalize(sr / weight / n, POSITION_RANGE),
    ]
}

pub fn write_ppm(path: &Path, raster: &Raster) -> Result<()> {
    let (h, w, _) = raster.dim();
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for v in raster.iter() {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn write_pgm(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(mask.iter().map(|m| if *m { 255u8 } else { 0 }));
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Parses an 8-bit binary PPM back into a raster.
pub fn read_ppm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field `{s}`")));
    if fields[0] != "P6" || parse(&fields[3])? != 255 {
        return Err(Error::Format("only 8-bit P6 is supported".into()));
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| Error::Format("truncated PPM data".into()))?;
    Ok(Array3::from_shape_fn((h, w, 3), |(r, c, k)| {
        data[(r * w + c) * 3 + k] as f64 / 255.0
    }))
}

pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes rasters, masks and a factor manifest under
/// `root/dataset-<hash>`, where the hash covers `config`.
pub fn export_dataset<T: Serialize>(scenes: &[Scene], config: &T, root: &Path) -> Result<PathBuf> {
    let hash = config_hash(config)?;
    let dir = root.join(format!("dataset-{}", &hash[..16]));
    fs::create_dir_all(&dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let stem = format!("scene-{i:04}");
        write_ppm(&dir.join(format!("{stem}.ppm")), &s.raster)?;
        write_pgm(&dir.join(format!("{stem}-object.pgm")), &s.object_mask)?;
        write_pgm(&dir.join(format!("{stem}-background.pgm")), &s.background_mask)?;
        entries.push(serde_json::json!({ "id": stem, "factors": s.factors, "prompt": s.prompt }));
    }
    let manifest = serde_json::json!({ "config_hash": hash, "scenes": entries });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(dir)
}
