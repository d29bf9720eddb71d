//! Run directories, checksummed artifacts, the manifest and SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scene::{write_ppm, Raster};

pub const MANIFEST_VERSION: u32 = 1;

/// Writes every artifact of one run under a single directory and keeps
/// track of what it wrote.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    fn target(&mut self, name: &str) -> Result<PathBuf> {
        let rel = Path::new(name);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(Error::InvalidParameter(format!("artifact `{name}` escapes the run directory")));
        }
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(path)
    }

    /// Adds a file something else already wrote under the directory.
    pub fn register(&mut self, name: &str) -> Result<()> {
        let path = self.target(name)?;
        if !path.is_file() {
            return Err(Error::InvalidParameter(format!("artifact `{name}` does not exist")));
        }
        Ok(())
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let path = self.target(name)?;
        fs::write(path, data)?;
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        self.bytes(name, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
    }

    /// Records as a CSV with LF endings, fed through `fill`.
    pub fn csv<F>(&mut self, name: &str, fill: F) -> Result<()>
    where
        F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>,
    {
        let mut buf = Vec::new();
        {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut buf);
            fill(&mut w)?;
            w.flush()?;
        }
        self.bytes(name, &buf)
    }

    pub fn ppm(&mut self, name: &str, raster: &Raster) -> Result<()> {
        let path = self.target(name)?;
        write_ppm(&path, raster)
    }

    pub fn svg(&mut self, name: &str, chart: &str) -> Result<()> {
        self.bytes(name, chart.as_bytes())
    }

    /// Artifact names with their SHA-256, sorted by name.
    pub fn checksums(&self) -> Result<Vec<ArtifactEntry>> {
        let mut names = self.written.clone();
        names.sort();
        names
            .into_iter()
            .map(|name| {
                let data = fs::read(self.root.join(&name))?;
                Ok(ArtifactEntry {
                    sha256: hex::encode(Sha256::digest(&data)),
                    bytes: data.len() as u64,
                    name,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub manifest_version: u32,
    pub crate_version: String,
    pub jobs: usize,
    pub wall_clock_seconds: f64,
    pub status: String,
    pub outputs: Vec<ArtifactEntry>,
}

/// Writes through a temporary file and a rename so readers never see a
/// half-written manifest.
pub fn write_manifest_atomic(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let tmp = dir.join(".manifest.json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(manifest)? + "\n")?;
    fs::rename(&tmp, dir.join("manifest.json"))?;
    Ok(())
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" width=\"{WIDTH}\" height=\"{HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(out, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>", WIDTH / 2.0, escape(title));
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn axes(out: &mut String, x_label: &str, y_label: &str, y: (f64, f64)) {
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN / 2.0, HEIGHT - MARGIN, MARGIN / 1.5);
    let _ = writeln!(out, "<path d=\"M{x0} {y1} L{x0} {y0} L{x1} {y0}\" fill=\"none\" stroke=\"black\"/>");
    for k in 0..=4 {
        let v = y.0 + (y.1 - y.0) * k as f64 / 4.0;
        let py = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", x0 - 4.0, py + 4.0, fmt_tick(v));
    }
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", (x0 + x1) / 2.0, HEIGHT - 14.0, escape(x_label));
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Polyline chart, one line per `(name, points)` series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let xr = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let yr = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    axes(&mut out, x_label, y_label, yr);
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN / 2.0, HEIGHT - MARGIN, MARGIN / 1.5);
    for k in 0..=4 {
        let v = xr.0 + (xr.1 - xr.0) * k as f64 / 4.0;
        let px = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(out, "<text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", y0 + 14.0, fmt_tick(v));
    }
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| {
                let px = x0 + (x - xr.0) / (xr.1 - xr.0) * (x1 - x0);
                let py = y0 - (y - yr.0) / (yr.1 - yr.0) * (y0 - y1);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(out, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>", coords.join(" "));
        let ly = y1 + 14.0 * i as f64;
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{ly:.2}\" text-anchor=\"end\" fill=\"{color}\">{}</text>", x1, escape(name));
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: one group per label, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, labels: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let yr = range(series.iter().flat_map(|(_, v)| v.iter().copied()).chain([0.0]));
    axes(&mut out, "", y_label, yr);
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN / 2.0, HEIGHT - MARGIN, MARGIN / 1.5);
    let groups = labels.len().max(1) as f64;
    let group_w = (x1 - x0) / groups;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let to_y = |v: f64| y0 - (v - yr.0) / (yr.1 - yr.0) * (y0 - y1);
    let base = to_y(0.0f64.clamp(yr.0, yr.1));
    for (g, label) in labels.iter().enumerate() {
        let gx = x0 + group_w * g as f64;
        for (s, (_, values)) in series.iter().enumerate() {
            let Some(v) = values.get(g).copied().filter(|v| v.is_finite()) else {
                continue;
            };
            let top = to_y(v);
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bar_w:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                gx + group_w * 0.1 + bar_w * s as f64,
                top.min(base),
                (base - top).abs(),
                PALETTE[s % PALETTE.len()]
            );
        }
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", gx + group_w / 2.0, y0 + 14.0, escape(label));
    }
    for (s, (name, _)) in series.iter().enumerate() {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" fill=\"{}\">{}</text>",
            x1,
            y1 + 14.0 * s as f64,
            PALETTE[s % PALETTE.len()],
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
