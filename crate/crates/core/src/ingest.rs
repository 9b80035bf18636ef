//! Plain-text data formats: correspondence CSV files and PGM grids for
//! depth, intensity and label images, plus ground-truth plane labels built
//! from instance masks.
//!
//! Correspondences: a header line `# width height`, then one
//! `u1x,u1y,u2x,u2y,label` row per match (label `-1` = outlier). Further
//! lines starting with `#` and blank lines are ignored.
//!
//! Grids: PGM, ASCII (`P2`) or binary (`P5`, big-endian when the maximum
//! value exceeds 255). Depth grids carry a `# scale <meters-per-unit>`
//! comment; label grids may carry `# offset <k>` meaning stored = label + k,
//! so `-1` can be written.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{fit_plane, plane_cost, Correspondence, InverseDepthPlane, Vec2};
use crate::solver::Label;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("missing header: {0}")]
    MissingHeader(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("frame has no instance labels")]
    NoLabels,
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("{}: {inner}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        inner: Box<IngestError>,
    },
}

impl IngestError {
    fn parse(line: usize, message: impl Into<String>) -> Self {
        Self::ParseError {
            line,
            message: message.into(),
        }
    }

    fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (Self::Io { .. } | Self::InFile { .. }) => e,
            e => Self::InFile {
                path: path.to_path_buf(),
                inner: Box::new(e),
            },
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, IngestError> {
    File::open(path).map(BufReader::new).map_err(|e| IngestError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, IngestError> {
    File::create(path).map(BufWriter::new).map_err(|e| IngestError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceData {
    pub width: usize,
    pub height: usize,
    pub correspondences: Vec<Correspondence>,
    /// Ground-truth label per row.
    pub labels: Vec<Label>,
}

pub fn read_correspondences(reader: impl BufRead) -> Result<CorrespondenceData, IngestError> {
    let mut header: Option<(usize, usize)> = None;
    let mut correspondences = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| IngestError::parse(lineno, e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if header.is_none() {
            let dims = line
                .strip_prefix('#')
                .map(|rest| rest.split_whitespace().map(str::parse::<usize>).collect::<Vec<_>>());
            match dims.as_deref() {
                Some([Ok(w), Ok(h)]) => {
                    header = Some((*w, *h));
                    continue;
                }
                _ => return Err(IngestError::MissingHeader("expected `# width height` as the first line".into())),
            }
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(IngestError::parse(lineno, format!("expected 5 fields, found {}", fields.len())));
        }
        let mut coords = [0.0; 4];
        for (k, f) in fields[..4].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| IngestError::parse(lineno, format!("not a number: {f:?}")))?;
            if !v.is_finite() {
                return Err(IngestError::parse(lineno, format!("non-finite coordinate {f:?}")));
            }
            coords[k] = v;
        }
        let label: i32 = fields[4]
            .parse()
            .map_err(|_| IngestError::parse(lineno, format!("not an integer label: {:?}", fields[4])))?;
        let label = Label::from_raw(label)
            .ok_or_else(|| IngestError::parse(lineno, format!("label {label} below -1")))?;
        let id = correspondences.len();
        correspondences.push(Correspondence::new(
            Vec2::new(coords[0], coords[1]),
            Vec2::new(coords[2], coords[3]),
            id,
        ));
        labels.push(label);
    }
    let (width, height) = header.ok_or_else(|| IngestError::MissingHeader("empty file".into()))?;
    Ok(CorrespondenceData {
        width,
        height,
        correspondences,
        labels,
    })
}

pub fn load_correspondences(path: impl AsRef<Path>) -> Result<CorrespondenceData, IngestError> {
    let path = path.as_ref();
    read_correspondences(open(path)?).map_err(|e| e.in_file(path))
}

/// Writes the CSV format. Coordinates use the shortest representation that
/// parses back to the same `f64`.
pub fn write_correspondences(mut w: impl Write, data: &CorrespondenceData) -> std::io::Result<()> {
    if data.labels.len() != data.correspondences.len() {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "one label per correspondence"));
    }
    writeln!(w, "# {} {}", data.width, data.height)?;
    for (c, l) in data.correspondences.iter().zip(&data.labels) {
        writeln!(w, "{},{},{},{},{}", c.u1.x, c.u1.y, c.u2.x, c.u2.y, l.raw())?;
    }
    Ok(())
}

pub fn save_correspondences(path: impl AsRef<Path>, data: &CorrespondenceData) -> Result<(), IngestError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_correspondences(&mut w, data).map_err(|e| IngestError::io(path, e))?;
    w.flush().map_err(|e| IngestError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmEncoding {
    Ascii,
    Binary,
}

/// Raw PGM contents with the comment fields this crate understands.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub values: Vec<u16>,
    /// `# scale` comment.
    pub scale: Option<f64>,
    /// `# offset` comment.
    pub offset: Option<i64>,
}

/// Header tokenizer that tracks line numbers and collects comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
    comments: Vec<(usize, String)>,
}

impl<'a> Header<'a> {
    fn token(&mut self) -> Result<(usize, &'a str), IngestError> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                if self.bytes[self.pos] == b'\n' {
                    self.line += 1;
                }
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                let start = self.pos;
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                let text = String::from_utf8_lossy(&self.bytes[start + 1..self.pos]).trim().to_string();
                self.comments.push((self.line, text));
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return Err(IngestError::parse(self.line, "unexpected end of file"));
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let tok = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| IngestError::parse(self.line, "non-ASCII header"))?;
        Ok((self.line, tok))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, IngestError> {
        let (line, tok) = self.token()?;
        tok.parse()
            .map_err(|_| IngestError::parse(line, format!("invalid {what}: {tok:?}")))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Grid, IngestError> {
    let mut h = Header {
        bytes,
        pos: 0,
        line: 1,
        comments: Vec::new(),
    };
    let (_, magic) = h.token()?;
    let binary = match magic {
        "P2" => false,
        "P5" => true,
        other => return Err(IngestError::parse(1, format!("expected P2 or P5, found {other:?}"))),
    };
    let width: usize = h.number("width")?;
    let height: usize = h.number("height")?;
    let maxval: u32 = h.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(IngestError::parse(h.line, format!("maxval {maxval} outside 1..=65535")));
    }
    let count = width
        .checked_mul(height)
        .ok_or_else(|| IngestError::parse(h.line, "image too large"))?;
    let mut values = Vec::with_capacity(count);
    if binary {
        // Exactly one whitespace byte separates the header from the data.
        let start = h.pos + 1;
        let bpp = if maxval > 255 { 2 } else { 1 };
        let data = bytes.get(start..).unwrap_or(&[]);
        if data.len() != count * bpp {
            return Err(IngestError::parse(
                h.line,
                format!("expected {} data bytes, found {}", count * bpp, data.len()),
            ));
        }
        for k in 0..count {
            let v = if bpp == 2 {
                u16::from_be_bytes([data[2 * k], data[2 * k + 1]])
            } else {
                data[k] as u16
            };
            values.push(v);
        }
    } else {
        for _ in 0..count {
            let (line, tok) = h.token()?;
            let v: u32 = tok
                .parse()
                .map_err(|_| IngestError::parse(line, format!("invalid sample {tok:?}")))?;
            values.push(v as u16);
            if v > maxval {
                return Err(IngestError::parse(line, format!("sample {v} exceeds maxval {maxval}")));
            }
        }
        if let Ok((line, tok)) = h.token() {
            return Err(IngestError::parse(line, format!("trailing data {tok:?}")));
        }
    }
    if binary && values.iter().any(|&v| v as u32 > maxval) {
        return Err(IngestError::parse(h.line, format!("sample exceeds maxval {maxval}")));
    }

    let mut scale = None;
    let mut offset = None;
    for (line, text) in &h.comments {
        let mut parts = text.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("scale"), Some(v)) => {
                scale = Some(
                    v.parse::<f64>()
                        .map_err(|_| IngestError::parse(*line, format!("invalid scale {v:?}")))?,
                )
            }
            (Some("offset"), Some(v)) => {
                offset = Some(
                    v.parse::<i64>()
                        .map_err(|_| IngestError::parse(*line, format!("invalid offset {v:?}")))?,
                )
            }
            _ => {}
        }
    }
    Ok(Grid {
        width,
        height,
        maxval: maxval as u16,
        values,
        scale,
        offset,
    })
}

pub fn write_pgm(mut w: impl Write, grid: &Grid, encoding: PgmEncoding) -> std::io::Result<()> {
    if grid.values.len() != grid.width * grid.height || grid.maxval == 0 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "grid shape"));
    }
    let magic = match encoding {
        PgmEncoding::Ascii => "P2",
        PgmEncoding::Binary => "P5",
    };
    writeln!(w, "{magic}")?;
    if let Some(s) = grid.scale {
        writeln!(w, "# scale {s}")?;
    }
    if let Some(o) = grid.offset {
        writeln!(w, "# offset {o}")?;
    }
    writeln!(w, "{} {}", grid.width, grid.height)?;
    writeln!(w, "{}", grid.maxval)?;
    match encoding {
        PgmEncoding::Ascii => {
            for row in grid.values.chunks(grid.width.max(1)) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        PgmEncoding::Binary => {
            let mut buf = Vec::with_capacity(grid.values.len() * 2);
            for &v in &grid.values {
                if grid.maxval > 255 {
                    buf.extend_from_slice(&v.to_be_bytes());
                } else {
                    buf.push(v as u8);
                }
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Grid, IngestError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| IngestError::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| e.in_file(path))
}

pub fn save_grid(path: impl AsRef<Path>, grid: &Grid, encoding: PgmEncoding) -> Result<(), IngestError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_pgm(&mut w, grid, encoding).map_err(|e| IngestError::io(path, e))?;
    w.flush().map_err(|e| IngestError::io(path, e))
}

/// Depth grid in meters per unit `scale`. Zero marks missing depth.
pub fn depth_grid(width: usize, height: usize, depth_m: &[f64], scale: f64) -> Result<Grid, IngestError> {
    if depth_m.len() != width * height {
        return Err(IngestError::DimensionMismatch(format!(
            "{} depth values for {width}x{height}",
            depth_m.len()
        )));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(IngestError::Invalid(format!("depth scale {scale}")));
    }
    let values = depth_m
        .iter()
        .map(|&d| {
            if d.is_finite() && d > 0.0 {
                (d / scale).round().clamp(0.0, 65535.0) as u16
            } else {
                0
            }
        })
        .collect();
    Ok(Grid {
        width,
        height,
        maxval: 65535,
        values,
        scale: Some(scale),
        offset: None,
    })
}

/// Inverse depth (1/m) per pixel; zero marks an invalid pixel.
pub fn inverse_depth(grid: &Grid) -> Result<Vec<f64>, IngestError> {
    let scale = grid
        .scale
        .ok_or_else(|| IngestError::MissingHeader("depth grid needs a `# scale` comment".into()))?;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(IngestError::Invalid(format!("depth scale {scale}")));
    }
    Ok(grid
        .values
        .iter()
        .map(|&v| if v == 0 { 0.0 } else { 1.0 / (v as f64 * scale) })
        .collect())
}

/// Intensity normalized to [0, 1] by the grid's maximum value.
pub fn intensity(grid: &Grid) -> Vec<f64> {
    grid.values.iter().map(|&v| v as f64 / grid.maxval as f64).collect()
}

pub fn intensity_grid(width: usize, height: usize, values: &[f64]) -> Result<Grid, IngestError> {
    if values.len() != width * height {
        return Err(IngestError::DimensionMismatch(format!(
            "{} intensity values for {width}x{height}",
            values.len()
        )));
    }
    Ok(Grid {
        width,
        height,
        maxval: 255,
        values: values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
            .collect(),
        scale: None,
        offset: None,
    })
}

/// Label grid storing `label + 1`, so the outlier label `-1` is 0.
pub fn label_grid(width: usize, height: usize, labels: &[i32]) -> Result<Grid, IngestError> {
    if labels.len() != width * height {
        return Err(IngestError::DimensionMismatch(format!(
            "{} labels for {width}x{height}",
            labels.len()
        )));
    }
    let offset = 1i64;
    let mut values = Vec::with_capacity(labels.len());
    for &l in labels {
        let v = l as i64 + offset;
        if !(0..=65535).contains(&v) {
            return Err(IngestError::Invalid(format!("label {l} cannot be stored")));
        }
        values.push(v as u16);
    }
    let maxval = values.iter().copied().max().unwrap_or(0).max(1);
    Ok(Grid {
        width,
        height,
        maxval: if maxval > 255 { 65535 } else { 255 },
        values,
        scale: None,
        offset: Some(offset),
    })
}

/// Integer labels of a label grid, undoing its offset (default 0).
pub fn grid_labels(grid: &Grid) -> Vec<i32> {
    let offset = grid.offset.unwrap_or(0);
    grid.values.iter().map(|&v| (v as i64 - offset) as i32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub width: usize,
    pub height: usize,
    /// 1/m; zero marks invalid depth.
    pub inv_depth: Vec<f64>,
    /// [0, 1].
    pub intensity: Vec<f64>,
    /// Object instance per pixel, negative for unlabeled.
    pub instances: Option<Vec<i32>>,
}

pub fn load_rgbd(
    depth: impl AsRef<Path>,
    image: impl AsRef<Path>,
    labels: Option<&Path>,
) -> Result<RgbdFrame, IngestError> {
    let depth = depth.as_ref();
    let d = load_grid(depth)?;
    let i = load_grid(image)?;
    let same = |g: &Grid| g.width == d.width && g.height == d.height;
    if !same(&i) {
        return Err(IngestError::DimensionMismatch(format!(
            "depth is {}x{}, intensity is {}x{}",
            d.width, d.height, i.width, i.height
        )));
    }
    let instances = match labels {
        Some(p) => {
            let l = load_grid(p)?;
            if !same(&l) {
                return Err(IngestError::DimensionMismatch(format!(
                    "depth is {}x{}, labels are {}x{}",
                    d.width, d.height, l.width, l.height
                )));
            }
            Some(grid_labels(&l))
        }
        None => None,
    };
    Ok(RgbdFrame {
        width: d.width,
        height: d.height,
        inv_depth: inverse_depth(&d).map_err(|e| e.in_file(depth))?,
        intensity: intensity(&i),
        instances,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthConfig {
    pub min_inliers: usize,
    /// Parameter distance below which planes share a label.
    pub merge_tol: f64,
    pub sigma_xi: f64,
    /// Inlier threshold on the squared normalized residual.
    pub threshold: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            min_inliers: 500,
            merge_tol: 0.05,
            sigma_xi: 0.005,
            threshold: 9.0,
            iterations: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Plane index per pixel, or outlier.
    pub labels: Vec<Label>,
    pub planes: Vec<InverseDepthPlane>,
}

/// Consensus plane for `pixels`: the best minimal-sample hypothesis, refit on
/// its inliers. Returns the plane and its inliers.
fn consensus_plane(
    frame: &RgbdFrame,
    pixels: &[usize],
    cfg: &GroundTruthConfig,
    rng: &mut ChaCha8Rng,
) -> Option<(InverseDepthPlane, Vec<usize>)> {
    if pixels.len() < 3 {
        return None;
    }
    let sample = |k: usize| (Vec2::new((k % frame.width) as f64, (k / frame.width) as f64), frame.inv_depth[k]);
    let inliers_of = |plane: &InverseDepthPlane| -> Vec<usize> {
        pixels
            .iter()
            .copied()
            .filter(|&k| {
                let (u, xi) = sample(k);
                plane_cost(&u, xi, plane, cfg.sigma_xi).is_ok_and(|c| c < cfg.threshold)
            })
            .collect()
    };
    let mut best: Option<(InverseDepthPlane, Vec<usize>)> = None;
    for _ in 0..cfg.iterations {
        let mut idx = [0usize; 3];
        for s in 0..3 {
            idx[s] = pixels[rng.random_range(0..pixels.len())];
        }
        let Ok(plane) = fit_plane(&idx.map(sample), None) else { continue };
        let inl = inliers_of(&plane);
        if best.as_ref().is_none_or(|b| inl.len() > b.1.len()) {
            best = Some((plane, inl));
        }
    }
    let (plane, inl) = best?;
    let refit = fit_plane(&inl.iter().map(|&k| sample(k)).collect::<Vec<_>>(), None).ok();
    match refit {
        Some(p) => {
            let again = inliers_of(&p);
            if again.len() >= inl.len() {
                Some((p, again))
            } else {
                Some((plane, inl))
            }
        }
        None => Some((plane, inl)),
    }
}

/// Ground-truth plane labels from instance masks: a consensus plane per
/// instance, instances with fewer than `min_inliers` inliers dropped to
/// outliers, and planes closer than `merge_tol` merged into one label.
pub fn build_nyu_ground_truth(frame: &RgbdFrame, cfg: &GroundTruthConfig) -> Result<GroundTruth, IngestError> {
    let instances = frame.instances.as_ref().ok_or(IngestError::NoLabels)?;
    let n = frame.width * frame.height;
    if instances.len() != n || frame.inv_depth.len() != n {
        return Err(IngestError::DimensionMismatch("frame fields differ in size".into()));
    }
    let mut ids: Vec<i32> = instances.iter().copied().filter(|&l| l >= 0).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(IngestError::NoLabels);
    }
    let diag = ((frame.width * frame.width + frame.height * frame.height) as f64).sqrt();

    let mut fitted: Vec<(InverseDepthPlane, Vec<usize>)> = Vec::new();
    for &id in &ids {
        let pixels: Vec<usize> = (0..n)
            .filter(|&k| instances[k] == id && frame.inv_depth[k] > 0.0 && frame.inv_depth[k].is_finite())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(id as u64);
        if let Some((plane, inl)) = consensus_plane(frame, &pixels, cfg, &mut rng) {
            if inl.len() >= cfg.min_inliers {
                fitted.push((plane, inl));
            }
        }
    }

    // Union-find over planes within tolerance.
    let mut parent: Vec<usize> = (0..fitted.len()).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for a in 0..fitted.len() {
        for b in a + 1..fitted.len() {
            if fitted[a].0.distance(&fitted[b].0, diag) <= cfg.merge_tol {
                let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }

    let mut labels = vec![Label::OUTLIER; n];
    let mut planes = Vec::new();
    for r in 0..fitted.len() {
        if root(&mut parent, r) != r {
            continue;
        }
        let mut members: Vec<usize> = Vec::new();
        for k in 0..fitted.len() {
            if root(&mut parent, k) == r {
                members.extend(&fitted[k].1);
            }
        }
        members.sort_unstable();
        let samples: Vec<(Vec2, f64)> = members
            .iter()
            .map(|&k| (Vec2::new((k % frame.width) as f64, (k / frame.width) as f64), frame.inv_depth[k]))
            .collect();
        let plane = fit_plane(&samples, None).unwrap_or(fitted[r].0);
        let label = Label::model(planes.len());
        for (&k, (u, xi)) in members.iter().zip(&samples) {
            if plane_cost(u, *xi, &plane, cfg.sigma_xi).is_ok_and(|c| c < cfg.threshold) {
                labels[k] = label;
            }
        }
        planes.push(plane);
    }
    Ok(GroundTruth { labels, planes })
}
