//! File formats: ASCII XYZ clouds, OFF meshes, PGM/PNG silhouettes, binary
//! upsampler weights and CSV traces.

use std::fs;
use std::path::Path;

use crate::cloud::{Point, PointCloud};
use crate::error::{invalid_arg, Error, Result};
use crate::metrics::ReferenceMesh;
use crate::neu::{Matrix, NeuDims, NeuParams, TENSOR_COUNT};
use crate::optim::OptimTrace;
use crate::render::SilhouetteImage;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_float(token: &str, line: usize) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| parse_error(line, format!("not a number: {token:?}")))?;
    if !v.is_finite() {
        return Err(parse_error(line, format!("non-finite coordinate {token:?}")));
    }
    Ok(v)
}

/// Parses `x y z` lines. Blank lines and lines starting with `#` are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(parse_error(i + 1, format!("expected 3 coordinates, found {}", tokens.len())));
        }
        let [x, y, z] = [0, 1, 2].map(|k| parse_float(tokens[k], i + 1));
        points.push(Point::new(x?, y?, z?));
    }
    if points.is_empty() {
        return Err(Error::InvalidInput("no points in XYZ data".into()));
    }
    PointCloud::new(points)
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    parse_xyz(&read_text(path)?).map_err(|e| match e {
        Error::InvalidInput(m) => Error::InvalidInput(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// One point per line, nine digits after the decimal point.
pub fn format_xyz(cloud: &PointCloud) -> Result<String> {
    if cloud.is_empty() {
        return Err(invalid_arg!("refusing to write an empty cloud"));
    }
    let mut out = String::with_capacity(cloud.len() * 40);
    for p in cloud.points() {
        out.push_str(&format!("{:.9} {:.9} {:.9}\n", p.x, p.y, p.z));
    }
    Ok(out)
}

pub fn write_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), format_xyz(cloud)?.as_bytes())
}

/// Parses an ASCII OFF mesh with triangle faces only.
pub fn parse_off(text: &str) -> Result<ReferenceMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (header_line, header) = lines.next().ok_or_else(|| parse_error(1, "missing OFF header"))?;
    let mut header_tokens = header.split_whitespace();
    if header_tokens.next() != Some("OFF") {
        return Err(parse_error(header_line, "missing OFF header"));
    }
    let rest: Vec<&str> = header_tokens.collect();
    let (count_line, counts) = if rest.is_empty() {
        let (n, l) = lines.next().ok_or_else(|| parse_error(header_line + 1, "missing counts line"))?;
        (n, l.split_whitespace().collect::<Vec<_>>())
    } else {
        (header_line, rest)
    };
    if counts.len() < 2 {
        return Err(parse_error(count_line, "expected vertex and face counts"));
    }
    let count = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_error(count_line, format!("invalid count {s:?}")))
    };
    let (nv, nf) = (count(counts[0])?, count(counts[1])?);

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (n, l) = lines.next().ok_or_else(|| parse_error(count_line, "fewer vertices than declared"))?;
        let t: Vec<&str> = l.split_whitespace().collect();
        if t.len() < 3 {
            return Err(parse_error(n, format!("vertex needs 3 coordinates, found {}", t.len())));
        }
        vertices.push(Point::new(parse_float(t[0], n)?, parse_float(t[1], n)?, parse_float(t[2], n)?));
    }

    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (n, l) = lines.next().ok_or_else(|| parse_error(count_line, "fewer faces than declared"))?;
        let t: Vec<&str> = l.split_whitespace().collect();
        let arity: usize = t
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_error(n, "face must start with its vertex count"))?;
        if arity != 3 {
            return Err(Error::UnsupportedFace { line: n, arity });
        }
        if t.len() < 4 {
            return Err(parse_error(n, "triangle needs 3 indices"));
        }
        let mut tri = [0usize; 3];
        for k in 0..3 {
            let idx: usize = t[k + 1]
                .parse()
                .map_err(|_| parse_error(n, format!("invalid index {:?}", t[k + 1])))?;
            if idx >= nv {
                return Err(parse_error(n, format!("index {idx} out of range for {nv} vertices")));
            }
            tri[k] = idx;
        }
        if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
            return Err(parse_error(n, format!("triangle repeats a vertex: {tri:?}")));
        }
        triangles.push(tri);
    }
    ReferenceMesh::new(vertices, triangles)
}

pub fn read_off(path: impl AsRef<Path>) -> Result<ReferenceMesh> {
    parse_off(&read_text(path.as_ref())?)
}

pub fn format_off(mesh: &ReferenceMesh) -> String {
    let mut out = format!("OFF\n{} {} 0\n", mesh.vertices().len(), mesh.triangles().len());
    for v in mesh.vertices() {
        out.push_str(&format!("{:.9} {:.9} {:.9}\n", v.x, v.y, v.z));
    }
    for [a, b, c] in mesh.triangles() {
        out.push_str(&format!("3 {a} {b} {c}\n"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PgmFormat {
    /// ASCII `P2`
    Ascii,
    /// Binary `P5`
    #[default]
    Binary,
}

fn to_gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PGM with intensity `round(255·clamp(v, 0, 1))`.
pub fn encode_pgm(image: &SilhouetteImage, format: PgmFormat) -> Vec<u8> {
    let magic = match format {
        PgmFormat::Ascii => "P2",
        PgmFormat::Binary => "P5",
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    match format {
        PgmFormat::Binary => out.extend(image.pixels.iter().map(|&v| to_gray(v))),
        PgmFormat::Ascii => {
            for row in image.pixels.chunks(image.width.max(1)) {
                let line: Vec<String> = row.iter().map(|&v| to_gray(v).to_string()).collect();
                out.extend(line.join(" ").into_bytes());
                out.push(b'\n');
            }
        }
    }
    out
}

pub fn write_pgm(image: &SilhouetteImage, path: impl AsRef<Path>, format: PgmFormat) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(image, format))
}

pub fn write_png(image: &SilhouetteImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pixels = image.pixels.iter().map(|&v| to_gray(v)).collect();
    let buf = image::GrayImage::from_raw(image.width as u32, image.height as u32, pixels)
        .ok_or_else(|| invalid_arg!("pixel buffer does not match {}x{}", image.width, image.height))?;
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other}", path.display())),
    })
}

const NEUP_MAGIC: &[u8; 4] = b"NEUP";
const NEUP_VERSION: u32 = 1;

/// `NEUP`, version, tensor count, then each tensor as rows, cols and
/// row-major little-endian `f64` values.
pub fn neup_to_bytes(params: &NeuParams) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::with_capacity(12 + params.parameter_count() * 8 + tensors.len() * 8);
    out.extend_from_slice(NEUP_MAGIC);
    out.extend_from_slice(&NEUP_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for r in 0..t.nrows() {
            for v in t.row(r).iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::InvalidInput(format!("parameter file truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn neup_from_bytes(bytes: &[u8]) -> Result<NeuParams> {
    let bad = |m: String| Error::InvalidInput(m);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != NEUP_MAGIC {
        return Err(bad("not a NEUP parameter file".into()));
    }
    let version = r.u32()?;
    if version != NEUP_VERSION {
        return Err(bad(format!("unsupported NEUP version {version}")));
    }
    let count = r.u32()? as usize;
    if count != TENSOR_COUNT {
        return Err(bad(format!("expected {TENSOR_COUNT} tensors, found {count}")));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let len = rows
            .checked_mul(cols)
            .filter(|&l| l <= bytes.len() / 8)
            .ok_or_else(|| bad(format!("implausible tensor shape {rows}x{cols}")))?;
        let values = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Matrix::from_row_slice(rows, cols, &values));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    // lift_out weight fixes c, compress weight fixes r·c
    let c = tensors[2].ncols();
    if c == 0 || tensors[13].nrows() % c != 0 {
        return Err(bad("inconsistent tensor shapes".into()));
    }
    let mut params = NeuParams::zeros(NeuDims {
        feature_width: c,
        rate: tensors[13].nrows() / c,
    });
    for (slot, t) in params.tensors_mut().into_iter().zip(tensors) {
        if slot.shape() != t.shape() {
            return Err(bad(format!("tensor shape {:?} where {:?} was expected", t.shape(), slot.shape())));
        }
        *slot = t;
    }
    params.validate()?;
    Ok(params)
}

pub fn write_neup(params: &NeuParams, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &neup_to_bytes(params))
}

pub fn read_neup(path: impl AsRef<Path>) -> Result<NeuParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    neup_from_bytes(&bytes)
}

pub fn write_trace_csv(trace: &OptimTrace, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), trace.to_csv().as_bytes())
}
