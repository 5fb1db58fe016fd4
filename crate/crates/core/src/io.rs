//! File formats: PGM images, the `GEOF1` raw field format and CSV datasets.
//!
//! `GEOF1` is one ASCII header line `GEOF1 <dim> <shape...> <spacing...>`
//! followed by little-endian `f32` values in row-major order, one block per
//! component (a scalar field has one block, a vector field `dim` blocks).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::fields::{DeformationMap, Grid, ScalarField, VectorField};
use crate::netgeo::LabeledDataset;
use crate::{GeoError, Real, Result};

fn parse_err(msg: impl Into<String>) -> GeoError {
    GeoError::Parse(msg.into())
}

/// Reads a P2 or P5 PGM into a field on an isotropic grid with spacing
/// `1/max(width, height)`, intensities scaled to `[0, 1]`. Rows of the image
/// run along axis 0.
pub fn read_pgm<T: Real, R: Read>(reader: R) -> Result<ScalarField<T>> {
    let mut bytes = Vec::new();
    BufReader::new(reader).read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err("unexpected end of PGM data"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| s.parse::<usize>().map_err(|_| parse_err(format!("bad PGM number {s:?}")));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(parse_err(format!("PGM maxval {maxval} out of range")));
    }
    let n = width * height;
    let mut raw = Vec::with_capacity(n);
    match magic.as_str() {
        "P2" => {
            for _ in 0..n {
                raw.push(num(token()?)?);
            }
        }
        "P5" => {
            // Exactly one whitespace byte separates the header from the raster.
            let start = pos + 1;
            let bpp = if maxval < 256 { 1 } else { 2 };
            let body = bytes.get(start..start + n * bpp).ok_or_else(|| parse_err("truncated P5 raster"))?;
            if bpp == 1 {
                raw.extend(body.iter().map(|&b| b as usize));
            } else {
                raw.extend(body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as usize));
            }
        }
        other => return Err(parse_err(format!("unsupported image magic {other:?}"))),
    }
    if raw.iter().any(|&v| v > maxval) {
        return Err(parse_err("PGM sample exceeds maxval"));
    }
    let h = T::one() / T::from_usize_lossy(width.max(height));
    let grid = Grid::new_2d(height, width, h, h)?;
    let scale = T::from_usize_lossy(maxval);
    ScalarField::new(grid, raw.into_iter().map(|v| T::from_usize_lossy(v) / scale).collect())
}

/// Writes an 8-bit P5 PGM, clamping values to `[0, 1]`.
pub fn write_pgm<T: Real, W: Write>(field: &ScalarField<T>, writer: W) -> Result<()> {
    let shape = field.grid().shape();
    if shape.len() != 2 {
        return Err(GeoError::InvalidInput("PGM output needs a 2D field".into()));
    }
    let mut w = BufWriter::new(writer);
    write!(w, "P5\n{} {}\n255\n", shape[1], shape[0])?;
    let body: Vec<u8> = field.values().iter().map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

fn write_header<T: Real, W: Write>(grid: &Grid<T>, w: &mut W) -> Result<()> {
    let mut line = format!("GEOF1 {}", grid.dim());
    for n in grid.shape() {
        line += &format!(" {n}");
    }
    for h in grid.spacing() {
        line += &format!(" {}", h.to_f64_lossy());
    }
    writeln!(w, "{line}")?;
    Ok(())
}

fn write_block<T: Real, W: Write>(values: &[T], w: &mut W) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_scalar_raw<T: Real, W: Write>(field: &ScalarField<T>, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    write_header(field.grid(), &mut w)?;
    write_block(field.values(), &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_vector_raw<T: Real, W: Write>(field: &VectorField<T>, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    write_header(field.grid(), &mut w)?;
    for c in field.components() {
        write_block(c, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// A map is stored as its displacement field.
pub fn write_map_raw<T: Real, W: Write>(map: &DeformationMap<T>, writer: W) -> Result<()> {
    write_vector_raw(map.displacement(), writer)
}

/// Grid and value blocks of a `GEOF1` stream.
pub fn read_raw<T: Real, R: Read>(reader: R) -> Result<(Grid<T>, Vec<Vec<T>>)> {
    let mut r = BufReader::new(reader);
    let mut header = Vec::new();
    r.read_until(b'\n', &mut header)?;
    let header = String::from_utf8(header).map_err(|_| parse_err("non-ASCII raw header"))?;
    let mut tok = header.split_whitespace();
    if tok.next() != Some("GEOF1") {
        return Err(parse_err("missing GEOF1 magic"));
    }
    let dim: usize = tok.next().and_then(|s| s.parse().ok()).ok_or_else(|| parse_err("bad dimension"))?;
    if !(1..=2).contains(&dim) {
        return Err(parse_err(format!("dimension {dim} not supported")));
    }
    let shape: Vec<usize> = (0..dim).map(|_| tok.next().and_then(|s| s.parse().ok()).ok_or_else(|| parse_err("bad shape"))).collect::<Result<_>>()?;
    let spacing: Vec<T> = (0..dim)
        .map(|_| tok.next().and_then(|s| s.parse::<f64>().ok()).map(T::lit).ok_or_else(|| parse_err("bad spacing")))
        .collect::<Result<_>>()?;
    if tok.next().is_some() {
        return Err(parse_err("trailing tokens in raw header"));
    }
    let grid = Grid::new(&shape, &spacing)?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let block = grid.len() * 4;
    if body.is_empty() || body.len() % block != 0 {
        return Err(parse_err(format!("raw payload of {} bytes is not a whole number of {block}-byte blocks", body.len())));
    }
    let blocks = body
        .chunks_exact(block)
        .map(|b| b.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect())
        .collect();
    Ok((grid, blocks))
}

pub fn read_scalar_raw<T: Real, R: Read>(reader: R) -> Result<ScalarField<T>> {
    let (grid, mut blocks) = read_raw(reader)?;
    if blocks.len() != 1 {
        return Err(parse_err(format!("expected 1 value block, found {}", blocks.len())));
    }
    ScalarField::new(grid, blocks.pop().unwrap())
}

pub fn read_vector_raw<T: Real, R: Read>(reader: R) -> Result<VectorField<T>> {
    let (grid, blocks) = read_raw(reader)?;
    if blocks.len() != grid.dim() {
        return Err(parse_err(format!("expected {} value blocks, found {}", grid.dim(), blocks.len())));
    }
    VectorField::new(grid, blocks)
}

/// Loads an image by extension: `.pgm` or the raw `GEOF1` format.
pub fn load_image<T: Real>(path: &Path) -> Result<ScalarField<T>> {
    let f = File::open(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pgm") => read_pgm(f),
        _ => read_scalar_raw(f),
    }
}

/// CSV with a header row: feature columns, then a final `label` column.
pub fn read_dataset<R: Read>(reader: R) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    if headers.len() < 2 || headers.get(headers.len() - 1) != Some("label") {
        return Err(parse_err("dataset header must end with a `label` column after at least one feature"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(format!("row {}: {s:?} is not a number", row + 1))))
            .collect::<Result<_>>()?;
        let (label, feats) = vals.split_last().unwrap();
        features.push(feats.to_vec());
        labels.push(*label);
    }
    LabeledDataset::new(features, labels)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    read_dataset(File::open(path)?)
}

pub fn write_dataset<W: Write>(data: &LabeledDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..data.dim()).map(|k| format!("x{k}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| parse_err(e.to_string()))?;
    for (x, y) in data.features.iter().zip(&data.labels) {
        let row: Vec<String> = x.iter().chain(std::iter::once(y)).map(|v| v.to_string()).collect();
        w.write_record(&row).map_err(|e| parse_err(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
