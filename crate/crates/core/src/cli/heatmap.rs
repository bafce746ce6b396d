//! Attention maps as CSV grids and binary PGM images.

use std::path::Path;

use crate::error::{ensure, Error, Result};

/// Side length of a square map, or an error when `len` is not a square.
pub fn map_side(len: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    ensure!(side > 0 && side * side == len, "map of length {len} is not a square grid");
    Ok(side)
}

/// One row per grid row, comma separated. Values use the shortest exact representation.
pub fn map_to_csv(map: &[f64]) -> Result<String> {
    let side = map_side(map.len())?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in map.chunks(side) {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::contract(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn map_from_csv(text: &str, path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut width = None;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, 0, e.to_string()))?;
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::format(path, 0, format!("row {i} has {} columns", rec.len())));
        }
        for field in rec.iter() {
            let v = field
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::format(path, 0, format!("row {i}: {e}")))?;
            out.push(v);
        }
    }
    if width != Some(map_side(out.len()).map_err(|e| Error::format(path, 0, e.to_string()))?) {
        return Err(Error::format(path, 0, "grid is not square"));
    }
    Ok(out)
}

/// Grayscale bytes for one map: each cell scaled so the map's maximum is 255.
/// An all-zero map is black.
pub fn map_to_gray(map: &[f64]) -> Vec<u8> {
    let max = map.iter().cloned().fold(0.0, f64::max);
    map.iter()
        .map(|&v| {
            if max > 0.0 {
                (255.0 * v.max(0.0) / max).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary PGM (P5) image of `width × height` bytes.
pub fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parse a P5 image written by [`pgm`].
pub fn read_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
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
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let data = bytes.get(pos + 1..)?;
    (data.len() == w * h).then(|| (w, h, data.to_vec()))
}

/// Map as a PGM, each cell drawn as a `scale × scale` block.
pub fn map_to_pgm(map: &[f64], scale: usize) -> Result<Vec<u8>> {
    let side = map_side(map.len())?;
    let panel = upscale(&map_to_gray(map), side, scale.max(1));
    let n = side * scale.max(1);
    Ok(pgm(n, n, &panel))
}

fn upscale(gray: &[u8], side: usize, scale: usize) -> Vec<u8> {
    let n = side * scale;
    (0..n * n).map(|p| gray[(p / n / scale) * side + (p % n) / scale]).collect()
}

/// Maps placed left to right with a one-pixel black gap; each panel is scaled by its own maximum.
pub fn side_by_side(maps: &[&[f64]], scale: usize) -> Result<Vec<u8>> {
    ensure!(!maps.is_empty(), "nothing to compare");
    let side = map_side(maps[0].len())?;
    ensure!(maps.iter().all(|m| m.len() == maps[0].len()), "maps differ in size");
    let scale = scale.max(1);
    let n = side * scale;
    let panels: Vec<Vec<u8>> = maps.iter().map(|m| upscale(&map_to_gray(m), side, scale)).collect();
    let width = maps.len() * n + maps.len() - 1;
    let mut pixels = vec![0u8; width * n];
    for (k, panel) in panels.iter().enumerate() {
        let x0 = k * (n + 1);
        for y in 0..n {
            pixels[y * width + x0..y * width + x0 + n].copy_from_slice(&panel[y * n..(y + 1) * n]);
        }
    }
    Ok(pgm(width, n, &pixels))
}
