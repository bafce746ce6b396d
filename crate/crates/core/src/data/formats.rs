//! Binary grid files.
//!
//! Feature grid: `"HLATFEAT"`, u32 version, u32 channels, u32 side, then
//! `channels · side²` f64 values row-major (channel-major).
//! Attention map: `"HLATAMAP"`, u32 version, u32 side, then `side²` f64 values.
//! Everything little-endian.

use std::path::Path;

use crate::encoders::FeatureGrid;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"HLATFEAT";
pub const MAP_MAGIC: &[u8; 8] = b"HLATAMAP";
pub const GRID_FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, self.pos as u64, msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8, "magic")? != magic {
            self.pos -= 8;
            return Err(self.err(format!(
                "bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let start = self.pos;
        let raw = self.take(n * 8, "value block")?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(self.path, (start + 8 * i) as u64, "non-finite value"));
        }
        Ok(vals)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32("version")?;
        if v != GRID_FORMAT_VERSION {
            self.pos -= 4;
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }
}

pub fn encode_feature_grid(grid: &FeatureGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + grid.tensor().len() * 8);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&GRID_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.side() as u32).to_le_bytes());
    for v in grid.tensor().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_grid(bytes: &[u8], path: &Path) -> Result<FeatureGrid> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(FEATURE_MAGIC)?;
    r.version()?;
    let m = r.u32("channel count")? as usize;
    let l = r.u32("grid side")? as usize;
    if m == 0 || l == 0 {
        r.pos -= 8;
        return Err(r.err("zero channel count or grid side"));
    }
    let vals = r.f64s(m * l * l)?;
    r.finish()?;
    FeatureGrid::new(m, l, vals)
}

pub fn encode_attention_map(side: usize, map: &[f64]) -> Result<Vec<u8>> {
    if map.len() != side * side {
        return Err(Error::contract(format!(
            "map of length {} does not fit a {side}x{side} grid",
            map.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + map.len() * 8);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&GRID_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(side as u32).to_le_bytes());
    for v in map {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Returns `(side, values)`.
pub fn decode_attention_map(bytes: &[u8], path: &Path) -> Result<(usize, Vec<f64>)> {
    let mut r = Reader { bytes, pos: 0, path };
    r.magic(MAP_MAGIC)?;
    r.version()?;
    let l = r.u32("grid side")? as usize;
    if l == 0 {
        r.pos -= 4;
        return Err(r.err("zero grid side"));
    }
    let vals = r.f64s(l * l)?;
    r.finish()?;
    Ok((l, vals))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_grid(path: &Path) -> Result<FeatureGrid> {
    decode_feature_grid(&read(path)?, path)
}

pub fn write_feature_grid(path: &Path, grid: &FeatureGrid) -> Result<()> {
    write(path, &encode_feature_grid(grid))
}

pub fn read_attention_map(path: &Path) -> Result<(usize, Vec<f64>)> {
    decode_attention_map(&read(path)?, path)
}

pub fn write_attention_map(path: &Path, side: usize, map: &[f64]) -> Result<()> {
    write(path, &encode_attention_map(side, map)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn feature_grid_round_trips(m in 1usize..5, l in 1usize..4, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..m * l * l).map(|_| rng.gen_range(-1e3..1e3)).collect();
            let grid = FeatureGrid::new(m, l, data).unwrap();
            let back = decode_feature_grid(&encode_feature_grid(&grid), Path::new("mem")).unwrap();
            prop_assert_eq!(back, grid);
        }

        #[test]
        fn map_round_trips(vals in proptest::collection::vec(-1.0f64..1.0, 9)) {
            let bytes = encode_attention_map(3, &vals).unwrap();
            let (side, back) = decode_attention_map(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(side, 3);
            prop_assert_eq!(back, vals);
        }
    }

    #[test]
    fn errors_carry_byte_offsets() {
        let grid = FeatureGrid::new(2, 2, vec![1.0; 8]).unwrap();
        let bytes = encode_feature_grid(&grid);
        let offset = |b: &[u8]| match decode_feature_grid(b, Path::new("f")) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        let mut bad = bytes.clone();
        bad[3] = b'?';
        assert_eq!(offset(&bad), 0);
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert_eq!(offset(&bad), 8);
        assert_eq!(offset(&bytes[..30]), 20);
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(offset(&long), bytes.len() as u64);
        let mut nan = bytes.clone();
        nan[28..36].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(offset(&nan), 28);
        // header says 3 channels but only 8 values follow
        let mut short = bytes.clone();
        short[12..16].copy_from_slice(&3u32.to_le_bytes());
        assert_eq!(offset(&short), 20);
    }

    #[test]
    fn map_rejects_wrong_magic() {
        let grid = FeatureGrid::new(1, 1, vec![1.0]).unwrap();
        assert!(decode_attention_map(&encode_feature_grid(&grid), Path::new("m")).is_err());
    }
}
