//! LGR1 raw tensor files and named-tensor checkpoints.
//!
//! Record layout: 8-byte magic `LGRID\0\0\x01`, five little-endian `u64`
//! axis lengths (b, c, f, h, w), then `b*c*f*h*w` little-endian `f64`s.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::latent::{Extent5, LatentGrid, StatsAcc, Stats};

pub const MAGIC: [u8; 8] = *b"LGRID\0\0\x01";
pub const HEADER_LEN: u64 = 8 + 5 * 8;

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: msg.into() }
}

pub fn encode(grid: &LatentGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 8 * grid.values().len());
    out.extend_from_slice(&MAGIC);
    for axis in grid.extent().as_array() {
        out.extend_from_slice(&(axis as u64).to_le_bytes());
    }
    for v in grid.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_header(bytes: &[u8], base: u64) -> Result<Extent5> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(format_err(
            base + bytes.len() as u64,
            format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if bytes[..8] != MAGIC {
        return Err(format_err(base, "bad magic, not an LGR1 record"));
    }
    let mut axes = [0usize; 5];
    for (i, a) in axes.iter_mut().enumerate() {
        let off = 8 + 8 * i;
        let raw = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        *a = usize::try_from(raw).map_err(|_| format_err(base + off as u64, "axis length overflows"))?;
    }
    Extent5::new(axes[0], axes[1], axes[2], axes[3], axes[4])
        .map_err(|e| format_err(base + 8, e.to_string()))
}

/// Decodes one record starting at `bytes[0]`; `base` is its offset in the file
/// (used in error messages). Returns the grid and the bytes consumed.
pub fn decode_at(bytes: &[u8], base: u64) -> Result<(LatentGrid, usize)> {
    let extent = parse_header(bytes, base)?;
    let need = HEADER_LEN as usize + 8 * extent.len();
    if bytes.len() < need {
        return Err(format_err(
            base + bytes.len() as u64,
            format!("truncated payload: expected {need} bytes, found {}", bytes.len()),
        ));
    }
    let values = bytes[HEADER_LEN as usize..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let grid = LatentGrid::from_vec(extent, values).map_err(|e| format_err(base + HEADER_LEN, e.to_string()))?;
    Ok((grid, need))
}

pub fn decode(bytes: &[u8]) -> Result<LatentGrid> {
    let (grid, used) = decode_at(bytes, 0)?;
    if used != bytes.len() {
        return Err(format_err(used as u64, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(grid)
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_file(path: &Path, grid: &LatentGrid) -> Result<()> {
    write_atomic(path, &encode(grid))
}

pub fn read_file(path: &Path) -> Result<LatentGrid> {
    decode(&fs::read(path)?)
}

/// Streams an LGR1 file once, computing summary statistics without holding
/// the payload (NaNs are counted, not rejected).
pub fn inspect_file(path: &Path) -> Result<(Extent5, Stats)> {
    let mut file = io::BufReader::new(fs::File::open(path)?);
    let mut header = Vec::with_capacity(HEADER_LEN as usize);
    (&mut file).take(HEADER_LEN).read_to_end(&mut header)?;
    let extent = parse_header(&header, 0)?;
    let mut acc = StatsAcc::default();
    let mut buf = [0u8; 8];
    let mut read = 0usize;
    let expected = extent.len();
    while read < expected {
        match file.read_exact(&mut buf) {
            Ok(()) => {
                acc.push(f64::from_le_bytes(buf));
                read += 1;
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                let expected_len = HEADER_LEN + 8 * expected as u64;
                let actual = fs::metadata(path)?.len();
                return Err(format_err(
                    HEADER_LEN + 8 * read as u64,
                    format!("truncated file: expected {expected_len} bytes, found {actual}"),
                ));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(format_err(HEADER_LEN + 8 * expected as u64, format!("{} trailing bytes", rest.len())));
    }
    Ok((extent, acc.finish()))
}

/// Named tensors stored as concatenated LGR1 records plus a text index.
///
/// Index lines: `meta <key> <value>` and `tensor <name> <offset> <b>x<c>x<f>x<h>x<w>`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, LatentGrid)>,
}

impl TensorArchive {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&LatentGrid> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn to_bytes(&self) -> (Vec<u8>, String) {
        let mut data = Vec::new();
        let mut index = String::new();
        for (k, v) in &self.meta {
            index.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, grid) in &self.tensors {
            index.push_str(&format!("tensor {name} {} {}\n", data.len(), grid.extent()));
            data.extend_from_slice(&encode(grid));
        }
        (data, index)
    }

    pub fn from_bytes(data: &[u8], index: &str) -> Result<Self> {
        let mut archive = TensorArchive::default();
        for (lineno, line) in index.lines().enumerate() {
            let bad = |msg: &str| format_err(0, format!("index line {}: {msg}", lineno + 1));
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let k = parts.next().ok_or_else(|| bad("missing key"))?;
                    let v = parts.next().unwrap_or("");
                    archive.meta.push((k.to_string(), v.to_string()));
                }
                Some("tensor") => {
                    let name = parts.next().ok_or_else(|| bad("missing name"))?;
                    let rest = parts.next().ok_or_else(|| bad("missing offset"))?;
                    let (off, shape) = rest.split_once(' ').ok_or_else(|| bad("missing extent"))?;
                    let off: usize = off.parse().map_err(|_| bad("bad offset"))?;
                    if off > data.len() {
                        return Err(format_err(off as u64, format!("tensor {name} offset beyond data")));
                    }
                    let (grid, _) = decode_at(&data[off..], off as u64)?;
                    if grid.extent().to_string() != shape {
                        return Err(format_err(off as u64, format!("tensor {name}: index says {shape}, data says {}", grid.extent())));
                    }
                    archive.tensors.push((name.to_string(), grid));
                }
                Some("") | None => {}
                Some(other) => return Err(bad(&format!("unknown record kind {other:?}"))),
            }
        }
        Ok(archive)
    }

    /// Writes `<path>` (data) and `<path>.idx` (index).
    pub fn save(&self, path: &Path) -> Result<()> {
        let (data, index) = self.to_bytes();
        write_atomic(path, &data)?;
        write_atomic(&index_path(path), index.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path)?;
        let index = fs::read_to_string(index_path(path))?;
        Self::from_bytes(&data, &index)
    }
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".idx");
    PathBuf::from(p)
}
