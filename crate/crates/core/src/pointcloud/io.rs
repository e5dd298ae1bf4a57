//! Point-cloud files.
//!
//! Binary clouds: `"MMPC"`, `u32` version 1, `u64` point count, then
//! little-endian `f64` triples. Binary normals output: `"MMPN"`, `u32`
//! version 1, `u64` count, then per point six `f64` (`x y z nx ny nz`) and a
//! `u8` validity byte. ASCII forms are whitespace-separated columns, one
//! point per line; blank lines and `#` comments are skipped.

use std::io::{Read, Write};
use std::path::Path;

use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

pub const CLOUD_MAGIC: &[u8; 4] = b"MMPC";
pub const NORMALS_MAGIC: &[u8; 4] = b"MMPN";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Ascii,
    Binary,
}

impl CloudFormat {
    /// Binary if the bytes start with either magic.
    pub fn sniff(bytes: &[u8]) -> Self {
        if bytes.starts_with(CLOUD_MAGIC) || bytes.starts_with(NORMALS_MAGIC) {
            CloudFormat::Binary
        } else {
            CloudFormat::Ascii
        }
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn read_header(cur: &mut Cursor<'_>, magic: &[u8; 4], record: usize) -> Result<usize> {
    if cur.take(4, "magic")? != magic {
        return Err(format_err(0, format!("bad magic, expected {:?}", std::str::from_utf8(magic))));
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(cur.take(8, "point count")?.try_into().expect("8 bytes"));
    let expected = (n as u128) * record as u128;
    let remaining = (cur.bytes.len() - HEADER_LEN) as u128;
    if expected != remaining {
        let at = HEADER_LEN as u128 + expected.min(remaining);
        return Err(format_err(
            at as usize,
            format!("payload holds {remaining} bytes, {n} points need {expected}"),
        ));
    }
    Ok(n as usize)
}

pub fn decode_binary_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let mut cur = Cursor { bytes, pos: 0 };
    let n = read_header(&mut cur, CLOUD_MAGIC, 24)?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([cur.f64("x")?, cur.f64("y")?, cur.f64("z")?]);
    }
    PointCloud::new(points)
}

pub fn encode_binary_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 24 * cloud.len());
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for p in &cloud.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn parse_ascii_rows(text: &str, min_cols: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let content = line.split('#').next().unwrap_or("").trim();
        if !content.is_empty() {
            let vals = content
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format_err(offset, format!("bad number: {e}")))?;
            if vals.len() < min_cols {
                return Err(format_err(
                    offset,
                    format!("expected {min_cols} columns, found {}", vals.len()),
                ));
            }
            rows.push(vals);
        }
        offset += line.len();
    }
    Ok(rows)
}

pub fn decode_ascii_cloud(text: &str) -> Result<PointCloud> {
    let rows = parse_ascii_rows(text, 3)?;
    PointCloud::new(rows.iter().map(|r| [r[0], r[1], r[2]]).collect())
}

pub fn encode_ascii_cloud(cloud: &PointCloud) -> String {
    let mut s = String::new();
    for p in &cloud.points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    s
}

/// Reads either form, sniffing the magic.
pub fn read_cloud(path: &Path) -> Result<(PointCloud, CloudFormat)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    match CloudFormat::sniff(&bytes) {
        CloudFormat::Binary => Ok((decode_binary_cloud(&bytes)?, CloudFormat::Binary)),
        CloudFormat::Ascii => {
            let text = std::str::from_utf8(&bytes)
                .map_err(|e| format_err(e.valid_up_to(), "ASCII cloud is not UTF-8"))?;
            Ok((decode_ascii_cloud(text)?, CloudFormat::Ascii))
        }
    }
}

fn normals_of(cloud: &PointCloud) -> Result<&[Vec3]> {
    cloud
        .normals
        .as_deref()
        .ok_or_else(|| Error::Usage("cloud has no normals to write".into()))
}

pub fn encode_binary_normals(cloud: &PointCloud) -> Result<Vec<u8>> {
    let normals = normals_of(cloud)?;
    let mut out = Vec::with_capacity(HEADER_LEN + 49 * cloud.len());
    out.extend_from_slice(NORMALS_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for ((p, n), &ok) in cloud.points.iter().zip(normals).zip(&cloud.valid) {
        for v in p.iter().chain(n) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(ok as u8);
    }
    Ok(out)
}

pub fn decode_binary_normals(bytes: &[u8]) -> Result<PointCloud> {
    let mut cur = Cursor { bytes, pos: 0 };
    let n = read_header(&mut cur, NORMALS_MAGIC, 49)?;
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([cur.f64("x")?, cur.f64("y")?, cur.f64("z")?]);
        normals.push([cur.f64("nx")?, cur.f64("ny")?, cur.f64("nz")?]);
        let at = cur.pos;
        valid.push(match cur.take(1, "validity")?[0] {
            0 => false,
            1 => true,
            b => return Err(format_err(at, format!("validity byte must be 0 or 1, got {b}"))),
        });
    }
    let mut cloud = PointCloud::new(points)?;
    cloud.normals = Some(normals);
    cloud.valid = valid;
    Ok(cloud)
}

/// `x y z nx ny nz` per line. Invalid normals are written as zeros.
pub fn encode_ascii_normals(cloud: &PointCloud) -> Result<String> {
    let normals = normals_of(cloud)?;
    let mut s = String::new();
    for (p, n) in cloud.points.iter().zip(normals) {
        s.push_str(&format!("{} {} {} {} {} {}\n", p[0], p[1], p[2], n[0], n[1], n[2]));
    }
    Ok(s)
}

pub fn write_normals(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::Binary => encode_binary_normals(cloud)?,
        CloudFormat::Ascii => encode_ascii_normals(cloud)?.into_bytes(),
    };
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}
