//! Binary snapshot container, trajectory index and CSV helpers.
//!
//! Container layout (all little-endian, 8 bytes per field):
//! `"STRF"`, version, n, d, counts[n], spacing, time, origin[n], flags,
//! then `len * d` node values, then the time derivative when flag bit 1 is set.
//! Flag bit 0 marks a periodic grid.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FieldSnapshot, Grid, SpaceTimeField, MAX_DIM};

pub const MAGIC: &[u8; 4] = b"STRF";
pub const VERSION: u64 = 1;

const FLAG_PERIODIC: u64 = 1;
const FLAG_DUDT: u64 = 2;

/// JSON mirror of the container header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub magic: String,
    pub version: u64,
    pub n: usize,
    pub d: usize,
    pub counts: Vec<usize>,
    pub spacing: f64,
    pub time: f64,
    pub origin: Vec<f64>,
    pub periodic: bool,
    pub has_time_derivative: bool,
}

impl SnapshotHeader {
    pub fn of(s: &FieldSnapshot) -> Self {
        let g = s.grid();
        SnapshotHeader {
            magic: "STRF".into(),
            version: VERSION,
            n: g.dim(),
            d: s.target_dim(),
            counts: g.counts().to_vec(),
            spacing: g.spacing(),
            time: s.time(),
            origin: g.lower().to_vec(),
            periodic: g.is_periodic(),
            has_time_derivative: s.time_derivative().is_some(),
        }
    }
}

pub fn encode_snapshot(s: &FieldSnapshot) -> Vec<u8> {
    let g = s.grid();
    let mut out = Vec::with_capacity(64 + 8 * s.values().len());
    out.extend_from_slice(MAGIC);
    let put_u = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
    put_u(&mut out, VERSION);
    put_u(&mut out, g.dim() as u64);
    put_u(&mut out, s.target_dim() as u64);
    for &c in g.counts() {
        put_u(&mut out, c as u64);
    }
    out.extend_from_slice(&g.spacing().to_le_bytes());
    out.extend_from_slice(&s.time().to_le_bytes());
    for &o in g.lower() {
        out.extend_from_slice(&o.to_le_bytes());
    }
    let mut flags = 0;
    if g.is_periodic() {
        flags |= FLAG_PERIODIC;
    }
    if s.time_derivative().is_some() {
        flags |= FLAG_DUDT;
    }
    put_u(&mut out, flags);
    for v in s.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dv) = s.time_derivative() {
        for v in dv {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take8(&mut self) -> Result<[u8; 8]> {
        let end = self.pos + 8;
        let chunk = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        self.pos = end;
        Ok(chunk.try_into().expect("8-byte slice"))
    }
    fn u(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take8()?))
    }
    fn f(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take8()?))
    }
}

/// Decodes a container; `grid` is reused when it matches the header.
pub fn decode_snapshot(buf: &[u8], grid: Option<&Arc<Grid>>) -> Result<FieldSnapshot> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut c = Cursor { buf, pos: 4 };
    let version = c.u()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = c.u()? as usize;
    let d = c.u()? as usize;
    if n == 0 || n > MAX_DIM || d == 0 || d > MAX_DIM {
        return Err(Error::Format(format!("bad dimensions n={n} d={d}")));
    }
    let counts = (0..n).map(|_| c.u().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let h = c.f()?;
    let time = c.f()?;
    let origin = (0..n).map(|_| c.f()).collect::<Result<Vec<_>>>()?;
    let flags = c.u()?;
    let g = Grid::new(&origin, h, &counts, flags & FLAG_PERIODIC != 0)?;
    let grid = match grid {
        Some(shared) if **shared == g => shared.clone(),
        _ => Arc::new(g),
    };
    let len = grid.len() * d;
    let values = (0..len).map(|_| c.f()).collect::<Result<Vec<_>>>()?;
    let mut snap = FieldSnapshot::new(grid, time, d, values)?;
    if flags & FLAG_DUDT != 0 {
        let dv = (0..len).map(|_| c.f()).collect::<Result<Vec<_>>>()?;
        snap = snap.with_time_derivative(dv)?;
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(snap)
}

/// Writes `<stem>.strf` and the `<stem>.json` header sidecar.
pub fn write_snapshot(dir: &Path, stem: &str, s: &FieldSnapshot) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::File::create(dir.join(format!("{stem}.strf")))?.write_all(&encode_snapshot(s))?;
    let header = serde_json::to_string_pretty(&SnapshotHeader::of(s))
        .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(format!("{stem}.json")), header)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<FieldSnapshot> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_snapshot(&buf, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryIndex {
    pub stationary: bool,
    pub times: Vec<f64>,
    pub files: Vec<String>,
}

/// One container per recorded snapshot plus `index.json`.
pub fn write_trajectory(dir: &Path, field: &SpaceTimeField) -> Result<TrajectoryIndex> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (k, s) in field.snapshots().iter().enumerate() {
        let stem = format!("snap_{k:05}");
        write_snapshot(dir, &stem, s)?;
        files.push(format!("{stem}.strf"));
    }
    let index = TrajectoryIndex {
        stationary: field.is_stationary(),
        times: field.times(),
        files,
    };
    let js = serde_json::to_string_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("index.json"), js)?;
    Ok(index)
}

pub fn read_trajectory(dir: &Path) -> Result<SpaceTimeField> {
    let text = fs::read_to_string(dir.join("index.json"))?;
    let index: TrajectoryIndex =
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let mut snaps: Vec<FieldSnapshot> = Vec::with_capacity(index.files.len());
    for f in &index.files {
        let mut buf = Vec::new();
        fs::File::open(dir.join(f))?.read_to_end(&mut buf)?;
        let shared = snaps.first().map(|s| s.grid().clone());
        snaps.push(decode_snapshot(&buf, shared.as_ref())?);
    }
    if index.stationary {
        let s = snaps
            .into_iter()
            .next()
            .ok_or_else(|| Error::Format("empty trajectory".into()))?;
        Ok(SpaceTimeField::stationary(s))
    } else {
        SpaceTimeField::new(snaps)
    }
}

/// Scientific notation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a CSV table with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads a numeric CSV with one header row.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        let row = l
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("row {}: {e}", i + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(Error::Format(format!(
                "row {} has {} columns, expected {}",
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FieldSnapshot {
        let g = Arc::new(Grid::new(&[-1.0, 0.5], 0.25, &[3, 4], true).unwrap());
        FieldSnapshot::from_fn(g, 0.125, 3, |x| {
            let c = x.coords();
            vec![c[0], c[1], c[0] * c[1]]
        })
        .unwrap()
    }

    #[test]
    fn container_round_trip() {
        let s = sample().with_time_derivative(vec![0.5; 36]).unwrap();
        let bytes = encode_snapshot(&s);
        assert_eq!(&bytes[..4], b"STRF");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), VERSION);
        let back = decode_snapshot(&bytes, None).unwrap();
        assert_eq!(back.values(), s.values());
        assert_eq!(back.time(), s.time());
        assert_eq!(**back.grid(), **s.grid());
        assert_eq!(back.time_derivative(), s.time_derivative());
    }

    #[test]
    fn container_rejects_corruption() {
        let bytes = encode_snapshot(&sample());
        assert!(decode_snapshot(&bytes[..bytes.len() - 3], None).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_snapshot(&bad, None).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_snapshot(&long, None).is_err());
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = sample();
        let mut b = sample();
        b.set_time(0.5);
        let f = SpaceTimeField::new(vec![a, b]).unwrap();
        let idx = write_trajectory(dir.path(), &f).unwrap();
        assert_eq!(idx.files.len(), 2);
        let header: SnapshotHeader = serde_json::from_str(
            &fs::read_to_string(dir.path().join("snap_00001.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(header.time, 0.5);
        assert!(header.periodic);
        let back = read_trajectory(dir.path()).unwrap();
        assert_eq!(back.times(), vec![0.125, 0.5]);
        assert!(Arc::ptr_eq(back.snapshots()[0].grid(), back.snapshots()[1].grid()));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![vec![0.1, 1.0 / 3.0, -2.5e-300], vec![f64::MAX, 0.0, 7.0]];
        write_csv(&path, &["a", "b", "c"], &rows).unwrap();
        let (h, back) = read_csv(&path).unwrap();
        assert_eq!(h, vec!["a", "b", "c"]);
        assert_eq!(back, rows);
    }
}
