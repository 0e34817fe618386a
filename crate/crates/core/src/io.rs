//! File formats: binary PGM (P5) for 2D images, raw bytes with a JSON
//! sidecar for volumes and float fields, CSV for curves.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microstructure::Microstructure;

pub const ORDER: &str = "x-fastest";
pub const PHASE_ENCODING: &str = "u8: 0 = matrix, 1 = inclusion";

/// Sidecar for a raw `u8` phase volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: Vec<usize>,
    pub order: String,
    pub phase_encoding: String,
}

/// Sidecar for a raw little-endian `f32` field with `components` values per
/// cell (interleaved).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloatFieldHeader {
    pub shape: Vec<usize>,
    pub order: String,
    pub components: usize,
    pub dtype: String,
}

/// Write a 2D microstructure as P5 with phase 0 -> 0 and phase 1 -> 255.
pub fn write_pgm<W: Write>(mut w: W, ms: &Microstructure) -> Result<()> {
    if ms.dims() != 2 {
        return Err(Error::Invalid(format!(
            "PGM holds 2D images only, got shape {:?}",
            ms.shape()
        )));
    }
    let (nx, ny) = (ms.shape()[0], ms.shape()[1]);
    write!(w, "P5\n{nx} {ny}\n255\n")?;
    let bytes: Vec<u8> = ms.phases().iter().map(|&p| if p == 1 { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

fn next_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated PGM header".into()));
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ASCII PGM header".into()))
}

fn parse_usize(tok: &str, what: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::Format(format!("bad PGM {what}: {tok:?}")))
}

/// Read a P5 image; grey levels above half of maxval become phase 1.
pub fn read_pgm<R: Read>(r: R, periodic: bool) -> Result<Microstructure> {
    let mut r = BufReader::new(r);
    if next_token(&mut r)? != "P5" {
        return Err(Error::Format("not a binary PGM (P5) file".into()));
    }
    let nx = parse_usize(&next_token(&mut r)?, "width")?;
    let ny = parse_usize(&next_token(&mut r)?, "height")?;
    let maxval = parse_usize(&next_token(&mut r)?, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let mut data = vec![0u8; nx * ny];
    r.read_exact(&mut data)
        .map_err(|_| Error::Format("truncated PGM pixel data".into()))?;
    let phase = data
        .iter()
        .map(|&v| u8::from(2 * v as usize > maxval))
        .collect();
    Microstructure::new(&[nx, ny], phase, periodic)
}

/// `<path>.json` next to a raw file.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Write `<path>` (raw `u8` phases) and its JSON sidecar.
pub fn write_volume(path: &Path, ms: &Microstructure) -> Result<()> {
    let header = VolumeHeader {
        shape: ms.shape().to_vec(),
        order: ORDER.into(),
        phase_encoding: PHASE_ENCODING.into(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&header)?)?;
    fs::write(path, ms.phases())?;
    Ok(())
}

pub fn read_volume(path: &Path, periodic: bool) -> Result<Microstructure> {
    let header: VolumeHeader = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if header.order != ORDER {
        return Err(Error::Format(format!("unsupported voxel order {:?}", header.order)));
    }
    let data = fs::read(path)?;
    let expected: usize = header.shape.iter().product();
    if data.len() != expected {
        return Err(Error::Format(format!(
            "raw volume has {} bytes, header shape {:?} needs {expected}",
            data.len(),
            header.shape
        )));
    }
    if data.iter().any(|&v| v > 1) {
        return Err(Error::Format("raw volume phases must be 0 or 1".into()));
    }
    Microstructure::new(&header.shape, data, periodic)
}

/// Dispatch on extension: `.pgm` for 2D images, anything else as raw+JSON.
pub fn write_microstructure(path: &Path, ms: &Microstructure) -> Result<()> {
    if is_pgm(path) {
        write_pgm(std::io::BufWriter::new(fs::File::create(path)?), ms)
    } else {
        write_volume(path, ms)
    }
}

pub fn read_microstructure(path: &Path, periodic: bool) -> Result<Microstructure> {
    if is_pgm(path) {
        read_pgm(fs::File::open(path)?, periodic)
    } else {
        read_volume(path, periodic)
    }
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// Write an interleaved `f32` field plus sidecar.
pub fn write_float_field(path: &Path, shape: &[usize], components: usize, data: &[f64]) -> Result<()> {
    let n: usize = shape.iter().product();
    if data.len() != n * components {
        return Err(Error::Invalid(format!(
            "{} values for shape {shape:?} with {components} components",
            data.len()
        )));
    }
    let header = FloatFieldHeader {
        shape: shape.to_vec(),
        order: ORDER.into(),
        components,
        dtype: "f32le".into(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&header)?)?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// CSV with a header row; all columns must have equal length.
pub fn write_csv<W: Write>(mut w: W, headers: &[&str], columns: &[&[f64]]) -> Result<()> {
    if headers.len() != columns.len() {
        return Err(Error::Invalid("one header per column required".into()));
    }
    let rows = columns.first().map_or(0, |c| c.len());
    if columns.iter().any(|c| c.len() != rows) {
        return Err(Error::Invalid("CSV columns differ in length".into()));
    }
    writeln!(w, "{}", headers.join(","))?;
    for i in 0..rows {
        let line: Vec<String> = columns.iter().map(|c| c[i].to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a CSV written by [`write_csv`] into headers and columns.
pub fn read_csv<R: Read>(r: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = BufReader::new(r).lines();
    let headers: Vec<String> = match lines.next() {
        Some(l) => l?.split(',').map(|s| s.trim().to_string()).collect(),
        None => return Err(Error::Format("empty CSV".into())),
    };
    let mut cols = vec![Vec::new(); headers.len()];
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != headers.len() {
            return Err(Error::Format(format!("CSV row {} has {} fields", ln + 2, vals.len())));
        }
        for (c, v) in cols.iter_mut().zip(vals) {
            c.push(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("bad CSV number {v:?}")))?,
            );
        }
    }
    Ok((headers, cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample2d() -> Microstructure {
        Microstructure::from_fn(&[5, 3], true, |c| (c[0] + 2 * c[1]) % 3 == 0).unwrap()
    }

    #[test]
    fn pgm_round_trip() {
        let ms = sample2d();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &ms).unwrap();
        assert!(buf.starts_with(b"P5\n5 3\n255\n"));
        assert!(buf[11..].iter().all(|&b| b == 0 || b == 255));
        let back = read_pgm(&buf[..], true).unwrap();
        assert_eq!(back, ms);
    }

    #[test]
    fn pgm_header_comments_and_maxval() {
        let mut data = b"P5 # comment\n2 2\n# more\n15\n".to_vec();
        data.extend_from_slice(&[0, 15, 7, 8]);
        let ms = read_pgm(&data[..], false).unwrap();
        assert_eq!(ms.phases(), &[0, 1, 0, 1]);
        assert!(read_pgm(&b"P2\n1 1\n255\n0"[..], false).is_err());
        assert!(read_pgm(&b"P5\n2 2\n255\n\x00"[..], false).is_err());
    }

    #[test]
    fn pgm_rejects_volumes() {
        let vol = Microstructure::filled(&[2, 2, 2], 0, true).unwrap();
        assert!(write_pgm(Vec::new(), &vol).is_err());
    }

    #[test]
    fn volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let ms = Microstructure::from_fn(&[3, 4, 5], true, |c| c[0] * c[2] % 2 == 1).unwrap();
        write_volume(&path, &ms).unwrap();
        let header: VolumeHeader =
            serde_json::from_slice(&fs::read(dir.path().join("v.json")).unwrap()).unwrap();
        assert_eq!(header.shape, vec![3, 4, 5]);
        assert_eq!(header.order, "x-fastest");
        assert_eq!(read_volume(&path, true).unwrap(), ms);
        fs::write(&path, [0u8; 7]).unwrap();
        assert!(read_volume(&path, true).is_err());
    }

    #[test]
    fn dispatch_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let ms = sample2d();
        for name in ["a.pgm", "a.raw"] {
            let p = dir.path().join(name);
            write_microstructure(&p, &ms).unwrap();
            assert_eq!(read_microstructure(&p, true).unwrap(), ms);
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &["r", "s2"], &[&[0.0, 1.0], &[0.5, 0.25]]).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "r,s2\n0,0.5\n1,0.25\n");
        let (h, c) = read_csv(&buf[..]).unwrap();
        assert_eq!(h, vec!["r", "s2"]);
        assert_eq!(c, vec![vec![0.0, 1.0], vec![0.5, 0.25]]);
        assert!(write_csv(Vec::new(), &["a"], &[&[1.0], &[2.0]]).is_err());
    }

    #[test]
    fn float_field_size_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.raw");
        write_float_field(&p, &[2, 2], 2, &[0.0; 8]).unwrap();
        assert_eq!(fs::read(&p).unwrap().len(), 32);
        assert!(write_float_field(&p, &[2, 2], 2, &[0.0; 7]).is_err());
    }
}
