//! Event CSV and the float32 array container.
//!
//! Event CSV: ASCII, header `t,x,y,p`, one record per line, `t` a decimal
//! fraction in `[0, 1]` written in shortest round-trip form, `p` either `-1`
//! or `1`.
//!
//! Array container: one ASCII header line
//! `EVTENSOR 1 f32 <ndim> <d0> ... <dn-1>\n` followed by the row-major payload
//! as little-endian IEEE-754 float32.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EventRecord, EventStream};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CSV_HEADER: &str = "t,x,y,p";
const TENSOR_MAGIC: &str = "EVTENSOR";

pub fn write_events_csv(path: &Path, events: &EventStream) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in events.records() {
            writeln!(w, "{},{},{},{}", r.t, r.x, r.y, r.p)?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn read_events_csv(path: &Path) -> Result<EventStream> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), msg: format!("line {line}: {msg}") };
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if i == 0 {
            if line != CSV_HEADER {
                return Err(parse_err(1, format!("expected header `{CSV_HEADER}`, found `{line}`")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [t, x, y, p] = fields[..] else {
            return Err(parse_err(i + 1, format!("expected 4 fields, found {}", fields.len())));
        };
        let t: f64 = t.parse().map_err(|_| parse_err(i + 1, format!("bad timestamp `{t}`")))?;
        let x: u32 = x.parse().map_err(|_| parse_err(i + 1, format!("bad x `{x}`")))?;
        let y: u32 = y.parse().map_err(|_| parse_err(i + 1, format!("bad y `{y}`")))?;
        let p: i8 = p.parse().map_err(|_| parse_err(i + 1, format!("bad polarity `{p}`")))?;
        records.push(EventRecord { t, x, y, p });
    }
    EventStream::new(records)
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{TENSOR_MAGIC} 1 f32 {} {}", t.ndim(), dims.join(" "))?;
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse { path: path.to_path_buf(), msg: msg.to_string() };
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not ASCII"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 4 || fields[0] != TENSOR_MAGIC || fields[1] != "1" || fields[2] != "f32" {
        return Err(bad("not an EVTENSOR v1 f32 file"));
    }
    let ndim: usize = fields[3].parse().map_err(|_| bad("bad ndim"))?;
    if fields.len() != 4 + ndim {
        return Err(bad("dimension count does not match ndim"));
    }
    let shape: Vec<usize> =
        fields[4..].iter().map(|d| d.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad dimension"))?;
    let n: usize = shape.iter().product();
    let mut payload = &bytes[nl + 1..];
    if payload.len() != n * 4 {
        return Err(bad(&format!("payload has {} bytes, expected {}", payload.len(), n * 4)));
    }
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        payload.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ev.csv");
        let s =
            EventStream::new(vec![EventRecord::new(0.1, 3, 4, 1), EventRecord::new(1.0 / 3.0, 0, 0, -1), EventRecord::new(1.0, 7, 1, 1)])
                .unwrap();
        write_events_csv(&p, &s).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,x,y,p\n") && text.lines().count() == 4);
        assert_eq!(read_events_csv(&p).unwrap(), s);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "t,x,y,p\n0.5,1,1,1\n0.5,1,1\n").unwrap();
        let err = read_events_csv(&p).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        fs::write(&p, "time,x,y,p\n").unwrap();
        assert!(read_events_csv(&p).is_err());
        fs::write(&p, "t,x,y,p\n0.5,1,1,2\n").unwrap();
        assert!(matches!(read_events_csv(&p), Err(Error::InvalidEvent { index: 0, .. })));
    }

    #[test]
    fn tensor_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.evt");
        let t = Tensor::from_fn(&[3, 2, 4], |i| i as f64 * 0.25 - 1.0);
        write_tensor_file(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"EVTENSOR 1 f32 3 3 2 4\n"));
        assert_eq!(bytes.len(), 23 + 24 * 4);
        assert_eq!(read_tensor_file(&p).unwrap(), t);
    }
}
