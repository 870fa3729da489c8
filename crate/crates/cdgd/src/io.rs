//! Dataset files.
//!
//! CSV files carry a header `x0,..,x{d-1},label` with an optional trailing
//! `corrupt` column of 0/1 flags. Floats are written in shortest round-trip
//! form, so saving and loading is lossless.
//!
//! The binary layout is little endian throughout:
//! `b"CDGD"`, version `u16`, `n: u64`, `d: u64`, `num_classes: u64`,
//! `n * d` samples as `f64` in row-major order, `n` labels as `u16`, a `u8`
//! flag for the presence of a corruption mask, then `n` mask bytes if set.

use std::fs;
use std::path::Path;

use cdgd_core::datalab::Dataset;
use cdgd_core::tensor::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"CDGD";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    /// `.csv` is CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Binary => "bin",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "binary" | "bin" => Ok(Format::Binary),
            other => Err(CliError::usage(format!("unknown dataset format `{other}` (csv, binary)"))),
        }
    }
}

fn name_of(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    match format {
        Format::Csv => parse_csv(path, &bytes),
        Format::Binary => parse_binary(path, &bytes),
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path, format: Format) -> Result<()> {
    let bytes = match format {
        Format::Csv => to_csv(ds)?,
        Format::Binary => {
            if ds.num_classes > usize::from(u16::MAX) + 1 {
                return Err(CliError::usage(format!("{} classes do not fit the binary label width", ds.num_classes)));
            }
            to_binary(ds)
        }
    };
    fs::write(path, bytes).map_err(CliError::io(path))
}

pub fn to_csv(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..ds.dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    if ds.corruption.is_some() {
        header.push("corrupt".into());
    }
    let csv_err = |e: csv::Error| CliError::usage(format!("writing csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..ds.len() {
        let mut rec: Vec<String> = ds.samples.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels[r].to_string());
        if let Some(m) = &ds.corruption {
            rec.push(if m[r] { "1" } else { "0" }.into());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::usage(format!("writing csv: {e}")))
}

pub fn parse_csv(path: &Path, bytes: &[u8]) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = rdr.headers().map_err(|e| CliError::parse(path, "line 1", e))?.clone();
    if header.is_empty() || bytes.is_empty() {
        return Err(CliError::parse(path, "line 1", "empty file"));
    }
    let cols: Vec<&str> = header.iter().collect();
    let has_mask = cols.last() == Some(&"corrupt");
    let label_col = cols.len() - 1 - usize::from(has_mask);
    if cols.get(label_col) != Some(&"label") || label_col == 0 {
        return Err(CliError::parse(path, "line 1", "header must be x0,..,x{d-1},label[,corrupt]"));
    }
    for (i, c) in cols[..label_col].iter().enumerate() {
        if *c != format!("x{i}") {
            return Err(CliError::parse(path, "line 1", format!("column {i} is `{c}`, expected `x{i}`")));
        }
    }
    let d = label_col;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = format!("line {}", i + 2);
        let rec = rec.map_err(|e| CliError::parse(path, line.clone(), e))?;
        if rec.len() != cols.len() {
            return Err(CliError::parse(path, line, format!("{} fields, expected {}", rec.len(), cols.len())));
        }
        for f in rec.iter().take(d) {
            samples.push(f.trim().parse::<f64>().map_err(|e| CliError::parse(path, line.clone(), format!("`{f}`: {e}")))?);
        }
        let label = &rec[label_col];
        labels.push(label.trim().parse::<usize>().map_err(|e| CliError::parse(path, line.clone(), format!("label `{label}`: {e}")))?);
        if has_mask {
            mask.push(match rec[label_col + 1].trim() {
                "0" => false,
                "1" => true,
                other => return Err(CliError::parse(path, line, format!("corrupt flag `{other}` is not 0 or 1"))),
            });
        }
    }
    if labels.is_empty() {
        return Err(CliError::parse(path, "line 2", "no samples"));
    }
    let num_classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let n = labels.len();
    let mut ds = Dataset::new(name_of(path), Tensor::new(n, d, samples), labels, num_classes)?;
    if has_mask {
        ds.corruption = Some(mask);
    }
    Ok(ds)
}

pub fn to_binary(ds: &Dataset) -> Vec<u8> {
    let n = ds.len();
    let mut out = Vec::with_capacity(32 + n * (8 * ds.dim() + 4));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [n, ds.dim(), ds.num_classes] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in ds.samples.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.labels {
        out.extend_from_slice(&(y as u16).to_le_bytes());
    }
    match &ds.corruption {
        Some(m) => {
            out.push(1);
            out.extend(m.iter().map(|&b| u8::from(b)));
        }
        None => out.push(0),
    }
    out
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(k).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(CliError::parse(self.path, format!("offset {}", self.at), format!("truncated while reading {what}"))),
        }
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CliError::parse(self.path, format!("offset {}", self.at - 8), format!("{what} {v} too large")))
    }
}

pub fn parse_binary(path: &Path, bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { path, bytes, at: 0 };
    if bytes.is_empty() {
        return Err(CliError::parse(path, "offset 0", "empty file"));
    }
    if c.take(4, "magic")? != MAGIC {
        return Err(CliError::parse(path, "offset 0", "bad magic, not a CDGD dataset"));
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(CliError::parse(path, "offset 4", format!("unsupported version {version}")));
    }
    let n = c.u64("sample count")?;
    let d = c.u64("dimension")?;
    let num_classes = c.u64("class count")?;
    let size = n.checked_mul(d).and_then(|nd| nd.checked_mul(8));
    let raw = c.take(size.unwrap_or(usize::MAX), "samples")?;
    let samples: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    let labels: Vec<usize> =
        c.take(n * 2, "labels")?.chunks_exact(2).map(|b| usize::from(u16::from_le_bytes([b[0], b[1]]))).collect();
    let flag_at = c.at;
    let corruption = match c.take(1, "mask flag")?[0] {
        0 => None,
        1 => {
            let at = c.at;
            let m = c.take(n, "mask")?;
            if let Some(p) = m.iter().position(|&b| b > 1) {
                return Err(CliError::parse(path, format!("offset {}", at + p), "mask byte is not 0 or 1"));
            }
            Some(m.iter().map(|&b| b == 1).collect())
        }
        f => return Err(CliError::parse(path, format!("offset {flag_at}"), format!("mask flag {f} is not 0 or 1"))),
    };
    if c.at != bytes.len() {
        return Err(CliError::parse(path, format!("offset {}", c.at), "trailing bytes"));
    }
    let mut ds = Dataset::new(name_of(path), Tensor::new(n, d, samples), labels, num_classes)?;
    ds.corruption = corruption;
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cdgd_core::datalab::{flip_labels, gen_spheres, LabelMap};

    fn sample() -> Dataset {
        let ds = gen_spheres(3, 25, 4).unwrap();
        flip_labels(&ds, 0.4, &LabelMap::BinaryComplement, 1).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = sample();
        let back = parse_csv(Path::new("s.csv"), &to_csv(&ds).unwrap()).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.corruption, ds.corruption);
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let mut ds = sample();
        let back = parse_binary(Path::new("s.bin"), &to_binary(&ds)).unwrap();
        assert_eq!((back.samples, back.labels, back.corruption), (ds.samples.clone(), ds.labels.clone(), ds.corruption.clone()));
        ds.corruption = None;
        assert_eq!(parse_binary(Path::new("s.bin"), &to_binary(&ds)).unwrap().corruption, None);
    }

    #[test]
    fn csv_header_and_mask() {
        let text = "x0,x1,label,corrupt\n0.5,-1,1,0\n1e-3,2,0,1\n";
        let ds = parse_csv(Path::new("t.csv"), text.as_bytes()).unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.corruption, Some(vec![false, true]));
        assert_eq!(ds.samples.data(), &[0.5, -1.0, 0.001, 2.0]);
        let ds = parse_csv(Path::new("t.csv"), b"x0,label\n3,1\n").unwrap();
        assert_eq!(ds.corruption, None);
    }

    #[test]
    fn malformed_inputs_name_their_location() {
        let err = |bytes: &[u8]| parse_csv(Path::new("t.csv"), bytes).unwrap_err().to_string();
        assert!(err(b"").contains("line 1"));
        assert!(err(b"x0,label\n1,0\nabc,1\n").contains("line 3"));
        assert!(err(b"x0,label,corrupt\n1,0,2\n").contains("line 2"));
        assert!(err(b"a,label\n1,0\n").contains("line 1"));
        let berr = |bytes: &[u8]| parse_binary(Path::new("t.bin"), bytes).unwrap_err().to_string();
        assert!(berr(b"").contains("offset 0"));
        assert!(berr(b"NOPE\x01\x00").contains("magic"));
        let mut buf = to_binary(&sample());
        buf.truncate(buf.len() - 3);
        assert!(berr(&buf).contains("truncated"));
    }
}
