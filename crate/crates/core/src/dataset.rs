//! Transition records and their CSV file format.
//!
//! ```text
//! # config_hash=<hex>
//! o_sx,o_sy,o_d,o_t,a1_x,a1_y,a1_z,a1_g,...,e_dx,e_dy,e_dz
//! 0.05,0.03,...
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a dataset read back
//! is bit-identical to the one written.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::world::{Action, Effect};

/// One `(object, action, effect)` interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub object: [f64; 4],
    pub action: [f64; 12],
    pub effect: [f64; 3],
}

impl Transition {
    pub fn new(object: [f64; 4], action: &Action, effect: Effect) -> Self {
        Self {
            object,
            action: action.to_array(),
            effect: effect.to_array(),
        }
    }

    pub fn effect(&self) -> Effect {
        Effect::from_array(self.effect)
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.object.iter().chain(&self.action).chain(&self.effect).copied()
    }
}

pub const HASH_PREFIX: &str = "# config_hash=";

pub fn header() -> Vec<String> {
    let mut h: Vec<String> = ["o_sx", "o_sy", "o_d", "o_t"].iter().map(|s| s.to_string()).collect();
    for i in 1..=3 {
        for axis in ["x", "y", "z", "g"] {
            h.push(format!("a{i}_{axis}"));
        }
    }
    h.extend(["e_dx", "e_dy", "e_dz"].iter().map(|s| s.to_string()));
    h
}

/// Write `contents` to `path` via a sibling temp file and a rename, so
/// readers never observe a partial file.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = temp_beside(path)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    persist(tmp, path)
}

fn temp_beside(path: &Path) -> Result<NamedTempFile> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    Ok(NamedTempFile::new_in(dir)?)
}

fn persist(tmp: NamedTempFile, path: &Path) -> Result<()> {
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Streams rows to a temp file; the destination appears only on
/// [`DatasetWriter::finish`].
pub struct DatasetWriter {
    path: PathBuf,
    writer: csv::Writer<BufWriter<NamedTempFile>>,
    rows: usize,
}

impl DatasetWriter {
    pub fn create(path: &Path, config_hash: &str) -> Result<Self> {
        let tmp = temp_beside(path)?;
        let mut buf = BufWriter::new(tmp);
        writeln!(buf, "{HASH_PREFIX}{config_hash}")?;
        let mut writer = csv::Writer::from_writer(buf);
        writer.write_record(header()).map_err(csv_err)?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
            rows: 0,
        })
    }

    pub fn append(&mut self, t: &Transition) -> Result<()> {
        self.writer
            .write_record(t.values().map(|v| v.to_string()))
            .map_err(csv_err)?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(self) -> Result<()> {
        let buf = self.writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        let tmp = buf.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        tmp.as_file().sync_all()?;
        persist(tmp, &self.path)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("dataset", e)
}

pub fn write_dataset(path: &Path, config_hash: &str, rows: &[Transition]) -> Result<()> {
    let mut w = DatasetWriter::create(path, config_hash)?;
    for t in rows {
        w.append(t)?;
    }
    w.finish()
}

/// Returns the embedded config hash (if any) and the rows.
pub fn read_dataset(path: &Path) -> Result<(Option<String>, Vec<Transition>)> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let (hash, rest) = match first.strip_prefix(HASH_PREFIX) {
        Some(h) => (Some(h.trim().to_string()), String::new()),
        None => (None, first),
    };
    let chained = std::io::Cursor::new(rest.into_bytes()).chain(reader);
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(chained);
    let expected = header();
    let found = csv.headers().map_err(csv_err)?;
    if found.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::format("dataset", "unexpected header row"));
    }
    let mut rows = Vec::new();
    for (line, record) in csv.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let values: Vec<f64> = record
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("dataset", format!("row {}: {e}", line + 1)))?;
        if values.len() != 19 || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("dataset", format!("row {}: expected 19 finite values", line + 1)));
        }
        let mut t = Transition {
            object: [0.0; 4],
            action: [0.0; 12],
            effect: [0.0; 3],
        };
        t.object.copy_from_slice(&values[..4]);
        t.action.copy_from_slice(&values[4..16]);
        t.effect.copy_from_slice(&values[16..]);
        rows.push(t);
    }
    Ok((hash, rows))
}

/// SHA-256 over the little-endian bytes of every value, row-major.
pub fn dataset_hash(rows: &[Transition]) -> String {
    let mut h = Sha256::new();
    for t in rows {
        for v in t.values() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Error unless `found` matches `expected`. A missing hash is accepted.
pub fn check_hash(artifact: &Path, expected: &str, found: Option<&str>) -> Result<()> {
    match found {
        Some(f) if f != expected => Err(Error::ConfigMismatch {
            artifact: artifact.display().to_string(),
            expected: expected.to_string(),
            found: f.to_string(),
        }),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(k: f64) -> Transition {
        let mut action = [0.0; 12];
        for (i, a) in action.iter_mut().enumerate() {
            *a = k * (i as f64 - 5.5) / 117.0;
        }
        Transition {
            object: [0.031, 0.07, 0.0423, 1.0],
            action,
            effect: [k * 0.1 / 3.0, -1e-17, 0.0],
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let rows: Vec<_> = (0..5).map(|k| row(k as f64 + 0.3)).collect();
        write_dataset(&path, "abc", &rows).unwrap();
        let (hash, back) = read_dataset(&path).unwrap();
        assert_eq!(hash.as_deref(), Some("abc"));
        assert_eq!(back, rows);
        assert_eq!(dataset_hash(&back), dataset_hash(&rows));
    }

    #[test]
    fn empty_dataset_keeps_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset(&path, "h", &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("o_sx,"));
        assert!(read_dataset(&path).unwrap().1.is_empty());
    }

    #[test]
    fn unfinished_writer_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut w = DatasetWriter::create(&path, "h").unwrap();
        w.append(&row(1.0)).unwrap();
        drop(w);
        assert!(!path.exists());
    }

    #[test]
    fn missing_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nope.csv");
        assert!(matches!(read_dataset(&path), Err(Error::MissingArtifact(_))));
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let p = Path::new("x");
        assert!(check_hash(p, "a", Some("a")).is_ok());
        assert!(check_hash(p, "a", None).is_ok());
        assert!(matches!(check_hash(p, "a", Some("b")), Err(Error::ConfigMismatch { .. })));
    }
}
