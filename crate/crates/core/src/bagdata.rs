//! Bags of instance features and their on-disk formats.
//!
//! Binary bag layout (little-endian):
//!
//! ```text
//! offset  size    field
//! 0       4       magic "PDIV"
//! 4       2       format version (u16) = 1
//! 6       4       K, instance count (u32)
//! 10      4       d, feature dimension (u32)
//! 14      4·K·d   f32 features, row-major
//! ```
//!
//! CSV bags hold one instance per line, `d` comma-separated decimals, no
//! header. Coordinates, when present, live in a sidecar `<file>.coords.csv`
//! with one `x,y` integer pair per line.
//!
//! A corpus is described by a manifest CSV with header
//! `bag_id,label,path,K,d`; paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micrograd::Matrix;

pub const BAG_MAGIC: &[u8; 4] = b"PDIV";
pub const BAG_FORMAT_VERSION: u16 = 1;
const HEADER_LEN: u64 = 14;

pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: [&str; 5] = ["bag_id", "label", "path", "K", "d"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Negative => 0.0,
            Label::Positive => 1.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<bool> for Label {
    fn from(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "0" => Ok(Label::Negative),
            "1" => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other:?}")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

/// One parent bag. Instance `i` is row `i` of `features` everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub bag_id: String,
    pub label: Label,
    pub features: Matrix,
    pub coords: Option<Vec<(i64, i64)>>,
}

impl FeatureBag {
    pub fn new(
        bag_id: impl Into<String>,
        label: Label,
        features: Matrix,
        coords: Option<Vec<(i64, i64)>>,
    ) -> Result<Self> {
        let bag_id = bag_id.into();
        if features.rows() == 0 {
            return Err(Error::InsufficientInstances {
                needed: 1,
                available: 0,
            });
        }
        if let Some(c) = &coords {
            if c.len() != features.rows() {
                return Err(Error::Dimension {
                    context: "bag coordinates",
                    expected: features.rows(),
                    found: c.len(),
                });
            }
        }
        Ok(Self {
            bag_id,
            label,
            features,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BagFormat {
    Csv,
    Binary,
}

impl BagFormat {
    /// `.csv` is CSV; anything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => BagFormat::Csv,
            _ => BagFormat::Binary,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            BagFormat::Csv => "csv",
            BagFormat::Binary => "pdiv",
        }
    }
}

fn coords_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".coords.csv");
    PathBuf::from(s)
}

/// Writes the feature matrix (and coordinate sidecar, if any). Binary
/// output narrows features to f32.
pub fn write_bag(bag: &FeatureBag, path: &Path, format: BagFormat) -> Result<()> {
    match format {
        BagFormat::Binary => write_binary(&bag.features, path)?,
        BagFormat::Csv => write_csv_features(&bag.features, path)?,
    }
    if let Some(coords) = &bag.coords {
        let mut w = BufWriter::new(File::create(coords_path(path))?);
        for (x, y) in coords {
            writeln!(w, "{x},{y}")?;
        }
        w.flush()?;
    }
    Ok(())
}

fn write_binary(features: &Matrix, path: &Path) -> Result<()> {
    let k = u32::try_from(features.rows()).map_err(|_| Error::Config("too many instances".into()))?;
    let d = u32::try_from(features.cols()).map_err(|_| Error::Config("dimension too large".into()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BAG_MAGIC)?;
    w.write_all(&BAG_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&k.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    for &x in features.as_slice() {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn write_csv_features(features: &Matrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in features.iter_rows() {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Binary header fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinaryHeader {
    pub num_instances: usize,
    pub dim: usize,
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<BinaryHeader> {
    let mut buf = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut buf).map_err(|_| Error::Format {
        path: path.to_owned(),
        message: "file shorter than the 14-byte header".into(),
    })?;
    if &buf[0..4] != BAG_MAGIC {
        return Err(Error::Format {
            path: path.to_owned(),
            message: format!("bad magic {:?}", &buf[0..4]),
        });
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != BAG_FORMAT_VERSION {
        return Err(Error::Format {
            path: path.to_owned(),
            message: format!("unsupported format version {version}"),
        });
    }
    let k = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    Ok(BinaryHeader {
        num_instances: k,
        dim: d,
    })
}

fn read_binary(path: &Path) -> Result<Matrix> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r, path)?;
    let expected = header.num_instances * header.dim * 4;
    let mut bytes = Vec::with_capacity(expected);
    r.read_to_end(&mut bytes)?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_owned(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            path: path.to_owned(),
            message: format!("{} trailing bytes after data", bytes.len() - expected),
        });
    }
    let mut data = Vec::with_capacity(header.num_instances * header.dim);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(Error::NonFinite {
                location: format!(
                    "{} row {} column {}",
                    path.display(),
                    i / header.dim,
                    i % header.dim
                ),
            });
        }
        data.push(f64::from(x));
    }
    Matrix::new(header.num_instances, header.dim, data)
}

fn read_csv_features(path: &Path) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(rows + 1, |p| p.line() as usize);
        if cols.is_some_and(|c| c != rec.len()) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line,
                message: format!("expected {} values, found {}", cols.unwrap(), rec.len()),
            });
        }
        cols = Some(rec.len());
        for (j, field) in rec.iter().enumerate() {
            let x: f64 = field.parse().map_err(|_| Error::Parse {
                path: path.to_owned(),
                line,
                message: format!("column {j}: not a number: {field:?}"),
            })?;
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("{} line {line} column {j}", path.display()),
                });
            }
            data.push(x);
        }
        rows += 1;
    }
    Matrix::new(rows, cols.unwrap_or(0), data)
}

fn read_coords(path: &Path) -> Result<Option<Vec<(i64, i64)>>> {
    let cp = coords_path(path);
    if !cp.exists() {
        return Ok(None);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(&cp)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(out.len() + 1, |p| p.line() as usize);
        let parse = |i: usize| -> Result<i64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: cp.clone(),
                    line,
                    message: "expected an `x,y` integer pair".into(),
                })
        };
        out.push((parse(0)?, parse(1)?));
    }
    Ok(Some(out))
}

/// Reads a bag file of either format (chosen by extension).
pub fn read_bag_file(path: &Path, bag_id: &str, label: Label) -> Result<FeatureBag> {
    let features = match BagFormat::from_path(path) {
        BagFormat::Binary => read_binary(path)?,
        BagFormat::Csv => read_csv_features(path)?,
    };
    let coords = read_coords(path)?;
    FeatureBag::new(bag_id, label, features, coords)
}

/// Random access to single instances of a binary bag.
pub struct BinaryBagReader {
    file: File,
    header: BinaryHeader,
}

impl BinaryBagReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let header = read_header(&mut file, path)?;
        Ok(Self { file, header })
    }

    pub fn header(&self) -> BinaryHeader {
        self.header
    }

    pub fn read_instance(&mut self, index: usize) -> Result<Vec<f64>> {
        if index >= self.header.num_instances {
            return Err(Error::Contract(format!(
                "instance {index} out of range (K={})",
                self.header.num_instances
            )));
        }
        let offset = HEADER_LEN + (index * self.header.dim * 4) as u64;
        self.file.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; self.header.dim * 4];
        self.file.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub bag_id: String,
    pub label: Label,
    /// As written in the manifest, relative to its directory.
    pub path: PathBuf,
    pub num_instances: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub dim: usize,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }
}

/// Accepts either the manifest file itself or the directory holding `manifest.csv`.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_owned()
    }
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(parse_err(1, "empty manifest: missing header".into())),
        Some(r) => r?,
    };
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(parse_err(
            1,
            format!("expected header {:?}", MANIFEST_HEADER.join(",")),
        ));
    }

    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut seen = HashSet::new();
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(entries.len() + 2, |p| p.line() as usize);
        if rec.len() != 5 {
            return Err(parse_err(line, format!("expected 5 columns, found {}", rec.len())));
        }
        let bag_id = rec[0].to_string();
        if bag_id.is_empty() {
            return Err(parse_err(line, "empty bag_id".into()));
        }
        let label: Label = rec[1].parse().map_err(|m| parse_err(line, m))?;
        let num_instances: usize = rec[3]
            .parse()
            .map_err(|_| parse_err(line, format!("bad K {:?}", &rec[3])))?;
        let dim: usize = rec[4]
            .parse()
            .map_err(|_| parse_err(line, format!("bad d {:?}", &rec[4])))?;
        if let Some(first) = entries.first() {
            if first.dim != dim {
                return Err(Error::InconsistentDimension {
                    bag_id,
                    expected: first.dim,
                    found: dim,
                });
            }
        }
        if !seen.insert(bag_id.clone()) {
            return Err(Error::DuplicateBagId(bag_id));
        }
        entries.push(ManifestEntry {
            bag_id,
            label,
            path: PathBuf::from(&rec[2]),
            num_instances,
            dim,
        });
    }
    let Some(first) = entries.first() else {
        return Err(parse_err(2, "manifest has no entries".into()));
    };
    Ok(CorpusManifest {
        root: path.parent().map(Path::to_owned).unwrap_or_default(),
        dim: first.dim,
        entries,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for e in entries {
        w.write_record([
            e.bag_id.clone(),
            e.label.to_string(),
            e.path.to_string_lossy().into_owned(),
            e.num_instances.to_string(),
            e.dim.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one manifest entry and checks its shape against the manifest.
pub fn read_bag(manifest: &CorpusManifest, entry: &ManifestEntry) -> Result<FeatureBag> {
    let path = manifest.resolve(entry);
    let bag = read_bag_file(&path, &entry.bag_id, entry.label)?;
    if bag.len() != entry.num_instances {
        return Err(Error::Format {
            path,
            message: format!(
                "manifest says K={}, file has {}",
                entry.num_instances,
                bag.len()
            ),
        });
    }
    if bag.dim() != entry.dim {
        return Err(Error::InconsistentDimension {
            bag_id: entry.bag_id.clone(),
            expected: entry.dim,
            found: bag.dim(),
        });
    }
    Ok(bag)
}

/// Loads every bag of a manifest, in manifest order.
pub fn load_corpus(manifest: &CorpusManifest) -> Result<Vec<FeatureBag>> {
    manifest
        .entries
        .par_iter()
        .map(|e| read_bag(manifest, e))
        .collect()
}
