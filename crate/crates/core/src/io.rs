//! Feature files, annotations, prediction streams and reports.

use crate::decoder::ActionInstance;
use crate::error::{Error, Result};
use crate::eval::{MapReport, PointMapReport, TimedInstance};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const FEATURE_MAGIC: &[u8; 4] = b"SIMF";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: u64 = 16;

/// Row-at-a-time reader for feature files.
pub struct FeatureReader<R> {
    inner: R,
    d_in: usize,
    t: usize,
    next: usize,
    offset: u64,
}

impl FeatureReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let actual = file.metadata()?.len();
        let reader = FeatureReader::new(BufReader::new(file))?;
        let expected = FEATURE_HEADER_LEN + 4 * (reader.t as u64) * (reader.d_in as u64);
        if actual != expected {
            let at = actual.min(expected);
            return Err(Error::format(
                at,
                format!(
                    "{}: expected {expected} bytes for {} rows of width {}, found {actual}",
                    path.display(),
                    reader.t,
                    reader.d_in
                ),
            ));
        }
        Ok(reader)
    }
}

impl<R: Read> FeatureReader<R> {
    /// Parses the header. Lengths are checked as rows are read.
    pub fn new(mut inner: R) -> Result<Self> {
        let mut header = [0u8; FEATURE_HEADER_LEN as usize];
        let got = read_fully(&mut inner, &mut header)?;
        if got < 4 || &header[..4] != FEATURE_MAGIC {
            return Err(Error::format(0, "bad magic, expected SIMF".to_string()));
        }
        if got < header.len() {
            return Err(Error::format(
                got as u64,
                format!("truncated header: expected {FEATURE_HEADER_LEN} bytes, found {got}"),
            ));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FEATURE_VERSION {
            return Err(Error::format(4, format!("unsupported feature version {version}")));
        }
        let d_in = word(8) as usize;
        if d_in == 0 {
            return Err(Error::format(8, "feature width is zero".to_string()));
        }
        Ok(FeatureReader {
            inner,
            d_in,
            t: word(12) as usize,
            next: 0,
            offset: FEATURE_HEADER_LEN,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    fn read_row(&mut self) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; 4 * self.d_in];
        let got = read_fully(&mut self.inner, &mut buf)?;
        if got < buf.len() {
            let expected = FEATURE_HEADER_LEN + 4 * (self.t * self.d_in) as u64;
            return Err(Error::format(
                self.offset + got as u64,
                format!(
                    "truncated payload: expected {expected} bytes, found {}",
                    self.offset + got as u64
                ),
            ));
        }
        self.offset += buf.len() as u64;
        Ok(buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }
}

impl<R: Read> Iterator for FeatureReader<R> {
    type Item = Result<Vec<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.t {
            return None;
        }
        self.next += 1;
        let row = self.read_row();
        if row.is_err() {
            self.next = self.t;
        }
        Some(row)
    }
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

/// Reads a whole feature file. Returns `(d_in, rows)`.
pub fn read_features(path: impl AsRef<Path>) -> Result<(usize, Vec<Vec<f64>>)> {
    let reader = FeatureReader::open(path)?;
    let d_in = reader.d_in();
    let rows = reader.collect::<Result<Vec<_>>>()?;
    Ok((d_in, rows))
}

/// Writes rows as 32-bit floats. All rows must have width `d_in`.
pub fn write_features<F: AsRef<[f64]>>(path: impl AsRef<Path>, d_in: usize, rows: &[F]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features_to(&mut w, d_in, rows)?;
    w.flush()?;
    Ok(())
}

pub fn write_features_to<W: Write, F: AsRef<[f64]>>(w: &mut W, d_in: usize, rows: &[F]) -> Result<()> {
    if d_in == 0 {
        return Err(Error::Input("feature width must be positive".into()));
    }
    let t = u32::try_from(rows.len()).map_err(|_| Error::Input("too many rows".into()))?;
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(d_in as u32).to_le_bytes())?;
    w.write_all(&t.to_le_bytes())?;
    for (i, row) in rows.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != d_in {
            return Err(Error::Input(format!("row {i} has width {}, expected {d_in}", row.len())));
        }
        for &x in row {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Linear interpolation of a feature sequence to `len` rows, with the first
/// and last rows kept fixed.
pub fn resample_linear(rows: &[Vec<f64>], len: usize) -> Result<Vec<Vec<f64>>> {
    if rows.is_empty() || len == 0 {
        return Err(Error::Input("cannot resample an empty sequence".into()));
    }
    if rows.len() == 1 || len == 1 {
        return Ok(vec![rows[0].clone(); len]);
    }
    let scale = (rows.len() - 1) as f64 / (len - 1) as f64;
    Ok((0..len)
        .map(|i| {
            let x = i as f64 * scale;
            let lo = (x.floor() as usize).min(rows.len() - 2);
            let w = x - lo as f64;
            rows[lo]
                .iter()
                .zip(&rows[lo + 1])
                .map(|(a, b)| a * (1.0 - w) + b * w)
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub video_id: String,
    pub fps: f64,
    pub l: usize,
    pub instances: Vec<TimedInstance>,
    pub class_names: Vec<String>,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        for inst in &self.instances {
            if !(0.0 <= inst.start_sec && inst.start_sec <= inst.end_sec) {
                return Err(Error::Input(format!(
                    "{}: instance [{}, {}] is not ordered",
                    self.video_id, inst.start_sec, inst.end_sec
                )));
            }
            if inst.class_id >= self.class_names.len() {
                return Err(Error::Input(format!(
                    "{}: class {} out of range for {} classes",
                    self.video_id,
                    inst.class_id,
                    self.class_names.len()
                )));
            }
        }
        if !(self.fps > 0.0) || self.l == 0 {
            return Err(Error::Input(format!("{}: fps and l must be positive", self.video_id)));
        }
        Ok(())
    }
}

pub fn read_annotation(path: impl AsRef<Path>) -> Result<Annotation> {
    let a: Annotation = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    a.validate()?;
    Ok(a)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub class_id: usize,
    pub start_chunk: usize,
    pub end_chunk: usize,
    pub score: f64,
}

impl PredictionRecord {
    pub fn new(video_id: &str, inst: &ActionInstance) -> Self {
        PredictionRecord {
            video_id: video_id.to_string(),
            class_id: inst.class_id,
            start_chunk: inst.start_chunk,
            end_chunk: inst.end_chunk,
            score: inst.score,
        }
    }

    pub fn instance(&self) -> ActionInstance {
        ActionInstance {
            start_chunk: self.start_chunk,
            end_chunk: self.end_chunk,
            class_id: self.class_id,
            score: self.score,
        }
    }
}

/// Time base needed to turn chunk indices back into seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub fps: f64,
    pub l: usize,
}

pub fn sidecar_path(predictions: &Path) -> PathBuf {
    let mut s = predictions.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_prediction_line<W: Write>(w: &mut W, rec: &PredictionRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let len = line.len() as u64 + 1;
        if !line.trim().is_empty() {
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::format(offset, format!("bad prediction record: {e}")))?,
            );
        }
        offset += len;
    }
    Ok(out)
}

/// Evaluation output written by the CLI.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tal: Option<MapReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub odas: Option<PointMapReport>,
}
