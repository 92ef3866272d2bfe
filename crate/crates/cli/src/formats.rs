//! On-disk formats: QSD1 state files, model checkpoints, per-sample error CSV
//! and JSON-lines certification reports.
//!
//! All binary numbers are little-endian. Every writer goes through a
//! temporary file in the destination directory followed by a rename, so a
//! reader never observes a half-written file.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use qent::boundgen::CertificationReport;
use qent::cae::{encode_state, ArchitectureSpec, CaeModel, RunningStats, INIT_RECIPE};
use qent::linalg::{ComplexMatrix, DensityMatrix};
use qent::nn::Tensor;
use qent::pipeline::{EpochLog, Label, SampleResult, ThresholdRecord, TrainConfig};
use qent::states::{hs_random_state, item_rng, Family};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_MAGIC: &[u8; 4] = b"QSD1";
pub const STATE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QCK1";
pub const CHECKPOINT_VERSION: u32 = 1;
/// First line of every error CSV.
pub const CSV_VERSION_LINE: &str = "# qent-errors v1";
pub const CSV_HEADER: [&str; 4] = ["sample_index", "family", "error", "label"];

/// Validity tolerance applied to states read from disk.
const LOAD_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{0}")]
    Corrupt(String),
    #[error("checkpoint does not reproduce its reference output")]
    ReferenceMismatch,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Cae(#[from] qent::cae::CaeError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> Result<(), FormatError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.persist(path).map_err(|e| FormatError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> io::Result<u32> {
        self.bytes().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> io::Result<u64> {
        self.bytes().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> io::Result<f64> {
        self.bytes().map(f64::from_le_bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateFileHeader {
    pub version: u32,
    pub dim_a: u32,
    pub dim_b: u32,
    pub count: u64,
    pub family: Family,
    pub seed: u64,
}

impl StateFileHeader {
    pub const LEN: usize = 36;

    pub fn new(dim_a: usize, dim_b: usize, count: usize, family: Family, seed: u64) -> Self {
        Self {
            version: STATE_VERSION,
            dim_a: dim_a as u32,
            dim_b: dim_b as u32,
            count: count as u64,
            family,
            seed,
        }
    }

    pub fn side(&self) -> usize {
        (self.dim_a * self.dim_b) as usize
    }

    fn write(&self, w: &mut dyn Write) -> io::Result<()> {
        w.write_all(STATE_MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.dim_a.to_le_bytes())?;
        w.write_all(&self.dim_b.to_le_bytes())?;
        w.write_all(&self.count.to_le_bytes())?;
        w.write_all(&self.family.tag().to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())
    }

    fn read<R: Read>(c: &mut Cursor<R>) -> Result<Self, FormatError> {
        let corrupt = |e: io::Error| FormatError::Corrupt(format!("state header: {e}"));
        if &c.bytes::<4>().map_err(corrupt)? != STATE_MAGIC {
            return Err(FormatError::Corrupt("not a QSD1 state file".into()));
        }
        let version = c.u32().map_err(corrupt)?;
        if version != STATE_VERSION {
            return Err(FormatError::Corrupt(format!(
                "unsupported state file version {version}"
            )));
        }
        let dim_a = c.u32().map_err(corrupt)?;
        let dim_b = c.u32().map_err(corrupt)?;
        let count = c.u64().map_err(corrupt)?;
        let tag = c.u32().map_err(corrupt)?;
        let family = Family::from_tag(tag)
            .ok_or_else(|| FormatError::Corrupt(format!("unknown family tag {tag}")))?;
        let seed = c.u64().map_err(corrupt)?;
        if dim_a == 0 || dim_b == 0 {
            return Err(FormatError::Corrupt("zero subsystem dimension".into()));
        }
        Ok(Self {
            version,
            dim_a,
            dim_b,
            count,
            family,
            seed,
        })
    }
}

/// Writes a QSD1 file. Every state must have the header's dimensions.
pub fn write_states(
    path: &Path,
    header: &StateFileHeader,
    states: &[DensityMatrix],
) -> Result<(), FormatError> {
    if header.count != states.len() as u64 {
        return Err(FormatError::Corrupt(format!(
            "header count {} but {} states",
            header.count,
            states.len()
        )));
    }
    if let Some(bad) = states
        .iter()
        .find(|s| s.dim_a() != header.dim_a as usize || s.dim_b() != header.dim_b as usize)
    {
        return Err(FormatError::Corrupt(format!(
            "state of dims {}x{} in a {}x{} file",
            bad.dim_a(),
            bad.dim_b(),
            header.dim_a,
            header.dim_b
        )));
    }
    write_atomic(path, |w| {
        header.write(w)?;
        for s in states {
            for z in s.matrix().as_slice() {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

/// Streaming reader over the states of a QSD1 file.
pub struct StateReader<R> {
    header: StateFileHeader,
    cursor: Cursor<R>,
    remaining: u64,
}

impl StateReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, FormatError> {
        let f = File::open(path).map_err(io_err(path))?;
        Self::new(BufReader::new(f))
    }
}

impl<R: Read> StateReader<R> {
    pub fn new(inner: R) -> Result<Self, FormatError> {
        let mut cursor = Cursor { inner };
        let header = StateFileHeader::read(&mut cursor)?;
        Ok(Self {
            header,
            cursor,
            remaining: header.count,
        })
    }

    pub fn header(&self) -> &StateFileHeader {
        &self.header
    }

    fn next_state(&mut self) -> Result<DensityMatrix, FormatError> {
        let n = self.header.side();
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            let re = self.cursor.f64();
            let im = self.cursor.f64();
            match (re, im) {
                (Ok(re), Ok(im)) => data.push(Complex64::new(re, im)),
                _ => return Err(FormatError::Corrupt("truncated state payload".into())),
            }
        }
        let m =
            ComplexMatrix::from_vec(n, n, data).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        let rho =
            DensityMatrix::new_unchecked(self.header.dim_a as usize, self.header.dim_b as usize, m)
                .map_err(|e| FormatError::Corrupt(e.to_string()))?;
        rho.validate(LOAD_TOL)
            .map_err(|e| FormatError::Corrupt(format!("invalid state: {e}")))?;
        Ok(rho)
    }

    /// Errors if the payload holds bytes beyond the declared count.
    pub fn finish(mut self) -> Result<(), FormatError> {
        let mut extra = [0u8; 1];
        match self.cursor.inner.read(&mut extra) {
            Ok(0) => Ok(()),
            Ok(_) => Err(FormatError::Corrupt(
                "payload longer than header count".into(),
            )),
            Err(e) => Err(FormatError::Corrupt(e.to_string())),
        }
    }
}

impl<R: Read> Iterator for StateReader<R> {
    type Item = Result<DensityMatrix, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let item = self.next_state();
        if item.is_err() {
            self.remaining = 0;
        }
        Some(item)
    }
}

/// Reads a whole QSD1 file, checking that the payload matches the count.
pub fn read_states(path: &Path) -> Result<(StateFileHeader, Vec<DensityMatrix>), FormatError> {
    let mut reader = StateReader::open(path)?;
    let header = *reader.header();
    let states = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    reader.finish()?;
    Ok((header, states))
}

/// A trained model together with its provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CaeModel<f32>,
    pub config: Option<TrainConfig>,
    pub threshold: Option<ThresholdRecord>,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    spec: ArchitectureSpec,
    init_recipe: String,
    config: Option<TrainConfig>,
    threshold: Option<ThresholdRecord>,
    history: Vec<EpochLog>,
    blobs: Vec<BlobEntry>,
}

/// Deterministic reference input stored with each checkpoint.
fn reference_input(d: usize) -> Tensor<f32> {
    let rho = hs_random_state(d * d, &mut item_rng(0x5eed, 0))
        .expect("positive dimension")
        .with_dims(d, d)
        .expect("d * d");
    encode_state::<f32>(&rho)
}

impl Checkpoint {
    pub fn new(model: CaeModel<f32>) -> Self {
        Self {
            model,
            config: None,
            threshold: None,
            history: Vec::new(),
        }
    }

    fn tensors(&self) -> Result<Vec<(String, Tensor<f32>)>, FormatError> {
        let mut out: Vec<(String, Tensor<f32>)> = self
            .model
            .param_names()
            .iter()
            .cloned()
            .zip(self.model.params().iter().cloned())
            .collect();
        for (i, st) in self.model.running_stats().into_iter().enumerate() {
            let len = st.mean.len();
            out.push((
                format!("bn{i}.running_mean"),
                Tensor::from_vec(&[len], st.mean.clone()).expect("1-D"),
            ));
            out.push((
                format!("bn{i}.running_var"),
                Tensor::from_vec(&[len], st.var.clone()).expect("1-D"),
            ));
        }
        let input = reference_input(self.model.spec().d);
        let output = self.model.infer(&input)?;
        out.push(("reference.input".into(), input));
        out.push(("reference.output".into(), output));
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let tensors = self.tensors()?;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            spec: self.model.spec().clone(),
            init_recipe: INIT_RECIPE.to_string(),
            config: self.config.clone(),
            threshold: self.threshold,
            history: self.history.clone(),
            blobs: tensors
                .iter()
                .map(|(name, t)| BlobEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32le".into(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        write_atomic(path, |w| {
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for (_, t) in &tensors {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Ok(())
        })
    }

    /// Loads and checks that the model reproduces its stored reference
    /// output bit for bit.
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let f = File::open(path).map_err(io_err(path))?;
        let mut c = Cursor {
            inner: BufReader::new(f),
        };
        let corrupt = |e: io::Error| FormatError::Corrupt(format!("checkpoint: {e}"));
        if &c.bytes::<4>().map_err(corrupt)? != CHECKPOINT_MAGIC {
            return Err(FormatError::Corrupt("not a checkpoint file".into()));
        }
        let version = c.u32().map_err(corrupt)?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Corrupt(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = c.u64().map_err(corrupt)? as usize;
        let mut json = vec![0u8; len];
        c.inner.read_exact(&mut json).map_err(corrupt)?;
        let meta: CheckpointMeta = serde_json::from_slice(&json)?;
        if meta.init_recipe != INIT_RECIPE {
            return Err(FormatError::Corrupt(format!(
                "unknown init recipe '{}'",
                meta.init_recipe
            )));
        }
        let mut tensors = Vec::with_capacity(meta.blobs.len());
        for b in &meta.blobs {
            if b.dtype != "f32le" {
                return Err(FormatError::Corrupt(format!(
                    "{}: unsupported dtype {}",
                    b.name, b.dtype
                )));
            }
            let n: usize = b.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f32::from_le_bytes(c.bytes().map_err(corrupt)?));
            }
            let t = Tensor::from_vec(&b.shape, data)
                .map_err(|e| FormatError::Corrupt(e.to_string()))?;
            tensors.push((b.name.clone(), t));
        }
        let mut extra = [0u8; 1];
        if c.inner.read(&mut extra).map_err(corrupt)? != 0 {
            return Err(FormatError::Corrupt(
                "trailing bytes after checkpoint payload".into(),
            ));
        }
        let output = tensors.pop().filter(|(n, _)| n == "reference.output");
        let input = tensors.pop().filter(|(n, _)| n == "reference.input");
        let (Some((_, input)), Some((_, output))) = (input, output) else {
            return Err(FormatError::Corrupt("missing reference tensors".into()));
        };
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut pending_mean = None;
        for (name, t) in tensors {
            if name.ends_with(".running_mean") {
                pending_mean = Some(t.data().to_vec());
            } else if name.ends_with(".running_var") {
                let mean = pending_mean.take().ok_or_else(|| {
                    FormatError::Corrupt(format!("{name} without a running mean"))
                })?;
                running.push(RunningStats {
                    mean,
                    var: t.data().to_vec(),
                });
            } else {
                params.push(t);
            }
        }
        let model = CaeModel::from_parts(meta.spec, params, running)?;
        let again = model.infer(&input)?;
        let same = again.shape() == output.shape()
            && again
                .data()
                .iter()
                .zip(output.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(FormatError::ReferenceMismatch);
        }
        Ok(Self {
            model,
            config: meta.config,
            threshold: meta.threshold,
            history: meta.history,
        })
    }
}

/// Writes per-sample results as versioned CSV.
pub fn write_error_csv(path: &Path, samples: &[SampleResult]) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    writeln!(buf, "{CSV_VERSION_LINE}").expect("in-memory write");
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(CSV_HEADER)?;
        for s in samples {
            w.write_record([
                s.sample_index.to_string(),
                s.family.as_str().to_string(),
                s.error.to_string(),
                s.label.as_str().to_string(),
            ])?;
        }
        w.flush().map_err(|e| FormatError::Corrupt(e.to_string()))?;
    }
    write_atomic(path, |w| w.write_all(&buf))
}

pub fn read_error_csv(path: &Path) -> Result<Vec<SampleResult>, FormatError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let body = text
        .strip_prefix(CSV_VERSION_LINE)
        .and_then(|rest| rest.strip_prefix('\n'))
        .ok_or_else(|| FormatError::Corrupt(format!("missing '{CSV_VERSION_LINE}' line")))?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    if r.headers()?.iter().ne(CSV_HEADER) {
        return Err(FormatError::Corrupt("unexpected CSV columns".into()));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |what: &str| {
            FormatError::Corrupt(format!(
                "line {:?}: bad {what}",
                rec.position().map(|p| p.line())
            ))
        };
        let label = match &rec[3] {
            "in_class" => Label::InClass,
            "out_of_class" => Label::OutOfClass,
            _ => return Err(bad("label")),
        };
        out.push(SampleResult {
            sample_index: rec[0].parse().map_err(|_| bad("index"))?,
            family: rec[1].parse().map_err(|_| bad("family"))?,
            error: rec[2].parse().map_err(|_| bad("error"))?,
            label,
        });
    }
    Ok(out)
}

/// One line of a certification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationLine {
    /// Position of the state in the accompanying state file.
    pub index: usize,
    pub restart: usize,
    pub seed: u64,
    pub projected: bool,
    pub best_step: usize,
    pub feasible: bool,
    pub certification: CertificationReport,
    pub verdict: String,
}

pub fn write_jsonl<T: Serialize>(path: &Path, lines: &[T]) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    for l in lines {
        serde_json::to_writer(&mut buf, l)?;
        buf.push(b'\n');
    }
    write_atomic(path, |w| w.write_all(&buf))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, FormatError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(FormatError::from))
        .collect()
}
