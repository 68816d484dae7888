//! File formats: subject and episode CSVs, the JSON run config, and the
//! binary draws file.
//!
//! The draws file is columnar. After a fixed preamble (magic, version, seed,
//! SHA-256 of the model spec, header length) comes a JSON header and then,
//! chain by chain, every parameter column as little-endian `f64`, the
//! per-transition statistics and the adapted metric. Values are stored
//! bit-for-bit, so a round trip is lossless.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{DataError, Dataset, Episode, ModelSpec, SubjectRecord};
use crate::sampler::{
    AdaptationSummary, ChainDraws, PosteriorDraws, SamplerConfig, TransitionStats,
};

pub const INTERCEPT: &str = "intercept";
pub const SUBJECTS_HEADER: [&str; 2] = ["subject_id", "y"];
pub const EPISODES_HEADER: [&str; 3] = ["subject_id", "start_minute", "duration_minutes"];

const MAGIC: &[u8; 8] = b"FLAMEDRW";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{}, line {line}: {message}", path.display())]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Header { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{}: not a draws file ({message})", path.display())]
    Format { path: PathBuf, message: String },
    #[error(
        "{}: draws were produced under a different model spec \
         (file {stored}, current {current}); refit before summarizing",
        path.display()
    )]
    HashMismatch {
        path: PathBuf,
        stored: String,
        current: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

impl IoError {
    /// Whether the error is about the content of an input rather than the
    /// file system.
    pub fn is_validation(&self) -> bool {
        !matches!(self, IoError::File { .. })
    }
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| IoError::File {
            path: path.to_path_buf(),
            source,
        })
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>, IoError> {
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open(path)?))
}

fn parse_f64(path: &Path, line: u64, column: &str, cell: &str) -> Result<f64, IoError> {
    let row_err = |message: String| IoError::Row {
        path: path.to_path_buf(),
        line,
        message,
    };
    if cell.is_empty() {
        return Err(row_err(format!("missing value in column '{column}'")));
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| row_err(format!("column '{column}': '{cell}' is not a number")))?;
    if !v.is_finite() {
        return Err(row_err(format!(
            "column '{column}': '{cell}' is not finite"
        )));
    }
    Ok(v)
}

fn check_header(path: &Path, found: &csv::StringRecord, expected: &[&str]) -> Result<(), IoError> {
    let ok = found.len() >= expected.len() && expected.iter().zip(found).all(|(e, f)| *e == f);
    if ok {
        Ok(())
    } else {
        Err(IoError::Header {
            path: path.to_path_buf(),
            message: format!(
                "header must start with {}, found {}",
                expected.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        })
    }
}

/// Reads the subjects and episodes files and joins them. Subject order is
/// the subjects-file order; episodes keep their file order within a subject.
/// An `intercept` column of ones is prepended unless one is present.
pub fn load_dataset(subjects_path: &Path, episodes_path: &Path) -> Result<Dataset<f64>, IoError> {
    let mut rdr = csv_reader(subjects_path)?;
    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IoError::Csv {
            path: path.clone(),
            source,
        }
    };
    let header = rdr.headers().map_err(csv_err(subjects_path))?.clone();
    check_header(subjects_path, &header, &SUBJECTS_HEADER)?;
    let covariates: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let add_intercept = !covariates.iter().any(|c| c == INTERCEPT);
    let mut names = Vec::with_capacity(covariates.len() + 1);
    if add_intercept {
        names.push(INTERCEPT.to_string());
    }
    names.extend(covariates.iter().cloned());

    let mut subjects = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err(subjects_path))?;
        let line = record.position().map_or(0, |p| p.line());
        let row_err = |message: String| IoError::Row {
            path: subjects_path.to_path_buf(),
            line,
            message,
        };
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(row_err("missing subject_id".into()));
        }
        let y = match &record[1] {
            "0" => false,
            "1" => true,
            other => return Err(row_err(format!("y must be 0 or 1, found '{other}'"))),
        };
        let mut x = Vec::with_capacity(names.len());
        if add_intercept {
            x.push(1.0);
        }
        for (cell, column) in record.iter().skip(2).zip(&covariates) {
            x.push(parse_f64(subjects_path, line, column, cell)?);
        }
        if index.insert(id.clone(), subjects.len()).is_some() {
            return Err(row_err(format!("duplicate subject_id '{id}'")));
        }
        subjects.push(SubjectRecord {
            id,
            y,
            x,
            episodes: Vec::new(),
        });
    }

    let mut rdr = csv_reader(episodes_path)?;
    let header = rdr.headers().map_err(csv_err(episodes_path))?.clone();
    if !header.is_empty() {
        check_header(episodes_path, &header, &EPISODES_HEADER)?;
    }
    for record in rdr.records() {
        let record = record.map_err(csv_err(episodes_path))?;
        let line = record.position().map_or(0, |p| p.line());
        let row_err = |message: String| IoError::Row {
            path: episodes_path.to_path_buf(),
            line,
            message,
        };
        let id = &record[0];
        let Some(&i) = index.get(id) else {
            return Err(row_err(format!(
                "subject_id '{id}' is not in the subjects file"
            )));
        };
        let start = parse_f64(episodes_path, line, EPISODES_HEADER[1], &record[1])?;
        let duration = parse_f64(episodes_path, line, EPISODES_HEADER[2], &record[2])?;
        if start < 0.0 {
            return Err(row_err(format!("start_minute must be >= 0, found {start}")));
        }
        if duration <= 0.0 {
            return Err(row_err(format!(
                "duration_minutes must be > 0, found {duration}"
            )));
        }
        subjects[i]
            .episodes
            .push(Episode::new(duration, Some(start)));
    }
    Ok(Dataset::new(subjects, names)?)
}

/// Writes the subjects file. A leading `intercept` column is left out since
/// [`load_dataset`] restores it.
pub fn write_subjects(path: &Path, ds: &Dataset<f64>) -> Result<(), IoError> {
    let skip = usize::from(ds.covariate_names().first().map(String::as_str) == Some(INTERCEPT));
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let header: Vec<&str> = SUBJECTS_HEADER
        .iter()
        .copied()
        .chain(ds.covariate_names()[skip..].iter().map(String::as_str))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for s in ds.subjects() {
        let mut row = vec![s.id.clone(), u8::from(s.y).to_string()];
        // Display for f64 is the shortest string that parses back exactly
        row.extend(s.x[skip..].iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the long-format episodes file, one row per episode.
pub fn write_episodes(path: &Path, ds: &Dataset<f64>) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    w.write_record(EPISODES_HEADER).map_err(csv_err)?;
    for s in ds.subjects() {
        for e in &s.episodes {
            let start = e.start.unwrap_or(0.0);
            w.write_record([s.id.clone(), start.to_string(), e.duration.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Output settings of a run.
/// Writes serializable rows as CSV with a header taken from the field names.
pub fn write_csv_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|source| IoError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    }
    w.flush().map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub out_dir: PathBuf,
    /// Spacing of the RAF grid in minutes.
    pub grid_step: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("flame-out"),
            grid_step: 0.1,
        }
    }
}

/// JSON run configuration. Every section is optional; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSpec<f64>,
    pub sampler: SamplerConfig,
    pub output: OutputConfig,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    serde_json::from_reader(BufReader::new(open(path)?)).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|source| IoError::File {
            path: path.to_path_buf(),
            source,
        })
}

pub fn read_run_config(path: &Path) -> Result<RunConfig, IoError> {
    read_json(path)
}

/// SHA-256 of the model spec's JSON form, hex encoded.
pub fn config_hash(spec: &ModelSpec<f64>) -> String {
    let json = serde_json::to_vec(spec).expect("model spec serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DrawsHeader {
    model: ModelSpec<f64>,
    sampler: SamplerConfig,
    covariate_names: Vec<String>,
    names: Vec<String>,
    chains: usize,
    samples: usize,
    dense_metric: bool,
}

/// Everything `summarize` and `contrast` need from a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawsFile {
    pub model: ModelSpec<f64>,
    pub sampler: SamplerConfig,
    pub covariate_names: Vec<String>,
    /// Constrained draws, columns `[beta..., gamma[1..K], tau]`.
    pub draws: PosteriorDraws<f64>,
}

impl DrawsFile {
    pub fn config_hash(&self) -> String {
        config_hash(&self.model)
    }

    /// Refuses draws produced under a different model spec.
    pub fn check_model(&self, path: &Path, current: &ModelSpec<f64>) -> Result<(), IoError> {
        let stored = self.config_hash();
        let current = config_hash(current);
        if stored == current {
            Ok(())
        } else {
            Err(IoError::HashMismatch {
                path: path.to_path_buf(),
                stored,
                current,
            })
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let file_err = |source| IoError::File {
            path: path.to_path_buf(),
            source,
        };
        let mut w = create(path)?;
        let chains = self.draws.chains();
        let header = DrawsHeader {
            model: self.model.clone(),
            sampler: self.sampler.clone(),
            covariate_names: self.covariate_names.clone(),
            names: self.draws.names().to_vec(),
            chains: chains.len(),
            samples: self.draws.n_samples(),
            dense_metric: chains.iter().any(|c| c.adaptation.inv_mass_dense.is_some()),
        };
        let json = serde_json::to_vec(&header).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let hash = self.config_hash();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.sampler.seed.to_le_bytes());
        buf.extend_from_slice(hash.as_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let dim = self.draws.dim();
        for c in chains {
            for j in 0..dim {
                for row in c.values.chunks_exact(dim) {
                    buf.extend_from_slice(&row[j].to_le_bytes());
                }
            }
            for s in &c.stats {
                buf.push(u8::from(s.divergent));
                buf.extend_from_slice(&s.tree_depth.to_le_bytes());
                buf.extend_from_slice(&s.n_leapfrog.to_le_bytes());
                for v in [s.step_size, s.accept_stat, s.energy] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            let a = &c.adaptation;
            buf.extend_from_slice(&a.step_size.to_le_bytes());
            for v in a.inv_mass.iter().chain(a.inv_mass_dense.iter().flatten()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).and_then(|_| w.flush()).map_err(file_err)
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let mut bytes = Vec::new();
        open(path)?
            .read_to_end(&mut bytes)
            .map_err(|source| IoError::File {
                path: path.to_path_buf(),
                source,
            })?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if cur.take(MAGIC.len())? != MAGIC {
            return Err(cur.fail("bad magic"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(cur.fail(&format!("unsupported version {version}")));
        }
        let seed = cur.u64()?;
        let hash = String::from_utf8(cur.take(64)?.to_vec())
            .map_err(|_| cur.fail("config hash is not text"))?;
        let len = usize::try_from(cur.u64()?).map_err(|_| cur.fail("header too long"))?;
        let header: DrawsHeader =
            serde_json::from_slice(cur.take(len)?).map_err(|source| IoError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        if header.sampler.seed != seed {
            return Err(cur.fail("seed in preamble and header disagree"));
        }
        if config_hash(&header.model) != hash {
            return Err(cur.fail("config hash does not match the embedded model spec"));
        }
        let dim = header.names.len();
        let n = header.samples;
        let mut chains = Vec::with_capacity(header.chains);
        for _ in 0..header.chains {
            let mut values = vec![0.0; n * dim];
            for j in 0..dim {
                for i in 0..n {
                    values[i * dim + j] = cur.f64()?;
                }
            }
            let mut stats = Vec::with_capacity(n);
            for _ in 0..n {
                stats.push(TransitionStats {
                    divergent: cur.take(1)?[0] != 0,
                    tree_depth: cur.u32()?,
                    n_leapfrog: cur.u32()?,
                    step_size: cur.f64()?,
                    accept_stat: cur.f64()?,
                    energy: cur.f64()?,
                });
            }
            let step_size = cur.f64()?;
            // the metric lives on the unconstrained scale, same dimension
            let inv_mass = (0..dim).map(|_| cur.f64()).collect::<Result<Vec<_>, _>>()?;
            let inv_mass_dense = if header.dense_metric {
                Some(
                    (0..dim * dim)
                        .map(|_| cur.f64())
                        .collect::<Result<Vec<_>, _>>()?,
                )
            } else {
                None
            };
            chains.push(ChainDraws {
                values,
                stats,
                adaptation: AdaptationSummary {
                    step_size,
                    inv_mass,
                    inv_mass_dense,
                },
            });
        }
        if cur.pos != bytes.len() {
            return Err(cur.fail("trailing bytes"));
        }
        Ok(Self {
            model: header.model,
            sampler: header.sampler,
            covariate_names: header.covariate_names,
            draws: PosteriorDraws::new(header.names, chains),
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, message: &str) -> IoError {
        IoError::Format {
            path: self.path.to_path_buf(),
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.fail("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_episodes_file_gives_no_episodes() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(
            dir.path(),
            "s.csv",
            "subject_id,y,age\na,0,1.5\nb,1,2\nc,0,3\n",
        );
        let e = write(
            dir.path(),
            "e.csv",
            "subject_id,start_minute,duration_minutes\n",
        );
        let ds = load_dataset(&s, &e).unwrap();
        assert_eq!(ds.n_subjects(), 3);
        assert!(ds.subjects().iter().all(|s| s.episodes.is_empty()));
        assert_eq!(ds.covariate_names(), ["intercept", "age"]);
        assert_eq!(ds.subjects()[0].x, [1.0, 1.5]);
        // a completely empty file is also accepted
        let e = write(dir.path(), "e2.csv", "");
        assert_eq!(load_dataset(&s, &e).unwrap().n_subjects(), 3);
    }

    #[test]
    fn row_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "s.csv", "subject_id,y\na,0\nb,1\n");
        let e = write(
            dir.path(),
            "e.csv",
            "subject_id,start_minute,duration_minutes\na,0,2\nb,5,0\n",
        );
        let err = load_dataset(&s, &e).unwrap_err();
        assert!(matches!(err, IoError::Row { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("line 3"));

        let e = write(
            dir.path(),
            "e.csv",
            "subject_id,start_minute,duration_minutes\nzz,0,2\n",
        );
        let err = load_dataset(&s, &e).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("zz"), "{err}");

        let bad_y = write(dir.path(), "s2.csv", "subject_id,y\na,0\nb,2\n");
        let err = load_dataset(&bad_y, &e).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("0 or 1"), "{err}");

        let missing = write(dir.path(), "s3.csv", "subject_id,y,age\na,0,\n");
        let err = load_dataset(&missing, &e).unwrap_err().to_string();
        assert!(err.contains("missing value"), "{err}");

        let dup = write(dir.path(), "s4.csv", "subject_id,y\na,0\na,1\n");
        assert!(load_dataset(&dup, &e).is_err());

        let header = write(dir.path(), "s5.csv", "id,y\na,0\n");
        assert!(matches!(
            load_dataset(&header, &e),
            Err(IoError::Header { .. })
        ));
    }

    #[test]
    fn run_config_rejects_unknown_keys_and_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(
            dir.path(),
            "c.json",
            r#"{"model": {"basis_size": 20, "domain_hi": 75.0}, "sampler": {"chains": 2}}"#,
        );
        let cfg = read_run_config(&ok).unwrap();
        assert_eq!(cfg.model.basis_size, 20);
        assert_eq!(cfg.model.domain_hi, 75.0);
        assert_eq!(cfg.model.gamma1_prior_sd, 1e-3);
        assert_eq!(cfg.sampler.chains, 2);
        assert_eq!(cfg.sampler.warmup, 1000);
        let bad = write(dir.path(), "b.json", r#"{"model": {"K": 20}}"#);
        assert!(matches!(read_run_config(&bad), Err(IoError::Json { .. })));
        let bad = write(dir.path(), "b2.json", r#"{"extra": 1}"#);
        assert!(read_run_config(&bad).is_err());
    }

    #[test]
    fn config_hash_tracks_every_field() {
        let a = ModelSpec::<f64>::default();
        let b = ModelSpec {
            tau_cauchy_scale: 1.0 + 1e-12,
            ..a.clone()
        };
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
