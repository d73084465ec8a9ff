//! Versioned text archive of a trained model.
//!
//! ```text
//! molfusion-archive 1
//! sha256 <hex digest of every byte after this line>
//! [meta] <n>          n lines: `task = ..`, `target = <name>` per target, training settings
//! [standardizer] 2    `mean = v ..` and `std = v ..`
//! [vocab] <n>         one token per line, id = line number
//! [pool] <n>          `<smiles>\t<v1>,<v2>,..` demonstration pool
//! [manifest] <n>      `<name> <rows> <cols>` per parameter tensor
//! [params] <n>        `<name> v v ..` row-major values per tensor
//! ```
//!
//! Numbers use Rust's shortest round-trip formatting, so a save/load cycle is
//! bit-exact. The vocab section is absent when the description branch is
//! ablated.

use crate::config::{set_train_key, train_entries};
use crate::model::MolFusionModel;
use crate::numerics::Matrix;
use crate::pipeline::{Standardizer, Task, TrainConfig, TrainedModel};
use crate::textenc::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &str = "molfusion-archive";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArchiveError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("not a model archive")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: header says {expected}, content hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("parameter table disagrees with the configuration at {name}: expected {expected}, archive has {found}")]
    Mismatch { name: String, expected: String, found: String },
}

fn digest(body: &str) -> String {
    hex::encode(Sha256::digest(body.as_bytes()))
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

/// Serializes `m` to the archive text.
pub fn to_text(m: &TrainedModel) -> String {
    let mut meta = vec![format!("task = {}", m.task)];
    meta.extend(m.target_names.iter().map(|n| format!("target = {n}")));
    meta.extend(train_entries(&m.config).into_iter().map(|(k, v)| format!("{k} = {v}")));

    let mut body = String::new();
    let mut section = |name: &str, lines: Vec<String>| {
        let _ = writeln!(body, "[{name}] {}", lines.len());
        for l in lines {
            body.push_str(&l);
            body.push('\n');
        }
    };
    section("meta", meta);
    section(
        "standardizer",
        vec![format!("mean = {}", join(&m.standardizer.mean)), format!("std = {}", join(&m.standardizer.std))],
    );
    if let Some(v) = &m.vocab {
        section("vocab", v.tokens().to_vec());
    }
    section(
        "pool",
        m.pool
            .iter()
            .map(|(s, t)| format!("{s}\t{}", t.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")))
            .collect(),
    );
    let params = m.model.params();
    section(
        "manifest",
        params.iter().map(|p| format!("{} {} {}", p.name, p.value.rows(), p.value.cols())).collect(),
    );
    section("params", params.iter().map(|p| format!("{} {}", p.name, join(p.value.as_slice()))).collect());
    format!("{MAGIC} {VERSION}\nsha256 {}\n{body}", digest(&body))
}

/// Writes atomically: a temporary file in the target directory is renamed
/// over `path`.
pub fn save(m: &TrainedModel, path: &Path) -> Result<(), ArchiveError> {
    let io = |e: std::io::Error| ArchiveError::Io { path: path.to_path_buf(), message: e.to_string() };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(to_text(m).as_bytes()).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainedModel, ArchiveError> {
    let text = std::fs::read_to_string(path).map_err(|e| ArchiveError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    from_text(&text)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str, ArchiveError> {
        let (i, l) = self.inner.next().ok_or(ArchiveError::Malformed { line: self.line + 1, message: "unexpected end of archive".into() })?;
        self.line = i + 3;
        Ok(l)
    }

    fn err(&self, message: impl Into<String>) -> ArchiveError {
        ArchiveError::Malformed { line: self.line, message: message.into() }
    }

    /// Reads a `[name] n` header if the next section is `name`.
    fn section(&mut self, name: &str, optional: bool) -> Result<Option<Vec<&'a str>>, ArchiveError> {
        let mut peek = self.inner.clone();
        let Some((_, header)) = peek.next() else {
            return if optional { Ok(None) } else { Err(self.err(format!("missing [{name}] section"))) };
        };
        let tag = format!("[{name}] ");
        let Some(count) = header.strip_prefix(&tag) else {
            return if optional { Ok(None) } else { Err(self.err(format!("expected [{name}] section"))) };
        };
        self.next()?;
        let n: usize = count.trim().parse().map_err(|_| self.err(format!("bad [{name}] line count")))?;
        (0..n).map(|_| self.next()).collect::<Result<Vec<_>, _>>().map(Some)
    }
}

fn floats(lines: &Lines<'_>, text: &str) -> Result<Vec<f64>, ArchiveError> {
    text.split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|_| lines.err(format!("bad number {v:?}"))))
        .collect()
}

pub fn from_text(text: &str) -> Result<TrainedModel, ArchiveError> {
    let mut head = text.splitn(3, '\n');
    let magic = head.next().unwrap_or("");
    let version = magic.strip_prefix(MAGIC).map(str::trim).ok_or(ArchiveError::BadMagic)?;
    let version: u32 = version.parse().map_err(|_| ArchiveError::BadMagic)?;
    if version != VERSION {
        return Err(ArchiveError::UnsupportedVersion(version));
    }
    let expected = head
        .next()
        .and_then(|l| l.strip_prefix("sha256 "))
        .ok_or(ArchiveError::Malformed { line: 2, message: "missing checksum line".into() })?
        .trim()
        .to_string();
    let body = head.next().unwrap_or("");
    let actual = digest(body);
    if actual != expected {
        return Err(ArchiveError::Checksum { expected, actual });
    }

    let mut lines = Lines { inner: body.lines().enumerate(), line: 2 };
    let mut task = None;
    let mut target_names = Vec::new();
    let mut config = TrainConfig::default();
    for l in lines.section("meta", false)?.unwrap_or_default() {
        let (k, v) = l.split_once(" = ").map(|(k, v)| (k.trim(), v)).ok_or_else(|| lines.err("expected `key = value`"))?;
        match k {
            "task" => task = Some(v.parse::<Task>().map_err(|e| lines.err(e))?),
            "target" => target_names.push(v.to_string()),
            _ => {
                if !set_train_key(&mut config, k, v).map_err(|e| lines.err(e.to_string()))? {
                    return Err(lines.err(format!("unknown meta key {k:?}")));
                }
            }
        }
    }
    let task = task.ok_or_else(|| lines.err("meta lacks the task"))?;
    let c = target_names.len();

    let std_lines = lines.section("standardizer", false)?.unwrap_or_default();
    let field = |prefix: &str| -> Result<Vec<f64>, ArchiveError> {
        let l = std_lines
            .iter()
            .find_map(|l| l.strip_prefix(prefix))
            .ok_or_else(|| lines.err(format!("standardizer lacks {prefix:?}")))?;
        let v = floats(&lines, l)?;
        if v.len() != c {
            return Err(lines.err(format!("standardizer has {} entries for {c} targets", v.len())));
        }
        Ok(v)
    };
    let standardizer = Standardizer { mean: field("mean = ")?, std: field("std = ")? };

    let vocab = lines
        .section("vocab", true)?
        .map(|tokens| Vocabulary::from_tokens(tokens.into_iter().map(str::to_string).collect(), config.max_tokens));
    if vocab.is_some() == config.ablations.seg_off {
        return Err(lines.err("vocab section presence disagrees with the ablations"));
    }

    let mut pool = Vec::new();
    for l in lines.section("pool", false)?.unwrap_or_default() {
        let (s, vals) = l.split_once('\t').ok_or_else(|| lines.err("pool entry lacks a tab"))?;
        let t = floats(&lines, &vals.replace(',', " "))?;
        if t.len() != c {
            return Err(lines.err(format!("pool entry has {} targets, expected {c}", t.len())));
        }
        pool.push((s.to_string(), t));
    }

    let vocab_size = vocab.as_ref().map_or(1, Vocabulary::size);
    let mut model = MolFusionModel::new(config.model_config(vocab_size, c), &mut ChaCha8Rng::seed_from_u64(0));
    let manifest = lines.section("manifest", false)?.unwrap_or_default();
    let values = lines.section("params", false)?.unwrap_or_default();
    let expected_shapes: Vec<(String, usize, usize)> =
        model.params().iter().map(|p| (p.name.clone(), p.value.rows(), p.value.cols())).collect();
    for i in 0..expected_shapes.len().max(manifest.len()) {
        let want = expected_shapes.get(i).map(|(n, r, c)| format!("{n} {r} {c}"));
        let have = manifest.get(i).map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "));
        if want != have {
            return Err(ArchiveError::Mismatch {
                name: expected_shapes.get(i).map_or_else(|| "end of table".into(), |s| s.0.clone()),
                expected: want.unwrap_or_else(|| "no tensor".into()),
                found: have.unwrap_or_else(|| "no tensor".into()),
            });
        }
    }
    if values.len() != expected_shapes.len() {
        return Err(lines.err(format!("{} value rows for {} tensors", values.len(), expected_shapes.len())));
    }
    for (p, row) in model.params_mut().into_iter().zip(values) {
        let (name, rest) = row.split_once(' ').unwrap_or((row, ""));
        if name != p.name {
            return Err(lines.err(format!("values for {name} where {} was expected", p.name)));
        }
        let v = floats(&lines, rest)?;
        let (r, cols) = p.value.shape();
        p.value = Matrix::from_vec(r, cols, v).map_err(|e| lines.err(format!("{name}: {e}")))?;
    }
    Ok(TrainedModel { model, vocab, standardizer, task, target_names, pool, config })
}
