//! Textual checkpoint container.
//!
//! ```text
//! xlcolbert-checkpoint v1
//! name = kd_pc
//! lineage = random(seed=7) > finetune_triples:teacher > kd_representation:kd_pc
//! provenance = xlcolbert distill-pc --seed 7
//! vocab_size = 400
//! hidden = 32
//! out_dim = 16
//! fingerprint = 3f5a…
//! [embed_table]
//! <one row per line, space-separated floats>
//! [projection]
//! <one row per line>
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so a save/load cycle
//! is bit-exact. The fingerprint is recomputed on load and must match.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &str = "xlcolbert-checkpoint v1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub name: String,
    /// Initialization followed by every stage applied, oldest first.
    pub lineage: Vec<String>,
    /// Free-form lines recording how the file was produced.
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(name: impl Into<String>, params: EncoderParams, lineage: Vec<String>) -> Self {
        Checkpoint {
            params,
            meta: CheckpointMeta {
                name: name.into(),
                lineage,
                provenance: Vec::new(),
            },
        }
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut out = format!("{MAGIC}\nname = {}\n", single_line(&self.meta.name));
        let _ = writeln!(out, "lineage = {}", single_line(&self.meta.lineage.join(" > ")));
        for line in &self.meta.provenance {
            let _ = writeln!(out, "provenance = {}", single_line(line));
        }
        let _ = writeln!(out, "vocab_size = {}", p.vocab_size());
        let _ = writeln!(out, "hidden = {}", p.hidden());
        let _ = writeln!(out, "out_dim = {}", p.out_dim());
        let _ = writeln!(out, "fingerprint = {}", p.fingerprint());
        write_matrix(&mut out, "embed_table", p.embed_table());
        write_matrix(&mut out, "projection", p.projection());
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("missing `{MAGIC}` header"),
                })
            }
        }
        let mut meta = CheckpointMeta::default();
        let (mut vocab, mut hidden, mut out_dim, mut fingerprint) = (None, None, None, None);
        let mut section_start = None;
        for (no, line) in lines.by_ref() {
            if line == "[embed_table]" {
                section_start = Some(no);
                break;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| parse_err(no, "expected `key = value`".into()))?;
            let count = |v: &str| v.parse::<usize>().map_err(|e| parse_err(no, format!("{key}: {e}")));
            match key {
                "name" => meta.name = value.to_string(),
                "lineage" => {
                    meta.lineage = value.split(" > ").filter(|s| !s.is_empty()).map(str::to_string).collect()
                }
                "provenance" => meta.provenance.push(value.to_string()),
                "vocab_size" => vocab = Some(count(value)?),
                "hidden" => hidden = Some(count(value)?),
                "out_dim" => out_dim = Some(count(value)?),
                "fingerprint" => fingerprint = Some(value.to_string()),
                other => return Err(parse_err(no, format!("unknown key `{other}`"))),
            }
        }
        let start = section_start.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "missing [embed_table] section".into(),
        })?;
        let missing = |what: &str| Error::Format {
            path: path.to_path_buf(),
            message: format!("missing `{what}`"),
        };
        let vocab = vocab.ok_or_else(|| missing("vocab_size"))?;
        let hidden = hidden.ok_or_else(|| missing("hidden"))?;
        let out_dim = out_dim.ok_or_else(|| missing("out_dim"))?;
        let fingerprint = fingerprint.ok_or_else(|| missing("fingerprint"))?;

        let embed = read_matrix(&mut lines, vocab, hidden, start, path)?;
        match lines.next() {
            Some((_, "[projection]")) => {}
            other => {
                return Err(parse_err(
                    other.map_or(start + vocab + 1, |(n, _)| n),
                    "expected [projection]".into(),
                ))
            }
        }
        let projection = read_matrix(&mut lines, hidden, out_dim, start + vocab + 1, path)?;
        if let Some((no, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(parse_err(no, "trailing content".into()));
        }
        let params = EncoderParams::new(embed, projection)?;
        let actual = params.fingerprint();
        if actual != fingerprint {
            return Err(Error::CorruptCheckpoint {
                path: path.to_path_buf(),
                stored: fingerprint,
                actual,
            });
        }
        Ok(Checkpoint { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

fn single_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

fn write_matrix(out: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(out, "[{name}]");
    for row in m.iter_rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v:e}");
        }
        out.push('\n');
    }
}

fn read_matrix<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    rows: usize,
    cols: usize,
    header_line: usize,
    path: &Path,
) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (no, line) = lines.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: header_line + r + 1,
            message: format!("expected {rows} rows, found {r}"),
        })?;
        let before = data.len();
        for field in line.split_ascii_whitespace() {
            data.push(field.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: no,
                message: format!("`{field}`: {e}"),
            })?);
        }
        if data.len() - before != cols {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: no,
                message: format!("expected {cols} values, found {}", data.len() - before),
            });
        }
    }
    Matrix::from_vec(rows, cols, data)
}
