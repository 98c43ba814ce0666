//! On-disk formats.
//!
//! # HeadDump (`.kvhd`)
//!
//! One attention head per file, all integers and floats little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `b"KVHD"`               |
//! | 4      | 4    | format version (u32, = 1)     |
//! | 8      | 4    | `n` cache entries (u32)       |
//! | 12     | 4    | `n'` window queries (u32)     |
//! | 16     | 4    | `d_h` head dim (u32)          |
//! | 20     | 4    | `d` model dim (u32)           |
//! | 24     | 4    | layer (u32)                   |
//! | 28     | 4    | head (u32)                    |
//! | 32     | ...  | f32 tensors, row-major        |
//!
//! Tensors follow in order: `q_window [n'×d_h]`, `keys [n×d_h]`,
//! `values [n×d_h]`, `w_o_slice [d_h×d]`.
//!
//! A corpus is a directory of layers, `layer_{L:03}/head_{H:03}.kvhd`.
//!
//! # Reports
//!
//! Comma-separated with a header row. Leading `# key=value` lines record the
//! resolved configuration and are skipped by the readers here.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eviction::HeadSnapshot;
use crate::tensor::Matrix;
use crate::validation::{AssumptionReport, PerturbationReport, ReportRow};

pub const MAGIC: [u8; 4] = *b"KVHD";
pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[FORMAT_VERSION];
pub const HEADER_LEN: usize = 32;
pub const DUMP_EXTENSION: &str = "kvhd";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub version: u32,
    pub n: u32,
    pub window: u32,
    pub head_dim: u32,
    pub model_dim: u32,
    pub layer: u32,
    pub head: u32,
}

impl DumpHeader {
    // u128: arbitrary u32 fields must not overflow
    pub fn payload_floats(&self) -> u128 {
        let (n, w, dh, d) = (
            u128::from(self.n),
            u128::from(self.window),
            u128::from(self.head_dim),
            u128::from(self.model_dim),
        );
        w * dh + 2 * n * dh + dh * d
    }

    pub fn file_len(&self) -> u128 {
        HEADER_LEN as u128 + 4 * self.payload_floats()
    }
}

fn u32_field(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::InvalidArgument(format!("{what} {x} does not fit in u32")))
}

/// Serializes a snapshot into HeadDump bytes.
pub fn encode_head_dump(snap: &HeadSnapshot) -> Result<Vec<u8>> {
    snap.validate()?;
    let header = DumpHeader {
        version: FORMAT_VERSION,
        n: u32_field(snap.entries(), "n")?,
        window: u32_field(snap.window_rows(), "window")?,
        head_dim: u32_field(snap.head_dim(), "head dim")?,
        model_dim: u32_field(snap.model_dim(), "model dim")?,
        layer: snap.layer,
        head: snap.head,
    };
    let mut out = Vec::with_capacity(header.file_len() as usize);
    out.extend_from_slice(&MAGIC);
    for v in [
        header.version,
        header.n,
        header.window,
        header.head_dim,
        header.model_dim,
        header.layer,
        header.head,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for m in [&snap.q_window, &snap.keys, &snap.values, &snap.w_o_slice] {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Parses HeadDump bytes; `path` is only used in diagnostics.
pub fn decode_head_dump(bytes: &[u8], path: &Path) -> Result<HeadSnapshot> {
    if bytes.len() < 8 || bytes[..4] != MAGIC {
        return Err(Error::NotAHeadDump {
            path: path.to_path_buf(),
        });
    }
    let version = read_u32(bytes, 4);
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: SUPPORTED_VERSIONS,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let header = DumpHeader {
        version,
        n: read_u32(bytes, 8),
        window: read_u32(bytes, 12),
        head_dim: read_u32(bytes, 16),
        model_dim: read_u32(bytes, 20),
        layer: read_u32(bytes, 24),
        head: read_u32(bytes, 28),
    };
    if header.file_len() != bytes.len() as u128 {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected: u64::try_from(header.file_len()).unwrap_or(u64::MAX),
            actual: bytes.len() as u64,
        });
    }
    let (n, w, dh, d) = (
        header.n as usize,
        header.window as usize,
        header.head_dim as usize,
        header.model_dim as usize,
    );
    let mut offset = HEADER_LEN;
    let mut tensor = |name: &'static str, rows: usize, cols: usize| -> Result<Matrix> {
        let len = rows * cols;
        let data: Vec<f32> = bytes[offset..offset + 4 * len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * len;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePayload {
                path: path.to_path_buf(),
                tensor: name,
            });
        }
        Matrix::new(rows, cols, data)
    };
    let q_window = tensor("q_window", w, dh)?;
    let keys = tensor("keys", n, dh)?;
    let values = tensor("values", n, dh)?;
    let w_o_slice = tensor("w_o_slice", dh, d)?;
    HeadSnapshot::new(header.layer, header.head, q_window, keys, values, w_o_slice).map_err(|e| {
        Error::Report {
            path: path.to_path_buf(),
            message: format!("invalid head: {e}"),
        }
    })
}

/// Writes `bytes` to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_head_dump(snap: &HeadSnapshot, path: &Path) -> Result<()> {
    write_atomic(path, &encode_head_dump(snap)?)
}

pub fn read_head_dump(path: &Path) -> Result<HeadSnapshot> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_head_dump(&bytes, path)
}

pub fn dump_path(root: &Path, layer: u32, head: u32) -> PathBuf {
    root.join(format!("layer_{layer:03}"))
        .join(format!("head_{head:03}.{DUMP_EXTENSION}"))
}

/// Writes every head to its place in a corpus tree.
pub fn write_corpus(root: &Path, heads: &[HeadSnapshot]) -> Result<()> {
    for h in heads {
        write_head_dump(h, &dump_path(root, h.layer, h.head))?;
    }
    Ok(())
}

/// All `.kvhd` files under `root` (one level of layer directories, or flat),
/// sorted by path.
pub fn list_dumps(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let visit = |dir: &Path, out: &mut Vec<PathBuf>, recurse: bool| -> Result<Vec<PathBuf>> {
        let mut subdirs = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() && recurse {
                subdirs.push(p);
            } else if p.extension().is_some_and(|e| e == DUMP_EXTENSION) {
                out.push(p);
            }
        }
        Ok(subdirs)
    };
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let subdirs = visit(root, &mut out, true)?;
    for d in subdirs {
        visit(&d, &mut out, false)?;
    }
    out.sort();
    Ok(out)
}

/// Reads a corpus and returns heads sorted by `(layer, head)`.
pub fn read_corpus(root: &Path) -> Result<Vec<HeadSnapshot>> {
    let paths = list_dumps(root)?;
    if paths.is_empty() {
        return Err(Error::Report {
            path: root.to_path_buf(),
            message: "no .kvhd files found".into(),
        });
    }
    let mut heads = paths
        .iter()
        .map(|p| read_head_dump(p))
        .collect::<Result<Vec<_>>>()?;
    heads.sort_by_key(|h| (h.layer, h.head));
    if let Some(w) = heads.windows(2).find(|w| (w[0].layer, w[0].head) == (w[1].layer, w[1].head)) {
        return Err(Error::Report {
            path: root.to_path_buf(),
            message: format!("layer {} head {} appears more than once", w[0].layer, w[0].head),
        });
    }
    Ok(heads)
}

/// Groups heads (sorted by layer) into per-layer slices.
pub fn group_by_layer(heads: &[HeadSnapshot]) -> Vec<&[HeadSnapshot]> {
    heads.chunk_by(|a, b| a.layer == b.layer).collect()
}

fn config_preamble(config: &[(String, String)]) -> String {
    config
        .iter()
        .map(|(k, v)| format!("# {k}={v}\n"))
        .collect()
}

fn csv_bytes<T: Serialize>(config: &[(String, String)], rows: &[T]) -> Result<Vec<u8>> {
    let mut out = config_preamble(config).into_bytes();
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    out.extend(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?);
    Ok(out)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes.as_slice());
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Report {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Any serializable rows as a CSV report with a config preamble.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], config: &[(String, String)]) -> Result<()> {
    write_atomic(path, &csv_bytes(config, rows)?)
}

/// Leading `# key=value` lines of a report.
pub fn read_report_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map_while(|l| l.strip_prefix("# "))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

/// Column order: layer, head, token_step, budget_fraction, l_baseline,
/// l_ours, theta_baseline, theta_ours, improved.
pub fn write_perturbation_report(
    path: &Path,
    report: &PerturbationReport,
    config: &[(String, String)],
) -> Result<()> {
    write_atomic(path, &csv_bytes(config, &report.rows)?)
}

pub fn read_perturbation_report(path: &Path) -> Result<PerturbationReport> {
    Ok(PerturbationReport {
        rows: read_csv::<ReportRow>(path)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionRow {
    pub layer: u32,
    pub head: u32,
    pub sigma: f64,
    pub satisfied: bool,
}

/// Column order: layer, head, sigma, satisfied. `heads` gives the
/// `(layer, head)` of each entry in `report.sigma`.
pub fn write_assumption_report(
    path: &Path,
    report: &AssumptionReport,
    heads: &[(u32, u32)],
    config: &[(String, String)],
) -> Result<()> {
    if heads.len() != report.sigma.len() {
        return Err(Error::Shape(format!(
            "{} head ids for {} sigma values",
            heads.len(),
            report.sigma.len()
        )));
    }
    let rows: Vec<AssumptionRow> = heads
        .iter()
        .zip(&report.sigma)
        .map(|(&(layer, head), &sigma)| AssumptionRow {
            layer,
            head,
            sigma,
            satisfied: sigma > 0.5,
        })
        .collect();
    let mut config = config.to_vec();
    config.push(("fraction_satisfied".into(), report.fraction_satisfied.to_string()));
    write_atomic(path, &csv_bytes(&config, &rows)?)
}

pub fn read_assumption_rows(path: &Path) -> Result<Vec<AssumptionRow>> {
    read_csv(path)
}

/// One row per evicted head. Index lists are space-separated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub layer: u32,
    pub head: u32,
    pub entries: usize,
    pub budget: usize,
    pub stage1: String,
    pub stage2: String,
    pub kept: String,
}

pub fn format_indices(indices: &[usize]) -> String {
    indices
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_indices(s: &str) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad index {t:?}")))
        })
        .collect()
}

/// Column order: layer, head, entries, budget, stage1, stage2, kept.
pub fn write_mask_report(path: &Path, rows: &[MaskRow], config: &[(String, String)]) -> Result<()> {
    write_atomic(path, &csv_bytes(config, rows)?)
}

pub fn read_mask_report(path: &Path) -> Result<Vec<MaskRow>> {
    read_csv(path)
}

/// Pretty-printed JSON summary.
pub fn write_summary<T: Serialize>(path: &Path, summary: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(summary).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
