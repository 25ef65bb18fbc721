//! On-disk formats: interaction lists, `GTCMAT` feature matrices, split
//! files, ground-truth sidecars and model checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use gtc_core::dataset::{GroundTruth, SyntheticSpec};
use gtc_core::model::GtcModel;
use gtc_core::{ContentFeatures, InteractionDataset, Matrix, SplitTag, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("{source_name}: line {line}: {message}")]
    Line {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{source_name}: {message}")]
    Invalid { source_name: String, message: String },
}

fn invalid(source_name: &str, message: impl Into<String>) -> FormatError {
    FormatError::Invalid {
        source_name: source_name.to_string(),
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------------------
// Interactions

/// `(user_id, item_id)` pairs from whitespace-separated lines. Blank lines and
/// `#` comments are skipped; columns past the second are ignored.
pub fn parse_interactions(text: &str, source_name: &str) -> Result<Vec<(String, String)>, FormatError> {
    let mut pairs = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        match (cols.next(), cols.next()) {
            (Some(u), Some(i)) => pairs.push((u.to_string(), i.to_string())),
            _ => {
                return Err(FormatError::Line {
                    source_name: source_name.to_string(),
                    line: k + 1,
                    message: "expected `user_id<TAB>item_id`".into(),
                })
            }
        }
    }
    Ok(pairs)
}

/// Reads an interaction file and applies `k_core` filtering.
pub fn load_interactions(path: &Path, k_core: usize) -> Result<InteractionDataset> {
    let pairs = parse_interactions(&read_text(path)?, &path.display().to_string())?;
    InteractionDataset::from_raw_pairs(pairs, k_core).with_context(|| format!("loading {}", path.display()))
}

pub fn interactions_text(ds: &InteractionDataset) -> String {
    let (users, items) = (ds.user_labels(), ds.item_labels());
    let mut out = String::new();
    for &(u, i) in ds.interactions() {
        let _ = writeln!(out, "{}\t{}", users[u], items[i]);
    }
    out
}

pub fn write_interactions(path: &Path, ds: &InteractionDataset) -> Result<()> {
    write_file(path, interactions_text(ds))
}

// ---------------------------------------------------------------------------
// GTCMAT

const MATRIX_MAGIC: &str = "GTCMAT";

/// Header line then little-endian `f32` values, row-major.
pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = format!("{MATRIX_MAGIC} {} {}\n", m.rows(), m.cols()).into_bytes();
    out.reserve(m.as_slice().len() * 4);
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8], source_name: &str) -> Result<Matrix, FormatError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| invalid(source_name, "missing GTCMAT header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| invalid(source_name, "header is not UTF-8"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (rows, cols) = match fields.as_slice() {
        [MATRIX_MAGIC, r, c] => match (r.parse::<usize>(), c.parse::<usize>()) {
            (Ok(r), Ok(c)) => (r, c),
            _ => return Err(invalid(source_name, format!("bad header `{header}`"))),
        },
        _ => return Err(invalid(source_name, format!("bad header `{header}`"))),
    };
    let payload = &bytes[nl + 1..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| invalid(source_name, "header dimensions overflow"))?;
    if payload.len() != expected {
        return Err(invalid(
            source_name,
            format!("header says {rows}×{cols} ({expected} bytes) but payload has {} bytes", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(invalid(
                source_name,
                format!("non-finite value at row {}, column {}", k / cols, k % cols),
            ));
        }
        data.push(v as f64);
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_file(path, encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(decode_matrix(&bytes, &path.display().to_string())?)
}

/// Lines a feature table up with the dataset's items.
///
/// When every item label is an integer below the row count, row `id` is taken
/// for each item. Otherwise the table must already have one row per item, in
/// dataset order.
pub fn align_features(m: &Matrix, ds: &InteractionDataset, what: &str) -> Result<Matrix> {
    let ids: Option<Vec<usize>> = ds.item_labels().iter().map(|l| l.parse::<usize>().ok()).collect();
    if let Some(ids) = ids {
        if let Some(&bad) = ids.iter().find(|&&id| id >= m.rows()) {
            bail!(
                "{what} features have {} rows but item id {bad} needs row {bad} ({} items in dataset)",
                m.rows(),
                ds.n_items()
            );
        }
        return Ok(m.gather_rows(&ids));
    }
    if m.rows() != ds.n_items() {
        bail!("{what} features have {} rows but dataset has {} items", m.rows(), ds.n_items());
    }
    Ok(m.clone())
}

pub fn load_features(visual: &Path, textual: &Path, ds: &InteractionDataset) -> Result<ContentFeatures> {
    let v = align_features(&read_matrix(visual)?, ds, "visual")?;
    let t = align_features(&read_matrix(textual)?, ds, "textual")?;
    Ok(ContentFeatures::new(v, t, ds.n_items())?)
}

// ---------------------------------------------------------------------------
// Split

/// `user<TAB>item<TAB>tag` per interaction, in dataset order.
pub fn split_text(ds: &InteractionDataset) -> Result<String> {
    let tags = ds.split_labels().ok_or_else(|| anyhow!("dataset has no split"))?;
    let (users, items) = (ds.user_labels(), ds.item_labels());
    let mut out = String::new();
    for (&(u, i), tag) in ds.interactions().iter().zip(tags) {
        let _ = writeln!(out, "{}\t{}\t{}", users[u], items[i], tag.as_str());
    }
    Ok(out)
}

pub fn write_split(path: &Path, ds: &InteractionDataset) -> Result<()> {
    write_file(path, split_text(ds)?)
}

/// Applies tags from a split file; every interaction must be listed.
pub fn apply_split(ds: InteractionDataset, text: &str, source_name: &str) -> Result<InteractionDataset> {
    let mut tags: HashMap<(&str, &str), SplitTag> = HashMap::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let tag = match cols.as_slice() {
            [u, i, t] => SplitTag::parse(t.trim()).map(|tag| ((*u, *i), tag)),
            _ => None,
        };
        let (key, tag) = tag.ok_or_else(|| FormatError::Line {
            source_name: source_name.to_string(),
            line: k + 1,
            message: "expected `user<TAB>item<TAB>train|val|test`".into(),
        })?;
        tags.insert(key, tag);
    }
    let (users, items) = (ds.user_labels(), ds.item_labels());
    let labels = ds
        .interactions()
        .iter()
        .map(|&(u, i)| {
            tags.get(&(users[u].as_str(), items[i].as_str()))
                .copied()
                .ok_or_else(|| anyhow!("{source_name}: no split tag for ({}, {})", users[u], items[i]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ds.with_split(labels)?)
}

pub fn read_split(path: &Path, ds: InteractionDataset) -> Result<InteractionDataset> {
    apply_split(ds, &read_text(path)?, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Ground truth

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn matrix_value(m: &Matrix) -> String {
    (0..m.rows()).map(|r| join(m.row(r).iter())).collect::<Vec<_>>().join(";")
}

/// `key = value` description of the generator settings and planted structure.
/// Matrices are rows joined by `;`, entries by `,`.
pub fn ground_truth_text(spec: &SyntheticSpec, truth: &GroundTruth) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    kv("n_users", spec.n_users.to_string());
    kv("n_items", spec.n_items.to_string());
    kv("visual_dim", spec.visual_dim.to_string());
    kv("textual_dim", spec.textual_dim.to_string());
    kv("n_user_groups", spec.n_user_groups.to_string());
    kv("seed", spec.seed.to_string());
    kv("n_attrs", spec.n_attrs.to_string());
    kv("interactions_per_user", spec.interactions_per_user.to_string());
    kv("taste_noise", format!("{:?}", spec.taste_noise));
    kv("sharpness", format!("{:?}", spec.sharpness));
    kv("feature_noise", format!("{:?}", spec.feature_noise));
    kv("popularity", format!("{:?}", spec.popularity));
    kv("group_modality", join(&truth.group_modality));
    kv("user_group", join(&truth.user_group));
    kv("item_bias", join(&truth.item_bias));
    kv("preferences", matrix_value(&truth.preferences));
    kv("visual_attrs", matrix_value(&truth.visual_attrs));
    kv("textual_attrs", matrix_value(&truth.textual_attrs));
    out
}

pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &str = "GTCCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Text manifest (`name rows cols offset` per tensor, offsets in bytes from
/// the payload start), a `payload` line, then little-endian `f32` values.
pub fn encode_checkpoint(model: &GtcModel) -> Vec<u8> {
    let names = GtcModel::tensor_names();
    let tensors = model.tensors();
    let mut header = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{}\n", names.len());
    let mut offset = 0usize;
    for (name, t) in names.iter().zip(&tensors) {
        let _ = writeln!(header, "{name} {} {} {offset}", t.rows(), t.cols());
        offset += t.as_slice().len() * 4;
    }
    header.push_str("payload\n");
    let mut out = header.into_bytes();
    for t in tensors {
        for &v in t.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Loads tensors into `model`, which fixes the expected names and shapes.
pub fn decode_checkpoint(bytes: &[u8], model: &mut GtcModel, source_name: &str) -> Result<(), FormatError> {
    let marker = b"payload\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| invalid(source_name, "missing payload marker"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| invalid(source_name, "manifest is not UTF-8"))?;
    let payload = &bytes[split + marker.len()..];
    let mut lines = header.lines().enumerate();
    let bad_line = |line: usize, message: String| FormatError::Line {
        source_name: source_name.to_string(),
        line: line + 1,
        message,
    };
    match lines.next() {
        Some((_, l)) if l == format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") => {}
        Some((k, l)) => return Err(bad_line(k, format!("unsupported checkpoint header `{l}`"))),
        None => return Err(invalid(source_name, "empty manifest")),
    }
    let count: usize = lines
        .next()
        .and_then(|(_, l)| l.trim().parse().ok())
        .ok_or_else(|| invalid(source_name, "missing tensor count"))?;
    let expected = GtcModel::tensor_names();
    if count != expected.len() {
        return Err(invalid(source_name, format!("{count} tensors, model has {}", expected.len())));
    }
    for (k, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        let parsed = match f.as_slice() {
            [name, r, c, o] => match (r.parse::<usize>(), c.parse::<usize>(), o.parse::<usize>()) {
                (Ok(r), Ok(c), Ok(o)) => Some((*name, r, c, o)),
                _ => None,
            },
            _ => None,
        };
        let (name, rows, cols, offset) =
            parsed.ok_or_else(|| bad_line(k, format!("expected `name rows cols offset`, got `{line}`")))?;
        let end = offset + rows * cols * 4;
        if end > payload.len() {
            return Err(bad_line(k, format!("tensor `{name}` runs past the payload")));
        }
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        model
            .set_tensor(name, Matrix::from_vec(rows, cols, data))
            .map_err(|e| bad_line(k, e.to_string()))?;
    }
    Ok(())
}

pub fn write_checkpoint(path: &Path, model: &GtcModel) -> Result<()> {
    write_file(path, encode_checkpoint(model))
}

/// Builds a model shaped by `cfg` and the data dimensions, then fills it from `path`.
pub fn read_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    ds: &InteractionDataset,
    features: &ContentFeatures,
) -> Result<GtcModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut model = GtcModel::init(cfg, ds.n_users(), ds.n_items(), features.visual_dim(), features.textual_dim())?;
    decode_checkpoint(&bytes, &mut model, &path.display().to_string())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gtc_core::seeded_rng;

    #[test]
    fn interaction_lines() {
        let pairs = parse_interactions("u1\ti1\n\nu2 i2 5 1700000000\n# note\n", "mem").unwrap();
        assert_eq!(pairs, vec![("u1".into(), "i1".into()), ("u2".into(), "i2".into())]);
        let err = parse_interactions("u1\ti1\nlonely\n", "mem").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_interactions("", "mem").unwrap().is_empty());
    }

    #[test]
    fn empty_interaction_file_reports_no_interactions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.tsv");
        fs::write(&p, "").unwrap();
        let err = load_interactions(&p, 1).unwrap_err();
        assert!(format!("{err:#}").contains("no interactions"), "{err:#}");
    }

    #[test]
    fn matrix_round_trip_is_exact_in_f32() {
        let m = Matrix::randn(7, 3, &mut seeded_rng(3, 0)).round_to_f32();
        let bytes = encode_matrix(&m);
        assert!(bytes.starts_with(b"GTCMAT 7 3\n"));
        assert_eq!(bytes.len(), 11 + 7 * 3 * 4);
        assert_eq!(decode_matrix(&bytes, "mem").unwrap(), m);
    }

    #[test]
    fn matrix_errors() {
        let mut m = Matrix::zeros(3, 2);
        m.set(2, 1, f64::NAN);
        let err = decode_matrix(&encode_matrix(&m), "mem").unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("column 1"), "{err}");
        let mut short = encode_matrix(&Matrix::zeros(2, 2));
        short.pop();
        assert!(decode_matrix(&short, "mem").is_err());
        assert!(decode_matrix(b"GTCMAT x 2\n", "mem").is_err());
        assert!(decode_matrix(b"MATRIX 1 1\n\0\0\0\0", "mem").is_err());
    }

    #[test]
    fn feature_alignment() {
        let ds = InteractionDataset::from_raw_pairs([("a", "2"), ("a", "0"), ("b", "2")], 1).unwrap();
        let m = Matrix::from_fn(3, 1, |r, _| r as f64);
        let aligned = align_features(&m, &ds, "visual").unwrap();
        assert_eq!(aligned.as_slice(), &[2.0, 0.0]);

        let ten = Matrix::zeros(10, 2);
        let pairs: Vec<(String, String)> = (0..12).map(|i| ("u".to_string(), i.to_string())).collect();
        let twelve = InteractionDataset::from_raw_pairs(pairs, 1).unwrap();
        assert!(align_features(&ten, &twelve, "visual").is_err());

        let named = InteractionDataset::from_raw_pairs([("a", "x"), ("a", "y")], 1).unwrap();
        assert!(align_features(&Matrix::zeros(2, 4), &named, "textual").is_ok());
        assert!(align_features(&Matrix::zeros(3, 4), &named, "textual").is_err());
    }

    #[test]
    fn split_round_trip() {
        let pairs: Vec<(String, String)> = (0..4)
            .flat_map(|u| (0..6).map(move |i| (format!("u{u}"), format!("i{i}"))))
            .collect();
        let ds = InteractionDataset::from_raw_pairs(pairs, 1).unwrap();
        let split = ds.split((0.5, 0.25, 0.25), 9).unwrap();
        let text = split_text(&split).unwrap();
        let back = apply_split(ds.clone(), &text, "mem").unwrap();
        assert_eq!(back, split);
        let missing: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(apply_split(ds, &missing, "mem").is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.dim = 4;
        cfg.hidden = 6;
        cfg.time_dim = 4;
        let mut model = GtcModel::init(&cfg, 3, 5, 7, 2).unwrap();
        model.round_to_f32();
        let bytes = encode_checkpoint(&model);
        cfg.seed += 1;
        let mut other = GtcModel::init(&cfg, 3, 5, 7, 2).unwrap();
        assert_ne!(other, model);
        decode_checkpoint(&bytes, &mut other, "mem").unwrap();
        assert_eq!(other, model);

        let mut wrong = GtcModel::init(&cfg, 4, 5, 7, 2).unwrap();
        assert!(decode_checkpoint(&bytes, &mut wrong, "mem").is_err());
        assert!(decode_checkpoint(b"GTCCKPT 9\n19\npayload\n", &mut other, "mem").is_err());
    }

    #[test]
    fn ground_truth_sidecar_keys() {
        let spec = SyntheticSpec::new(20, 40, 4, 3, 2, 5);
        let (_, _, truth) = gtc_core::dataset::generate_synthetic(&spec).unwrap();
        let kv = parse_key_values(&ground_truth_text(&spec, &truth));
        assert_eq!(kv["n_users"], "20");
        assert_eq!(kv["group_modality"], "0,1");
        assert_eq!(kv["user_group"].split(',').count(), 20);
        assert_eq!(kv["visual_attrs"].split(';').count(), 40);
    }
}
