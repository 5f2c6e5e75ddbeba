//! File formats: cohort CSV, embedding tables (CSV or packed f32 with a JSON
//! sidecar) and JSON Lines prediction files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{
    CauseCodebook, Confidence, Prediction, PredictionSet, ProbVector, RankedCause, RankedPrediction,
    Sex, Symptom, VARecord,
};
use crate::error::{Error, Result};

/// Leading columns of a cohort file, in order. Symptom columns follow.
pub const RECORD_COLUMNS: [&str; 7] =
    ["id", "site", "age_group", "age_value", "sex", "narrative", "gs_text"];

/// A row that could not be turned into a record.
#[derive(Debug, Clone, PartialEq)]
pub struct RowReject {
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub id: Option<String>,
    pub reason: String,
}

/// Outcome of a lenient cohort load: every data row ends up in exactly one
/// of the two lists.
#[derive(Debug, Clone, Default)]
pub struct RecordLoad {
    pub records: Vec<VARecord>,
    pub rejects: Vec<RowReject>,
    pub rows_read: usize,
}

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv { path: path.to_owned(), source }
}

/// Reads a cohort file, collecting bad rows instead of failing on them.
pub fn load_records_report(path: &Path, codebook: &CauseCodebook) -> Result<RecordLoad> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() < RECORD_COLUMNS.len()
        || !RECORD_COLUMNS
            .iter()
            .zip(headers.iter())
            .all(|(want, got)| got.trim().eq_ignore_ascii_case(want))
    {
        return Err(Error::validation(format!(
            "{}: header must start with {}",
            path.display(),
            RECORD_COLUMNS.join(",")
        )));
    }
    let symptom_ids: Vec<String> =
        headers.iter().skip(RECORD_COLUMNS.len()).map(|h| h.trim().to_owned()).collect();

    let mut out = RecordLoad::default();
    let mut seen = BTreeSet::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        out.rows_read += 1;
        let row = row.map_err(|e| csv_err(path, e))?;
        let id = row.get(0).map(|s| s.trim().to_owned()).filter(|s| !s.is_empty());
        let reject = |reason: String| RowReject { row: row_no, id: id.clone(), reason };
        match parse_row(&row, &symptom_ids, codebook) {
            Ok(rec) => {
                if !seen.insert(rec.id.clone()) {
                    out.rejects.push(reject(format!("duplicate id {:?}", rec.id)));
                } else {
                    out.records.push(rec);
                }
            }
            Err(e) => out.rejects.push(reject(e.to_string())),
        }
    }
    debug_assert_eq!(out.rows_read, out.records.len() + out.rejects.len());
    Ok(out)
}

fn parse_row(row: &csv::StringRecord, symptom_ids: &[String], codebook: &CauseCodebook) -> Result<VARecord> {
    let cell = |i: usize| row.get(i).unwrap_or("").trim();
    let id = cell(0);
    if id.is_empty() {
        return Err(Error::validation("empty id"));
    }
    let age_group = cell(2).parse()?;
    if age_group != codebook.age_group() {
        return Err(Error::validation(format!(
            "age group {age_group} does not match the {} codebook",
            codebook.age_group()
        )));
    }
    let age_value = if cell(3).is_empty() {
        f64::NAN
    } else {
        cell(3)
            .parse::<f64>()
            .map_err(|_| Error::validation(format!("bad age_value {:?}", cell(3))))?
    };
    let sex: Sex = cell(4).parse()?;
    let narrative = row.get(5).filter(|s| !s.trim().is_empty()).map(str::to_owned);
    let true_cause = match cell(6) {
        "" => None,
        label => Some(
            codebook
                .resolve(label)
                .ok_or_else(|| Error::validation(format!("unresolvable cause label {label:?}")))?,
        ),
    };
    let mut symptoms = BTreeMap::new();
    for (j, qid) in symptom_ids.iter().enumerate() {
        let value = Symptom::parse_cell(cell(RECORD_COLUMNS.len() + j))
            .map_err(|e| Error::validation(format!("column {qid}: {e}")))?;
        symptoms.insert(qid.clone(), value);
    }
    Ok(VARecord {
        id: id.to_owned(),
        site: cell(1).to_owned(),
        age_group,
        age_value,
        sex,
        symptoms,
        narrative,
        true_cause,
    })
}

/// Reads a cohort file; any rejected row fails the load with every rejected
/// row number listed.
pub fn load_records(path: &Path, codebook: &CauseCodebook) -> Result<Vec<VARecord>> {
    let load = load_records_report(path, codebook)?;
    if !load.rejects.is_empty() {
        let detail: Vec<String> =
            load.rejects.iter().map(|r| format!("row {}: {}", r.row, r.reason)).collect();
        return Err(Error::validation(format!(
            "{}: {} rejected row(s): {}",
            path.display(),
            load.rejects.len(),
            detail.join("; ")
        )));
    }
    Ok(load.records)
}

pub fn write_records(path: &Path, records: &[VARecord], codebook: &CauseCodebook) -> Result<()> {
    let symptom_ids: BTreeSet<&String> = records.iter().flat_map(|r| r.symptoms.keys()).collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header: Vec<&str> = RECORD_COLUMNS.to_vec();
    header.extend(symptom_ids.iter().map(|s| s.as_str()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in records {
        let cause = match r.true_cause {
            Some(c) => codebook
                .label(c)
                .ok_or_else(|| Error::validation(format!("record {}: cause {c} out of range", r.id)))?
                .to_owned(),
            None => String::new(),
        };
        let mut row = vec![
            r.id.clone(),
            r.site.clone(),
            r.age_group.to_string(),
            if r.age_value.is_nan() { String::new() } else { r.age_value.to_string() },
            r.sex.to_string(),
            r.narrative.clone().unwrap_or_default(),
            cause,
        ];
        for q in &symptom_ids {
            row.push(r.symptoms.get(*q).copied().unwrap_or(Symptom::Missing).as_cell().to_owned());
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Dense feature rows keyed by record id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    by_id: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding dimension must be positive"));
        }
        Ok(EmbeddingTable { dim, by_id: BTreeMap::new() })
    }

    pub fn insert(&mut self, id: impl Into<String>, row: Vec<f64>) -> Result<()> {
        let id = id.into();
        if row.len() != self.dim {
            return Err(Error::validation(format!(
                "embedding row {id} has {} values, expected {}",
                row.len(),
                self.dim
            )));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("embedding row {id}: value {j} is not finite")));
        }
        if self.by_id.insert(id.clone(), row).is_some() {
            return Err(Error::validation(format!("duplicate embedding id {id}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.by_id.get(id).map(Vec::as_slice)
    }

    pub fn require(&self, id: &str) -> Result<&[f64]> {
        self.get(id).ok_or_else(|| Error::validation(format!("no embedding for record {id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.by_id.iter()
    }

    /// Rows for the given ids, in that order.
    pub fn rows<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Vec<Vec<f64>>> {
        ids.into_iter().map(|id| self.require(id).map(<[f64]>::to_vec)).collect()
    }
}

/// JSON header describing a packed little-endian f32 embedding file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryHeader {
    pub format: String,
    pub dim: usize,
    pub ids: Vec<String>,
    /// Data file name, relative to the header.
    pub data: String,
}

const F32_LE: &str = "f32le";

/// Loads an embedding table. `.csv` files hold an `id` column followed by
/// one column per dimension; `.json` is a binary sidecar header and `.bin`
/// is a packed data file whose header sits next to it with a `.json`
/// extension.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("json") => load_embeddings_binary(path),
        Some("bin") => load_embeddings_binary(&path.with_extension("json")),
        _ => load_embeddings_csv(path),
    }
}

fn load_embeddings_csv(path: &Path) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.get(0).map(str::trim) != Some("id") || headers.len() < 2 {
        return Err(Error::validation(format!(
            "{}: embedding header must be id followed by at least one value column",
            path.display()
        )));
    }
    let mut table = EmbeddingTable::new(headers.len() - 1)?;
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let id = row.get(0).unwrap_or("").trim().to_owned();
        if row.len() != headers.len() {
            return Err(Error::validation(format!(
                "{}: embedding row {id} is ragged ({} columns, expected {})",
                path.display(),
                row.len(),
                headers.len()
            )));
        }
        let values = row
            .iter()
            .skip(1)
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::validation(format!("{}: embedding row {id}: {e}", path.display())))?;
        table.insert(id, values)?;
    }
    Ok(table)
}

fn load_embeddings_binary(header_path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: BinaryHeader =
        serde_json::from_str(&text).map_err(|e| Error::json(header_path.display().to_string(), e))?;
    if header.format != F32_LE {
        return Err(Error::validation(format!("unsupported embedding format {:?}", header.format)));
    }
    let data_path = header_path.parent().unwrap_or(Path::new(".")).join(&header.data);
    let mut bytes = Vec::new();
    File::open(&data_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&data_path, e))?;
    let expected = header.ids.len() * header.dim * 4;
    if bytes.len() != expected {
        return Err(Error::validation(format!(
            "{}: {} bytes, header implies {expected}",
            data_path.display(),
            bytes.len()
        )));
    }
    let mut table = EmbeddingTable::new(header.dim)?;
    for (id, chunk) in header.ids.iter().zip(bytes.chunks_exact(header.dim * 4)) {
        let row = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        table.insert(id.clone(), row)?;
    }
    Ok(table)
}

pub fn write_embeddings_csv(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["id".to_owned()];
    header.extend((0..table.dim()).map(|j| format!("e{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (id, row) in table.iter() {
        let mut cells = vec![id.clone()];
        cells.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&cells).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.json` (header) and `<stem>.bin` (packed f32, row-major).
/// Values are narrowed to f32.
pub fn write_embeddings_binary(header_path: &Path, table: &EmbeddingTable) -> Result<PathBuf> {
    let data_path = header_path.with_extension("bin");
    let data_name = data_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::validation("embedding path has no file name"))?
        .to_owned();
    let mut ids = Vec::with_capacity(table.len());
    let mut w = BufWriter::new(File::create(&data_path).map_err(|e| Error::io(&data_path, e))?);
    for (id, row) in table.iter() {
        ids.push(id.clone());
        for v in row {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(|e| Error::io(&data_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&data_path, e))?;
    let header = BinaryHeader { format: F32_LE.into(), dim: table.dim(), ids, data: data_name };
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json("embedding header", e))?;
    std::fs::write(header_path, text).map_err(|e| Error::io(header_path, e))?;
    Ok(data_path)
}

#[derive(Debug, Serialize, Deserialize)]
struct RankedLine {
    cause: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ranked: Option<Vec<RankedLine>>,
}

/// Reads a JSON Lines prediction file. Probability vectors are renormalized
/// under the ingestion rule; ranked labels are resolved through the codebook.
pub fn load_external_predictions(path: &Path, codebook: &CauseCodebook) -> Result<PredictionSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fallback = path.file_stem().and_then(|s| s.to_str()).unwrap_or("external").to_owned();
    let mut set: Option<PredictionSet> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{}: line {}", path.display(), i + 1);
        let parsed: PredictionLine = serde_json::from_str(&line).map_err(|e| Error::json(ctx(), e))?;
        let method = parsed.method.clone().unwrap_or_else(|| fallback.clone());
        let set = set.get_or_insert_with(|| PredictionSet::new(method.clone(), codebook.len()));
        if set.method != method {
            return Err(Error::validation(format!(
                "{}: mixes methods {:?} and {method:?}",
                ctx(),
                set.method
            )));
        }
        let pred = parse_line(parsed.probs, parsed.ranked, codebook)
            .map_err(|e| Error::validation(format!("{}: {e}", ctx())))?;
        if set.get(&parsed.id).is_some() {
            return Err(Error::validation(format!("{}: duplicate id {}", ctx(), parsed.id)));
        }
        set.insert(parsed.id, pred)?;
    }
    set.ok_or_else(|| Error::validation(format!("{}: no predictions", path.display())))
}

fn parse_line(
    probs: Option<Vec<f64>>,
    ranked: Option<Vec<RankedLine>>,
    codebook: &CauseCodebook,
) -> Result<Prediction> {
    let probs = match probs {
        Some(p) if p.len() != codebook.len() => {
            return Err(Error::validation(format!(
                "probs has length {}, codebook has {} causes",
                p.len(),
                codebook.len()
            )))
        }
        Some(p) => Some(ProbVector::ingest(p)?),
        None => None,
    };
    let ranked = match ranked {
        Some(entries) => {
            let entries = entries
                .into_iter()
                .map(|e| {
                    let cause = codebook
                        .resolve(&e.cause)
                        .ok_or_else(|| Error::validation(format!("unknown cause {:?}", e.cause)))?;
                    let confidence = match e.confidence.as_deref() {
                        None => Confidence::Medium,
                        Some(c) => Confidence::parse_lenient(c)
                            .ok_or_else(|| Error::validation(format!("unknown confidence {c:?}")))?,
                    };
                    Ok(RankedCause { cause, confidence })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(RankedPrediction::new(entries)?)
        }
        None => None,
    };
    if probs.is_none() && ranked.is_none() {
        return Err(Error::validation("line has neither probs nor ranked"));
    }
    Ok(Prediction { probs, ranked })
}

/// Writes one JSON object per record, in id order.
pub fn write_predictions(path: &Path, set: &PredictionSet, codebook: &CauseCodebook) -> Result<()> {
    if set.is_empty() {
        return Err(Error::validation("refusing to write an empty prediction set"));
    }
    if set.n_causes() != codebook.len() {
        return Err(Error::validation(format!(
            "prediction set has {} causes, codebook has {}",
            set.n_causes(),
            codebook.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, pred) in set.iter() {
        let line = PredictionLine {
            id: id.clone(),
            method: Some(set.method.clone()),
            probs: pred.probs.as_ref().map(|p| p.as_slice().to_vec()),
            ranked: pred.ranked.as_ref().map(|r| {
                r.entries()
                    .iter()
                    .map(|e| RankedLine {
                        cause: codebook.label(e.cause).unwrap_or_default().to_owned(),
                        confidence: Some(e.confidence.as_str().to_owned()),
                    })
                    .collect()
            }),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::json(path.display().to_string(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
