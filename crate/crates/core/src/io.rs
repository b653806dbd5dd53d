//! Response CSV ingestion, table writers and hashed JSON artifacts.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IrtError, Result};
use crate::grm::ResponseMatrix;

/// Category counts to use instead of the largest observed code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CategoryOverride {
    All(usize),
    PerItem(Vec<usize>),
}

/// How to read a response CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResponseFormat {
    /// Cell text marking a missing response. Empty cells are always missing.
    pub missing_token: String,
    pub categories: Option<CategoryOverride>,
}

impl Default for ResponseFormat {
    fn default() -> Self {
        ResponseFormat {
            missing_token: String::new(),
            categories: None,
        }
    }
}

pub fn load_responses(path: &Path, format: &ResponseFormat) -> Result<ResponseMatrix> {
    parse_responses(fs::File::open(path)?, format)
}

/// Parses a CSV with a header row of item names and integer codes.
pub fn parse_responses<R: Read>(reader: R, format: &ResponseFormat) -> Result<ResponseMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let items = names.len();
    let mut cells = Vec::new();
    let mut persons = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != items {
            return Err(IrtError::Parse {
                row: r + 1,
                column: rec.len().min(items) + 1,
                message: format!("expected {items} fields, found {}", rec.len()),
            });
        }
        for (c, field) in rec.iter().enumerate() {
            let field = field.trim();
            if field.is_empty() || field == format.missing_token {
                cells.push(None);
                continue;
            }
            let code: usize = field.parse().map_err(|_| IrtError::Parse {
                row: r + 1,
                column: c + 1,
                message: format!("'{field}' is not a category code"),
            })?;
            if code == 0 {
                return Err(IrtError::Validation(format!(
                    "row {} column {}: category codes start at 1",
                    r + 1,
                    c + 1
                )));
            }
            cells.push(Some(code));
        }
        persons += 1;
    }
    let categories = match &format.categories {
        Some(CategoryOverride::All(j)) => vec![*j; items],
        Some(CategoryOverride::PerItem(v)) => {
            if v.len() != items {
                return Err(IrtError::Validation(format!(
                    "{} category counts given for {items} items",
                    v.len()
                )));
            }
            v.clone()
        }
        None => {
            let mut j = vec![2usize; items];
            for (k, c) in cells.iter().enumerate() {
                if let Some(c) = c {
                    j[k % items] = j[k % items].max(*c);
                }
            }
            j
        }
    };
    ResponseMatrix::new(persons, items, cells, categories)?.with_item_names(names)
}

/// Writes responses with item names as header and empty cells for missing.
pub fn write_responses(path: &Path, data: &ResponseMatrix) -> Result<()> {
    let rows = (0..data.persons()).map(|p| {
        data.row(p)
            .into_iter()
            .map(|c| c.map_or(String::new(), |c| c.to_string()))
            .collect()
    });
    write_table(path, data.item_names(), rows)
}

/// Writes a CSV table.
pub fn write_table<H, I>(path: &Path, header: &[H], rows: I) -> Result<()>
where
    H: AsRef<str>,
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header.iter().map(|h| h.as_ref()))?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip decimal form of a float.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of any serializable value: sha256 of its compact JSON.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

pub const ARTIFACT_VERSION: u32 = 1;

/// A JSON artifact: typed body plus the sha256 of the body's compact JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub kind: String,
    pub version: u32,
    pub hash: String,
    pub body: T,
}

impl<T: Serialize> Artifact<T> {
    pub fn new(kind: &str, body: T) -> Result<Self> {
        let hash = content_hash(&body)?;
        Ok(Artifact {
            kind: kind.to_string(),
            version: ARTIFACT_VERSION,
            hash,
            body,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }
}

impl<T: Serialize + DeserializeOwned> Artifact<T> {
    /// Parses an artifact, refusing wrong kinds, versions and hashes.
    pub fn from_slice(bytes: &[u8], kind: &str) -> Result<Self> {
        let a: Artifact<T> = serde_json::from_slice(bytes)?;
        if a.kind != kind {
            return Err(IrtError::Validation(format!(
                "expected a {kind} artifact, found {}",
                a.kind
            )));
        }
        if a.version != ARTIFACT_VERSION {
            return Err(IrtError::Validation(format!(
                "artifact version {} is not supported (expected {ARTIFACT_VERSION})",
                a.version
            )));
        }
        let found = content_hash(&a.body)?;
        if found != a.hash {
            return Err(IrtError::HashMismatch {
                expected: a.hash,
                found,
            });
        }
        Ok(a)
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        Self::from_slice(&fs::read(path)?, kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str, f: &ResponseFormat) -> Result<ResponseMatrix> {
        parse_responses(s.as_bytes(), f)
    }

    #[test]
    fn parses_small_csv() {
        let f = ResponseFormat { categories: Some(CategoryOverride::All(2)), ..Default::default() };
        let m = parse("a,b\n1,2\n2,1\n", &f).unwrap();
        assert_eq!(m.row(0), vec![Some(1), Some(2)]);
        assert_eq!(m.row(1), vec![Some(2), Some(1)]);
        assert_eq!(m.item_names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn empty_cell_and_token_are_missing() {
        let f = ResponseFormat { missing_token: "NA".into(), ..Default::default() };
        let m = parse("a,b\n1,\nNA,3\n", &f).unwrap();
        assert_eq!(m.row(0), vec![Some(1), None]);
        assert_eq!(m.row(1), vec![None, Some(3)]);
        assert_eq!(m.categories(), &[2, 3]);
    }

    #[test]
    fn bad_cells_report_position() {
        let e = parse("a,b\n1,2\n2,x\n", &ResponseFormat::default()).unwrap_err();
        assert!(matches!(e, IrtError::Parse { row: 2, column: 2, .. }), "{e}");
        let f = ResponseFormat { categories: Some(CategoryOverride::All(2)), ..Default::default() };
        assert!(matches!(parse("a\n3\n", &f), Err(IrtError::Validation(_))));
        assert!(matches!(parse("a\n0\n", &ResponseFormat::default()), Err(IrtError::Validation(_))));
    }

    #[test]
    fn artifact_round_trip_is_byte_identical() {
        let a = Artifact::new("test", vec![0.1f64, 1.0 / 3.0, -2.5e-300]).unwrap();
        let bytes = a.to_bytes().unwrap();
        let b: Artifact<Vec<f64>> = Artifact::from_slice(&bytes, "test").unwrap();
        assert_eq!(b.to_bytes().unwrap(), bytes);
        assert!(Artifact::<Vec<f64>>::from_slice(&bytes, "other").is_err());
        let tampered = String::from_utf8(bytes).unwrap().replace("0.1", "0.2");
        assert!(matches!(
            Artifact::<Vec<f64>>::from_slice(tampered.as_bytes(), "test"),
            Err(IrtError::HashMismatch { .. })
        ));
    }

    #[test]
    fn responses_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let m = ResponseMatrix::new(2, 2, vec![Some(1), None, Some(3), Some(2)], vec![3, 2]).unwrap();
        write_responses(&p, &m).unwrap();
        let f = ResponseFormat { categories: Some(CategoryOverride::PerItem(vec![3, 2])), ..Default::default() };
        assert_eq!(load_responses(&p, &f).unwrap(), m);
    }
}
