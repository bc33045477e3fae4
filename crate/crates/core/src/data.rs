//! Observed-data model: outcome matrix, binary exposure and covariates.
//!
//! Only `(W, A, X)` is ever observed. The latent true levels, sample
//! effects and category efficiencies exist solely inside [`crate::sim`].

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Immutable `n × J` outcome matrix with exposure and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    w: Array2<f64>,
    a: Vec<u8>,
    x: Array2<f64>,
    category_names: Vec<String>,
    sample_ids: Vec<String>,
    covariate_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with generated labels (`c1..cJ`, `s1..sn`, `x1..xp`).
    pub fn new(w: Array2<f64>, a: Vec<u8>, x: Array2<f64>) -> Result<Self> {
        let (n, j) = w.dim();
        let p = x.ncols();
        Self::with_labels(
            w,
            a,
            x,
            (1..=j).map(|k| format!("c{k}")).collect(),
            (1..=n).map(|k| format!("s{k}")).collect(),
            (1..=p).map(|k| format!("x{k}")).collect(),
        )
    }

    pub fn with_labels(
        w: Array2<f64>,
        a: Vec<u8>,
        x: Array2<f64>,
        category_names: Vec<String>,
        sample_ids: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let (n, j) = w.dim();
        if n < 2 {
            return Err(Error::data(format!("need at least 2 samples, got {n}")));
        }
        if j < 1 {
            return Err(Error::data("need at least one category"));
        }
        if a.len() != n || x.nrows() != n {
            return Err(Error::data(format!(
                "dimension mismatch: W has {n} rows, A has {}, X has {}",
                a.len(),
                x.nrows()
            )));
        }
        if category_names.len() != j || sample_ids.len() != n || covariate_names.len() != x.ncols() {
            return Err(Error::data("label count does not match matrix dimensions"));
        }
        if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::data(format!("outcomes must be finite and nonnegative, found {bad}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("covariates must be finite"));
        }
        if let Some(bad) = a.iter().find(|&&v| v > 1) {
            return Err(Error::data(format!("exposure not binary: found value {bad}")));
        }
        let exposed = a.iter().filter(|&&v| v == 1).count();
        if exposed == 0 || exposed == n {
            return Err(Error::data("both exposure arms must be nonempty"));
        }
        Ok(Self { w, a, x, category_names, sample_ids, covariate_names })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_categories(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn outcomes(&self) -> ArrayView2<'_, f64> {
        self.w.view()
    }

    pub fn outcome_column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.w.column(j)
    }

    pub fn exposure(&self) -> &[u8] {
        &self.a
    }

    pub fn covariates(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_exposed(&self) -> usize {
        self.a.iter().filter(|&&v| v == 1).count()
    }

    /// Returns a copy with a different outcome matrix (same shape, same labels).
    pub fn with_outcomes(&self, w: Array2<f64>) -> Result<Self> {
        if w.dim() != self.w.dim() {
            return Err(Error::data("replacement outcome matrix has the wrong shape"));
        }
        Self::with_labels(
            w,
            self.a.clone(),
            self.x.clone(),
            self.category_names.clone(),
            self.sample_ids.clone(),
            self.covariate_names.clone(),
        )
    }

    /// Reorders samples: row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.n();
        if order.len() != n {
            return Err(Error::invalid("permutation length does not match n"));
        }
        let w = self.w.select(ndarray::Axis(0), order);
        let x = self.x.select(ndarray::Axis(0), order);
        let a = order.iter().map(|&i| self.a[i]).collect();
        let ids = order.iter().map(|&i| self.sample_ids[i].clone()).collect();
        Self::with_labels(w, a, x, self.category_names.clone(), ids, self.covariate_names.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusReason {
    Ok,
    AllZeroInArm0,
    AllZeroInArm1,
    AllZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStatus {
    pub category_index: usize,
    pub estimable: bool,
    pub reason: StatusReason,
}

impl CategoryStatus {
    pub fn new(category_index: usize, reason: StatusReason) -> Self {
        Self { category_index, estimable: reason == StatusReason::Ok, reason }
    }
}

/// Flags every category whose outcome column is identically zero within an exposure arm.
pub fn validate(d: &Dataset) -> Vec<CategoryStatus> {
    let a = d.exposure();
    (0..d.n_categories())
        .map(|j| {
            let col = d.outcome_column(j);
            let mut pos = [false; 2];
            for (w, &ai) in col.iter().zip(a) {
                if *w > 0.0 {
                    pos[ai as usize] = true;
                }
            }
            let reason = match pos {
                [true, true] => StatusReason::Ok,
                [false, true] => StatusReason::AllZeroInArm0,
                [true, false] => StatusReason::AllZeroInArm1,
                [false, false] => StatusReason::AllZero,
            };
            CategoryStatus::new(j, reason)
        })
        .collect()
}

/// Column layout of the metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSchema {
    /// Sample-id column of the metadata file; the first column when absent.
    #[serde(default)]
    pub sample_id: Option<String>,
    pub exposure: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl IngestSchema {
    pub fn new(exposure: impl Into<String>, covariates: Vec<String>) -> Self {
        Self { sample_id: None, exposure: exposure.into(), covariates, delimiter: ',' }
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path, delimiter: char) -> Result<Table> {
    let file_err = |message: String| Error::File { path: path.to_path_buf(), message };
    if !delimiter.is_ascii() {
        return Err(Error::config(format!("delimiter must be ASCII, got {delimiter:?}")));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| file_err(e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| file_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| file_err(e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | "null" | "NULL")
}

/// Reads an outcome table and a metadata table and aligns them by sample id.
///
/// Rows follow the outcome file's order. Non-numeric covariate columns are
/// expanded to indicator columns with the first level (in sorted order) as
/// the omitted baseline. Missing values anywhere are rejected.
pub fn load_dataset(outcome_path: &Path, metadata_path: &Path, schema: &IngestSchema) -> Result<Dataset> {
    let outcome = read_table(outcome_path, schema.delimiter)?;
    let meta = read_table(metadata_path, schema.delimiter)?;
    let out_err = |message: String| Error::File { path: outcome_path.to_path_buf(), message };
    let meta_err = |message: String| Error::File { path: metadata_path.to_path_buf(), message };

    if outcome.header.len() < 2 {
        return Err(out_err("outcome file needs a sample-id column and at least one category".into()));
    }
    let category_names: Vec<String> = outcome.header[1..].to_vec();
    let n = outcome.rows.len();
    let j = category_names.len();

    let mut w = Array2::<f64>::zeros((n, j));
    let mut sample_ids = Vec::with_capacity(n);
    let mut seen = BTreeSet::new();
    for (i, row) in outcome.rows.iter().enumerate() {
        let id = row[0].clone();
        if is_missing(&id) {
            return Err(out_err(format!("row {}: missing sample id", i + 1)));
        }
        if !seen.insert(id.clone()) {
            return Err(out_err(format!("duplicate sample id {id:?}")));
        }
        for (k, cell) in row[1..].iter().enumerate() {
            if is_missing(cell) {
                return Err(out_err(format!("missing value for sample {id:?}, category {:?}", category_names[k])));
            }
            let v: f64 = cell.parse().map_err(|_| {
                out_err(format!("non-numeric outcome {cell:?} for sample {id:?}, category {:?}", category_names[k]))
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(out_err(format!("outcome {cell:?} for sample {id:?} is not a finite nonnegative number")));
            }
            w[[i, k]] = v;
        }
        sample_ids.push(id);
    }

    let col = |name: &str| -> Result<usize> {
        meta.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| meta_err(format!("column {name:?} not found")))
    };
    let id_col = match &schema.sample_id {
        Some(name) => col(name)?,
        None => 0,
    };
    let exposure_col = col(&schema.exposure)?;
    let covariate_cols = schema.covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    let mut meta_rows: HashMap<&str, &Vec<String>> = HashMap::with_capacity(meta.rows.len());
    for row in &meta.rows {
        if meta_rows.insert(row[id_col].as_str(), row).is_some() {
            return Err(meta_err(format!("duplicate sample id {:?}", row[id_col])));
        }
    }
    let aligned: Vec<&Vec<String>> = sample_ids
        .iter()
        .map(|id| {
            meta_rows
                .get(id.as_str())
                .copied()
                .ok_or_else(|| meta_err(format!("sample id {id:?} missing from metadata")))
        })
        .collect::<Result<_>>()?;
    if meta_rows.len() > n {
        log::warn!("{} metadata rows have no outcome row and are ignored", meta_rows.len() - n);
    }

    let mut a = Vec::with_capacity(n);
    for (row, id) in aligned.iter().zip(&sample_ids) {
        let cell = row[exposure_col].as_str();
        if is_missing(cell) {
            return Err(meta_err(format!("missing exposure for sample {id:?}")));
        }
        match cell.parse::<f64>() {
            Ok(v) if v == 0.0 => a.push(0),
            Ok(v) if v == 1.0 => a.push(1),
            _ => return Err(Error::data(format!("exposure not binary: value {cell:?} for sample {id:?}"))),
        }
    }

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut covariate_names = Vec::new();
    for (&c, name) in covariate_cols.iter().zip(&schema.covariates) {
        let cells: Vec<&str> = aligned.iter().map(|row| row[c].as_str()).collect();
        if let Some(pos) = cells.iter().position(|v| is_missing(v)) {
            return Err(meta_err(format!("missing value in covariate {name:?} for sample {:?}", sample_ids[pos])));
        }
        let numeric: Option<Vec<f64>> = cells.iter().map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite())).collect();
        match numeric {
            Some(values) => {
                columns.push(values);
                covariate_names.push(name.clone());
            }
            None => {
                let levels: BTreeSet<&str> = cells.iter().copied().collect();
                for level in levels.iter().skip(1) {
                    columns.push(cells.iter().map(|v| if v == level { 1.0 } else { 0.0 }).collect());
                    covariate_names.push(format!("{name}={level}"));
                }
            }
        }
    }
    let mut x = Array2::<f64>::zeros((n, columns.len()));
    for (k, values) in columns.iter().enumerate() {
        for (i, v) in values.iter().enumerate() {
            x[[i, k]] = *v;
        }
    }

    Dataset::with_labels(w, a, x, category_names, sample_ids, covariate_names)
}

/// Writes the dataset as an outcome table and a metadata table (`sample_id`, `exposure`, covariates).
///
/// Values use the shortest round-trip decimal representation, so reloading
/// with [`load_dataset`] and the covariate names as numeric columns
/// reproduces the matrices bit-exactly.
pub fn write_dataset(d: &Dataset, outcome_path: &Path, metadata_path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(outcome_path).map_err(|e| Error::File {
        path: outcome_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut header = vec!["sample_id".to_string()];
    header.extend(d.category_names().iter().cloned());
    wtr.write_record(&header).map_err(csv_io)?;
    for (i, id) in d.sample_ids().iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(d.outcomes().row(i).iter().map(|v| format!("{v}")));
        wtr.write_record(&rec).map_err(csv_io)?;
    }
    wtr.flush()?;

    let mut wtr = csv::Writer::from_path(metadata_path).map_err(|e| Error::File {
        path: metadata_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut header = vec!["sample_id".to_string(), "exposure".to_string()];
    header.extend(d.covariate_names().iter().cloned());
    wtr.write_record(&header).map_err(csv_io)?;
    for (i, id) in d.sample_ids().iter().enumerate() {
        let mut rec = vec![id.clone(), d.exposure()[i].to_string()];
        rec.extend(d.covariates().row(i).iter().map(|v| format!("{v}")));
        wtr.write_record(&rec).map_err(csv_io)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_small_tables() {
        let dir = tempfile::tempdir().unwrap();
        let w = write(dir.path(), "w.csv", "id,taxA,taxB\ns1,1,0\ns2,3,2.5\ns3,0,4\n");
        let m = write(dir.path(), "m.csv", "id,case,age\ns3,1,30\ns1,0,40\ns2,1,50\n");
        let d = load_dataset(&w, &m, &IngestSchema::new("case", vec!["age".into()])).unwrap();
        assert_eq!((d.n(), d.n_categories()), (3, 2));
        assert_eq!(d.exposure(), &[0, 1, 1]);
        assert_eq!(d.covariates().column(0).to_vec(), vec![40.0, 50.0, 30.0]);
        assert_eq!(d.category_names(), &["taxA".to_string(), "taxB".to_string()]);
    }

    #[test]
    fn rejects_non_binary_exposure() {
        let dir = tempfile::tempdir().unwrap();
        let w = write(dir.path(), "w.csv", "id,t\ns1,1\ns2,3\ns3,0\n");
        let m = write(dir.path(), "m.csv", "id,case\ns1,0\ns2,2\ns3,1\n");
        let err = load_dataset(&w, &m, &IngestSchema::new("case", vec![])).unwrap_err();
        assert!(err.to_string().contains("exposure not binary"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn expands_factor_to_baseline_omitted_indicators() {
        let dir = tempfile::tempdir().unwrap();
        let w = write(dir.path(), "w.csv", "id,t\ns1,1\ns2,3\ns3,0\ns4,2\n");
        let m = write(dir.path(), "m.csv", "id,case,site\ns1,0,north\ns2,1,east\ns3,1,west\ns4,0,south\n");
        let d = load_dataset(&w, &m, &IngestSchema::new("case", vec!["site".into()])).unwrap();
        // sorted levels: east (baseline), north, south, west
        let expected = array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        assert_eq!(d.covariates(), expected.view());
        assert_eq!(d.covariate_names(), &["site=north", "site=south", "site=west"]);
    }

    #[test]
    fn rejects_missing_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let w = write(dir.path(), "w.csv", "id,t\ns1,1\ns2,NA\n");
        let m = write(dir.path(), "m.csv", "id,case\ns1,0\ns2,1\n");
        assert!(load_dataset(&w, &m, &IngestSchema::new("case", vec![])).is_err());

        let w = write(dir.path(), "w2.csv", "id,t\ns1,1\ns1,2\n");
        assert!(load_dataset(&w, &m, &IngestSchema::new("case", vec![])).unwrap_err().to_string().contains("duplicate"));

        let w = write(dir.path(), "w3.csv", "id,t\ns1,1\ns2,abc\n");
        assert!(load_dataset(&w, &m, &IngestSchema::new("case", vec![])).unwrap_err().to_string().contains("non-numeric"));

        let w = write(dir.path(), "w4.csv", "id,t\ns1,1\ns9,2\n");
        assert!(load_dataset(&w, &m, &IngestSchema::new("case", vec![])).is_err());

        let w = write(dir.path(), "w5.csv", "id,t\ns1,1\ns2,2\n");
        let m = write(dir.path(), "m5.csv", "id,case,age\ns1,0,\ns2,1,3\n");
        assert!(load_dataset(&w, &m, &IngestSchema::new("case", vec!["age".into()])).is_err());
    }

    #[test]
    fn validate_flags_zero_columns() {
        let w = array![[1.0, 0.0, 0.0, 2.0], [2.0, 0.0, 1.0, 3.0], [3.0, 0.0, 0.0, 1.0], [4.0, 5.0, 0.0, 1.0]];
        let d = Dataset::new(w, vec![0, 0, 1, 1], Array2::zeros((4, 0))).unwrap();
        let status = validate(&d);
        let reasons: Vec<_> = status.iter().map(|s| s.reason).collect();
        assert_eq!(
            reasons,
            vec![StatusReason::Ok, StatusReason::AllZeroInArm0, StatusReason::AllZeroInArm1, StatusReason::Ok]
        );
        assert!(status.iter().all(|s| s.estimable == (s.reason == StatusReason::Ok)));

        let w = array![[0.0], [0.0], [0.0]];
        let d = Dataset::new(w, vec![0, 1, 1], Array2::zeros((3, 0))).unwrap();
        assert_eq!(validate(&d)[0].reason, StatusReason::AllZero);
    }

    #[test]
    fn constructor_enforces_invariants() {
        let x = Array2::zeros((2, 0));
        assert!(Dataset::new(array![[1.0], [2.0]], vec![1, 1], x.clone()).is_err());
        assert!(Dataset::new(array![[-1.0], [2.0]], vec![0, 1], x.clone()).is_err());
        assert!(Dataset::new(array![[1.0], [2.0]], vec![0, 2], x.clone()).is_err());
        assert!(Dataset::new(array![[f64::NAN], [2.0]], vec![0, 1], x).is_err());
    }
}
