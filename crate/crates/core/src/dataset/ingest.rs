use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SeriesDataset, Split, VarKind};
use crate::error::{Result, StarError};

/// Sidecar JSON describing how to read a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub state_columns: Vec<String>,
    pub label_column: Option<String>,
    pub split: Split,
    /// Free-form provenance (generator config, version); ignored on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl DatasetSchema {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| StarError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| StarError::Schema(format!("{}: {e}", path.display())))
    }
}

/// Read a dataset CSV plus its schema sidecar.
///
/// State columns are mapped to category indices by the sorted unique values
/// of the train split. For a test file, pass the already loaded train split
/// as `reference`; values it never saw map to the reserved unknown index.
/// Without a reference the file's own values define the categories.
pub fn load_csv(
    path: &Path,
    schema_path: &Path,
    reference: Option<&SeriesDataset>,
) -> Result<SeriesDataset> {
    let schema = DatasetSchema::from_path(schema_path)?;
    let text = fs::read_to_string(path).map_err(|e| StarError::io(path, e))?;
    if text.trim().is_empty() {
        return Err(StarError::EmptyInput(path.display().to_string()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();

    for name in schema
        .state_columns
        .iter()
        .chain(schema.label_column.iter())
    {
        if !header.contains(name) {
            return Err(StarError::Schema(format!(
                "column '{name}' named in schema is missing from {}",
                path.display()
            )));
        }
    }

    let mut raw: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| StarError::Parse {
                // header is line 1
                row: row_idx + 2,
                column: header[c].clone(),
                message: format!("'{cell}' is not a number"),
            })?;
            raw[c].push(v);
        }
    }
    if raw.first().is_none_or(Vec::is_empty) {
        return Err(StarError::EmptyInput(format!(
            "{} has a header but no rows",
            path.display()
        )));
    }

    let mut labels = None;
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    let mut columns = Vec::new();
    for (c, name) in header.iter().enumerate() {
        if schema.label_column.as_deref() == Some(name.as_str()) {
            let col = raw[c]
                .iter()
                .map(|&v| match v {
                    0.0 => Ok(0u8),
                    1.0 => Ok(1u8),
                    other => Err(StarError::Input(format!(
                        "label column '{name}' holds {other}"
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            labels = Some(col);
            continue;
        }
        if schema.state_columns.contains(name) {
            let categories = match reference {
                Some(train) => {
                    let idx = train
                        .names()
                        .iter()
                        .position(|n| n == name)
                        .ok_or_else(|| {
                            StarError::Schema(format!(
                                "state column '{name}' is absent from the reference split"
                            ))
                        })?;
                    match &train.kinds()[idx] {
                        VarKind::State { categories } => categories.clone(),
                        VarKind::Numerical => {
                            return Err(StarError::Schema(format!(
                                "'{name}' is numerical in the reference split"
                            )))
                        }
                    }
                }
                None => sorted_unique(&raw[c]),
            };
            let ids = raw[c]
                .iter()
                .map(|&v| map_category(&categories, v) as f64)
                .collect();
            names.push(name.clone());
            kinds.push(VarKind::State { categories });
            columns.push(ids);
        } else {
            names.push(name.clone());
            kinds.push(VarKind::Numerical);
            columns.push(std::mem::take(&mut raw[c]));
        }
    }
    SeriesDataset::new(names, kinds, columns, labels, schema.split)
}

fn sorted_unique(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Category index of `v`, or `categories.len()` (unknown) when unseen.
fn map_category(categories: &[f64], v: f64) -> usize {
    categories
        .iter()
        .position(|&c| c == v)
        .unwrap_or(categories.len())
}

/// Write a dataset as CSV plus schema sidecar. State columns are written as
/// raw values; the unknown index is written as `NaN`. `meta` goes into a
/// leading `#` comment line and into the schema.
pub fn write_csv(
    ds: &SeriesDataset,
    path: &Path,
    schema_path: &Path,
    meta: Option<&serde_json::Value>,
) -> Result<()> {
    let mut w = csv_with_comment(path, meta)?;
    let mut header: Vec<String> = ds.names().to_vec();
    let label_name = ds.labels().map(|_| unique_label_name(ds.names()));
    if let Some(l) = &label_name {
        header.push(l.clone());
    }
    w.write_record(&header)?;
    for t in 0..ds.len() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for (c, kind) in ds.kinds().iter().enumerate() {
            let v = ds.column(c)[t];
            match kind {
                VarKind::Numerical => rec.push(format!("{v}")),
                VarKind::State { categories } => rec.push(
                    categories
                        .get(v as usize)
                        .map_or_else(|| "NaN".to_string(), |r| format!("{r}")),
                ),
            }
        }
        if let Some(l) = ds.labels() {
            rec.push(l[t].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| StarError::io(path, e))?;

    let schema = DatasetSchema {
        state_columns: ds
            .state_indices()
            .iter()
            .map(|&i| ds.names()[i].clone())
            .collect(),
        label_column: label_name,
        split: ds.split(),
        meta: meta.cloned(),
    };
    fs::write(schema_path, serde_json::to_string_pretty(&schema)?)
        .map_err(|e| StarError::io(schema_path, e))
}

/// CSV writer whose file starts with `# <meta json>` when `meta` is given.
pub(crate) fn csv_with_comment(
    path: &Path,
    meta: Option<&serde_json::Value>,
) -> Result<csv::Writer<fs::File>> {
    use std::io::Write;
    let mut file = fs::File::create(path).map_err(|e| StarError::io(path, e))?;
    if let Some(m) = meta {
        writeln!(file, "# {}", serde_json::to_string(m)?).map_err(|e| StarError::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(file))
}

fn unique_label_name(names: &[String]) -> String {
    let mut name = "label".to_string();
    while names.contains(&name) {
        name.push('_');
    }
    name
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p)
            .unwrap()
            .write_all(text.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn train_maps_sorted_unique_and_test_maps_unseen_to_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let train_csv = write(
            dir.path(),
            "train.csv",
            "flow,valve\n1.0,1\n2.0,0\n3.0,0.5\n4.0,0\n",
        );
        let train_schema = write(
            dir.path(),
            "train.json",
            r#"{"state_columns":["valve"],"label_column":null,"split":"train"}"#,
        );
        let train = load_csv(&train_csv, &train_schema, None).unwrap();
        assert_eq!(train.cardinalities(), vec![3]);
        assert_eq!(
            train.kinds()[1],
            VarKind::State {
                categories: vec![0.0, 0.5, 1.0]
            }
        );
        assert_eq!(train.column(1), &[2.0, 0.0, 1.0, 0.0]);

        let test_csv = write(
            dir.path(),
            "test.csv",
            "flow,valve,y\n1.0,0.7,1\n2.0,0.5,0\n",
        );
        let test_schema = write(
            dir.path(),
            "test.json",
            r#"{"state_columns":["valve"],"label_column":"y","split":"test"}"#,
        );
        let test = load_csv(&test_csv, &test_schema, Some(&train)).unwrap();
        assert_eq!(test.column(1), &[3.0, 1.0]);
        assert_eq!(test.labels(), Some(&[1u8, 0][..]));
        assert_eq!(test.names().len(), 2);
    }

    #[test]
    fn round_trip_recovers_raw_values() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "a.csv", "x,s\n0.25,3\n0.5,-1\n0.75,3\n1.0,7\n");
        let schema = write(
            dir.path(),
            "a.json",
            r#"{"state_columns":["s"],"label_column":null,"split":"train"}"#,
        );
        let ds = load_csv(&csv, &schema, None).unwrap();
        let raw: Vec<f64> = ds
            .column(1)
            .iter()
            .map(|&id| ds.raw_state_value(1, id as usize).unwrap())
            .collect();
        assert_eq!(raw, vec![3.0, -1.0, 3.0, 7.0]);

        let out_csv = dir.path().join("b.csv");
        let out_schema = dir.path().join("b.json");
        write_csv(&ds, &out_csv, &out_schema, None).unwrap();
        let again = load_csv(&out_csv, &out_schema, None).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn missing_label_column_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "a.csv", "x,s\n1,0\n");
        let schema = write(
            dir.path(),
            "a.json",
            r#"{"state_columns":["s"],"label_column":null,"split":"test"}"#,
        );
        let ds = load_csv(&csv, &schema, None).unwrap();
        assert!(ds.labels().is_none());
        assert_eq!(ds.split(), Split::Test);
    }

    #[test]
    fn error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let schema = write(
            dir.path(),
            "a.json",
            r#"{"state_columns":["valve"],"label_column":null,"split":"train"}"#,
        );

        let missing = write(dir.path(), "m.csv", "flow\n1\n");
        assert!(matches!(
            load_csv(&missing, &schema, None),
            Err(StarError::Schema(_))
        ));

        let bad = write(dir.path(), "b.csv", "flow,valve\n1,0\nabc,1\n");
        match load_csv(&bad, &schema, None) {
            Err(StarError::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "flow");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        let empty = write(dir.path(), "e.csv", "");
        assert!(matches!(
            load_csv(&empty, &schema, None),
            Err(StarError::EmptyInput(_))
        ));

        let unknown_key = write(
            dir.path(),
            "u.json",
            r#"{"state_columns":[],"label_column":null,"split":"train","x":1}"#,
        );
        let ok = write(dir.path(), "ok.csv", "flow\n1\n");
        assert!(matches!(
            load_csv(&ok, &unknown_key, None),
            Err(StarError::Schema(_))
        ));
    }
}
