//! Tabular CSV ingestion and export.
//!
//! A dataset on disk is a UTF-8 CSV with a header row plus a JSON sidecar
//! schema naming the label column, the optional sensitive column, and the
//! feature columns. Numeric features are z-score standardized unless the
//! schema opts out; categorical features are one-hot encoded against the
//! schema's category list with a reserved trailing "other" slot for unseen
//! values (or against the values seen in the file when the schema lists
//! none). The sensitive column, when declared, is mapped to {0, 1} and
//! appended as the last feature coordinate tagged sensitive.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, FeatureRole};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub label: LabelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive: Option<SensitiveSpec>,
    pub features: Vec<FeatureSpec>,
    /// Concept id per class; defaults to singleton concepts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_of_class: Option<Vec<usize>>,
    /// Column carrying a background index (SCM exports).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_id_column: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    pub column: String,
    /// Binary favorable value: rows matching it get label 1, the rest 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
    /// Explicit class list; label = index in this list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitiveSpec {
    pub column: String,
    /// Value mapped to the privileged group (sensitive = 1).
    pub privileged: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub column: String,
    pub kind: FeatureKind,
    /// Known categories for categorical columns; unlisted values map to a
    /// reserved "other" slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    /// z-score numeric columns (default true).
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<FeatureRole>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

impl CsvSchema {
    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Schema("schema declares no feature columns".into()));
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.column.as_str()) {
                return Err(Error::Schema(format!("duplicate feature column '{}'", f.column)));
            }
            if f.kind == FeatureKind::Numeric && f.categories.is_some() {
                return Err(Error::Schema(format!(
                    "numeric column '{}' lists categories",
                    f.column
                )));
            }
        }
        if seen.contains(self.label.column.as_str()) {
            return Err(Error::Schema(format!(
                "label column '{}' also listed as a feature",
                self.label.column
            )));
        }
        if let Some(s) = &self.sensitive {
            if seen.contains(s.column.as_str()) {
                return Err(Error::Schema(format!(
                    "sensitive column '{}' also listed as a feature",
                    s.column
                )));
            }
        }
        if self.label.positive.is_some() && self.label.classes.is_some() {
            return Err(Error::Schema(
                "label spec gives both 'positive' and 'classes'".into(),
            ));
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: CsvSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }
}

/// Load a CSV + schema pair into a [`Dataset`].
pub fn load_tabular_csv(csv_path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    schema.validate()?;
    let csv_path = csv_path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(csv_path)
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", csv_path.display())))?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in CSV header")))
    };

    let label_col = col_index(&schema.label.column)?;
    let sensitive_col = schema
        .sensitive
        .as_ref()
        .map(|s| col_index(&s.column))
        .transpose()?;
    let background_col = schema
        .background_id_column
        .as_ref()
        .map(|c| col_index(c))
        .transpose()?;
    let feature_cols: Vec<usize> = schema
        .features
        .iter()
        .map(|f| col_index(&f.column))
        .collect::<Result<_>>()?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::CsvRow {
            row: i + 1,
            message: e.to_string(),
        })?;
        rows.push(record.iter().map(|s| s.trim().to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "{} contains no data rows",
            csv_path.display()
        )));
    }

    // labels
    let raw_labels: Vec<&str> = rows.iter().map(|r| r[label_col].as_str()).collect();
    let (labels, num_classes) = encode_labels(&schema.label, &raw_labels)?;

    // sensitive
    let sensitive: Option<Vec<u8>> = match (&schema.sensitive, sensitive_col) {
        (Some(spec), Some(col)) => Some(
            rows.iter()
                .map(|r| (r[col] == spec.privileged) as u8)
                .collect(),
        ),
        _ => None,
    };

    // background ids
    let background_id: Option<Vec<usize>> = match background_col {
        Some(col) => {
            let mut out = Vec::with_capacity(rows.len());
            for (i, r) in rows.iter().enumerate() {
                let v = r[col].parse::<usize>().map_err(|_| Error::CsvRow {
                    row: i + 1,
                    message: format!("background id '{}' is not an integer", r[col]),
                })?;
                out.push(v);
            }
            Some(out)
        }
        None => None,
    };

    // features
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut roles: Vec<Option<FeatureRole>> = Vec::new();
    for (spec, &col) in schema.features.iter().zip(&feature_cols) {
        match spec.kind {
            FeatureKind::Numeric => {
                let mut vals = Vec::with_capacity(rows.len());
                for (i, r) in rows.iter().enumerate() {
                    let v = r[col].parse::<f64>().map_err(|_| Error::CsvRow {
                        row: i + 1,
                        message: format!(
                            "column '{}' value '{}' is not numeric",
                            spec.column, r[col]
                        ),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::CsvRow {
                            row: i + 1,
                            message: format!("column '{}' value is not finite", spec.column),
                        });
                    }
                    vals.push(v);
                }
                if spec.standardize {
                    z_score(&mut vals);
                }
                columns.push(vals);
                roles.push(spec.role);
            }
            FeatureKind::Categorical => {
                let (vocab, has_other) = match &spec.categories {
                    Some(cats) => (cats.clone(), true),
                    None => {
                        let mut uniq: Vec<String> = rows
                            .iter()
                            .map(|r| r[col].clone())
                            .collect::<HashSet<_>>()
                            .into_iter()
                            .collect();
                        uniq.sort();
                        (uniq, false)
                    }
                };
                let width = vocab.len() + usize::from(has_other);
                let mut onehot = vec![vec![0.0f64; rows.len()]; width];
                for (i, r) in rows.iter().enumerate() {
                    let slot = vocab
                        .iter()
                        .position(|c| *c == r[col])
                        .unwrap_or(vocab.len());
                    // without a declared vocabulary every value is seen
                    onehot[slot][i] = 1.0;
                }
                for slot_vals in onehot {
                    columns.push(slot_vals);
                    roles.push(spec.role);
                }
            }
        }
    }

    // sensitive coordinate last
    if let Some(s) = &sensitive {
        columns.push(s.iter().map(|&v| v as f64).collect());
        roles.push(Some(FeatureRole::Sensitive));
    }

    let n = rows.len();
    let d = columns.len();
    let mut features = Array2::<f64>::zeros((n, d));
    for (j, colvals) in columns.iter().enumerate() {
        for (i, &v) in colvals.iter().enumerate() {
            features[[i, j]] = v;
        }
    }

    let concept_of_class = match &schema.concept_of_class {
        Some(map) => {
            if map.len() != num_classes {
                return Err(Error::Schema(format!(
                    "concept_of_class has {} entries for {num_classes} classes",
                    map.len()
                )));
            }
            map.clone()
        }
        // singleton concepts by default (binary tabular per the domain setup)
        None => (0..num_classes).collect(),
    };

    let dataset = Dataset {
        features,
        labels,
        concept_of_class,
        sensitive,
        background_id,
        feature_roles: Some(roles),
    };
    dataset.validate()?;
    Ok(dataset)
}

fn encode_labels(spec: &LabelSpec, raw: &[&str]) -> Result<(Vec<usize>, usize)> {
    if let Some(positive) = &spec.positive {
        let labels = raw.iter().map(|v| (*v == positive) as usize).collect();
        return Ok((labels, 2));
    }
    let classes: Vec<String> = match &spec.classes {
        Some(c) => c.clone(),
        None => {
            let mut uniq: Vec<String> = raw
                .iter()
                .map(|s| s.to_string())
                .collect::<HashSet<_>>()
                .into_iter()
                .collect();
            uniq.sort();
            uniq
        }
    };
    if classes.len() < 2 {
        return Err(Error::InvalidDataset(format!(
            "label column has {} distinct values, need at least 2",
            classes.len()
        )));
    }
    let mut labels = Vec::with_capacity(raw.len());
    for (i, v) in raw.iter().enumerate() {
        let idx = classes.iter().position(|c| c == v).ok_or_else(|| Error::CsvRow {
            row: i + 1,
            message: format!("label '{v}' not in declared class list"),
        })?;
        labels.push(idx);
    }
    Ok((labels, classes.len()))
}

fn z_score(vals: &mut [f64]) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        for v in vals.iter_mut() {
            *v = 0.0;
        }
    } else {
        for v in vals.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
}

/// Export a dataset to CSV + sidecar so it round-trips through
/// [`load_tabular_csv`]. Feature coordinates are written raw (shortest
/// round-trip float formatting) with standardization disabled in the sidecar;
/// the sensitive coordinate, when present, is written as a `sensitive` column.
pub fn save_tabular_csv(
    dataset: &Dataset,
    csv_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<()> {
    dataset.validate()?;
    let csv_path = csv_path.as_ref();
    let sidecar_path = sidecar_path.as_ref();

    let roles = dataset
        .feature_roles
        .clone()
        .unwrap_or_else(|| vec![None; dataset.num_features()]);
    let sensitive_coords: Vec<usize> = roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == Some(FeatureRole::Sensitive))
        .map(|(i, _)| i)
        .collect();
    if dataset.sensitive.is_some() && sensitive_coords.len() != 1 {
        return Err(Error::InvalidDataset(format!(
            "export needs exactly one sensitive coordinate, found {}",
            sensitive_coords.len()
        )));
    }

    let plain_coords: Vec<usize> = (0..dataset.num_features())
        .filter(|i| !sensitive_coords.contains(i))
        .collect();

    // header
    let mut text = String::new();
    let mut header: Vec<String> = plain_coords.iter().map(|i| format!("f{i}")).collect();
    if dataset.sensitive.is_some() {
        header.push("sensitive".into());
    }
    header.push("label".into());
    if dataset.background_id.is_some() {
        header.push("background_id".into());
    }
    text.push_str(&header.join(","));
    text.push('\n');

    for row in 0..dataset.num_rows() {
        let mut cells: Vec<String> = Vec::with_capacity(header.len());
        for &c in &plain_coords {
            let mut s = String::new();
            write!(s, "{}", dataset.features[[row, c]]).expect("write to string");
            cells.push(s);
        }
        if let Some(sens) = &dataset.sensitive {
            cells.push(sens[row].to_string());
        }
        cells.push(dataset.labels[row].to_string());
        if let Some(bg) = &dataset.background_id {
            cells.push(bg[row].to_string());
        }
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(csv_path, text).map_err(|e| Error::io(csv_path, e))?;

    let schema = CsvSchema {
        label: LabelSpec {
            column: "label".into(),
            positive: None,
            classes: Some((0..dataset.num_classes()).map(|c| c.to_string()).collect()),
        },
        sensitive: dataset.sensitive.as_ref().map(|_| SensitiveSpec {
            column: "sensitive".into(),
            privileged: "1".into(),
        }),
        features: plain_coords
            .iter()
            .map(|&i| FeatureSpec {
                column: format!("f{i}"),
                kind: FeatureKind::Numeric,
                categories: None,
                standardize: false,
                role: roles[i],
            })
            .collect(),
        concept_of_class: Some(dataset.concept_of_class.clone()),
        background_id_column: dataset.background_id.as_ref().map(|_| "background_id".into()),
    };
    let json = serde_json::to_string_pretty(&schema)?;
    fs::write(sidecar_path, json).map_err(|e| Error::io(sidecar_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_files(dir: &Path, csv: &str, schema: &str) -> (std::path::PathBuf, CsvSchema) {
        let csv_path = dir.join("data.csv");
        fs::write(&csv_path, csv).unwrap();
        let schema: CsvSchema = serde_json::from_str(schema).unwrap();
        (csv_path, schema)
    }

    #[test]
    fn four_row_smoke_with_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let (csv_path, schema) = write_files(
            dir.path(),
            "age,sex,outcome\n30,Male,1\n40,Female,0\n25,Female,1\n50,Male,0\n",
            r#"{
                "label": {"column": "outcome", "positive": "1"},
                "sensitive": {"column": "sex", "privileged": "Male"},
                "features": [{"column": "age", "kind": "numeric"}]
            }"#,
        );
        let ds = load_tabular_csv(&csv_path, &schema).unwrap();
        assert_eq!(ds.num_rows(), 4);
        assert_eq!(ds.labels, vec![1, 0, 1, 0]);
        assert_eq!(ds.sensitive, Some(vec![1, 0, 0, 1]));
        // age standardized + sensitive coordinate appended
        assert_eq!(ds.num_features(), 2);
        assert_eq!(ds.sensitive_coordinates(), vec![1]);
        // binary labels get singleton concepts
        assert_eq!(ds.concept_of_class, vec![0, 1]);
        // z-scored column has near-zero mean
        let mean: f64 = (0..4).map(|i| ds.features[[i, 0]]).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn adult_style_favorable_label_maps_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let (csv_path, schema) = write_files(
            dir.path(),
            "hours,sex,income\n40,Male,>50K\n20,Female,<=50K\n60,Female,>50K\n35,Male,<=50K\n",
            r#"{
                "label": {"column": "income", "positive": ">50K"},
                "sensitive": {"column": "sex", "privileged": "Male"},
                "features": [{"column": "hours", "kind": "numeric"}]
            }"#,
        );
        let ds = load_tabular_csv(&csv_path, &schema).unwrap();
        assert_eq!(ds.labels, vec![1, 0, 1, 0]);
        assert_eq!(ds.sensitive, Some(vec![1, 0, 0, 1]));
    }

    #[test]
    fn unseen_category_goes_to_other_slot() {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = String::from("color,label\n");
        for i in 0..10 {
            let color = if i == 6 { "chartreuse" } else if i % 2 == 0 { "red" } else { "blue" };
            csv.push_str(&format!("{color},{}\n", i % 2));
        }
        let (csv_path, schema) = write_files(
            dir.path(),
            &csv,
            r#"{
                "label": {"column": "label", "classes": ["0", "1"]},
                "features": [{"column": "color", "kind": "categorical", "categories": ["red", "blue"]}]
            }"#,
        );
        let ds = load_tabular_csv(&csv_path, &schema).unwrap();
        assert_eq!(ds.num_rows(), 10);
        // red, blue, other → 3 coordinates regardless of data contents
        assert_eq!(ds.num_features(), 3);
        // row 6 (0-based) carried the unseen value
        assert_eq!(ds.features[[6, 2]], 1.0);
        assert_eq!(ds.features[[6, 0]] + ds.features[[6, 1]], 0.0);
    }

    #[test]
    fn missing_column_and_garbage_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (csv_path, schema) = write_files(
            dir.path(),
            "a,label\n1,0\n2,1\n",
            r#"{
                "label": {"column": "label"},
                "features": [{"column": "missing", "kind": "numeric"}]
            }"#,
        );
        let err = load_tabular_csv(&csv_path, &schema).unwrap_err();
        assert!(err.to_string().contains("missing"), "got: {err}");

        let (csv_path, schema) = write_files(
            dir.path(),
            "a,label\n1,0\nnot_a_number,1\n",
            r#"{
                "label": {"column": "label"},
                "features": [{"column": "a", "kind": "numeric"}]
            }"#,
        );
        let err = load_tabular_csv(&csv_path, &schema).unwrap_err();
        assert!(err.to_string().contains("row 2"), "got: {err}");
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (csv_path, schema) = write_files(
            dir.path(),
            "a,label\n",
            r#"{
                "label": {"column": "label"},
                "features": [{"column": "a", "kind": "numeric"}]
            }"#,
        );
        assert!(load_tabular_csv(&csv_path, &schema).is_err());
    }

    #[test]
    fn export_round_trips_exactly() {
        let spec = crate::datagen::ScmSpec {
            num_concepts: 2,
            classes_per_concept: vec![2, 2],
            causal_dim: 3,
            background_dim: 2,
            num_backgrounds: 3,
            shortcut_strength: 0.7,
            class_priors: vec![0.25; 4],
            sibling_mix: 0.2,
            noise_std: 0.5,
            samples: 40,
        };
        let ds = crate::datagen::generate_scm_dataset(&spec, 9).unwrap();
        let ds = crate::datagen::attach_sensitive_from_background(&ds, &[0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("out.csv");
        let sidecar = dir.path().join("out.schema.json");
        save_tabular_csv(&ds, &csv_path, &sidecar).unwrap();

        let schema = CsvSchema::from_file(&sidecar).unwrap();
        let back = load_tabular_csv(&csv_path, &schema).unwrap();
        assert_eq!(back.num_rows(), ds.num_rows());
        assert_eq!(back.num_features(), ds.num_features());
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.sensitive, ds.sensitive);
        assert_eq!(back.background_id, ds.background_id);
        assert_eq!(back.feature_roles, ds.feature_roles);
        assert_eq!(back.concept_of_class, ds.concept_of_class);
        for (a, b) in ds.features.iter().zip(back.features.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
