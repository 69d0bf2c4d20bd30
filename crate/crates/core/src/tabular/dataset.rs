use std::path::Path;

use ndarray::{Array2, Axis};

use super::schema::{ColumnKind, Schema};
use crate::error::{Error, Result};

/// Code stored for a categorical cell whose value the schema does not list.
/// Only target datasets may contain it; the encoder maps it to an all-zero one-hot.
pub const UNKNOWN_CATEGORY: f64 = -1.0;

/// Whether a dataset feeds training (strict) or is streamed at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

/// Raw table: numerical cells as values, categorical cells as category codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    rows: Array2<f64>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(schema: Schema, rows: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        schema.validate()?;
        if rows.nrows() == 0 {
            return Err(Error::invalid("dataset must contain at least one row"));
        }
        crate::error::check_dim("dataset columns", schema.width(), rows.ncols())?;
        let num_classes = schema.num_classes();
        if let Some(labels) = &labels {
            crate::error::check_dim("dataset labels", rows.nrows(), labels.len())?;
            if let Some((row, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
                return Err(Error::Parse {
                    row,
                    message: format!("label {} outside 1..={num_classes}", y + 1),
                });
            }
        }
        for (u, col) in schema.columns.iter().enumerate() {
            for (row, &v) in rows.column(u).iter().enumerate() {
                let ok = match col.kind {
                    ColumnKind::Numerical => v.is_finite(),
                    ColumnKind::Categorical => {
                        v == UNKNOWN_CATEGORY
                            || (v >= 0.0 && v.fract() == 0.0 && (v as usize) < col.categories.len())
                    }
                };
                if !ok {
                    return Err(Error::Parse {
                        row,
                        message: format!("invalid value {v} in column `{}`", col.name),
                    });
                }
            }
        }
        Ok(Self {
            schema,
            rows,
            labels,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn num_columns(&self) -> usize {
        self.rows.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.schema.num_classes()
    }

    /// Labels or an error naming the caller.
    pub fn require_labels(&self, context: &str) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("{context} requires a labeled dataset")))
    }

    /// New dataset holding the given rows, in order (repeats allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("row selection is empty"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("row index {bad} out of range")));
        }
        let rows = self.rows.select(Axis(0), indices);
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self {
            schema: self.schema.clone(),
            rows,
            labels,
        })
    }

    pub fn with_rows(&self, rows: Array2<f64>) -> Result<Self> {
        Self::new(self.schema.clone(), rows, self.labels.clone())
    }

    pub fn without_labels(&self) -> Self {
        Self {
            schema: self.schema.clone(),
            rows: self.rows.clone(),
            labels: None,
        }
    }

    pub fn count_unknown_categories(&self) -> usize {
        self.schema
            .columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == ColumnKind::Categorical)
            .map(|(u, _)| {
                self.rows
                    .column(u)
                    .iter()
                    .filter(|&&v| v == UNKNOWN_CATEGORY)
                    .count()
            })
            .sum()
    }

    /// Reads a headed CSV. Every header entry must be a schema column or the
    /// label column; the label column may be absent.
    pub fn from_csv(path: impl AsRef<Path>, schema: &Schema, role: Role) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_reader(file, schema, role)
    }

    pub fn from_reader<R: std::io::Read>(reader: R, schema: &Schema, role: Role) -> Result<Self> {
        schema.validate()?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let mut feature_pos = vec![None; schema.width()];
        let mut label_pos = None;
        for (pos, name) in header.iter().enumerate() {
            if name == schema.label.name {
                label_pos = Some(pos);
            } else if let Some(u) = schema.column_index(name) {
                if feature_pos[u].replace(pos).is_some() {
                    return Err(Error::Schema(format!("column `{name}` repeated in CSV header")));
                }
            } else {
                return Err(Error::Schema(format!(
                    "CSV column `{name}` is not declared in the schema"
                )));
            }
        }
        let feature_pos: Vec<usize> = feature_pos
            .into_iter()
            .enumerate()
            .map(|(u, p)| {
                p.ok_or_else(|| {
                    Error::Schema(format!(
                        "schema column `{}` missing from CSV header",
                        schema.columns[u].name
                    ))
                })
            })
            .collect::<Result<_>>()?;

        let num_classes = schema.num_classes();
        let mut cells = Vec::new();
        let mut labels = label_pos.map(|_| Vec::new());
        let mut n_rows = 0;
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != header.len() {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {} cells, found {}", header.len(), record.len()),
                });
            }
            for (u, &pos) in feature_pos.iter().enumerate() {
                let col = &schema.columns[u];
                let raw = &record[pos];
                if raw.is_empty() {
                    return Err(Error::Parse {
                        row,
                        message: format!("missing cell in column `{}`", col.name),
                    });
                }
                let value = match col.kind {
                    ColumnKind::Numerical => {
                        let v: f64 = raw.parse().map_err(|_| Error::Parse {
                            row,
                            message: format!("`{raw}` is not a number (column `{}`)", col.name),
                        })?;
                        if !v.is_finite() {
                            return Err(Error::Parse {
                                row,
                                message: format!("non-finite value in column `{}`", col.name),
                            });
                        }
                        v
                    }
                    ColumnKind::Categorical => match col.category_code(raw) {
                        Some(code) => code as f64,
                        None if role == Role::Source => {
                            return Err(Error::Schema(format!(
                                "row {row}: unknown category `{raw}` in source column `{}`",
                                col.name
                            )));
                        }
                        None => {
                            log::debug!("row {row}: unseen category `{raw}` in `{}`", col.name);
                            UNKNOWN_CATEGORY
                        }
                    },
                };
                cells.push(value);
            }
            if let (Some(pos), Some(labels)) = (label_pos, labels.as_mut()) {
                let raw = &record[pos];
                let y: usize = raw.parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("label `{raw}` is not an integer"),
                })?;
                if y == 0 || y > num_classes {
                    return Err(Error::Parse {
                        row,
                        message: format!("label {y} outside 1..={num_classes}"),
                    });
                }
                labels.push(y - 1);
            }
            n_rows += 1;
        }
        if n_rows == 0 {
            return Err(Error::Parse {
                row: 0,
                message: "CSV has no data rows".into(),
            });
        }
        let rows = Array2::from_shape_vec((n_rows, schema.width()), cells)
            .expect("cell count matches shape");
        Self::new(schema.clone(), rows, labels)
    }

    /// Writes a headed CSV (features in schema order, then the label column when present).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = self.schema.columns.iter().map(|c| c.name.as_str()).collect();
        if self.labels.is_some() {
            header.push(&self.schema.label.name);
        }
        wtr.write_record(&header)?;
        for (i, row) in self.rows.outer_iter().enumerate() {
            let mut record: Vec<String> = self
                .schema
                .columns
                .iter()
                .zip(row.iter())
                .map(|(col, &v)| match col.kind {
                    ColumnKind::Numerical => format!("{v:?}"),
                    ColumnKind::Categorical if v == UNKNOWN_CATEGORY => "<unknown>".to_string(),
                    ColumnKind::Categorical => col.categories[v as usize].clone(),
                })
                .collect();
            if let Some(labels) = &self.labels {
                record.push((labels[i] + 1).to_string());
            }
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Loads `path` against the JSON schema at `schema_path`.
pub fn load_dataset(
    path: impl AsRef<Path>,
    schema_path: impl AsRef<Path>,
    role: Role,
) -> Result<Dataset> {
    let schema = Schema::from_json_file(schema_path)?;
    Dataset::from_csv(path, &schema, role)
}

#[cfg(test)]
mod tests {
    use super::super::schema::{ColumnSchema, LabelSpec};
    use super::*;

    fn schema() -> Schema {
        Schema::new(
            vec![
                ColumnSchema::numerical("a"),
                ColumnSchema::numerical("b"),
                ColumnSchema::categorical("c", ["x", "y"]),
            ],
            LabelSpec {
                name: "label".into(),
                num_classes: 2,
            },
        )
        .unwrap()
    }

    #[test]
    fn parses_three_rows() {
        let csv = "a,b,c,label\n1.0,2,x,1\n3,4.5,y,2\n-1,0,x,2\n";
        let d = Dataset::from_reader(csv.as_bytes(), &schema(), Role::Source).unwrap();
        assert_eq!(d.num_columns(), 3);
        assert_eq!(d.len(), 3);
        assert_eq!(d.rows()[[1, 2]], 1.0);
        assert_eq!(d.labels().unwrap(), &[0, 1, 1]);
    }

    #[test]
    fn header_order_may_differ() {
        let csv = "c,label,b,a\ny,1,2,3\n";
        let d = Dataset::from_reader(csv.as_bytes(), &schema(), Role::Source).unwrap();
        assert_eq!(d.rows().row(0).to_vec(), vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn wrong_arity_names_row() {
        let csv = "a,b,c,label\n1,2,x,1\n1,2,x\n";
        let err = Dataset::from_reader(csv.as_bytes(), &schema(), Role::Source).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, .. }), "{err}");
    }

    #[test]
    fn missing_cell_rejected() {
        let csv = "a,b,c,label\n1,,x,1\n";
        let err = Dataset::from_reader(csv.as_bytes(), &schema(), Role::Target).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 0, .. }));
    }

    #[test]
    fn unknown_category_strict_for_source_only() {
        let csv = "a,b,c,label\n1,2,z,1\n";
        let err = Dataset::from_reader(csv.as_bytes(), &schema(), Role::Source).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        let d = Dataset::from_reader(csv.as_bytes(), &schema(), Role::Target).unwrap();
        assert_eq!(d.rows()[[0, 2]], UNKNOWN_CATEGORY);
        assert_eq!(d.count_unknown_categories(), 1);
    }

    #[test]
    fn label_column_optional_and_range_checked() {
        let d = Dataset::from_reader("a,b,c\n1,2,x\n".as_bytes(), &schema(), Role::Target).unwrap();
        assert!(d.labels().is_none());
        let err =
            Dataset::from_reader("a,b,c,label\n1,2,x,3\n".as_bytes(), &schema(), Role::Target)
                .unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn undeclared_column_rejected() {
        let err = Dataset::from_reader("a,b,c,d\n1,2,x,4\n".as_bytes(), &schema(), Role::Target)
            .unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn csv_round_trip() {
        let csv = "a,b,c,label\n1.5,2,x,1\n3,4.25,y,2\n";
        let d = Dataset::from_reader(csv.as_bytes(), &schema(), Role::Source).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        d.write_csv(&path).unwrap();
        let back = Dataset::from_csv(&path, &schema(), Role::Source).unwrap();
        assert_eq!(d, back);
    }
}
