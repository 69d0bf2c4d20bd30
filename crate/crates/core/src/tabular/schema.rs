use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numerical,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Ordered category codes. Empty for numerical columns.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl ColumnSchema {
    pub fn numerical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numerical,
            categories: Vec::new(),
        }
    }

    pub fn categorical<I, T>(name: impl Into<String>, categories: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            categories: categories.into_iter().map(Into::into).collect(),
        }
    }

    pub fn category_code(&self, value: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == value)
    }
}

/// Label column: holds integers `1..=num_classes` in CSV files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSchema>,
    pub label: LabelSpec,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSchema>, label: LabelSpec) -> Result<Self> {
        let schema = Self { columns, label };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let schema: Schema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn write_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Schema("schema declares no feature columns".into()));
        }
        let mut seen = HashSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name `{}`", col.name)));
            }
            match col.kind {
                ColumnKind::Categorical if col.categories.is_empty() => {
                    return Err(Error::Schema(format!(
                        "categorical column `{}` has no categories",
                        col.name
                    )));
                }
                ColumnKind::Categorical => {
                    let distinct: HashSet<_> = col.categories.iter().collect();
                    if distinct.len() != col.categories.len() {
                        return Err(Error::Schema(format!(
                            "categorical column `{}` repeats a category",
                            col.name
                        )));
                    }
                }
                ColumnKind::Numerical if !col.categories.is_empty() => {
                    return Err(Error::Schema(format!(
                        "numerical column `{}` lists categories",
                        col.name
                    )));
                }
                ColumnKind::Numerical => {}
            }
        }
        if seen.contains(self.label.name.as_str()) {
            return Err(Error::Schema(format!(
                "label column `{}` is also a feature column",
                self.label.name
            )));
        }
        if self.label.num_classes < 1 {
            return Err(Error::Schema("label declares zero classes".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn num_classes(&self) -> usize {
        self.label.num_classes
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label() -> LabelSpec {
        LabelSpec {
            name: "y".into(),
            num_classes: 2,
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = Schema::new(
            vec![ColumnSchema::numerical("a"), ColumnSchema::numerical("a")],
            label(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schema(m) if m.contains("duplicate")));
    }

    #[test]
    fn categorical_needs_categories() {
        let err = Schema::new(
            vec![ColumnSchema::categorical("c", Vec::<String>::new())],
            label(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn json_shape() {
        let text = r#"{
            "columns": [
                {"name": "x", "kind": "numerical"},
                {"name": "c", "kind": "categorical", "categories": ["a", "b"]}
            ],
            "label": {"name": "y", "num_classes": 3}
        }"#;
        let schema: Schema = serde_json::from_str(text).unwrap();
        schema.validate().unwrap();
        assert_eq!(schema.width(), 2);
        assert_eq!(schema.columns[1].category_code("b"), Some(1));
        assert_eq!(schema.num_classes(), 3);
    }
}
