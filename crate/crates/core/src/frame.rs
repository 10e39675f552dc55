//! Column-oriented feature tables consumed by the learners.

use crate::error::{AdtError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    /// Integer-coded categorical with codes in `0..n_levels`.
    Categorical { codes: Vec<u32>, n_levels: u32 },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self, Column::Categorical { .. })
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
            Column::Categorical { codes, n_levels } => Column::Categorical {
                codes: rows.iter().map(|&r| codes[r]).collect(),
                n_levels: *n_levels,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    names: Vec<String>,
    columns: Vec<Column>,
    n_rows: usize,
}

impl FeatureFrame {
    pub fn new(names: Vec<String>, columns: Vec<Column>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(AdtError::InvalidInput("feature names/columns mismatch".into()));
        }
        let n_rows = columns.first().map_or(0, Column::len);
        if columns.iter().any(|c| c.len() != n_rows) {
            return Err(AdtError::InvalidInput("ragged feature columns".into()));
        }
        for (name, col) in names.iter().zip(&columns) {
            match col {
                Column::Numeric(v) if v.iter().any(|x| !x.is_finite()) => {
                    return Err(AdtError::NonFinite {
                        column: name.clone(),
                        row: v.iter().position(|x| !x.is_finite()).unwrap_or(0),
                    })
                }
                Column::Categorical { codes, n_levels } if codes.iter().any(|c| c >= n_levels) => {
                    return Err(AdtError::InvalidInput(format!(
                        "categorical code out of range in `{name}`"
                    )))
                }
                _ => {}
            }
        }
        Ok(FeatureFrame {
            names,
            columns,
            n_rows,
        })
    }

    /// Frame with only numeric columns.
    pub fn numeric(names: &[&str], columns: Vec<Vec<f64>>) -> Result<Self> {
        FeatureFrame::new(
            names.iter().map(|s| s.to_string()).collect(),
            columns.into_iter().map(Column::Numeric).collect(),
        )
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, k: usize) -> &Column {
        &self.columns[k]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureFrame {
        FeatureFrame {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            n_rows: rows.len(),
        }
    }

    /// Copy with the named numeric column set to a constant.
    pub fn with_constant(&self, name: &str, value: f64) -> Result<FeatureFrame> {
        let k = self
            .position(name)
            .ok_or_else(|| AdtError::InvalidInput(format!("no feature `{name}`")))?;
        let mut out = self.clone();
        out.columns[k] = Column::Numeric(vec![value; self.n_rows]);
        Ok(out)
    }
}
