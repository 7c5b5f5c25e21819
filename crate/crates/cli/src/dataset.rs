//! CSV ingestion.
//!
//! Dialect: comma separated, header row first, UTF-8, no quoting. Cells are
//! trimmed. Row numbers in errors count data rows from 1 (the header is not
//! counted).

use std::collections::BTreeSet;
use std::path::Path;

use neoclassical::Design;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, ErrorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Factor,
    Covariate,
    Response,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Labels(Vec<String>),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    pub data: ColumnData,
}

/// Column-kind declarations; anything undeclared is inferred.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Declarations {
    pub response: Option<String>,
    pub factors: Vec<String>,
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    n_rows: usize,
}

fn data_error(msg: impl Into<String>) -> CliError {
    CliError::new(ErrorKind::Data, msg)
}

pub fn load_csv(path: &Path, decl: &Declarations) -> Result<Dataset, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| data_error(format!("cannot read {}: {e}", path.display())))?;
    parse_csv(&text, decl)
}

pub fn parse_csv(text: &str, decl: &Declarations) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .quoting(false)
        .flexible(true)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| data_error(format!("bad header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(data_error("empty file: no header row"));
    }
    let mut seen = BTreeSet::new();
    for (j, h) in header.iter().enumerate() {
        if h.is_empty() {
            return Err(data_error(format!("column {} has an empty name", j + 1)));
        }
        if !seen.insert(h.as_str()) {
            return Err(data_error(format!("duplicate column name `{h}`")));
        }
    }
    for name in decl
        .factors
        .iter()
        .chain(&decl.covariates)
        .chain(decl.response.iter())
    {
        if !seen.contains(name.as_str()) {
            return Err(data_error(format!(
                "declared column `{name}` is not in the header"
            )));
        }
    }
    for f in &decl.factors {
        if decl.covariates.contains(f) || decl.response.as_ref() == Some(f) {
            return Err(CliError::new(
                ErrorKind::Usage,
                format!("column `{f}` is declared with two kinds"),
            ));
        }
    }
    if let Some(r) = &decl.response {
        if decl.covariates.contains(r) {
            return Err(CliError::new(
                ErrorKind::Usage,
                format!("column `{r}` is declared with two kinds"),
            ));
        }
    }

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| data_error(format!("row {row}: {e}")))?;
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != header.len() {
            return Err(data_error(format!(
                "row {row}: expected {} fields, found {}",
                header.len(),
                record.len()
            )));
        }
        for (j, cell) in record.iter().enumerate() {
            cells[j].push(cell.to_string());
        }
    }
    let n_rows = cells[0].len();
    if n_rows == 0 {
        return Err(data_error("no data rows"));
    }

    let mut columns = Vec::with_capacity(header.len());
    for (name, raw) in header.into_iter().zip(cells) {
        let kind = if decl.response.as_ref() == Some(&name) {
            ColumnKind::Response
        } else if decl.factors.contains(&name) {
            ColumnKind::Factor
        } else if decl.covariates.contains(&name) || raw.iter().all(|c| c.parse::<f64>().is_ok()) {
            ColumnKind::Covariate
        } else {
            ColumnKind::Factor
        };
        let data = match kind {
            ColumnKind::Factor => {
                if let Some(row) = raw.iter().position(|c| c.is_empty()) {
                    return Err(data_error(format!(
                        "row {}, column {name}: empty level",
                        row + 1
                    )));
                }
                ColumnData::Labels(raw)
            }
            _ => ColumnData::Values(numeric(&name, &raw)?),
        };
        columns.push(Column { name, kind, data });
    }
    Ok(Dataset { columns, n_rows })
}

fn numeric(name: &str, raw: &[String]) -> Result<Vec<f64>, CliError> {
    raw.iter()
        .enumerate()
        .map(|(i, c)| {
            let v: f64 = c.parse().map_err(|_| {
                data_error(format!(
                    "row {}, column {name}: `{c}` is not a number",
                    i + 1
                ))
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(data_error(format!(
                    "row {}, column {name}: non-finite value `{c}`",
                    i + 1
                )))
            }
        })
        .collect()
}

impl Dataset {
    pub fn n_units(&self) -> usize {
        self.n_rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn kind_of(&self, name: &str) -> Option<ColumnKind> {
        self.column(name).map(|c| c.kind)
    }

    /// The response column: the declared one, or a column named `y`.
    pub fn response(&self) -> Result<(&str, &[f64]), CliError> {
        let col = self
            .columns
            .iter()
            .find(|c| c.kind == ColumnKind::Response)
            .or_else(|| {
                self.column("y")
                    .filter(|c| matches!(c.data, ColumnData::Values(_)))
            })
            .ok_or_else(|| {
                CliError::new(
                    ErrorKind::Usage,
                    "no response column: pass --response or name a column `y`",
                )
            })?;
        match &col.data {
            ColumnData::Values(v) => Ok((&col.name, v)),
            ColumnData::Labels(_) => Err(data_error(format!(
                "response column `{}` is not numeric",
                col.name
            ))),
        }
    }

    /// Factors and covariates (everything except the response) as a design.
    pub fn design(&self) -> Result<Design, CliError> {
        let (response, _) = self.response()?;
        let mut d = Design::new(self.n_rows);
        for c in &self.columns {
            if c.name == response {
                continue;
            }
            match &c.data {
                ColumnData::Labels(l) => {
                    d.add_factor(&c.name, l).map_err(CliError::from)?;
                }
                ColumnData::Values(v) => {
                    d.add_covariate(&c.name, v.clone())
                        .map_err(CliError::from)?;
                }
            }
        }
        Ok(d)
    }
}
