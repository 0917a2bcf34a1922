//! Summary tables read by `icc` and `compare`.
//!
//! Two layouts are accepted. The wide layout has `subject_id`,
//! `occasion_id` and one column per summary. The long layout is the output
//! of `project`; its level-1 rows become summaries `mfpca_<component>`.

use std::collections::BTreeMap;
use std::path::Path;

use mfpca::Error;

/// Values keyed by summary, then by `(subject, occasion)`.
#[derive(Debug, Default)]
pub struct SummaryValues {
    pub names: Vec<String>,
    pub values: BTreeMap<String, BTreeMap<(String, String), f64>>,
}

const LONG_HEADER: [&str; 7] = ["subject_id", "occasion_id", "curve_id", "level", "component", "raw", "score"];

pub fn load_summaries(path: &Path) -> Result<SummaryValues, Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| format_error(1, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let long = headers.iter().map(String::as_str).eq(LONG_HEADER);
    if !long && (headers.len() < 3 || headers[0] != "subject_id" || headers[1] != "occasion_id") {
        return Err(Error::Format {
            row: 1,
            message: "expected subject_id,occasion_id,<summary>... or the project score layout".into(),
        });
    }
    let mut out = SummaryValues::default();
    if !long {
        out.names = headers[2..].to_vec();
    }
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| format_error(row, e))?;
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let number = |c: usize| -> Result<f64, Error> {
            field(c).parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                column: c + 1,
                value: field(c).to_string(),
            })
        };
        let unit = (field(0).to_string(), field(1).to_string());
        let mut put = |name: String, value: f64| -> Result<(), Error> {
            if !out.names.contains(&name) {
                out.names.push(name.clone());
            }
            if out.values.entry(name.clone()).or_default().insert(unit.clone(), value).is_some() {
                return Err(Error::Format {
                    row,
                    message: format!("second value of {name} for subject {:?} occasion {:?}", unit.0, unit.1),
                });
            }
            Ok(())
        };
        if long {
            if field(3) == "1" {
                put(format!("mfpca_{}", field(4)), number(6)?)?;
            }
        } else {
            for (c, name) in headers.iter().enumerate().skip(2) {
                put(name.clone(), number(c)?)?;
            }
        }
    }
    if out.names.is_empty() {
        return Err(Error::InsufficientData(format!("{} holds no summaries", path.display())));
    }
    Ok(out)
}

fn format_error(row: usize, e: csv::Error) -> Error {
    Error::Format {
        row,
        message: e.to_string(),
    }
}

impl SummaryValues {
    /// Subjects × occasions table of one summary; every subject must have
    /// every occasion.
    pub fn two_way(&self, name: &str) -> Result<Vec<Vec<f64>>, Error> {
        let cells = self
            .values
            .get(name)
            .ok_or_else(|| Error::InsufficientData(format!("no values of {name}")))?;
        let mut subjects: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
        let mut occasions = std::collections::BTreeSet::new();
        for ((s, o), v) in cells {
            subjects.entry(s).or_default().insert(o, *v);
            occasions.insert(o.as_str());
        }
        let mut table = Vec::with_capacity(subjects.len());
        for (s, row) in &subjects {
            if row.len() != occasions.len() {
                return Err(Error::IncompleteDesign(format!(
                    "{name}: subject {s:?} has {} of {} occasions",
                    row.len(),
                    occasions.len()
                )));
            }
            table.push(occasions.iter().map(|o| row[o]).collect());
        }
        Ok(table)
    }

    /// One value per subject: the given occasion, or the mean over the
    /// subject's occasions.
    pub fn per_subject(&self, name: &str, occasion: Option<&str>) -> Vec<f64> {
        let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for ((s, o), v) in self.values.get(name).into_iter().flatten() {
            if occasion.is_none_or(|want| want == o) {
                let e = acc.entry(s).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        acc.values().map(|(sum, n)| sum / *n as f64).collect()
    }
}
