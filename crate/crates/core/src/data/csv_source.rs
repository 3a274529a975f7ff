use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::{FieldKind, RawRecord, Schema};
use crate::error::{Error, Result};

/// Reads labeled rows from a CSV file laid out per `schema`.
pub fn read_csv(path: &Path, schema: &Schema) -> Result<Vec<RawRecord>> {
    read_csv_from(File::open(path)?, schema)
}

pub fn read_csv_from<R: Read>(input: R, schema: &Schema) -> Result<Vec<RawRecord>> {
    let delimiter = match schema.csv_delimiter.as_bytes() {
        [b] => *b,
        _ => {
            return Err(Error::InvalidInput(format!(
                "csv delimiter must be a single byte, got `{}`",
                schema.csv_delimiter
            )))
        }
    };
    let expected = schema.fields.len() + 1;
    if schema.label_column >= expected {
        return Err(Error::InvalidInput(format!(
            "label column {} outside the {expected} declared columns",
            schema.label_column
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(input);
    let mut records = Vec::new();
    for (index, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() != expected {
            return Err(Error::SchemaMismatch {
                index,
                expected,
                found: row.len(),
            });
        }
        let label_cell = row[schema.label_column].trim();
        let label = match label_cell {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::InvalidLabel {
                    index,
                    value: other.to_string(),
                })
            }
        };
        let mut categorical = Vec::new();
        let mut numeric = Vec::new();
        let cells = row
            .iter()
            .enumerate()
            .filter(|(col, _)| *col != schema.label_column)
            .map(|(_, cell)| cell);
        for (spec, cell) in schema.fields.iter().zip(cells) {
            match spec.kind {
                FieldKind::Categorical => categorical.push(cell.to_string()),
                FieldKind::Numeric => numeric.push(cell.trim().parse::<f64>().ok()),
            }
        }
        records.push(RawRecord {
            label,
            categorical,
            numeric,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FieldSpec;

    fn schema() -> Schema {
        Schema {
            label_column: 0,
            fields: vec![
                FieldSpec {
                    name: "site".into(),
                    kind: FieldKind::Categorical,
                },
                FieldSpec {
                    name: "count".into(),
                    kind: FieldKind::Numeric,
                },
            ],
            ..Schema::default()
        }
    }

    #[test]
    fn parses_rows_and_missing_numerics() {
        let data = "1,a|b,3.5\n0,c,\n0,d,oops\n";
        let recs = read_csv_from(data.as_bytes(), &schema()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].label, 1);
        assert_eq!(recs[0].categorical, vec!["a|b"]);
        assert_eq!(recs[0].numeric, vec![Some(3.5)]);
        assert_eq!(recs[1].numeric, vec![None]);
        assert_eq!(recs[2].numeric, vec![None]);
    }

    #[test]
    fn wrong_width_names_record() {
        let data = "1,a,3\n0,b\n";
        match read_csv_from(data.as_bytes(), &schema()) {
            Err(Error::SchemaMismatch { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_label_rejected() {
        let data = "2,a,3\n";
        assert!(matches!(
            read_csv_from(data.as_bytes(), &schema()),
            Err(Error::InvalidLabel { index: 0, .. })
        ));
    }

    #[test]
    fn header_and_label_column_elsewhere() {
        let mut s = schema();
        s.label_column = 2;
        s.has_header = true;
        let data = "site,count,click\nx,1,1\n";
        let recs = read_csv_from(data.as_bytes(), &s).unwrap();
        assert_eq!(recs[0].label, 1);
        assert_eq!(recs[0].categorical, vec!["x"]);
        assert_eq!(recs[0].numeric, vec![Some(1.0)]);
    }
}
