use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::Codebook;

/// Per-code feature counts of one field, ready to lay out as a heatmap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeDistributionGrid {
    pub field: String,
    pub sub: usize,
    /// `(code, count)` pairs, largest count first, ties by code index.
    pub entries: Vec<(u32, usize)>,
    pub rows: usize,
    pub cols: usize,
}

/// Counts how many of `field`'s features map to each code of sub-space `sub`.
///
/// Codes no feature uses are omitted. At most `top_n` entries are kept.
pub fn code_distribution(codebook: &Codebook, field: &str, top_n: usize, sub: usize) -> Result<CodeDistributionGrid> {
    let f = codebook
        .fields
        .iter()
        .find(|f| f.name == field)
        .ok_or_else(|| Error::InvalidInput(format!("field `{field}` is not in the codebook")))?;
    if sub >= codebook.m {
        return Err(Error::InvalidInput(format!(
            "sub-space {sub} out of range (M = {})",
            codebook.m
        )));
    }
    let mut counts = vec![0usize; codebook.k];
    for j in f.offset..f.offset + f.len {
        counts[codebook.code_row(j)[sub] as usize] += 1;
    }
    let mut entries: Vec<(u32, usize)> = counts
        .into_iter()
        .enumerate()
        .filter(|&(_, n)| n > 0)
        .map(|(c, n)| (c as u32, n))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    entries.truncate(top_n);
    let (rows, cols) = grid_shape(entries.len());
    Ok(CodeDistributionGrid {
        field: field.to_string(),
        sub,
        entries,
        rows,
        cols,
    })
}

/// Near-square layout with `cols >= rows`.
fn grid_shape(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    (n.div_ceil(cols), cols)
}

impl CodeDistributionGrid {
    /// `code_id,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("code_id,count\n");
        for (code, count) in &self.entries {
            out.push_str(&format!("{code},{count}\n"));
        }
        out
    }

    /// Counts laid out row-major on the `rows x cols` grid, padded with zeros.
    pub fn cells(&self) -> Vec<Vec<usize>> {
        (0..self.rows)
            .map(|r| {
                (0..self.cols)
                    .map(|c| self.entries.get(r * self.cols + c).map_or(0, |e| e.1))
                    .collect()
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let value = serde_json::json!({
            "field": self.field,
            "sub": self.sub,
            "rows": self.rows,
            "cols": self.cols,
            "codes": self.entries.iter().map(|e| e.0).collect::<Vec<_>>(),
            "cells": self.cells(),
        });
        serde_json::to_string_pretty(&value).expect("grids always serialize") + "\n"
    }
}
