//! Embedding CSV files: a `sample_id` column followed by `z_0 … z_{ℓ−1}`.

use super::{EmbeddingMatrix, LatentError};
use nalgebra::DMatrix;
use std::path::Path;

pub fn write_embedding(path: &Path, emb: &EmbeddingMatrix) -> Result<(), LatentError> {
    let header: Vec<String> = (0..emb.cols()).map(|i| format!("z_{i}")).collect();
    write_matrix_csv(path, &header, &emb.values, Some(&emb.sample_ids))
}

/// Writes `m` with the given column names, preceded by a `sample_id`
/// column when `ids` is given.
pub fn write_matrix_csv(
    path: &Path,
    header: &[String],
    m: &DMatrix<f64>,
    ids: Option<&[String]>,
) -> Result<(), LatentError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut head: Vec<String> = ids.map(|_| "sample_id".to_string()).into_iter().collect();
    head.extend(header.iter().cloned());
    w.write_record(&head)?;
    for r in 0..m.nrows() {
        let mut rec: Vec<String> = ids.map(|ids| ids[r].clone()).into_iter().collect();
        rec.extend((0..m.ncols()).map(|c| m[(r, c)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an embedding written by [`write_embedding`].
pub fn read_embedding(path: &Path, split_point: Option<usize>) -> Result<EmbeddingMatrix, LatentError> {
    let mut r = csv::Reader::from_path(path)?;
    let head = r.headers()?.clone();
    if head.get(0) != Some("sample_id") {
        return Err(LatentError::Malformed("first column must be sample_id".into()));
    }
    for (i, h) in head.iter().skip(1).enumerate() {
        if h != format!("z_{i}") {
            return Err(LatentError::Malformed(format!(
                "column {} is {h:?}, expected z_{i}",
                i + 1
            )));
        }
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| LatentError::Malformed(format!("row {}: {e}", ids.len())))?;
        rows.push(row);
    }
    EmbeddingMatrix::from_rows(&rows, ids, split_point)
}
