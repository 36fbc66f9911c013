use crate::corpus::{SentenceRecord, PAD};
use crate::error::{CsError, Result};
use ndarray::Array2;

/// Right-padded id matrix for a group of records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Row-major `size x width`, padded with PAD.
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl Batch {
    pub fn from_ids<S: AsRef<[usize]>>(rows: &[S]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CsError::config("empty batch"));
        }
        let lens: Vec<usize> = rows.iter().map(|r| r.as_ref().len()).collect();
        if lens.iter().any(|&l| l == 0) {
            return Err(CsError::config("batch contains an empty record"));
        }
        let width = *lens.iter().max().expect("nonempty");
        let mut ids = vec![PAD; rows.len() * width];
        for (i, r) in rows.iter().enumerate() {
            ids[i * width..i * width + r.as_ref().len()].copy_from_slice(r.as_ref());
        }
        Ok(Batch { ids, lens, width })
    }

    pub fn from_records(records: &[SentenceRecord]) -> Result<Self> {
        let rows: Vec<&[usize]> = records.iter().map(|r| r.ids.as_slice()).collect();
        Self::from_ids(&rows)
    }

    pub fn size(&self) -> usize {
        self.lens.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.width..i * self.width + self.lens[i]]
    }

    pub fn mask(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.size(), self.width), |(b, t)| t < self.lens[b])
    }

    /// Targets `ids[1..]` per row, flattened over `size x (width - 1)`,
    /// with the validity of each position.
    pub fn shifted_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let w = self.width - 1;
        let mut targets = Vec::with_capacity(self.size() * w);
        let mut valid = Vec::with_capacity(self.size() * w);
        for b in 0..self.size() {
            for t in 0..w {
                targets.push(self.ids[b * self.width + t + 1]);
                valid.push(t + 1 < self.lens[b]);
            }
        }
        (targets, valid)
    }
}
