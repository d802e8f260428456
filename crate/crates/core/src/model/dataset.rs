use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("cell ({row}, {col}) holds category {value} but variable cardinality is {cardinality}")]
    CardinalityViolation { row: usize, col: usize, value: usize, cardinality: usize },
    #[error("dataset shape mismatch: {0}")]
    Shape(String),
}

/// N×D table of category indices with missing cells.
///
/// Variable `d` takes values `0..=cardinality(d)`, so it has
/// `cardinality(d) + 1` categories; category 0 is the Softmax reference.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDataset {
    names: Vec<String>,
    cardinalities: Vec<usize>,
    cells: Vec<Option<usize>>,
}

impl CategoricalDataset {
    pub fn new(names: Vec<String>, cardinalities: Vec<usize>, cells: Vec<Option<usize>>) -> Result<Self, DatasetError> {
        let d = names.len();
        if cardinalities.len() != d {
            return Err(DatasetError::Shape(format!("{} names but {} cardinalities", d, cardinalities.len())));
        }
        if d == 0 && !cells.is_empty() {
            return Err(DatasetError::Shape("cells given for zero variables".into()));
        }
        if d > 0 && cells.len() % d != 0 {
            return Err(DatasetError::Shape(format!("{} cells is not a multiple of {d} variables", cells.len())));
        }
        for (i, cell) in cells.iter().enumerate() {
            if let Some(v) = *cell {
                let (row, col) = (i / d, i % d);
                if v > cardinalities[col] {
                    return Err(DatasetError::CardinalityViolation { row, col, value: v, cardinality: cardinalities[col] });
                }
            }
        }
        Ok(Self { names, cardinalities, cells })
    }

    /// Builds a dataset with default variable names `v0, v1, ...`.
    pub fn from_rows(cardinalities: Vec<usize>, rows: &[Vec<Option<usize>>]) -> Result<Self, DatasetError> {
        let d = cardinalities.len();
        let mut cells = Vec::with_capacity(rows.len() * d);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(DatasetError::Shape(format!("row {r} has {} cells, expected {d}", row.len())));
            }
            cells.extend_from_slice(row);
        }
        Self::new((0..d).map(|i| format!("v{i}")).collect(), cardinalities, cells)
    }

    pub fn n_rows(&self) -> usize {
        if self.names.is_empty() {
            0
        } else {
            self.cells.len() / self.names.len()
        }
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn cardinality(&self, d: usize) -> usize {
        self.cardinalities[d]
    }

    #[inline]
    pub fn cell(&self, n: usize, d: usize) -> Option<usize> {
        self.cells[n * self.names.len() + d]
    }

    pub fn row(&self, n: usize) -> &[Option<usize>] {
        let d = self.names.len();
        &self.cells[n * d..(n + 1) * d]
    }

    pub fn cells(&self) -> &[Option<usize>] {
        &self.cells
    }

    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        let d = self.names.len();
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_none())
            .map(|(i, _)| (i / d, i % d))
            .collect()
    }

    pub fn n_missing(&self) -> usize {
        self.cells.iter().filter(|c| c.is_none()).count()
    }

    /// Copy with the given cells blanked out.
    pub fn with_hidden(&self, hidden: &[(usize, usize)]) -> Self {
        let mut out = self.clone();
        let d = self.names.len();
        for &(n, v) in hidden {
            out.cells[n * d + v] = None;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        let err = CategoricalDataset::from_rows(vec![1, 1], &[vec![Some(0), Some(1)], vec![Some(2), None]]).unwrap_err();
        assert_eq!(err, DatasetError::CardinalityViolation { row: 1, col: 0, value: 2, cardinality: 1 });
    }

    #[test]
    fn shape_queries() {
        let ds = CategoricalDataset::from_rows(vec![1, 1, 1], &[vec![Some(0), Some(1), Some(1)], vec![Some(1), Some(0), None]])
            .unwrap();
        assert_eq!(ds.n_rows(), 2);
        assert_eq!(ds.n_vars(), 3);
        assert_eq!(ds.missing_cells(), vec![(1, 2)]);
        assert_eq!(ds.with_hidden(&[(0, 0)]).n_missing(), 2);
    }
}
