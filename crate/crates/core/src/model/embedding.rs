use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Field, InitKind};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Matrix, Scalar};

/// Initial vector of `(field, id)` in a bank seeded with `init_seed`.
///
/// The draw depends only on the key, never on lookup order, so a row created
/// late in training equals the one an untouched table would produce.
pub fn init_embedding_row<S: Scalar>(
    init_seed: u64,
    init: InitKind,
    dim: usize,
    field: Field,
    id: u64,
) -> Vec<S> {
    let bound = init.bound(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[init_seed, field.index() as u64, id]));
    (0..dim)
        .map(|_| S::from_f64(rng.random_range(-bound..=bound)))
        .collect()
}

/// Lazily grown ID → row table for one field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTable<S> {
    index: HashMap<u64, usize>,
    ids: Vec<u64>,
    rows: Matrix<S>,
}

impl<S: Scalar> FieldTable<S> {
    fn new(dim: usize) -> Self {
        Self {
            index: HashMap::new(),
            ids: Vec::new(),
            rows: Matrix::zeros(0, dim),
        }
    }

    /// Rebuilds a table from ids in row order and the matching row matrix.
    pub fn from_parts(ids: Vec<u64>, rows: Matrix<S>) -> Result<Self> {
        if ids.len() != rows.rows() {
            return Err(Error::shape(
                "FieldTable::from_parts",
                ids.len(),
                rows.rows(),
            ));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (r, &id) in ids.iter().enumerate() {
            if index.insert(id, r).is_some() {
                return Err(Error::Format(format!("duplicate id {id} in vocabulary")));
            }
        }
        Ok(Self { index, ids, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// IDs in row order.
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn rows(&self) -> &Matrix<S> {
        &self.rows
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }
}

/// One independently seeded set of per-field embedding tables.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank<S> {
    bank_id: usize,
    init_seed: u64,
    init: InitKind,
    dim: usize,
    tables: [FieldTable<S>; 3],
}

impl<S: Scalar> EmbeddingBank<S> {
    pub fn new(bank_id: usize, init_seed: u64, init: InitKind, dim: usize) -> Self {
        Self {
            bank_id,
            init_seed,
            init,
            dim,
            tables: [
                FieldTable::new(dim),
                FieldTable::new(dim),
                FieldTable::new(dim),
            ],
        }
    }

    pub fn from_tables(
        bank_id: usize,
        init_seed: u64,
        init: InitKind,
        dim: usize,
        tables: [FieldTable<S>; 3],
    ) -> Result<Self> {
        if let Some(t) = tables
            .iter()
            .find(|t| t.rows.cols() != dim && !t.is_empty())
        {
            return Err(Error::shape(
                "EmbeddingBank::from_tables",
                dim,
                t.rows.cols(),
            ));
        }
        Ok(Self {
            bank_id,
            init_seed,
            init,
            dim,
            tables,
        })
    }

    pub fn bank_id(&self) -> usize {
        self.bank_id
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn init_kind(&self) -> InitKind {
        self.init
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self, field: Field) -> &FieldTable<S> {
        &self.tables[field.index()]
    }

    pub fn total_rows(&self) -> usize {
        self.tables.iter().map(FieldTable::len).sum()
    }

    /// Copy of this bank relabelled as `bank_id`.
    pub fn relabeled(&self, bank_id: usize) -> Self {
        Self {
            bank_id,
            ..self.clone()
        }
    }

    pub fn row_of(&self, field: Field, id: u64) -> Option<usize> {
        self.tables[field.index()].row_of(id)
    }

    /// Returns the row for `(field, id)`, initializing it on first touch.
    pub fn ensure_row(&mut self, field: Field, id: u64) -> usize {
        if let Some(r) = self.row_of(field, id) {
            return r;
        }
        let v = init_embedding_row::<S>(self.init_seed, self.init, self.dim, field, id);
        let table = &mut self.tables[field.index()];
        let r = table.rows.push_row(&v).expect("row width matches bank dim");
        table.ids.push(id);
        table.index.insert(id, r);
        r
    }

    /// Writes the vector for `(field, id)` into `out`. Unseen IDs yield their
    /// initial vector without being inserted.
    pub fn fetch(&self, field: Field, id: u64, out: &mut [S]) {
        match self.row_of(field, id) {
            Some(r) => out.copy_from_slice(self.tables[field.index()].rows.row(r)),
            None => out.copy_from_slice(&init_embedding_row::<S>(
                self.init_seed,
                self.init,
                self.dim,
                field,
                id,
            )),
        }
    }

    pub fn row(&self, field: Field, row: usize) -> &[S] {
        self.tables[field.index()].rows.row(row)
    }

    pub fn row_mut(&mut self, field: Field, row: usize) -> &mut [S] {
        self.tables[field.index()].rows.row_mut(row)
    }

    /// Sorted `(field, id)` keys with their vectors.
    pub fn sorted_entries(&self) -> Vec<((Field, u64), &[S])> {
        let mut out = Vec::with_capacity(self.total_rows());
        for field in Field::ALL {
            let t = self.table(field);
            let mut ids: Vec<(u64, usize)> = t.index.iter().map(|(&id, &r)| (id, r)).collect();
            ids.sort_unstable();
            out.extend(ids.into_iter().map(|(id, r)| ((field, id), t.rows.row(r))));
        }
        out
    }

    /// Order-insensitive fingerprint of the bank contents.
    pub fn checksum(&self) -> u64 {
        let mut h = derive_seed(&[self.dim as u64]);
        for ((field, id), v) in self.sorted_entries() {
            h = derive_seed(&[h, field.index() as u64, id]);
            for x in v {
                h = derive_seed(&[h, x.as_f64().to_bits()]);
            }
        }
        h
    }
}
