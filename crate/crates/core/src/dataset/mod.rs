//! Series data model plus everything that produces or reshapes it.

mod ingest;
mod pseudo;
mod synthetic;
mod window;

pub(crate) use ingest::csv_with_comment;
pub use ingest::{load_csv, write_csv, DatasetSchema};
pub use pseudo::{discretize_pseudo_states, PseudoStateBinner};
pub use synthetic::{
    generate_synthetic, generate_synthetic_with_truth, AnomalyFractions, AnomalyKind, Pattern,
    SyntheticConfig, SyntheticTruth,
};
pub use window::{window_and_patch, window_offsets, WindowBatch};

use serde::{Deserialize, Serialize};

use crate::error::{Result, StarError};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum VarKind {
    Numerical,
    /// Categorical state column. `categories[k]` is the raw value behind
    /// category index `k`; the reserved unknown index is `categories.len()`.
    State {
        categories: Vec<f64>,
    },
}

impl VarKind {
    pub fn is_state(&self) -> bool {
        matches!(self, VarKind::State { .. })
    }

    pub fn cardinality(&self) -> Option<usize> {
        match self {
            VarKind::State { categories } => Some(categories.len()),
            VarKind::Numerical => None,
        }
    }
}

/// A typed multivariate series. Columns are stored column-major; state
/// columns hold category indices (as `f64`), not raw values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesDataset {
    names: Vec<String>,
    kinds: Vec<VarKind>,
    columns: Vec<Vec<f64>>,
    labels: Option<Vec<u8>>,
    split: Split,
}

impl SeriesDataset {
    pub fn new(
        names: Vec<String>,
        kinds: Vec<VarKind>,
        columns: Vec<Vec<f64>>,
        labels: Option<Vec<u8>>,
        split: Split,
    ) -> Result<Self> {
        if names.len() != kinds.len() || names.len() != columns.len() {
            return Err(StarError::Shape(format!(
                "{} names, {} kinds, {} columns",
                names.len(),
                kinds.len(),
                columns.len()
            )));
        }
        let t = columns.first().map_or(0, Vec::len);
        if let Some((i, _)) = columns.iter().enumerate().find(|(_, c)| c.len() != t) {
            return Err(StarError::Shape(format!(
                "column '{}' has a different length",
                names[i]
            )));
        }
        for ((name, kind), col) in names.iter().zip(&kinds).zip(&columns) {
            if let Some(card) = kind.cardinality() {
                if let Some(v) = col
                    .iter()
                    .find(|v| v.fract() != 0.0 || **v < 0.0 || **v > card as f64)
                {
                    return Err(StarError::Input(format!(
                        "state column '{name}' holds {v}, outside 0..={card}"
                    )));
                }
            }
        }
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(StarError::Shape(format!(
                    "{} labels for {t} time steps",
                    l.len()
                )));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(StarError::Input("labels must be 0 or 1".into()));
            }
        }
        Ok(Self {
            names,
            kinds,
            columns,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kinds(&self) -> &[VarKind] {
        &self.kinds
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn numeric_indices(&self) -> Vec<usize> {
        (0..self.kinds.len())
            .filter(|&i| !self.kinds[i].is_state())
            .collect()
    }

    pub fn state_indices(&self) -> Vec<usize> {
        (0..self.kinds.len())
            .filter(|&i| self.kinds[i].is_state())
            .collect()
    }

    pub fn n_numeric(&self) -> usize {
        self.numeric_indices().len()
    }

    pub fn n_state(&self) -> usize {
        self.state_indices().len()
    }

    /// Cardinality of each state column, in state-column order.
    pub fn cardinalities(&self) -> Vec<usize> {
        self.kinds.iter().filter_map(VarKind::cardinality).collect()
    }

    /// `T × C_n` matrix of the numerical columns.
    pub fn numeric_matrix(&self) -> Mat {
        let idx = self.numeric_indices();
        let t = self.len();
        let mut m = Mat::zeros(t, idx.len());
        for (j, &c) in idx.iter().enumerate() {
            for (i, &v) in self.columns[c].iter().enumerate() {
                m.data[i * idx.len() + j] = v;
            }
        }
        m
    }

    /// Row-major `T × C_s` category indices.
    pub fn state_ids(&self) -> Vec<usize> {
        let idx = self.state_indices();
        let t = self.len();
        let mut ids = vec![0usize; t * idx.len()];
        for (j, &c) in idx.iter().enumerate() {
            for (i, &v) in self.columns[c].iter().enumerate() {
                ids[i * idx.len() + j] = v as usize;
            }
        }
        ids
    }

    /// Raw value behind a category index of column `col`; `None` for the
    /// unknown index or a numerical column.
    pub fn raw_state_value(&self, col: usize, id: usize) -> Option<f64> {
        match &self.kinds[col] {
            VarKind::State { categories } => categories.get(id).copied(),
            VarKind::Numerical => None,
        }
    }

    /// Keep only the numerical columns (for backbone-only baselines).
    pub fn numeric_only(&self) -> SeriesDataset {
        let idx = self.numeric_indices();
        SeriesDataset {
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            kinds: vec![VarKind::Numerical; idx.len()],
            columns: idx.iter().map(|&i| self.columns[i].clone()).collect(),
            labels: self.labels.clone(),
            split: self.split,
        }
    }

    pub(crate) fn push_column(&mut self, name: String, kind: VarKind, data: Vec<f64>) {
        debug_assert_eq!(data.len(), self.len());
        self.names.push(name);
        self.kinds.push(kind);
        self.columns.push(data);
    }

    /// Reorder the state columns (numerical columns keep their places).
    /// `perm[k]` names which current state column becomes the `k`-th.
    pub fn permute_state_columns(&self, perm: &[usize]) -> Result<SeriesDataset> {
        let state = self.state_indices();
        if perm.len() != state.len() {
            return Err(StarError::Input(
                "permutation length must equal the state column count".into(),
            ));
        }
        let mut out = self.clone();
        for (k, &p) in perm.iter().enumerate() {
            let (dst, src) = (state[k], state[p]);
            out.names[dst] = self.names[src].clone();
            out.kinds[dst] = self.kinds[src].clone();
            out.columns[dst] = self.columns[src].clone();
        }
        Ok(out)
    }
}
