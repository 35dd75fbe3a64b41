use serde::{Deserialize, Serialize};

use super::{SeriesDataset, VarKind};
use crate::error::{Result, StarError};

/// Equal-frequency binning of one numerical column into pseudo-states.
/// Edges are fitted once (on the train split) and reused on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoStateBinner {
    pub column: usize,
    pub n_bins: usize,
    /// `n_bins - 1` ascending interior edges.
    pub edges: Vec<f64>,
}

impl PseudoStateBinner {
    pub fn fit(train: &SeriesDataset, column: usize, n_bins: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(StarError::Config(format!(
                "n_bins must be at least 2, got {n_bins}"
            )));
        }
        if column >= train.kinds().len() || train.kinds()[column].is_state() {
            return Err(StarError::Input(format!(
                "column {column} is not a numerical column"
            )));
        }
        let mut sorted: Vec<f64> = train
            .column(column)
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        sorted.sort_by(f64::total_cmp);
        let (Some(&lo), Some(&hi)) = (sorted.first(), sorted.last()) else {
            return Err(StarError::DegenerateBins(format!(
                "column {column} has no finite values"
            )));
        };
        if lo == hi {
            return Err(StarError::DegenerateBins(format!(
                "column {column} is constant ({lo})"
            )));
        }
        let edges = (1..n_bins)
            .map(|k| quantile(&sorted, k as f64 / n_bins as f64))
            .collect();
        Ok(Self {
            column,
            n_bins,
            edges,
        })
    }

    /// Bin index of `v`: values below the lowest edge land in bin 0, values
    /// above the highest in the last bin; non-finite values map to the
    /// unknown index `n_bins`.
    pub fn bin(&self, v: f64) -> usize {
        if !v.is_finite() {
            return self.n_bins;
        }
        self.edges.partition_point(|&e| e <= v)
    }

    /// Append the pseudo-state column (named `<column>_state`).
    pub fn apply(&self, ds: &SeriesDataset) -> Result<SeriesDataset> {
        if self.column >= ds.kinds().len() || ds.kinds()[self.column].is_state() {
            return Err(StarError::Input(format!(
                "column {} is not a numerical column",
                self.column
            )));
        }
        let ids = ds
            .column(self.column)
            .iter()
            .map(|&v| self.bin(v) as f64)
            .collect();
        let mut out = ds.clone();
        let name = format!("{}_state", ds.names()[self.column]);
        let categories = (0..self.n_bins).map(|k| k as f64).collect();
        out.push_column(name, VarKind::State { categories }, ids);
        Ok(out)
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Fit quantile bins on `ds` (which should be the train split) and append
/// the resulting state column.
pub fn discretize_pseudo_states(
    ds: &SeriesDataset,
    column: usize,
    n_bins: usize,
) -> Result<SeriesDataset> {
    PseudoStateBinner::fit(ds, column, n_bins)?.apply(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;

    fn numeric(values: Vec<f64>, split: Split) -> SeriesDataset {
        SeriesDataset::new(
            vec!["x".into()],
            vec![VarKind::Numerical],
            vec![values],
            None,
            split,
        )
        .unwrap()
    }

    #[test]
    fn median_split() {
        let train = numeric(vec![1.0, 2.0, 3.0, 4.0], Split::Train);
        let out = discretize_pseudo_states(&train, 0, 2).unwrap();
        assert_eq!(out.column(1), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(out.cardinalities(), vec![2]);
        assert_eq!(out.column(0), train.column(0));
        assert_eq!(out.names()[1], "x_state");
    }

    #[test]
    fn test_values_clamp_into_end_bins() {
        let train = numeric(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], Split::Train);
        let binner = PseudoStateBinner::fit(&train, 0, 4).unwrap();
        let test = numeric(vec![-100.0, 100.0, f64::NAN, 4.6], Split::Test);
        let out = binner.apply(&test).unwrap();
        assert_eq!(out.column(1), &[0.0, 3.0, 4.0, 2.0]);
    }

    #[test]
    fn constant_column_is_degenerate() {
        let train = numeric(vec![2.0; 5], Split::Train);
        assert!(matches!(
            discretize_pseudo_states(&train, 0, 4),
            Err(StarError::DegenerateBins(_))
        ));
        let ok = numeric(vec![1.0, 2.0], Split::Train);
        assert!(matches!(
            discretize_pseudo_states(&ok, 0, 1),
            Err(StarError::Config(_))
        ));
    }

    #[test]
    fn equal_frequency_bins_are_balanced() {
        let values: Vec<f64> = (0..1000)
            .map(|i| ((i * 7919) % 1000) as f64 * 0.37)
            .collect();
        let train = numeric(values, Split::Train);
        let out = discretize_pseudo_states(&train, 0, 4).unwrap();
        let mut counts = [0usize; 4];
        for &id in out.column(1) {
            counts[id as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 250), "{counts:?}");
    }
}
