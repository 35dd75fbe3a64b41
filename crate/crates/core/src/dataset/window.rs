use super::SeriesDataset;
use crate::error::{Result, StarError};

/// Fixed-length windows cut from one series.
///
/// `numeric` is laid out `[window][time][numeric var]` and `state_ids`
/// `[window][time][state var]`, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub numeric: Vec<f64>,
    pub state_ids: Vec<usize>,
    pub origin: Vec<usize>,
    pub window_len: usize,
    pub patch_len: usize,
    pub n_numeric: usize,
    pub n_state: usize,
}

impl WindowBatch {
    pub fn n_windows(&self) -> usize {
        self.origin.len()
    }

    pub fn n_patches(&self) -> usize {
        self.window_len / self.patch_len
    }

    /// Cut the windows starting at `offsets` (any order, any overlap).
    pub fn gather(
        ds: &SeriesDataset,
        offsets: &[usize],
        window_len: usize,
        patch_len: usize,
    ) -> Result<Self> {
        check_geometry(window_len, patch_len)?;
        let t = ds.len();
        if let Some(&bad) = offsets.iter().find(|&&o| o + window_len > t) {
            return Err(StarError::Input(format!(
                "window at {bad} runs past the series end ({t})"
            )));
        }
        let num = ds.numeric_matrix();
        let ids = ds.state_ids();
        let (cn, cs) = (num.cols, ds.n_state());
        let mut numeric = Vec::with_capacity(offsets.len() * window_len * cn);
        let mut state_ids = Vec::with_capacity(offsets.len() * window_len * cs);
        for &o in offsets {
            numeric.extend_from_slice(&num.data[o * cn..(o + window_len) * cn]);
            state_ids.extend_from_slice(&ids[o * cs..(o + window_len) * cs]);
        }
        Ok(Self {
            numeric,
            state_ids,
            origin: offsets.to_vec(),
            window_len,
            patch_len,
            n_numeric: cn,
            n_state: cs,
        })
    }

    /// Windows `[start, end)` of this batch.
    pub fn slice(&self, start: usize, end: usize) -> WindowBatch {
        let (w, cn, cs) = (self.window_len, self.n_numeric, self.n_state);
        WindowBatch {
            numeric: self.numeric[start * w * cn..end * w * cn].to_vec(),
            state_ids: self.state_ids[start * w * cs..end * w * cs].to_vec(),
            origin: self.origin[start..end].to_vec(),
            ..*self
        }
    }
}

fn check_geometry(window_len: usize, patch_len: usize) -> Result<()> {
    if patch_len == 0 || window_len == 0 || !window_len.is_multiple_of(patch_len) {
        return Err(StarError::Config(format!(
            "window length {window_len} must be a positive multiple of patch length {patch_len}"
        )));
    }
    Ok(())
}

/// Start offsets of windows of length `window_len` stepping by `stride`.
/// When the last regular window stops short of `t`, one more window ending
/// exactly at `t` is added (overlapping its predecessor).
pub fn window_offsets(t: usize, window_len: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(StarError::Config("stride must be at least 1".into()));
    }
    if t < window_len {
        return Err(StarError::SeriesTooShort {
            len: t,
            needed: window_len,
        });
    }
    let n = (t - window_len) / stride + 1;
    let mut offsets: Vec<usize> = (0..n).map(|i| i * stride).collect();
    if offsets.last().is_some_and(|&o| o + window_len < t) {
        offsets.push(t - window_len);
    }
    Ok(offsets)
}

pub fn window_and_patch(
    ds: &SeriesDataset,
    window_len: usize,
    stride: usize,
    patch_len: usize,
) -> Result<WindowBatch> {
    check_geometry(window_len, patch_len)?;
    let offsets = window_offsets(ds.len(), window_len, stride)?;
    WindowBatch::gather(ds, &offsets, window_len, patch_len)
}
