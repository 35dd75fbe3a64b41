use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, MatchSign};
use crate::autograd::Graph;
use crate::dataset::{window_offsets, SeriesDataset, WindowBatch};
use crate::error::{Result, StarError};

/// Windows scored per graph.
const CHUNK_WINDOWS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScores {
    pub score_rec: Vec<f64>,
    /// Raw patch scores (sign already applied), one per kept patch.
    pub score_match: Vec<f64>,
    /// Centre time of each patch in `score_match`.
    pub match_centers: Vec<f64>,
    pub score_match_interp: Vec<f64>,
    pub score_total: Vec<f64>,
}

/// Piecewise-linear interpolation of patch values onto `0..t`, constant
/// beyond the first and last centre. `centers` must be strictly increasing.
pub fn interpolate_patch_scores(centers: &[f64], values: &[f64], t: usize) -> Result<Vec<f64>> {
    if centers.len() != values.len() || centers.is_empty() {
        return Err(StarError::Input(
            "need at least one patch centre with a value".into(),
        ));
    }
    if centers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(StarError::Input(
            "patch centres must be strictly increasing".into(),
        ));
    }
    let mut out = Vec::with_capacity(t);
    let mut k = 0;
    for i in 0..t {
        let x = i as f64;
        while k + 1 < centers.len() && centers[k + 1] <= x {
            k += 1;
        }
        let v = if x <= centers[0] {
            values[0]
        } else if k + 1 == centers.len() {
            values[k]
        } else {
            let f = (x - centers[k]) / (centers[k + 1] - centers[k]);
            values[k] + f * (values[k + 1] - values[k])
        };
        out.push(v);
    }
    Ok(out)
}

/// `score_rec[t] · softmax(match)[t] · T`, with the `T` folded into the
/// normalization so that equal match scores leave `score_rec` unchanged.
pub fn fuse(score_rec: &[f64], match_interp: &[f64]) -> Vec<f64> {
    let t = score_rec.len() as f64;
    let max = match_interp
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = match_interp.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    score_rec
        .iter()
        .zip(&e)
        .map(|(r, w)| r * (w * t / sum))
        .collect()
}

struct ChunkOut {
    recon: Vec<f64>,
    cosines: Option<Vec<f64>>,
}

impl Checkpoint {
    fn score_chunk(&self, batch: &WindowBatch) -> Result<ChunkOut> {
        let mut g = Graph::inference();
        let fv = self.model.forward(&mut g, &self.store, batch)?;
        let recon = self.model.backbone.unpatchify(
            g.value(fv.backbone.recon),
            batch.n_windows(),
            batch.n_numeric,
        );
        let cosines = self
            .model
            .patch_cosines(&mut g, &fv)
            .map(|c| g.value(c).data.clone());
        Ok(ChunkOut { recon, cosines })
    }

    /// Score a test series with non-overlapping windows (plus the tail window).
    pub fn score(&self, test: &SeriesDataset) -> Result<AnomalyScores> {
        let bc = &self.model.backbone.config;
        let (tw, l) = (bc.window_len, bc.patch_len);
        let t = test.len();
        if t < l {
            return Err(StarError::SeriesTooShort { len: t, needed: l });
        }
        let offsets = window_offsets(t, tw, tw)?;
        let chunks: Vec<&[usize]> = offsets.chunks(CHUNK_WINDOWS).collect();
        let run = |offs: &&[usize]| -> Result<(WindowBatch, ChunkOut)> {
            let batch = WindowBatch::gather(test, offs, tw, l)?;
            let out = self.score_chunk(&batch)?;
            Ok((batch, out))
        };
        #[cfg(feature = "parallel")]
        let results: Vec<Result<(WindowBatch, ChunkOut)>> = {
            use rayon::prelude::*;
            chunks.par_iter().map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<Result<(WindowBatch, ChunkOut)>> = chunks.iter().map(run).collect();

        let cn = test.n_numeric();
        let m = tw / l;
        let mut score_rec = vec![0.0; t];
        let mut patches: Vec<(f64, f64)> = Vec::new();
        let sign = match self.model.config.match_sign {
            MatchSign::Negated => -1.0,
            MatchSign::Plain => 1.0,
        };
        for res in results {
            let (batch, out) = res?;
            for (w, &origin) in batch.origin.iter().enumerate() {
                for i in 0..tw {
                    let mut se = 0.0;
                    for c in 0..cn {
                        let k = (w * tw + i) * cn + c;
                        se += (out.recon[k] - batch.numeric[k]).powi(2);
                    }
                    score_rec[origin + i] = se / cn as f64;
                }
                if let Some(cos) = &out.cosines {
                    // a later window replaces the patches it overlaps
                    patches.retain(|&(c, _)| c < origin as f64);
                    for p in 0..m {
                        let center = origin as f64 + (p * l) as f64 + (l as f64 - 1.0) / 2.0;
                        patches.push((center, sign * cos[w * m + p]));
                    }
                }
            }
        }

        if patches.is_empty() {
            return Ok(AnomalyScores {
                score_total: score_rec.clone(),
                score_match_interp: vec![0.0; t],
                score_rec,
                score_match: Vec::new(),
                match_centers: Vec::new(),
            });
        }
        let (match_centers, score_match): (Vec<f64>, Vec<f64>) = patches.into_iter().unzip();
        let score_match_interp = interpolate_patch_scores(&match_centers, &score_match, t)?;
        let score_total = fuse(&score_rec, &score_match_interp);
        Ok(AnomalyScores {
            score_rec,
            score_match,
            match_centers,
            score_match_interp,
            score_total,
        })
    }
}

/// Columns `t, score_rec, score_match_interp, score_total[, label]`,
/// preceded by a `# <meta json>` line when `meta` is given.
pub fn write_scores_csv(
    path: &Path,
    scores: &AnomalyScores,
    labels: Option<&[u8]>,
    meta: Option<&serde_json::Value>,
) -> Result<()> {
    let mut w = crate::dataset::csv_with_comment(path, meta)?;
    let mut header = vec!["t", "score_rec", "score_match_interp", "score_total"];
    if labels.is_some() {
        header.push("label");
    }
    w.write_record(&header)?;
    for t in 0..scores.score_rec.len() {
        let mut rec = vec![
            t.to_string(),
            scores.score_rec[t].to_string(),
            scores.score_match_interp[t].to_string(),
            scores.score_total[t].to_string(),
        ];
        if let Some(l) = labels {
            rec.push(l[t].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| StarError::io(path, e))?;
    Ok(())
}

/// Read `score_total` and, if present, `label` back from a score CSV.
pub fn read_scores_csv(path: &Path) -> Result<(Vec<f64>, Option<Vec<u8>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                StarError::Input(format!("cannot read score file {}: {e}", path.display()))
            }
            _ => StarError::Csv(e),
        })?;
    let header = r.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let total = col("score_total").ok_or_else(|| {
        StarError::Schema(format!("{} has no score_total column", path.display()))
    })?;
    let label = col("label");
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |c: usize| -> Result<f64> {
            rec[c].parse().map_err(|_| StarError::Parse {
                row: i + 2,
                column: header[c].to_string(),
                message: format!("'{}' is not a number", &rec[c]),
            })
        };
        scores.push(parse(total)?);
        if let Some(c) = label {
            labels.push(u8::from(parse(c)? != 0.0));
        }
    }
    if scores.is_empty() {
        return Err(StarError::EmptyInput(format!(
            "{} has no score rows",
            path.display()
        )));
    }
    Ok((scores, label.map(|_| labels)))
}
