//! State-conditioned synthetic series with labeled anomalies.
//!
//! Each state variable is a piecewise-constant process with random dwell
//! times. The joint state (mixed-radix combination of all state values)
//! selects, per numerical variable, a closed-form pattern evaluated at the
//! phase (steps since the joint state last changed). Test splits receive
//! three kinds of anomaly: point spikes, state-mismatch segments (numerical
//! pattern taken from a different joint state than the one reported) and
//! state-only segments (a reported state value flipped while the numerical
//! pattern follows the true state).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SeriesDataset, Split, VarKind};
use crate::error::{Result, StarError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    Stable {
        level: f64,
    },
    Oscillate {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        level: f64,
    },
    Ramp {
        slope: f64,
        #[serde(default)]
        level: f64,
    },
}

impl Pattern {
    /// Closed-form value at `phase` steps into the regime.
    pub fn eval(&self, phase: usize) -> f64 {
        let p = phase as f64;
        match *self {
            Pattern::Stable { level } => level,
            Pattern::Oscillate {
                amplitude,
                period,
                level,
            } => level + amplitude * (2.0 * PI * p / period).sin(),
            Pattern::Ramp { slope, level } => level + slope * p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyFractions {
    pub point_spike: f64,
    pub state_mismatch: f64,
    pub state_only: f64,
}

impl AnomalyFractions {
    pub fn none() -> Self {
        Self {
            point_spike: 0.0,
            state_mismatch: 0.0,
            state_only: 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.point_spike + self.state_mismatch + self.state_only
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    PointSpike,
    StateMismatch,
    StateOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_state_vars: usize,
    pub n_numeric_vars: usize,
    /// Number of values each state variable can take.
    pub regime_counts: Vec<usize>,
    pub dwell_min: usize,
    pub dwell_max: usize,
    /// Patch length the data is meant for; dwell times must cover two patches.
    #[serde(default = "default_patch_len")]
    pub patch_len: usize,
    /// `patterns[c][j]` is numerical variable `c`'s pattern under joint
    /// state `j`. Drawn from the seed when absent.
    #[serde(default)]
    pub patterns: Option<Vec<Vec<Pattern>>>,
    pub noise_std: f64,
    pub anomalies: AnomalyFractions,
    #[serde(default = "default_spike")]
    pub spike_magnitude: f64,
    pub t_train: usize,
    pub t_test: usize,
    pub seed: u64,
}

fn default_patch_len() -> usize {
    16
}

fn default_spike() -> f64 {
    3.0
}

impl SyntheticConfig {
    /// Benchmark used by the acceptance suite: three state variables, two
    /// numerical variables, 5% anomalies of which half are state-mismatch.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            n_state_vars: 3,
            n_numeric_vars: 2,
            regime_counts: vec![2, 3, 2],
            dwell_min: 64,
            dwell_max: 256,
            patch_len: 16,
            patterns: None,
            noise_std: 0.1,
            anomalies: AnomalyFractions {
                point_spike: 0.0125,
                state_mismatch: 0.025,
                state_only: 0.0125,
            },
            spike_magnitude: 3.0,
            t_train: 8000,
            t_test: 4000,
            seed,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.regime_counts.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(StarError::Config(m));
        if self.n_numeric_vars == 0 {
            return err("at least one numerical variable is required".into());
        }
        if self.regime_counts.len() != self.n_state_vars {
            return err(format!(
                "regime_counts has {} entries for {} state variables",
                self.regime_counts.len(),
                self.n_state_vars
            ));
        }
        if self.regime_counts.iter().any(|&r| r < 2) {
            return err("every state variable needs at least 2 regimes".into());
        }
        if self.patch_len == 0 || self.dwell_min < 2 * self.patch_len {
            return err(format!(
                "dwell_min {} must be at least twice the patch length {}",
                self.dwell_min, self.patch_len
            ));
        }
        if self.dwell_max < self.dwell_min {
            return err(format!(
                "dwell_max {} is below dwell_min {}",
                self.dwell_max, self.dwell_min
            ));
        }
        let f = &self.anomalies;
        if [f.point_spike, f.state_mismatch, f.state_only]
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return err("anomaly fractions must lie in [0, 1]".into());
        }
        if f.total() > 0.2 + 1e-12 {
            return err(format!("anomaly fractions sum to {} (> 0.2)", f.total()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return err("noise_std must be finite and non-negative".into());
        }
        if self.t_train == 0 || self.t_test == 0 {
            return err("t_train and t_test must be positive".into());
        }
        if let Some(p) = &self.patterns {
            if p.len() != self.n_numeric_vars || p.iter().any(|row| row.len() != self.joint_count())
            {
                return err(format!(
                    "patterns must be {} × {} (numerical vars × joint states)",
                    self.n_numeric_vars,
                    self.joint_count()
                ));
            }
        }
        Ok(())
    }

    pub fn decode_joint(&self, mut j: usize) -> Vec<usize> {
        self.regime_counts
            .iter()
            .map(|&r| {
                let v = j % r;
                j /= r;
                v
            })
            .collect()
    }

    pub fn encode_joint(&self, values: &[usize]) -> usize {
        let mut j = 0;
        for (i, &r) in self.regime_counts.iter().enumerate().rev() {
            j = j * r + values[i];
        }
        j
    }
}

/// Ground truth behind a generated split.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    /// Joint state the numerical values were generated under (before
    /// anomaly injection).
    pub joint: Vec<usize>,
    /// Steps since the joint state last changed.
    pub phase: Vec<usize>,
    pub anomaly: Vec<Option<AnomalyKind>>,
    pub patterns: Vec<Vec<Pattern>>,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(SeriesDataset, SeriesDataset)> {
    let (train, test, _, _) = generate_synthetic_with_truth(cfg)?;
    Ok((train, test))
}

/// Same as [`generate_synthetic`], also returning per-split ground truth.
pub fn generate_synthetic_with_truth(
    cfg: &SyntheticConfig,
) -> Result<(SeriesDataset, SeriesDataset, SyntheticTruth, SyntheticTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let patterns = match &cfg.patterns {
        Some(p) => p.clone(),
        None => random_patterns(cfg, &mut rng),
    };
    let (train, train_truth) = generate_split(cfg, &patterns, cfg.t_train, Split::Train, &mut rng)?;
    let (test, test_truth) = generate_split(cfg, &patterns, cfg.t_test, Split::Test, &mut rng)?;
    Ok((train, test, train_truth, test_truth))
}

fn random_patterns(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<Pattern>> {
    const PERIODS: [f64; 5] = [8.0, 12.0, 16.0, 24.0, 32.0];
    (0..cfg.n_numeric_vars)
        .map(|_| {
            (0..cfg.joint_count())
                .map(|_| match rng.random_range(0..3) {
                    0 => Pattern::Stable {
                        level: rng.random_range(-1.5..1.5),
                    },
                    1 => Pattern::Oscillate {
                        amplitude: rng.random_range(0.5..1.5),
                        period: PERIODS[rng.random_range(0..PERIODS.len())],
                        level: rng.random_range(-0.5..0.5),
                    },
                    _ => {
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        Pattern::Ramp {
                            slope: sign * rng.random_range(0.005..0.02),
                            level: rng.random_range(-1.0..1.0),
                        }
                    }
                })
                .collect()
        })
        .collect()
}

fn generate_split(
    cfg: &SyntheticConfig,
    patterns: &[Vec<Pattern>],
    t: usize,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<(SeriesDataset, SyntheticTruth)> {
    let cs = cfg.n_state_vars;
    // state processes
    let mut states = vec![vec![0usize; t]; cs];
    for (i, col) in states.iter_mut().enumerate() {
        let r = cfg.regime_counts[i];
        let mut value = rng.random_range(0..r);
        let mut left = rng.random_range(cfg.dwell_min..=cfg.dwell_max);
        for slot in col.iter_mut() {
            if left == 0 {
                value = (value + rng.random_range(1..r)) % r;
                left = rng.random_range(cfg.dwell_min..=cfg.dwell_max);
            }
            *slot = value;
            left -= 1;
        }
    }
    let joint: Vec<usize> = (0..t)
        .map(|k| cfg.encode_joint(&states.iter().map(|c| c[k]).collect::<Vec<_>>()))
        .collect();
    let mut phase = vec![0usize; t];
    for k in 1..t {
        phase[k] = if joint[k] == joint[k - 1] {
            phase[k - 1] + 1
        } else {
            0
        };
    }

    let mut numeric: Vec<Vec<f64>> = (0..cfg.n_numeric_vars)
        .map(|c| {
            (0..t)
                .map(|k| patterns[c][joint[k]].eval(phase[k]))
                .collect()
        })
        .collect();
    let mut anomaly: Vec<Option<AnomalyKind>> = vec![None; t];

    if split == Split::Test {
        let f = &cfg.anomalies;
        let target = |frac: f64| (frac * t as f64).round() as usize;
        let seg = (2 * cfg.patch_len, 4 * cfg.patch_len);

        let mismatch = place_segments(
            rng,
            &mut anomaly,
            target(f.state_mismatch),
            seg,
            cfg.patch_len,
            AnomalyKind::StateMismatch,
        )?;
        for (a, b) in mismatch {
            let present: Vec<usize> = joint[a..b].to_vec();
            let alt = pick_other_joint(rng, cfg.joint_count(), &present);
            for (c, col) in numeric.iter_mut().enumerate() {
                for (k, v) in col[a..b].iter_mut().enumerate() {
                    *v = patterns[c][alt].eval(k);
                }
            }
        }

        let state_only = place_segments(
            rng,
            &mut anomaly,
            target(f.state_only),
            seg,
            cfg.patch_len,
            AnomalyKind::StateOnly,
        )?;
        for (a, b) in state_only.into_iter().filter(|_| cs > 0) {
            let var = rng.random_range(0..cs);
            let r = cfg.regime_counts[var];
            let shift = rng.random_range(1..r);
            for col_value in states[var][a..b].iter_mut() {
                *col_value = (*col_value + shift) % r;
            }
        }

        let spikes = place_segments(
            rng,
            &mut anomaly,
            target(f.point_spike),
            (1, 1),
            1,
            AnomalyKind::PointSpike,
        )?;
        for (a, _) in spikes {
            let c = rng.random_range(0..cfg.n_numeric_vars);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            numeric[c][a] += sign * cfg.spike_magnitude;
        }
    }

    if cfg.noise_std > 0.0 {
        let normal =
            Normal::new(0.0, cfg.noise_std).map_err(|e| StarError::Config(e.to_string()))?;
        for col in numeric.iter_mut() {
            for v in col.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }

    let mut names = Vec::new();
    let mut kinds = Vec::new();
    let mut columns = Vec::new();
    for (c, col) in numeric.into_iter().enumerate() {
        names.push(format!("x{c}"));
        kinds.push(VarKind::Numerical);
        columns.push(col);
    }
    for (i, col) in states.into_iter().enumerate() {
        names.push(format!("s{i}"));
        kinds.push(VarKind::State {
            categories: (0..cfg.regime_counts[i]).map(|k| k as f64).collect(),
        });
        columns.push(col.into_iter().map(|v| v as f64).collect());
    }
    let labels = match split {
        Split::Test => Some(anomaly.iter().map(|a| u8::from(a.is_some())).collect()),
        Split::Train => None,
    };
    let ds = SeriesDataset::new(names, kinds, columns, labels, split)?;
    Ok((
        ds,
        SyntheticTruth {
            joint,
            phase,
            anomaly,
            patterns: patterns.to_vec(),
        },
    ))
}

fn pick_other_joint(rng: &mut ChaCha8Rng, count: usize, exclude: &[usize]) -> usize {
    let candidates: Vec<usize> = (0..count).filter(|j| !exclude.contains(j)).collect();
    if candidates.is_empty() {
        // every joint state occurs inside the segment; fall back to one not at its start
        let first = exclude[0];
        return (first + 1) % count;
    }
    candidates[rng.random_range(0..candidates.len())]
}

/// Mark non-overlapping segments totalling exactly `total` points, keeping
/// `margin` free points around each. Lengths are drawn from `len_range`
/// (inclusive), the last one shortened to hit the total.
fn place_segments(
    rng: &mut ChaCha8Rng,
    mask: &mut [Option<AnomalyKind>],
    total: usize,
    len_range: (usize, usize),
    margin: usize,
    kind: AnomalyKind,
) -> Result<Vec<(usize, usize)>> {
    let t = mask.len();
    let mut placed = Vec::new();
    let mut remaining = total;
    let mut attempts = 0usize;
    while remaining > 0 {
        let len = rng
            .random_range(len_range.0..=len_range.1)
            .min(remaining)
            .min(t);
        let a = rng.random_range(0..=t - len);
        let b = a + len;
        let lo = a.saturating_sub(margin);
        let hi = (b + margin).min(t);
        if mask[lo..hi].iter().all(Option::is_none) {
            mask[a..b].iter_mut().for_each(|m| *m = Some(kind));
            placed.push((a, b));
            remaining -= len;
        }
        attempts += 1;
        if attempts > 100_000 {
            return Err(StarError::Config(format!(
                "could not place {total} {kind:?} points in a series of {t}"
            )));
        }
    }
    Ok(placed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_regime_cfg(noise: f64) -> SyntheticConfig {
        SyntheticConfig {
            n_state_vars: 1,
            n_numeric_vars: 1,
            regime_counts: vec![2],
            dwell_min: 40,
            dwell_max: 80,
            patch_len: 16,
            patterns: Some(vec![vec![
                Pattern::Stable { level: 0.0 },
                Pattern::Oscillate {
                    amplitude: 1.0,
                    period: 20.0,
                    level: 0.0,
                },
            ]]),
            noise_std: noise,
            anomalies: AnomalyFractions::none(),
            spike_magnitude: 3.0,
            t_train: 1000,
            t_test: 500,
            seed: 7,
        }
    }

    #[test]
    fn noise_free_stable_regime_is_exactly_zero() {
        let (train, test) = generate_synthetic(&two_regime_cfg(0.0)).unwrap();
        for ds in [&train, &test] {
            for k in 0..ds.len() {
                if ds.column(1)[k] == 0.0 {
                    assert_eq!(ds.column(0)[k], 0.0);
                }
            }
        }
        assert!(train.labels().is_none());
        assert_eq!(
            test.labels()
                .unwrap()
                .iter()
                .map(|&v| v as usize)
                .sum::<usize>(),
            0
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SyntheticConfig::benchmark(3);
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticConfig::benchmark(4)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn mismatch_label_count_matches_fraction() {
        let mut cfg = SyntheticConfig::benchmark(11);
        cfg.anomalies = AnomalyFractions {
            point_spike: 0.0,
            state_mismatch: 0.05,
            state_only: 0.0,
        };
        cfg.t_test = 4000;
        let (_, test) = generate_synthetic(&cfg).unwrap();
        let n: usize = test.labels().unwrap().iter().map(|&v| v as usize).sum();
        assert!((160..=240).contains(&n), "{n} labeled points");
    }

    #[test]
    fn conditioning_holds_off_anomalies() {
        let mut cfg = SyntheticConfig::benchmark(5);
        cfg.noise_std = 0.0;
        let (_, test, _, truth) = generate_synthetic_with_truth(&cfg).unwrap();
        let state_cols = test.state_indices();
        let mut checked = 0;
        for k in 0..test.len() {
            if truth.anomaly[k].is_some() {
                continue;
            }
            let reported: Vec<usize> = state_cols
                .iter()
                .map(|&c| test.column(c)[k] as usize)
                .collect();
            assert_eq!(cfg.encode_joint(&reported), truth.joint[k]);
            for c in 0..cfg.n_numeric_vars {
                assert_eq!(
                    test.column(c)[k],
                    truth.patterns[c][truth.joint[k]].eval(truth.phase[k])
                );
            }
            checked += 1;
        }
        assert!(checked > 3500);
    }

    #[test]
    fn anomaly_kinds_behave_as_described() {
        let mut cfg = SyntheticConfig::benchmark(9);
        cfg.noise_std = 0.0;
        let (_, test, _, truth) = generate_synthetic_with_truth(&cfg).unwrap();
        let state_cols = test.state_indices();
        let mut seen = [false; 3];
        for k in 0..test.len() {
            let reported: Vec<usize> = state_cols
                .iter()
                .map(|&c| test.column(c)[k] as usize)
                .collect();
            let reported = cfg.encode_joint(&reported);
            match truth.anomaly[k] {
                Some(AnomalyKind::StateMismatch) => {
                    seen[0] = true;
                    // states untouched, numeric pattern belongs elsewhere
                    assert_eq!(reported, truth.joint[k]);
                }
                Some(AnomalyKind::StateOnly) => {
                    seen[1] = true;
                    assert_ne!(reported, truth.joint[k]);
                    for c in 0..cfg.n_numeric_vars {
                        assert_eq!(
                            test.column(c)[k],
                            truth.patterns[c][truth.joint[k]].eval(truth.phase[k])
                        );
                    }
                }
                Some(AnomalyKind::PointSpike) => {
                    seen[2] = true;
                    let off = (0..cfg.n_numeric_vars)
                        .map(|c| {
                            (test.column(c)[k]
                                - truth.patterns[c][truth.joint[k]].eval(truth.phase[k]))
                            .abs()
                        })
                        .fold(0.0, f64::max);
                    assert!((off - cfg.spike_magnitude).abs() < 1e-9);
                }
                None => {}
            }
        }
        assert_eq!(seen, [true; 3]);
        let labels: usize = test.labels().unwrap().iter().map(|&v| v as usize).sum();
        assert_eq!(labels, 200);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = two_regime_cfg(0.0);
        cfg.dwell_min = 20;
        assert!(matches!(
            generate_synthetic(&cfg),
            Err(StarError::Config(_))
        ));
        let mut cfg = two_regime_cfg(0.0);
        cfg.anomalies = AnomalyFractions {
            point_spike: 0.1,
            state_mismatch: 0.1,
            state_only: 0.05,
        };
        assert!(matches!(
            generate_synthetic(&cfg),
            Err(StarError::Config(_))
        ));
        let mut cfg = two_regime_cfg(0.0);
        cfg.patterns = Some(vec![vec![Pattern::Stable { level: 0.0 }]]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = two_regime_cfg(0.1);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SyntheticConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let bad = text.replacen("{", "{\"bogus\":1,", 1);
        assert!(serde_json::from_str::<SyntheticConfig>(&bad).is_err());
    }
}
