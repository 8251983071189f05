//! From scores to masks: ranked and random masks, score densities, the
//! first-peak sparsity estimate and grid search.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scoring::{removal_order, ScoreReport, UnitScore};
use crate::units::{removal_count, MaskKind, Provenance, SparsityMask, UnitId, UnitKind};

fn check_fraction(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Parameter(format!("sparsity must lie in [0, 1), got {s}")));
    }
    Ok(())
}

fn mask_kind(units: impl IntoIterator<Item = UnitKind>) -> MaskKind {
    if units.into_iter().any(|k| k == UnitKind::Parameter) {
        MaskKind::Unstructured
    } else {
        MaskKind::Structured
    }
}

/// Removes the `round(s·N)` lowest-`I` units of each kind. Ties are broken by
/// unit order, so masks are nested in `s`.
pub fn rank_mask(report: &ScoreReport, s: f64) -> Result<SparsityMask> {
    check_fraction(s)?;
    let mut mask = SparsityMask::empty(mask_kind(report.units.iter().map(|u| u.unit.kind)));
    mask.sparsity = s;
    mask.provenance = Provenance::Ranked {
        lambda: report.lambda,
    };
    for kind in report.kinds() {
        let mut units: Vec<&UnitScore> = report.of_kind(kind).collect();
        units.sort_by(|a, b| removal_order(a, b));
        let k = removal_count(s, units.len());
        mask.removed.extend(units[..k].iter().map(|u| u.unit.clone()));
    }
    Ok(mask)
}

/// Removes a uniform sample of `round(s·N)` units of each kind.
pub fn random_mask(units: &[UnitId], s: f64, seed: u64) -> Result<SparsityMask> {
    check_fraction(s)?;
    let mut mask = SparsityMask::empty(mask_kind(units.iter().map(|u| u.kind)));
    mask.sparsity = s;
    mask.provenance = Provenance::Random { seed };
    let mut rng = Rng::new(seed);
    let mut kinds: Vec<UnitKind> = units.iter().map(|u| u.kind).collect();
    kinds.sort();
    kinds.dedup();
    for kind in kinds {
        let of_kind: Vec<&UnitId> = units.iter().filter(|u| u.kind == kind).collect();
        let k = removal_count(s, of_kind.len());
        for i in rng.sample_indices(of_kind.len(), k) {
            mask.removed.insert(of_kind[i].clone());
        }
    }
    Ok(mask)
}

/// Histogram density of a score sample with a moving-average smoothed copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    /// Fraction of the sample in each bin.
    pub mass: Vec<f64>,
    /// `mass / width`.
    pub density: Vec<f64>,
    /// Moving average of `density`, rescaled to integrate to 1.
    pub smoothed: Vec<f64>,
    /// Cumulative mass at each right edge.
    pub cumulative: Vec<f64>,
    pub window: usize,
    /// Every score was identical; the profile is a single unit-width bin.
    pub degenerate: bool,
}

pub const DEFAULT_BINS: usize = 50;
pub const SMOOTHING_WINDOW: usize = 3;

impl DensityProfile {
    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    pub fn width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    pub fn center(&self, bin: usize) -> f64 {
        0.5 * (self.edges[bin] + self.edges[bin + 1])
    }

    /// Cumulative mass up to the center of `bin`, counting half of the bin.
    pub fn cumulative_at_center(&self, bin: usize) -> f64 {
        let before = if bin == 0 { 0.0 } else { self.cumulative[bin - 1] };
        before + 0.5 * self.mass[bin]
    }
}

/// Density over `[min, max]` of `scores`.
pub fn density_profile(scores: &[f64], bins: usize) -> Result<DensityProfile> {
    if scores.is_empty() {
        return Err(Error::Input("density of an empty sample".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    density_profile_in(scores, bins, lo, hi)
}

/// Density over a fixed range `[lo, hi]`; scores outside are clamped into
/// the end bins.
pub fn density_profile_in(scores: &[f64], bins: usize, lo: f64, hi: f64) -> Result<DensityProfile> {
    if scores.is_empty() {
        return Err(Error::Input("density of an empty sample".into()));
    }
    if bins < 2 {
        return Err(Error::Parameter(format!("need at least 2 bins, got {bins}")));
    }
    if scores.iter().any(|s| !s.is_finite()) || !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::Input("scores and range must be finite".into()));
    }
    if lo == hi {
        log::warn!("all scores equal {lo}; density is degenerate");
        return Ok(DensityProfile {
            edges: vec![lo - 0.5, lo + 0.5],
            mass: vec![1.0],
            density: vec![1.0],
            smoothed: vec![1.0],
            cumulative: vec![1.0],
            window: SMOOTHING_WINDOW,
            degenerate: true,
        });
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + i as f64 * width })
        .collect();
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let b = (((s - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = scores.len() as f64;
    let mass: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let density: Vec<f64> = mass.iter().map(|m| m / width).collect();
    let half = SMOOTHING_WINDOW / 2;
    let mut smoothed: Vec<f64> = (0..bins)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half).min(bins - 1);
            density[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        })
        .collect();
    let total: f64 = smoothed.iter().sum::<f64>() * width;
    smoothed.iter_mut().for_each(|d| *d /= total);
    let mut cumulative = Vec::with_capacity(bins);
    let mut c = 0usize;
    for &k in &counts {
        c += k;
        cumulative.push(c as f64 / n);
    }
    Ok(DensityProfile {
        edges,
        mass,
        density,
        smoothed,
        cumulative,
        window: SMOOTHING_WINDOW,
        degenerate: false,
    })
}

/// Index of the first local maximum of the smoothed density. A run of equal
/// values counts as one peak (at its middle) when both sides are lower; the
/// first bin qualifies when it exceeds its right neighbor. The last bin never
/// qualifies.
pub fn first_peak(values: &[f64]) -> Option<usize> {
    let n = values.len();
    let mut i = 0;
    while i + 1 < n {
        let mut j = i;
        while j + 1 < n && values[j + 1] == values[i] {
            j += 1;
        }
        if j + 1 >= n {
            return None;
        }
        let left_lower = i == 0 || values[i - 1] < values[i];
        if left_lower && values[j + 1] < values[i] {
            return Some((i + j) / 2);
        }
        i = j + 1;
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum AutoEstimate {
    /// Cumulative mass at the first density peak, clamped to the grid range.
    Estimate {
        sparsity: f64,
        unclamped: f64,
        peak_bin: usize,
        peak_center: f64,
    },
    /// The density has no usable peak; the caller should grid-search.
    Fallback { reason: String },
}

/// First-peak sparsity estimate, clamped to `[range.0, range.1]`. A
/// monotone density (including one that only decreases from its first bin)
/// has no informative peak and yields a fallback.
pub fn auto_sparsity(profile: &DensityProfile, range: (f64, f64)) -> AutoEstimate {
    if profile.degenerate {
        return AutoEstimate::Fallback {
            reason: "degenerate density (all scores equal)".into(),
        };
    }
    let d = &profile.smoothed;
    let monotone = d.windows(2).all(|w| w[0] >= w[1]) || d.windows(2).all(|w| w[0] <= w[1]);
    match first_peak(d).filter(|_| !monotone) {
        None => {
            log::warn!("score density has no local maximum; falling back to grid search");
            AutoEstimate::Fallback {
                reason: "monotone density has no local maximum".into(),
            }
        }
        Some(bin) => {
            let c = profile.cumulative_at_center(bin);
            AutoEstimate::Estimate {
                sparsity: c.clamp(range.0, range.1),
                unclamped: c,
                peak_bin: bin,
                peak_center: profile.center(bin),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub sparsity: f64,
    pub metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: f64,
    pub best_metric: f64,
    pub table: Vec<GridPoint>,
}

/// Evaluates every grid point and returns the best, ties going to the
/// higher sparsity. Failed points are recorded and skipped.
pub fn search(
    grid: &[f64],
    mut evaluate: impl FnMut(f64) -> Result<f64>,
) -> Result<SearchResult> {
    if grid.is_empty() {
        return Err(Error::Parameter("empty sparsity grid".into()));
    }
    if grid.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
        return Err(Error::Parameter("grid values must lie in (0, 1)".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &s in grid {
        match evaluate(s) {
            Ok(m) => {
                if best.is_none_or(|(bs, bm)| m > bm || (m == bm && s > bs)) {
                    best = Some((s, m));
                }
                table.push(GridPoint {
                    sparsity: s,
                    metric: Some(m),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("grid point {s} failed: {e}");
                table.push(GridPoint {
                    sparsity: s,
                    metric: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let (best, best_metric) =
        best.ok_or_else(|| Error::Contract("every grid point failed".into()))?;
    Ok(SearchResult {
        best,
        best_metric,
        table,
    })
}

/// Writes `density_<kind>.csv` per unit kind with columns
/// `bin_center,density_P,density_Q,density_I,cumulative_I`. The three
/// densities share one range so they can be overlaid.
pub fn export_density(report: &ScoreReport, dir: &Path, bins: usize) -> Result<Vec<PathBuf>> {
    if report.units.is_empty() {
        return Err(Error::Input("empty score report".into()));
    }
    let mut written = Vec::new();
    for kind in report.kinds() {
        let units: Vec<&UnitScore> = report.of_kind(kind).collect();
        let p: Vec<f64> = units.iter().map(|u| u.p).collect();
        let q: Vec<f64> = units.iter().map(|u| u.q).collect();
        let i: Vec<f64> = units.iter().map(|u| u.i).collect();
        let all = p.iter().chain(&q).chain(&i);
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        let dp = density_profile_in(&p, bins, lo, hi)?;
        let dq = density_profile_in(&q, bins, lo, hi)?;
        let di = density_profile_in(&i, bins, lo, hi)?;
        let mut csv = String::from("bin_center,density_P,density_Q,density_I,cumulative_I\n");
        for b in 0..bins {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                di.center(b),
                dp.smoothed[b],
                dq.smoothed[b],
                di.smoothed[b],
                di.cumulative[b]
            );
        }
        let path = dir.join(format!("density_{kind}.csv"));
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
