//! Diebold-Mariano tests, Benjamini-Hochberg correction and permutation
//! feature importance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize::STATIC_FEATURES, ForecastDataset};
use crate::error::{Error, Result};
use crate::metrics::crps_gaussian;
use crate::models::{map_days, PreparedData, TrainedModel};
use crate::normal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    pub t: f64,
    /// Two-sided p-value; `None` when the test is degenerate.
    pub p: Option<f64>,
    /// All score differences were zero, so no decision is possible.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DmVariance {
    /// `sigma^2 = mean(d^2)`.
    #[default]
    Raw,
    /// `sigma^2 = mean((d - mean d)^2)`.
    Demeaned,
}

/// Diebold-Mariano statistic `t = sqrt(n) * mean(d) / sigma` of the score
/// differences `d = f - g`, with a two-sided standard normal p-value.
pub fn dm_test(scores_f: &[f64], scores_g: &[f64], variance: DmVariance) -> Result<DmResult> {
    if scores_f.len() != scores_g.len() {
        return Err(Error::Shape(format!("score series of length {} and {}", scores_f.len(), scores_g.len())));
    }
    let n = scores_f.len();
    if n < 2 {
        return Err(Error::Domain(format!("at least two paired scores are needed, got {n}")));
    }
    let d: Vec<f64> = scores_f.iter().zip(scores_g).map(|(f, g)| f - g).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = match variance {
        DmVariance::Raw => d.iter().map(|x| x * x).sum::<f64>() / nf,
        DmVariance::Demeaned => d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf,
    };
    if !(var > 0.0) {
        return Ok(DmResult { t: 0.0, p: None, degenerate: true });
    }
    let t = nf.sqrt() * mean / var.sqrt();
    let p = (2.0 * normal::cdf(-t.abs())).min(1.0);
    Ok(DmResult { t, p: Some(p), degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhResult {
    /// Largest p-value that is still rejected; `None` when nothing is.
    pub p_star: Option<f64>,
    /// One flag per input p-value.
    pub rejected: Vec<bool>,
}

impl BhResult {
    pub fn n_rejected(&self) -> usize {
        self.rejected.iter().filter(|&&r| r).count()
    }
}

/// Benjamini-Hochberg: `p* = max { p_(i) : p_(i) <= alpha i / M }`; every
/// p-value `<= p*` is rejected.
pub fn bh_correct(p_values: &[f64], alpha: f64) -> Result<BhResult> {
    if p_values.is_empty() {
        return Err(Error::Domain("no p-values to correct".into()));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
    }
    let mut sorted = p_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let p_star = sorted.iter().enumerate().filter(|(i, &p)| p <= alpha * (*i as f64 + 1.0) / m).map(|(_, &p)| p).last();
    let rejected = p_values.iter().map(|&p| p_star.is_some_and(|ps| p <= ps)).collect();
    Ok(BhResult { p_star, rejected })
}

/// Name used for the station-identity pseudo feature.
pub const ID_FEATURE: &str = "id";
/// Name used for the day-of-year pseudo feature.
pub const YDAY_FEATURE: &str = "yday";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceResult {
    pub feature: String,
    pub imp_mean: f64,
    /// Sample standard deviation over repetitions; 0 for one repetition.
    pub imp_std: f64,
    pub repetitions: usize,
}

/// What a permutation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureTarget {
    /// Raw member feature column.
    Member(usize),
    /// Static station feature (index into [`STATIC_FEATURES`]).
    Static(usize),
    /// The day-of-year encoding.
    Yday,
    /// The station-embedding assignment.
    Id,
}

/// Features whose importance can be assessed on `ds`, in report order.
pub fn importance_features(ds: &ForecastDataset) -> Vec<(String, FeatureTarget)> {
    let mut out: Vec<_> = ds.feature_names().iter().enumerate().map(|(p, n)| (n.clone(), FeatureTarget::Member(p))).collect();
    out.extend(STATIC_FEATURES.iter().enumerate().map(|(k, n)| (n.to_string(), FeatureTarget::Static(k))));
    out.push((YDAY_FEATURE.into(), FeatureTarget::Yday));
    out.push((ID_FEATURE.into(), FeatureTarget::Id));
    out
}

pub fn resolve_feature(ds: &ForecastDataset, name: &str) -> Result<FeatureTarget> {
    importance_features(ds).into_iter().find(|(n, _)| n == name).map(|(_, t)| t).ok_or_else(|| {
        let names: Vec<_> = importance_features(ds).into_iter().map(|(n, _)| n).collect();
        Error::Config(format!("unknown feature '{name}'; available: {}", names.join(", ")))
    })
}

/// Mean Gaussian CRPS of `model` over all days of a prepared dataset.
pub fn mean_crps(model: &TrainedModel, data: &PreparedData, obs: &ForecastDataset) -> Result<f64> {
    let per_day = map_days(data.n_days(), |t| {
        let preds = model.predict_prepared(data, t)?;
        preds.iter().enumerate().map(|(s, g)| crps_gaussian(g.mu, g.sigma, obs.observation(t, s))).sum::<Result<f64>>()
    })?;
    Ok(per_day.iter().sum::<f64>() / (obs.n_days() * obs.n_stations()) as f64)
}

/// Two-stage permutation of one member feature: days are permuted by `pi`,
/// then within each day the flattened `(station, member)` values are
/// permuted by `pi_t`. Identity permutations leave the data unchanged.
pub fn permute_member_feature(ds: &ForecastDataset, p: usize, pi: &[usize], pi_t: &[Vec<usize>]) -> Result<ForecastDataset> {
    let (nt, ns, nm, np) = ds.shape();
    if p >= np || pi.len() != nt || pi_t.len() != nt || pi_t.iter().any(|q| q.len() != ns * nm) {
        return Err(Error::Shape("permutation does not match the dataset".into()));
    }
    let src = ds.features_raw();
    let mut out = src.to_vec();
    for t in 0..nt {
        for j in 0..ns * nm {
            let k = pi_t[t][j];
            out[(t * ns * nm + j) * np + p] = src[(pi[t] * ns * nm + k) * np + p];
        }
    }
    ds.with_features(out)
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

fn permuted_data(
    model: &TrainedModel,
    base: &PreparedData,
    ds: &ForecastDataset,
    target: FeatureTarget,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedData> {
    let (nt, ns, nm, _) = ds.shape();
    match target {
        FeatureTarget::Member(p) => {
            let pi = permutation(nt, rng);
            let pi_t: Vec<_> = (0..nt).map(|_| permutation(ns * nm, rng)).collect();
            let permuted = permute_member_feature(ds, p, &pi, &pi_t)?;
            let fresh = model.prepare(&permuted)?;
            base.with_view(fresh.view)
        }
        FeatureTarget::Static(k) => {
            let perm = permutation(ns, rng);
            let mut stations = ds.stations().to_vec();
            for (s, st) in stations.iter_mut().enumerate() {
                let from = &ds.stations()[perm[s]];
                match k {
                    0 => st.alt = from.alt,
                    1 => st.orog = from.orog,
                    2 => st.lat = from.lat,
                    _ => st.lon = from.lon,
                }
            }
            let view = base.view.with_stations(stations)?;
            base.with_view(view)
        }
        FeatureTarget::Yday => {
            let perm = permutation(nt, rng);
            let yday = perm.iter().map(|&t| base.view.yday(t)).collect();
            base.with_view(base.view.with_yday(yday)?)
        }
        FeatureTarget::Id => {
            let perm = permutation(ns, rng);
            base.with_station_rows(perm.iter().map(|&s| base.station_rows[s]).collect())
        }
    }
}

/// Relative CRPS increase `(CRPS_perm - CRPS_orig) / CRPS_orig` when one
/// feature is permuted, repeated `repetitions` times with seeds derived from
/// `seed`.
///
/// Member features follow the two-stage scheme of
/// [`permute_member_feature`]. Static station features are shuffled across
/// stations as network inputs only; the graph keeps the true coordinates.
/// The day-of-year encoding is permuted across days. Station identity is
/// assessed by shuffling which embedding each station uses.
pub fn permutation_importance(
    model: &TrainedModel,
    ds: &ForecastDataset,
    feature: &str,
    repetitions: usize,
    seed: u64,
) -> Result<ImportanceResult> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be at least 1".into()));
    }
    let target = resolve_feature(ds, feature)?;
    let base = model.prepare(ds)?;
    let orig = mean_crps(model, &base, ds)?;
    let mut imps = Vec::with_capacity(repetitions);
    for r in 0..repetitions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64 + 1);
        let data = permuted_data(model, &base, ds, target, &mut rng)?;
        let perm = mean_crps(model, &data, ds)?;
        imps.push((perm - orig) / orig);
    }
    let n = imps.len() as f64;
    let imp_mean = imps.iter().sum::<f64>() / n;
    let imp_std = if imps.len() > 1 { (imps.iter().map(|v| (v - imp_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Ok(ImportanceResult { feature: feature.to_string(), imp_mean, imp_std, repetitions })
}

/// `max(Imp_i, 0) / sum_j max(Imp_j, 0)`; all zeros when no importance is positive.
pub fn normalized_importances(results: &[ImportanceResult]) -> Vec<f64> {
    let total: f64 = results.iter().map(|r| r.imp_mean.max(0.0)).sum();
    results.iter().map(|r| if total > 0.0 { r.imp_mean.max(0.0) / total } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::tiny;

    #[test]
    fn dm_examples() {
        let zeros = [0.0; 4];
        let r = dm_test(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], DmVariance::Raw).unwrap();
        assert!(r.degenerate && r.p.is_none());
        let r = dm_test(&[1.0; 4], &zeros, DmVariance::Raw).unwrap();
        assert_eq!(r.t, 2.0);
        assert!((r.p.unwrap() - 0.045_500_263_896_358_4).abs() < 1e-12);
        let r = dm_test(&[1.0, -1.0, 1.0, -1.0], &zeros, DmVariance::Raw).unwrap();
        assert_eq!((r.t, r.p), (0.0, Some(1.0)));
        assert!(dm_test(&[1.0], &[0.0], DmVariance::Raw).is_err());
        assert!(dm_test(&[1.0, 2.0], &[0.0], DmVariance::Raw).is_err());
    }

    #[test]
    fn dm_demeaned_variant() {
        let f = [1.0, 2.0, 4.0];
        let g = [0.0, 0.0, 0.0];
        let r = dm_test(&f, &g, DmVariance::Demeaned).unwrap();
        let mean = 7.0 / 3.0;
        let var = ((1.0f64 - mean).powi(2) + (2.0f64 - mean).powi(2) + (4.0f64 - mean).powi(2)) / 3.0;
        assert!((r.t - 3f64.sqrt() * mean / var.sqrt()).abs() < 1e-12);
        assert!(dm_test(&[1.0; 3], &g, DmVariance::Demeaned).unwrap().degenerate);
    }

    #[test]
    fn bh_examples() {
        let r = bh_correct(&[0.005, 0.01, 0.03, 0.04], 0.05).unwrap();
        assert_eq!(r.p_star, Some(0.04));
        assert_eq!(r.rejected, vec![true; 4]);
        let r = bh_correct(&[0.9], 0.05).unwrap();
        assert_eq!((r.p_star, r.n_rejected()), (None, 0));
        let r = bh_correct(&[0.5, 0.01], 0.05).unwrap();
        assert_eq!(r.p_star, Some(0.01));
        assert_eq!(r.rejected, vec![false, true]);
        assert!(bh_correct(&[], 0.05).is_err());
        assert!(bh_correct(&[1.5], 0.05).is_err());
    }

    #[test]
    fn bh_step_up_rejects_below_pstar() {
        // p_(2) fails its own threshold but is below p* = p_(3)
        let r = bh_correct(&[0.001, 0.03, 0.032], 0.05).unwrap();
        assert_eq!(r.p_star, Some(0.032));
        assert_eq!(r.n_rejected(), 3);
    }

    #[test]
    fn identity_permutation_changes_nothing() {
        let ds = tiny(3, 2, 4);
        let pi: Vec<usize> = (0..3).collect();
        let pi_t = vec![(0..8).collect::<Vec<_>>(); 3];
        assert_eq!(permute_member_feature(&ds, 1, &pi, &pi_t).unwrap(), ds);
    }

    #[test]
    fn two_stage_permutation_moves_only_one_column() {
        let ds = tiny(3, 2, 2);
        let pi = vec![2, 0, 1];
        let pi_t = vec![vec![3, 2, 1, 0]; 3];
        let out = permute_member_feature(&ds, 0, &pi, &pi_t).unwrap();
        for t in 0..3 {
            for j in 0..4 {
                let (s, n) = (j / 2, j % 2);
                let k = pi_t[t][j];
                assert_eq!(out.feature(t, s, n, 0), ds.feature(pi[t], k / 2, k % 2, 0));
                assert_eq!(out.feature(t, s, n, 1), ds.feature(t, s, n, 1));
            }
        }
        let mut a: Vec<f64> = out.features_raw().iter().step_by(2).copied().collect();
        let mut b: Vec<f64> = ds.features_raw().iter().step_by(2).copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn normalized_sums_to_one() {
        let mk = |v: f64| ImportanceResult { feature: String::new(), imp_mean: v, imp_std: 0.0, repetitions: 1 };
        let n = normalized_importances(&[mk(0.3), mk(-0.1), mk(0.1)]);
        assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(n[1], 0.0);
        assert_eq!(normalized_importances(&[mk(-1.0)]), vec![0.0]);
    }

    #[test]
    fn feature_names_resolve() {
        let ds = tiny(2, 2, 2);
        assert_eq!(resolve_feature(&ds, "aux").unwrap(), FeatureTarget::Member(1));
        assert_eq!(resolve_feature(&ds, "id").unwrap(), FeatureTarget::Id);
        assert_eq!(resolve_feature(&ds, "lat").unwrap(), FeatureTarget::Static(2));
        assert!(resolve_feature(&ds, "wind").is_err());
    }
}
