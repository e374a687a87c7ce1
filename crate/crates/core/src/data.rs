//! Cohort data model: patient records, survival-time discretization,
//! stratified Monte-Carlo splits and the synthetic cohort generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const DEFAULT_N_BINS: usize = 4;
pub const DEFAULT_N_GROUPS: usize = 6;
/// Log-hazard weight on each latent risk factor in the generator.
pub const LATENT_WEIGHT: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    /// N_p × D_in_p per-patch features.
    pub pathology_tokens: Mat,
    /// N_g × D_in_g grouped genomic vectors.
    pub genomic_groups: Mat,
    pub survival_time: f64,
    /// `true` = death observed, `false` = right-censored.
    pub event_observed: bool,
    pub time_bin: Option<usize>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if self.pathology_tokens.rows() == 0 {
            return Err(Error::Data(format!("{}: no pathology tokens", self.patient_id)));
        }
        if self.genomic_groups.rows() == 0 {
            return Err(Error::Data(format!("{}: no genomic groups", self.patient_id)));
        }
        if !(self.survival_time > 0.0 && self.survival_time.is_finite()) {
            return Err(Error::Data(format!(
                "{}: survival_time must be positive, got {}",
                self.patient_id, self.survival_time
            )));
        }
        if !self.pathology_tokens.is_finite() || !self.genomic_groups.is_finite() {
            return Err(Error::NonFinite(format!("features of {}", self.patient_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    /// T−1 non-decreasing cut points; empty before discretization.
    pub bin_edges: Vec<f64>,
    /// T; zero before discretization.
    pub n_bins: usize,
}

impl Cohort {
    /// Validates every record and the shared feature widths.
    pub fn new(patients: Vec<PatientRecord>) -> Result<Self> {
        if let Some(first) = patients.first() {
            let (dp, dg) = (first.pathology_tokens.cols(), first.genomic_groups.cols());
            for p in &patients {
                p.validate()?;
                if p.pathology_tokens.cols() != dp {
                    return Err(Error::shape("Cohort::new pathology width", dp, p.pathology_tokens.cols()));
                }
                if p.genomic_groups.cols() != dg {
                    return Err(Error::shape("Cohort::new genomic width", dg, p.genomic_groups.cols()));
                }
            }
        }
        Ok(Self {
            patients,
            bin_edges: Vec::new(),
            n_bins: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn is_discretized(&self) -> bool {
        self.n_bins > 0 && self.patients.iter().all(|p| p.time_bin.is_some())
    }

    pub fn d_in_p(&self) -> usize {
        self.patients.first().map_or(0, |p| p.pathology_tokens.cols())
    }

    pub fn d_in_g(&self) -> usize {
        self.patients.first().map_or(0, |p| p.genomic_groups.cols())
    }

    pub fn n_groups(&self) -> usize {
        self.patients.first().map_or(0, |p| p.genomic_groups.rows())
    }

    pub fn times(&self) -> Vec<f64> {
        self.patients.iter().map(|p| p.survival_time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.patients.iter().map(|p| p.event_observed).collect()
    }

    pub fn n_events(&self) -> usize {
        self.patients.iter().filter(|p| p.event_observed).count()
    }

    fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
            bin_edges: Vec::new(),
            n_bins: 0,
        }
    }
}

/// Number of edges strictly below `time`.
pub fn bin_for_time(edges: &[f64], time: f64) -> usize {
    edges.iter().filter(|&&e| e < time).count()
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bin edges at the 1/T … (T−1)/T quantiles of the uncensored times.
pub fn quantile_edges(cohort: &Cohort, n_bins: usize) -> Result<Vec<f64>> {
    if n_bins < 2 {
        return Err(Error::config("n_bins", format!("need at least 2 bins, got {n_bins}")));
    }
    let mut observed: Vec<f64> = cohort
        .patients
        .iter()
        .filter(|p| p.event_observed)
        .map(|p| p.survival_time)
        .collect();
    if observed.is_empty() {
        return Err(Error::NoObservedEvents);
    }
    observed.sort_by(f64::total_cmp);
    Ok((1..n_bins)
        .map(|k| quantile_sorted(&observed, k as f64 / n_bins as f64))
        .collect())
}

/// Re-bins every patient against fixed edges.
pub fn apply_bin_edges(mut cohort: Cohort, edges: &[f64]) -> Cohort {
    for p in &mut cohort.patients {
        p.time_bin = Some(bin_for_time(edges, p.survival_time));
    }
    cohort.bin_edges = edges.to_vec();
    cohort.n_bins = edges.len() + 1;
    cohort
}

pub fn discretize_survival(cohort: Cohort, n_bins: usize) -> Result<Cohort> {
    let edges = quantile_edges(&cohort, n_bins)?;
    Ok(apply_bin_edges(cohort, &edges))
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Cohort,
    pub val: Cohort,
}

/// Independent stratified train/validation partitions. Bin edges of both
/// halves come from the training half only.
pub fn split_monte_carlo(
    cohort: &Cohort,
    n_splits: usize,
    train_fraction: f64,
    n_bins: usize,
    seed: u64,
) -> Result<Vec<Split>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("train_fraction", format!("must lie in (0,1), got {train_fraction}")));
    }
    if n_splits == 0 {
        return Err(Error::config("n_splits", "must be at least 1"));
    }
    let n = cohort.len();
    let events: Vec<usize> = (0..n).filter(|&i| cohort.patients[i].event_observed).collect();
    let censored: Vec<usize> = (0..n).filter(|&i| !cohort.patients[i].event_observed).collect();
    if events.len() < 2 {
        return Err(Error::Stratum {
            stratum: "events",
            count: events.len(),
            needed: 2,
        });
    }
    let n_val = ((n as f64) * (1.0 - train_fraction)).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Stratum {
            stratum: "cohort",
            count: n,
            needed: (2.0 / (1.0 - train_fraction).min(train_fraction)).ceil() as usize,
        });
    }
    let val_events = ((n_val as f64) * events.len() as f64 / n as f64)
        .round()
        .clamp(1.0, (events.len() - 1) as f64) as usize;
    let val_censored = n_val - val_events;
    if val_censored > censored.len() {
        return Err(Error::Stratum {
            stratum: "censored",
            count: censored.len(),
            needed: val_censored,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Vec::with_capacity(n_splits);
    for _ in 0..n_splits {
        let mut ev = events.clone();
        let mut ce = censored.clone();
        ev.shuffle(&mut rng);
        ce.shuffle(&mut rng);
        let mut val_idx: Vec<usize> = ev[..val_events].iter().chain(&ce[..val_censored]).copied().collect();
        let mut train_idx: Vec<usize> = ev[val_events..].iter().chain(&ce[val_censored..]).copied().collect();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        let train = discretize_survival(cohort.subset(&train_idx), n_bins)?;
        let val = apply_bin_edges(cohort.subset(&val_idx), &train.bin_edges);
        splits.push(Split { train, val });
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    /// Inclusive (min, max) patch count per patient.
    pub n_p_range: (usize, usize),
    pub n_groups: usize,
    pub d_in_p: usize,
    pub d_in_g: usize,
    pub shared_signal_strength: f64,
    pub specific_signal_strength_p: f64,
    pub specific_signal_strength_g: f64,
    pub noise_sigma: f64,
    pub censor_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_patients: 400,
            n_p_range: (8, 24),
            n_groups: DEFAULT_N_GROUPS,
            d_in_p: 16,
            d_in_g: 8,
            shared_signal_strength: 2.0,
            specific_signal_strength_p: 1.0,
            specific_signal_strength_g: 1.0,
            noise_sigma: 0.5,
            censor_rate: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// The same spec with every signal strength set to zero.
    pub fn null(mut self) -> Self {
        self.shared_signal_strength = 0.0;
        self.specific_signal_strength_p = 0.0;
        self.specific_signal_strength_g = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let strengths = [
            ("shared_signal_strength", self.shared_signal_strength),
            ("specific_signal_strength_p", self.specific_signal_strength_p),
            ("specific_signal_strength_g", self.specific_signal_strength_g),
        ];
        for (field, v) in strengths {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(Error::config("noise_sigma", format!("must be > 0, got {}", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.censor_rate) {
            return Err(Error::config("censor_rate", format!("must lie in [0,1], got {}", self.censor_rate)));
        }
        if self.n_patients == 0 {
            return Err(Error::config("n_patients", "must be at least 1"));
        }
        let (lo, hi) = self.n_p_range;
        if lo == 0 || hi < lo {
            return Err(Error::config("n_p_range", format!("need 1 ≤ min ≤ max, got ({lo}, {hi})")));
        }
        if self.n_groups == 0 {
            return Err(Error::config("n_groups", "must be at least 1"));
        }
        if self.d_in_p < 2 || self.d_in_g < 2 {
            return Err(Error::config("d_in_p/d_in_g", "feature widths must be at least 2"));
        }
        Ok(())
    }
}

/// Generator-side bookkeeping for one synthetic patient.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientLatents {
    pub z_shared: f64,
    pub z_p: f64,
    pub z_g: f64,
    /// Event time before censoring was applied.
    pub event_time: f64,
}

impl PatientLatents {
    pub fn log_hazard(&self) -> f64 {
        LATENT_WEIGHT * (self.z_shared + self.z_p + self.z_g)
    }
}

/// Fixed orthonormal pair of directions in R^dim: (shared, specific).
pub fn signal_directions(dim: usize, salt: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d75_7272_656e_6574 ^ salt);
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut a = draw();
    normalize(&mut a);
    let mut b = draw();
    let proj: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    b.iter_mut().zip(&a).for_each(|(y, x)| *y -= proj * x);
    normalize(&mut b);
    (a, b)
}

pub fn make_synthetic_cohort(spec: &SyntheticSpec) -> Result<Cohort> {
    make_synthetic_cohort_with_latents(spec).map(|(c, _)| c)
}

pub fn make_synthetic_cohort_with_latents(spec: &SyntheticSpec) -> Result<(Cohort, Vec<PatientLatents>)> {
    spec.validate()?;
    let (u_p_shared, u_p_specific) = signal_directions(spec.d_in_p, 1);
    let (u_g_shared, u_g_specific) = signal_directions(spec.d_in_g, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut patients = Vec::with_capacity(spec.n_patients);
    let mut latents = Vec::with_capacity(spec.n_patients);
    for idx in 0..spec.n_patients {
        let z_shared: f64 = StandardNormal.sample(&mut rng);
        let z_p: f64 = StandardNormal.sample(&mut rng);
        let z_g: f64 = StandardNormal.sample(&mut rng);
        let n_p = rng.random_range(spec.n_p_range.0..=spec.n_p_range.1);

        let mut tokens = |rows: usize, shared: &[f64], specific: &[f64], specific_strength: f64, z_spec: f64| {
            let a = spec.shared_signal_strength * z_shared;
            let b = specific_strength * z_spec;
            let dim = shared.len();
            let mut m = Mat::zeros(rows, dim);
            for i in 0..rows {
                for j in 0..dim {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    m[(i, j)] = spec.noise_sigma * noise + a * shared[j] + b * specific[j];
                }
            }
            m
        };
        let pathology = tokens(n_p, &u_p_shared, &u_p_specific, spec.specific_signal_strength_p, z_p);
        let genomic = tokens(
            spec.n_groups,
            &u_g_shared,
            &u_g_specific,
            spec.specific_signal_strength_g,
            z_g,
        );

        let rate = (LATENT_WEIGHT * (z_shared + z_p + z_g)).exp();
        let event_time = Exp::new(rate)
            .map_err(|e| Error::Data(format!("exponential rate {rate}: {e}")))?
            .sample(&mut rng);
        let censor_draw: f64 = rng.random();
        let censor_frac: f64 = rng.random();
        let (time, observed) = if censor_draw < spec.censor_rate {
            // keep censoring times strictly positive
            ((event_time * censor_frac).max(f64::MIN_POSITIVE), false)
        } else {
            (event_time, true)
        };
        patients.push(PatientRecord {
            patient_id: format!("P{idx:04}"),
            pathology_tokens: pathology,
            genomic_groups: genomic,
            survival_time: time.max(f64::MIN_POSITIVE),
            event_observed: observed,
            time_bin: None,
        });
        latents.push(PatientLatents {
            z_shared,
            z_p,
            z_g,
            event_time,
        });
    }
    Ok((Cohort::new(patients)?, latents))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: usize, time: f64, event: bool) -> PatientRecord {
        PatientRecord {
            patient_id: format!("T{id}"),
            pathology_tokens: Mat::filled(2, 3, id as f64),
            genomic_groups: Mat::filled(6, 2, 1.0),
            survival_time: time,
            event_observed: event,
            time_bin: None,
        }
    }

    fn cohort(times: &[(f64, bool)]) -> Cohort {
        Cohort::new(times.iter().enumerate().map(|(i, &(t, e))| record(i, t, e)).collect()).unwrap()
    }

    #[test]
    fn quartile_edges_by_linear_interpolation() {
        let c = cohort(&(1..=8).map(|t| (t as f64, true)).collect::<Vec<_>>());
        let d = discretize_survival(c, 4).unwrap();
        assert_eq!(d.bin_edges, vec![2.75, 4.5, 6.25]);
        assert_eq!(d.patients[4].time_bin, Some(2)); // time 5
        assert_eq!(d.n_bins, 4);
    }

    #[test]
    fn degenerate_quantiles_put_ties_in_bin_zero() {
        let c = cohort(&[(5.0, true); 6]);
        let d = discretize_survival(c, 4).unwrap();
        assert_eq!(d.bin_edges, vec![5.0; 3]);
        assert!(d.patients.iter().all(|p| p.time_bin == Some(0)));
    }

    #[test]
    fn edges_ignore_censored_times() {
        let c = cohort(&[(1.0, false), (2.0, false), (3.0, true), (4.0, false)]);
        let d = discretize_survival(c, 2).unwrap();
        assert_eq!(d.bin_edges, vec![3.0]);
        assert_eq!(d.patients[3].time_bin, Some(1));
        assert_eq!(d.patients[2].time_bin, Some(0));
    }

    #[test]
    fn no_events_is_an_error() {
        let c = cohort(&[(1.0, false), (2.0, false)]);
        let err = discretize_survival(c, 2).unwrap_err();
        assert_eq!(err.to_string(), "cannot discretize: no observed events");
    }

    #[test]
    fn discretization_is_idempotent() {
        let c = cohort(&[(1.0, true), (2.5, false), (3.0, true), (7.0, true), (0.5, true)]);
        let once = discretize_survival(c, 3).unwrap();
        let twice = discretize_survival(once.clone(), 3).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn stratified_split_sizes() {
        let mut times: Vec<(f64, bool)> = (0..6).map(|i| (i as f64 + 1.0, true)).collect();
        times.extend((0..4).map(|i| (i as f64 + 0.5, false)));
        let c = cohort(&times);
        let splits = split_monte_carlo(&c, 5, 0.8, 2, 11).unwrap();
        assert_eq!(splits.len(), 5);
        for s in &splits {
            assert_eq!(s.train.len(), 8);
            let ev = s.train.n_events();
            assert!((4..=5).contains(&ev), "train events {ev}");
        }
        let again = split_monte_carlo(&c, 5, 0.8, 2, 11).unwrap();
        for (a, b) in splits.iter().zip(&again) {
            assert_eq!(a.train, b.train);
            assert_eq!(a.val, b.val);
        }
    }

    #[test]
    fn split_partitions_cohort_and_fits_edges_on_train() {
        let spec = SyntheticSpec {
            n_patients: 100,
            n_p_range: (1, 2),
            ..SyntheticSpec::default()
        };
        let c = make_synthetic_cohort(&spec).unwrap();
        for s in split_monte_carlo(&c, 5, 0.8, 4, 3).unwrap() {
            assert_eq!(s.val.len(), 20);
            let mut ids: Vec<&str> = s.train.patients.iter().map(|p| p.patient_id.as_str()).collect();
            let val_ids: Vec<&str> = s.val.patients.iter().map(|p| p.patient_id.as_str()).collect();
            assert!(val_ids.iter().all(|v| !ids.contains(v)));
            ids.extend(val_ids);
            ids.sort_unstable();
            assert_eq!(ids.len(), 100);
            ids.dedup();
            assert_eq!(ids.len(), 100);
            assert_eq!(s.train.bin_edges, quantile_edges(&s.train, 4).unwrap());
            assert_eq!(s.val.bin_edges, s.train.bin_edges);
            let ratio = c.n_events() as f64 / c.len() as f64;
            assert!((s.val.n_events() as f64 - ratio * 20.0).abs() <= 1.0);
        }
    }

    #[test]
    fn split_rejects_tiny_event_stratum() {
        let c = cohort(&[(1.0, true), (2.0, false), (3.0, false)]);
        match split_monte_carlo(&c, 1, 0.5, 2, 0) {
            Err(Error::Stratum { stratum, .. }) => assert_eq!(stratum, "events"),
            other => panic!("expected stratum error, got {other:?}"),
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SyntheticSpec {
            n_patients: 20,
            seed: 7,
            ..SyntheticSpec::default()
        };
        let a = make_synthetic_cohort_with_latents(&spec).unwrap();
        let b = make_synthetic_cohort_with_latents(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn censoring_never_extends_time() {
        let spec = SyntheticSpec {
            n_patients: 300,
            censor_rate: 0.5,
            ..SyntheticSpec::default()
        };
        let (c, lat) = make_synthetic_cohort_with_latents(&spec).unwrap();
        let mut censored = 0;
        for (p, l) in c.patients.iter().zip(&lat) {
            assert!(p.survival_time <= l.event_time);
            if !p.event_observed {
                censored += 1;
            } else {
                assert_eq!(p.survival_time, l.event_time);
            }
        }
        assert!((100..200).contains(&censored));
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
            let mut r = vec![0.0; v.len()];
            for (k, &i) in idx.iter().enumerate() {
                r[i] = k as f64;
            }
            r
        };
        let (ra, rb) = (rank(a), rank(b));
        let m = (a.len() - 1) as f64 / 2.0;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - m) * (y - m)).sum();
        let var: f64 = ra.iter().map(|x| (x - m).powi(2)).sum();
        cov / var
    }

    #[test]
    fn shared_signal_is_recoverable_from_pathology() {
        let spec = SyntheticSpec {
            n_patients: 500,
            shared_signal_strength: 2.0,
            specific_signal_strength_p: 0.0,
            specific_signal_strength_g: 0.0,
            noise_sigma: 0.5,
            ..SyntheticSpec::default()
        };
        let (c, lat) = make_synthetic_cohort_with_latents(&spec).unwrap();
        let (u, _) = signal_directions(spec.d_in_p, 1);
        let proj: Vec<f64> = c
            .patients
            .iter()
            .map(|p| crate::tensor::dot(p.pathology_tokens.mean_rows().row(0), &u))
            .collect();
        let z: Vec<f64> = lat.iter().map(|l| l.z_shared).collect();
        let rho = spearman(&z, &proj);
        assert!(rho > 0.9, "rank correlation {rho}");
    }

    #[test]
    fn null_spec_carries_no_signal() {
        let spec = SyntheticSpec::default().null();
        let (c, lat) = make_synthetic_cohort_with_latents(&SyntheticSpec { n_patients: 400, ..spec }).unwrap();
        let (u, v) = signal_directions(16, 1);
        let proj: Vec<f64> = c
            .patients
            .iter()
            .map(|p| {
                let m = p.pathology_tokens.mean_rows();
                crate::tensor::dot(m.row(0), &u) + crate::tensor::dot(m.row(0), &v)
            })
            .collect();
        let risk: Vec<f64> = lat.iter().map(PatientLatents::log_hazard).collect();
        assert!(spearman(&risk, &proj).abs() < 0.15);
    }

    #[test]
    fn spec_validation() {
        let bad = SyntheticSpec {
            censor_rate: 1.5,
            ..SyntheticSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "censor_rate"));
        let bad = SyntheticSpec {
            shared_signal_strength: f64::NAN,
            ..SyntheticSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn discretization_is_monotone(times in proptest::collection::vec((0.01f64..100.0, any::<bool>()), 2..40)) {
            let mut times = times;
            times[0].1 = true;
            let d = discretize_survival(cohort(&times), 4).unwrap();
            for a in &d.patients {
                for b in &d.patients {
                    if a.survival_time < b.survival_time {
                        prop_assert!(a.time_bin.unwrap() <= b.time_bin.unwrap());
                    }
                }
                prop_assert_eq!(a.time_bin.unwrap(), bin_for_time(&d.bin_edges, a.survival_time));
            }
        }
    }
}
