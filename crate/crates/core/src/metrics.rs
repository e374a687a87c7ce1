//! Survival evaluation: hazard post-processing, concordance index,
//! Kaplan-Meier curves, the two-group log-rank test and median risk
//! stratification.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::quantile_sorted;
use crate::error::{Error, Result};
use crate::special::chi2_1_sf;

/// How a hazard vector is collapsed into one ordinal risk score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskScore {
    /// −Σ_t S(t)
    #[default]
    NegSumSurvival,
    /// Σ_t h_t
    SumHazard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardOutput {
    pub hazards: Vec<f64>,
    /// S(t) = Π_{u≤t} (1 − h_u)
    pub survival: Vec<f64>,
    pub risk: f64,
}

pub fn hazards_to_output(hazards: &[f64]) -> Result<HazardOutput> {
    hazards_to_output_with(hazards, RiskScore::NegSumSurvival)
}

pub fn hazards_to_output_with(hazards: &[f64], score: RiskScore) -> Result<HazardOutput> {
    if let Some(h) = hazards.iter().find(|h| !(0.0..=1.0).contains(*h)) {
        return Err(Error::Data(format!("hazard {h} outside [0, 1]")));
    }
    let survival: Vec<f64> = hazards
        .iter()
        .scan(1.0, |s, h| {
            *s *= 1.0 - h;
            Some(*s)
        })
        .collect();
    let risk = match score {
        RiskScore::NegSumSurvival => -survival.iter().sum::<f64>(),
        RiskScore::SumHazard => hazards.iter().sum(),
    };
    Ok(HazardOutput {
        hazards: hazards.to_vec(),
        survival,
        risk,
    })
}

/// Harrell's C: over pairs with `time_i < time_j` and an observed event
/// for `i`, the fraction where `risk_i > risk_j`, ties counting one half.
///
/// Runs in O(n log n) with a Fenwick tree over risk ranks.
pub fn concordance_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(Error::shape("concordance_index", n, format!("{}/{}", times.len(), events.len())));
    }
    if risks.iter().chain(times).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("concordance_index inputs".into()));
    }
    let mut sorted_risks = risks.to_vec();
    sorted_risks.sort_by(f64::total_cmp);
    sorted_risks.dedup();
    let rank = |r: f64| sorted_risks.partition_point(|&x| x < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut tree = Fenwick::new(sorted_risks.len());
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < n {
        let t = times[order[start]];
        let mut end = start;
        while end < n && times[order[end]] == t {
            end += 1;
        }
        for &i in &order[start..end] {
            if events[i] {
                let r = rank(risks[i]);
                let below = tree.prefix(r);
                let equal = tree.prefix(r + 1) - below;
                concordant += below;
                tied += equal;
                comparable += tree.total();
            }
        }
        for &i in &order[start..end] {
            tree.add(rank(risks[i]));
        }
        start = end;
    }
    if comparable == 0 {
        return Err(Error::CIndexUndefined);
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}

struct Fenwick {
    counts: Vec<u64>,
    total: u64,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self {
            counts: vec![0; n + 1],
            total: 0,
        }
    }

    fn add(&mut self, idx: usize) {
        let mut i = idx + 1;
        while i < self.counts.len() {
            self.counts[i] += 1;
            i += i & i.wrapping_neg();
        }
        self.total += 1;
    }

    /// Count of inserted ranks `< idx`.
    fn prefix(&self, idx: usize) -> u64 {
        let mut i = idx;
        let mut s = 0;
        while i > 0 {
            s += self.counts[i];
            i -= i & i.wrapping_neg();
        }
        s
    }

    fn total(&self) -> u64 {
        self.total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub event_times: Vec<f64>,
    pub survival_probs: Vec<f64>,
    pub at_risk_counts: Vec<usize>,
}

impl KmCurve {
    /// Step-function value at `t` (right-continuous).
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.event_times.partition_point(|&e| e <= t);
        if k == 0 {
            1.0
        } else {
            self.survival_probs[k - 1]
        }
    }
}

/// Product-limit estimator. Censorings tied with an event time stay in
/// that time's risk set.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    if times.is_empty() {
        return Err(Error::Data("kaplan_meier: empty sample".into()));
    }
    if times.len() != events.len() {
        return Err(Error::shape("kaplan_meier", times.len(), events.len()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut curve = KmCurve {
        event_times: Vec::new(),
        survival_probs: Vec::new(),
        at_risk_counts: Vec::new(),
    };
    let mut at_risk = times.len();
    let mut surv = 1.0;
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut end = k;
        let mut deaths = 0;
        while end < order.len() && times[order[end]] == t {
            if events[order[end]] {
                deaths += 1;
            }
            end += 1;
        }
        if deaths > 0 {
            surv *= (at_risk - deaths) as f64 / at_risk as f64;
            curve.event_times.push(t);
            curve.survival_probs.push(surv);
            curve.at_risk_counts.push(at_risk);
        }
        at_risk -= end - k;
        k = end;
    }
    Ok(curve)
}

/// One TSV row per event step: `time  survival  at_risk  group`.
pub fn km_to_tsv(curves: &[(&str, &KmCurve)]) -> String {
    let mut out = String::from("time\tsurvival\tat_risk\tgroup\n");
    for (group, c) in curves {
        for ((t, s), r) in c.event_times.iter().zip(&c.survival_probs).zip(&c.at_risk_counts) {
            let _ = writeln!(out, "{t}\t{s}\t{r}\t{group}");
        }
    }
    out
}

/// Inverse of [`km_to_tsv`], preserving group order of first appearance.
pub fn km_from_tsv(text: &str) -> Result<Vec<(String, KmCurve)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("time\tsurvival\tat_risk\tgroup") => {}
        other => return Err(Error::Data(format!("unexpected KM header {other:?}"))),
    }
    let mut groups: Vec<(String, KmCurve)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Data(format!("KM TSV line {}: malformed '{line}'", lineno + 2));
        if cols.len() != 4 {
            return Err(bad());
        }
        let t: f64 = cols[0].parse().map_err(|_| bad())?;
        let s: f64 = cols[1].parse().map_err(|_| bad())?;
        let r: usize = cols[2].parse().map_err(|_| bad())?;
        let curve = match groups.iter_mut().find(|(g, _)| g == cols[3]) {
            Some((_, c)) => c,
            None => {
                groups.push((
                    cols[3].to_string(),
                    KmCurve {
                        event_times: Vec::new(),
                        survival_probs: Vec::new(),
                        at_risk_counts: Vec::new(),
                    },
                ));
                &mut groups.last_mut().unwrap().1
            }
        };
        curve.event_times.push(t);
        curve.survival_probs.push(s);
        curve.at_risk_counts.push(r);
    }
    Ok(groups)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi2: f64,
    pub p_value: f64,
}

/// Two-group log-rank test with hypergeometric variance.
pub fn log_rank_test(times_a: &[f64], events_a: &[bool], times_b: &[f64], events_b: &[bool]) -> Result<LogRankResult> {
    if times_a.is_empty() || times_b.is_empty() {
        return Err(Error::Data("log_rank_test: both groups must be non-empty".into()));
    }
    if times_a.len() != events_a.len() || times_b.len() != events_b.len() {
        return Err(Error::shape("log_rank_test", "matching times/events", "length mismatch"));
    }
    let mut event_times: Vec<f64> = times_a
        .iter()
        .zip(events_a)
        .chain(times_b.iter().zip(events_b))
        .filter(|(_, &e)| e)
        .map(|(&t, _)| t)
        .collect();
    if event_times.is_empty() {
        return Err(Error::Data("log_rank_test: no events".into()));
    }
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();

    let count = |times: &[f64], events: &[bool], t: f64| {
        let at_risk = times.iter().filter(|&&x| x >= t).count() as f64;
        let deaths = times.iter().zip(events).filter(|(&x, &e)| e && x == t).count() as f64;
        (at_risk, deaths)
    };
    let (mut o_minus_e, mut var) = (0.0, 0.0);
    for t in event_times {
        let (na, da) = count(times_a, events_a, t);
        let (nb, db) = count(times_b, events_b, t);
        let n = na + nb;
        let d = da + db;
        o_minus_e += da - d * na / n;
        if n > 1.0 {
            var += d * (na / n) * (nb / n) * (n - d) / (n - 1.0);
        }
    }
    if var <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let chi2 = o_minus_e * o_minus_e / var;
    Ok(LogRankResult {
        chi2,
        p_value: chi2_1_sf(chi2),
    })
}

/// Splits at the (interpolated) median risk; ties go to the low group.
pub fn stratify_by_median(risks: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if risks.len() < 2 {
        return Err(Error::Data(format!("stratify_by_median: need ≥ 2 risks, got {}", risks.len())));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("risk scores".into()));
    }
    if risks.iter().all(|&r| r == risks[0]) {
        return Err(Error::DegenerateStratification);
    }
    let mut sorted = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = quantile_sorted(&sorted, 0.5);
    let (high, low): (Vec<usize>, Vec<usize>) = (0..risks.len()).partition(|&i| risks[i] > median);
    Ok((low, high))
}
