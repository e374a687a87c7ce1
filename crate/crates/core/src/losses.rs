//! Training objective: alignment, difference, reconstruction and discrete
//! survival likelihood terms, and their weighted sum.
//!
//! Every term is built on the tape so gradients flow to its inputs. The
//! `*_value` helpers evaluate a term on plain matrices.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 1e-4,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(name, format!("must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Which operands the alignment term compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimVariant {
    /// Pooled pathology common vs pooled genomic common.
    #[default]
    CrossModal,
    /// Pathology original tokens vs pathology common tokens.
    Literal,
}

/// Sign with which the difference term enters the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffSign {
    #[default]
    Plus,
    Minus,
}

impl DiffSign {
    pub fn factor(self) -> f64 {
        match self {
            DiffSign::Plus => 1.0,
            DiffSign::Minus => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_sim: f64,
    pub l_diff: f64,
    pub l_recon: f64,
    pub l_surv: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sim: f64,
    pub l_diff: f64,
    pub l_recon: f64,
    pub l_surv: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            l_sim: self.l_sim,
            l_diff: self.l_diff,
            l_recon: self.l_recon,
            l_surv: self.l_surv,
        }
    }

    /// Componentwise mean, used for per-epoch summaries.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.l_sim += b.l_sim;
            m.l_diff += b.l_diff;
            m.l_recon += b.l_recon;
            m.l_surv += b.l_surv;
            m.l_total += b.l_total;
        }
        m.l_sim /= n;
        m.l_diff /= n;
        m.l_recon /= n;
        m.l_surv /= n;
        m.l_total /= n;
        m
    }
}

fn same_width(t: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (wa, wb) = (t.shape(a).1, t.shape(b).1);
    if wa != wb {
        return Err(Error::shape(op, format!("width {wa}"), format!("width {wb}")));
    }
    Ok(())
}

fn mean_abs_diff(t: &mut Tape, a: Var, b: Var) -> Var {
    let d = t.sub(a, b);
    let d = t.abs(d);
    t.mean_all(d)
}

/// (1/d)·Σ|mean(h_p^c) − mean(h_g^c)| over token-mean pooled vectors.
pub fn similarity_loss(t: &mut Tape, h_p_c: Var, h_g_c: Var) -> Result<Var> {
    same_width(t, h_p_c, h_g_c, "similarity_loss")?;
    let a = t.mean_rows(h_p_c);
    let b = t.mean_rows(h_g_c);
    Ok(mean_abs_diff(t, a, b))
}

/// Elementwise mean |h_p^o − h_p^c| over all tokens.
pub fn similarity_loss_literal(t: &mut Tape, h_p_o: Var, h_p_c: Var) -> Result<Var> {
    if t.shape(h_p_o) != t.shape(h_p_c) {
        return Err(Error::shape(
            "similarity_loss_literal",
            format!("{:?}", t.shape(h_p_o)),
            format!("{:?}", t.shape(h_p_c)),
        ));
    }
    Ok(mean_abs_diff(t, h_p_o, h_p_c))
}

/// KL(softmax(mean a) ‖ softmax(mean b)).
fn pooled_kl(t: &mut Tape, a: Var, b: Var) -> Var {
    let pa = t.mean_rows(a);
    let pa = t.softmax_rows(pa);
    let pb = t.mean_rows(b);
    let pb = t.softmax_rows(pb);
    let la = t.log(pa);
    let lb = t.log(pb);
    let ratio = t.sub(la, lb);
    let terms = t.mul(pa, ratio);
    t.sum_all(terms)
}

pub fn difference_loss(t: &mut Tape, h_p_c: Var, h_p_s: Var, h_g_c: Var, h_g_s: Var) -> Result<Var> {
    same_width(t, h_p_c, h_p_s, "difference_loss")?;
    same_width(t, h_g_c, h_g_s, "difference_loss")?;
    for v in [h_p_c, h_p_s, h_g_c, h_g_s] {
        if !t.value(v).is_finite() {
            return Err(Error::NonFinite("difference_loss input".into()));
        }
    }
    let kp = pooled_kl(t, h_p_c, h_p_s);
    let kg = pooled_kl(t, h_g_c, h_g_s);
    Ok(t.add(kp, kg))
}

fn mse(t: &mut Tape, a: Var, b: Var, op: &'static str) -> Result<Var> {
    if t.shape(a) != t.shape(b) {
        return Err(Error::shape(op, format!("{:?}", t.shape(a)), format!("{:?}", t.shape(b))));
    }
    let d = t.sub(a, b);
    let sq = t.mul(d, d);
    Ok(t.mean_all(sq))
}

/// ½·(MSE(h_p^o, h_p^r) + MSE(h_g^o, h_g^r)).
pub fn reconstruction_loss(t: &mut Tape, h_p_o: Var, h_p_r: Var, h_g_o: Var, h_g_r: Var) -> Result<Var> {
    let p = mse(t, h_p_o, h_p_r, "reconstruction_loss (pathology)")?;
    let g = mse(t, h_g_o, h_g_r, "reconstruction_loss (genomic)")?;
    let s = t.add(p, g);
    Ok(t.scale(s, 0.5))
}

/// Discrete-time negative log likelihood for one patient.
///
/// `hazards` is 1×T. An event in bin t costs −Σ_{u<t} log(1−h_u) − log h_t;
/// censoring in bin t costs −Σ_{u≤t} log(1−h_u). Logs are clamped.
pub fn nll_survival_loss(t: &mut Tape, hazards: Var, time_bin: usize, event_observed: bool) -> Result<Var> {
    let (r, n_bins) = t.shape(hazards);
    if r != 1 {
        return Err(Error::shape("nll_survival_loss", "1 row of hazards", format!("{r} rows")));
    }
    if time_bin >= n_bins {
        return Err(Error::TimeBin { bin: time_bin, n_bins });
    }
    let neg = t.scale(hazards, -1.0);
    let survive = t.offset(neg, 1.0);
    let log_survive = t.log(survive);
    let n_terms = if event_observed { time_bin } else { time_bin + 1 };
    let mut ll = if n_terms > 0 {
        let s = t.slice_cols(log_survive, 0, n_terms);
        Some(t.sum_all(s))
    } else {
        None
    };
    if event_observed {
        let h = t.slice_cols(hazards, time_bin, 1);
        let lh = t.log(h);
        ll = Some(match ll {
            Some(s) => t.add(s, lh),
            None => lh,
        });
    }
    let ll = ll.expect("at least one likelihood factor");
    Ok(t.scale(ll, -1.0))
}

/// Tape handles for the four components.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_sim: Var,
    pub l_diff: Var,
    pub l_recon: Var,
    pub l_surv: Var,
}

/// Weighted total on the tape. Uses the same operation order as
/// [`total_loss`], so the tape value and the breakdown agree bitwise.
pub fn combine(t: &mut Tape, parts: &LossVars, weights: &LossWeights, diff_sign: DiffSign) -> Var {
    let a = t.scale(parts.l_sim, weights.alpha);
    let b = t.scale(parts.l_diff, diff_sign.factor() * weights.beta);
    let c = t.scale(parts.l_recon, weights.gamma);
    let ab = t.add(a, b);
    let abc = t.add(ab, c);
    t.add(abc, parts.l_surv)
}

pub fn total_loss(parts: &LossComponents, weights: &LossWeights, diff_sign: DiffSign) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_sim", parts.l_sim),
        ("l_diff", parts.l_diff),
        ("l_recon", parts.l_recon),
        ("l_surv", parts.l_surv),
    ] {
        if !v.is_finite() {
            return Err(Error::NanLoss(name));
        }
    }
    let l_total = parts.l_sim * weights.alpha
        + parts.l_diff * (diff_sign.factor() * weights.beta)
        + parts.l_recon * weights.gamma
        + parts.l_surv;
    Ok(LossBreakdown {
        l_sim: parts.l_sim,
        l_diff: parts.l_diff,
        l_recon: parts.l_recon,
        l_surv: parts.l_surv,
        l_total,
    })
}

fn on_tape<const N: usize>(mats: [&Mat; N], f: impl FnOnce(&mut Tape, [Var; N]) -> Result<Var>) -> Result<f64> {
    let mut t = Tape::new();
    let vars = mats.map(|m| t.constant(m.clone()));
    let out = f(&mut t, vars)?;
    Ok(t.value(out).item())
}

pub fn similarity_value(h_p_c: &Mat, h_g_c: &Mat) -> Result<f64> {
    on_tape([h_p_c, h_g_c], |t, [a, b]| similarity_loss(t, a, b))
}

pub fn difference_value(h_p_c: &Mat, h_p_s: &Mat, h_g_c: &Mat, h_g_s: &Mat) -> Result<f64> {
    on_tape([h_p_c, h_p_s, h_g_c, h_g_s], |t, [a, b, c, d]| difference_loss(t, a, b, c, d))
}

pub fn reconstruction_value(h_p_o: &Mat, h_p_r: &Mat, h_g_o: &Mat, h_g_r: &Mat) -> Result<f64> {
    on_tape([h_p_o, h_p_r, h_g_o, h_g_r], |t, [a, b, c, d]| reconstruction_loss(t, a, b, c, d))
}

pub fn nll_value(hazards: &[f64], time_bin: usize, event_observed: bool) -> Result<f64> {
    let h = Mat::row_vector(hazards);
    on_tape([&h], |t, [v]| nll_survival_loss(t, v, time_bin, event_observed))
}
