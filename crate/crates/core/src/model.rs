//! The assembled survival model and its ablation ladder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::{PatientRecord, DEFAULT_N_BINS};
use crate::encoders::{decompose, embed_genomics, embed_pathology, EmbeddingHeads, MrdParams, RepresentationBundle, RepresentationValues};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse, AttentionMode, Denominator, FusedState, FusedVars, FusionOptions, FusionParams, PoolVariant,
    DEFAULT_HEADS, DEFAULT_LANDMARKS, DEFAULT_PINV_ITERS,
};
use crate::losses::{
    combine, difference_loss, nll_survival_loss, reconstruction_loss, similarity_loss, similarity_loss_literal, total_loss,
    DiffSign, LossBreakdown, LossComponents, LossVars, LossWeights, SimVariant,
};
use crate::metrics::{hazards_to_output_with, HazardOutput, RiskScore};
use crate::nn::{Affine, Graph, Init, Mlp, ParamStore, TokenMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_heads: usize,
    pub n_landmarks: usize,
    pub pinv_iters: usize,
    pub gate_hidden: usize,
    pub n_bins: usize,
    pub attention: AttentionMode,
    pub pool: PoolVariant,
    pub sim_variant: SimVariant,
    pub diff_sign: DiffSign,
    pub risk_score: RiskScore,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 8,
            n_heads: DEFAULT_HEADS,
            n_landmarks: DEFAULT_LANDMARKS,
            pinv_iters: DEFAULT_PINV_ITERS,
            gate_hidden: 8,
            n_bins: DEFAULT_N_BINS,
            attention: AttentionMode::Auto,
            pool: PoolVariant::WithCommon,
            sim_variant: SimVariant::CrossModal,
            diff_sign: DiffSign::Plus,
            risk_score: RiskScore::NegSumSurvival,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("model.d", "must be >= 1"));
        }
        if self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::config("model.n_heads", format!("must divide d={}, got {}", self.d, self.n_heads)));
        }
        if self.n_landmarks == 0 {
            return Err(Error::config("model.n_landmarks", "must be >= 1"));
        }
        if self.gate_hidden == 0 {
            return Err(Error::config("model.gate_hidden", "must be >= 1"));
        }
        if self.n_bins < 2 {
            return Err(Error::config("model.n_bins", format!("must be >= 2, got {}", self.n_bins)));
        }
        Ok(())
    }
}

/// Stage toggles. All off is the plain concatenation baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_mrd: bool,
    pub use_dhof: bool,
    pub use_sim: bool,
    pub use_diff: bool,
    pub use_recon: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::ladder('F').expect("F is a ladder rung")
    }
}

impl Ablation {
    pub const LADDER: [char; 6] = ['A', 'B', 'C', 'D', 'E', 'F'];

    /// A: concat baseline; B: + decomposition; C: + orthogonal fusion;
    /// D, E, F: + alignment, difference and reconstruction losses.
    pub fn ladder(rung: char) -> Option<Self> {
        let k = Self::LADDER.iter().position(|&c| c == rung.to_ascii_uppercase())?;
        Some(Self {
            use_mrd: k >= 1,
            use_dhof: k >= 2,
            use_sim: k >= 3,
            use_diff: k >= 4,
            use_recon: k >= 5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_dhof && !self.use_mrd {
            return Err(Error::config("ablation.use_dhof", "requires use_mrd"));
        }
        for (flag, on) in [("use_sim", self.use_sim), ("use_diff", self.use_diff), ("use_recon", self.use_recon)] {
            if on && !self.use_mrd {
                return Err(Error::config(format!("ablation.{flag}"), "requires use_mrd"));
            }
        }
        Ok(())
    }

    /// Loss weights with disabled terms zeroed.
    pub fn effective_weights(&self, w: &LossWeights) -> LossWeights {
        LossWeights {
            alpha: if self.use_sim { w.alpha } else { 0.0 },
            beta: if self.use_diff { w.beta } else { 0.0 },
            gamma: if self.use_recon { w.gamma } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub d_in_p: usize,
    pub d_in_g: usize,
    pub store: ParamStore,
    pub heads: EmbeddingHeads,
    pub mrd: Option<MrdParams>,
    pub fusion: Option<FusionParams>,
    /// Pooled-concat MLP used when orthogonal fusion is off.
    pub baseline: Option<Mlp>,
    /// f_mm → hazard logits.
    pub hazard_head: Affine,
}

/// Builds the ladder variant selected by `ablation`, with parameters
/// drawn from `seed`.
pub fn build_ablation(config: &ModelConfig, ablation: Ablation, d_in_p: usize, d_in_g: usize, seed: u64) -> Result<Model> {
    config.validate()?;
    ablation.validate()?;
    if d_in_p == 0 || d_in_g == 0 {
        return Err(Error::config("input widths", "must be >= 1"));
    }
    let d = config.d;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    let heads = EmbeddingHeads::new(&mut init, d_in_p, d_in_g, d);
    let mrd = ablation.use_mrd.then(|| MrdParams::new(&mut init, d, config.gate_hidden));
    let fusion = if ablation.use_dhof {
        Some(FusionParams::new(&mut init, d, config.n_heads, config.n_landmarks, config.pinv_iters)?)
    } else {
        None
    };
    let baseline = (!ablation.use_dhof).then(|| Mlp::new(&mut init, "baseline", 2 * d, d, d));
    let hazard_head = Affine::new(&mut init, "hazard_head", d, config.n_bins);
    Ok(Model {
        config: config.clone(),
        ablation,
        d_in_p,
        d_in_g,
        store,
        heads,
        mrd,
        fusion,
        baseline,
        hazard_head,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub hazards: Var,
    pub f_mm: Var,
    pub bundle: Option<RepresentationBundle>,
    pub fused: Option<FusedVars>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub hazard: HazardOutput,
    pub bundle: Option<RepresentationValues>,
    pub fused: Option<FusedState>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub parts: LossVars,
    pub breakdown: LossBreakdown,
    pub forward: ForwardVars,
}

impl Model {
    pub fn n_params(&self) -> usize {
        self.store.n_scalars()
    }

    fn fusion_options(&self, denominator: Denominator) -> FusionOptions {
        FusionOptions {
            attention: self.config.attention,
            pool: self.config.pool,
            denominator,
        }
    }

    fn check_patient(&self, p: &PatientRecord) -> Result<()> {
        if p.pathology_tokens.cols() != self.d_in_p || p.genomic_groups.cols() != self.d_in_g {
            return Err(Error::shape(
                "model input",
                format!("widths {}/{}", self.d_in_p, self.d_in_g),
                format!("{}/{}", p.pathology_tokens.cols(), p.genomic_groups.cols()),
            ));
        }
        Ok(())
    }

    /// Builds the forward pass on `g`. `denominator` selects how orthogonal
    /// fusion treats a near-zero common vector.
    pub fn forward_graph(&self, g: &mut Graph, patient: &PatientRecord, denominator: Denominator) -> Result<ForwardVars> {
        self.check_patient(patient)?;
        let xp = g.input(patient.pathology_tokens.clone());
        let xg = g.input(patient.genomic_groups.clone());
        let h_p_o = embed_pathology(g, xp, &self.heads).map_err(|e| e.at_stage("embed"))?;
        let h_g_o = embed_genomics(g, xg, &self.heads).map_err(|e| e.at_stage("embed"))?;

        let (f_mm, bundle, fused) = match &self.mrd {
            None => {
                let mp = g.mean_rows(h_p_o);
                let mg = g.mean_rows(h_g_o);
                let joined = g.concat_cols(&[mp, mg]);
                let mlp = self.baseline.as_ref().expect("baseline present without decomposition");
                (mlp.apply(g, joined), None, None)
            }
            Some(mrd) => {
                let bundle = decompose(g, h_p_o, h_g_o, mrd).map_err(|e| e.at_stage("decomposition"))?;
                match &self.fusion {
                    Some(fp) => {
                        let fused = fuse(g, &bundle, fp, &self.fusion_options(denominator))?;
                        (fused.dhof.f_mm, Some(bundle), Some(fused))
                    }
                    None => {
                        let f_s = g.concat_rows(&[bundle.h_p_s, bundle.h_g_s]);
                        let f_c = g.concat_rows(&[bundle.h_p_c, bundle.h_g_c]);
                        let ms = g.mean_rows(f_s);
                        let mc = g.mean_rows(f_c);
                        let joined = g.concat_cols(&[ms, mc]);
                        let mlp = self.baseline.as_ref().expect("baseline present without fusion");
                        (mlp.apply(g, joined), Some(bundle), None)
                    }
                }
            }
        };
        let logits = self.hazard_head.apply(g, f_mm);
        let hazards = g.sigmoid(logits);
        Ok(ForwardVars {
            hazards,
            f_mm,
            bundle,
            fused,
        })
    }

    /// Inference forward pass with the strict degeneracy check.
    pub fn forward(&self, patient: &PatientRecord) -> Result<ForwardOutput> {
        let mut g = Graph::new(&self.store);
        let vars = self.forward_graph(&mut g, patient, Denominator::Strict)?;
        let hazard = hazards_to_output_with(g.value(vars.hazards).as_slice(), self.config.risk_score)
            .map_err(|e| e.at_stage("hazard head"))?;
        Ok(ForwardOutput {
            hazard,
            bundle: vars.bundle.map(|b| b.snapshot(&g)),
            fused: vars.fused.map(|f| f.snapshot(&g)),
        })
    }

    pub fn risk(&self, patient: &PatientRecord) -> Result<f64> {
        Ok(self.forward(patient)?.hazard.risk)
    }

    /// Full objective for one discretized patient on `g`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        patient: &PatientRecord,
        weights: &LossWeights,
        denominator: Denominator,
    ) -> Result<LossGraph> {
        let bin = patient
            .time_bin
            .ok_or_else(|| Error::Data(format!("{}: patient has no time bin", patient.patient_id)))?;
        let forward = self.forward_graph(g, patient, denominator)?;
        let l_surv = nll_survival_loss(g, forward.hazards, bin, patient.event_observed)?;
        let parts = match &forward.bundle {
            None => {
                let zero = g.input(crate::Mat::scalar(0.0));
                LossVars {
                    l_sim: zero,
                    l_diff: zero,
                    l_recon: zero,
                    l_surv,
                }
            }
            Some(b) => LossVars {
                l_sim: match self.config.sim_variant {
                    SimVariant::CrossModal => similarity_loss(g, b.h_p_c, b.h_g_c)?,
                    SimVariant::Literal => similarity_loss_literal(g, b.h_p_o, b.h_p_c)?,
                },
                l_diff: difference_loss(g, b.h_p_c, b.h_p_s, b.h_g_c, b.h_g_s)?,
                l_recon: reconstruction_loss(g, b.h_p_o, b.h_p_r, b.h_g_o, b.h_g_r)?,
                l_surv,
            },
        };
        let weights = self.ablation.effective_weights(weights);
        let components = LossComponents {
            l_sim: g.value(parts.l_sim).item(),
            l_diff: g.value(parts.l_diff).item(),
            l_recon: g.value(parts.l_recon).item(),
            l_surv: g.value(parts.l_surv).item(),
        };
        let breakdown = total_loss(&components, &weights, self.config.diff_sign)?;
        let total = combine(g, &parts, &weights, self.config.diff_sign);
        debug_assert_eq!(g.value(total).item().to_bits(), breakdown.l_total.to_bits());
        Ok(LossGraph {
            total,
            parts,
            breakdown,
            forward,
        })
    }
}
