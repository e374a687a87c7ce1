//! Modality embedding heads and the representation decomposition block:
//! modality-specific encoders, the co-attention gated common encoder and
//! the reconstruction decoders.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Affine, Graph, Init, Mlp, TokenMap};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Pathology,
    Genomic,
}

/// Learnable per-token projections into the shared model width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingHeads {
    pub pathology: Affine,
    pub genomic: Affine,
    pub d: usize,
}

impl EmbeddingHeads {
    pub fn new(init: &mut Init, d_in_p: usize, d_in_g: usize, d: usize) -> Self {
        Self {
            pathology: Affine::new(init, "embed.pathology", d_in_p, d),
            genomic: Affine::new(init, "embed.genomic", d_in_g, d),
            d,
        }
    }
}

fn embed(g: &mut Graph, tokens: Var, head: &Affine, op: &'static str) -> Result<Var> {
    let (n, width) = g.shape(tokens);
    if n == 0 {
        return Err(Error::shape(op, "at least one token", "0 tokens"));
    }
    if width != head.in_dim {
        return Err(Error::shape(op, format!("width {}", head.in_dim), format!("width {width}")));
    }
    Ok(head.apply(g, tokens))
}

/// h_p^o: row i is the affine image of patch feature i.
pub fn embed_pathology(g: &mut Graph, patch_features: Var, heads: &EmbeddingHeads) -> Result<Var> {
    embed(g, patch_features, &heads.pathology, "embed_pathology")
}

/// h_g^o: row i is the affine image of genomic group i.
pub fn embed_genomics(g: &mut Graph, group_vectors: Var, heads: &EmbeddingHeads) -> Result<Var> {
    embed(g, group_vectors, &heads.genomic, "embed_genomics")
}

/// Common-encoder parameters. `proj_*` form the co-attention matrix,
/// `gate_*` map mean received attention (one scalar per token) to a gate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CommonEncoder {
    pub proj_p: Affine,
    pub proj_g: Affine,
    pub gate_p: Mlp,
    pub gate_g: Mlp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MrdParams {
    pub specific_p: Mlp,
    pub specific_g: Mlp,
    pub common: CommonEncoder,
    pub decoder_p: Mlp,
    pub decoder_g: Mlp,
}

impl MrdParams {
    pub fn new(init: &mut Init, d: usize, gate_hidden: usize) -> Self {
        Self {
            specific_p: Mlp::new(init, "mrd.specific_p", d, d, d),
            specific_g: Mlp::new(init, "mrd.specific_g", d, d, d),
            common: CommonEncoder {
                proj_p: Affine::new(init, "mrd.common.proj_p", d, d),
                proj_g: Affine::new(init, "mrd.common.proj_g", d, d),
                gate_p: Mlp::new(init, "mrd.common.gate_p", 1, gate_hidden, 1),
                gate_g: Mlp::new(init, "mrd.common.gate_g", 1, gate_hidden, 1),
            },
            decoder_p: Mlp::new(init, "mrd.decoder_p", 2 * d, d, d),
            decoder_g: Mlp::new(init, "mrd.decoder_g", 2 * d, d, d),
        }
    }

    fn specific(&self, which: Modality) -> &Mlp {
        match which {
            Modality::Pathology => &self.specific_p,
            Modality::Genomic => &self.specific_g,
        }
    }

    pub fn decoder(&self, which: Modality) -> &Mlp {
        match which {
            Modality::Pathology => &self.decoder_p,
            Modality::Genomic => &self.decoder_g,
        }
    }
}

fn ensure_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// h_m^s = Γ_m(h_m^o), applied token by token.
pub fn encode_specific(g: &mut Graph, h_o: Var, which: Modality, params: &MrdParams) -> Result<Var> {
    ensure_finite(g, h_o, "encode_specific input")?;
    let mlp = params.specific(which);
    let width = g.shape(h_o).1;
    if width != mlp.in_dim() {
        return Err(Error::shape("encode_specific", mlp.in_dim(), width));
    }
    Ok(mlp.apply(g, h_o))
}

/// Output of the common encoder, with its intermediates.
#[derive(Clone, Copy, Debug)]
pub struct CommonOutput {
    pub h_p_c: Var,
    pub h_g_c: Var,
    /// N_p × N_g co-attention matrix.
    pub attention: Var,
    /// N_p × 1
    pub gate_p: Var,
    /// N_g × 1
    pub gate_g: Var,
}

/// Gated common representations.
///
/// 𝔸 = L_p(h_p^o) · L_g(h_g^o)ᵀ. Each pathology token is gated by
/// sigmoid(M_p(mean attention it receives across genomic tokens)), each
/// genomic token by sigmoid(M_g(mean across pathology tokens)); the gate
/// scales the whole token.
pub fn encode_common(g: &mut Graph, h_p_o: Var, h_g_o: Var, params: &MrdParams) -> Result<CommonOutput> {
    ensure_finite(g, h_p_o, "encode_common pathology input")?;
    ensure_finite(g, h_g_o, "encode_common genomic input")?;
    let (wp, wg) = (g.shape(h_p_o).1, g.shape(h_g_o).1);
    let c = &params.common;
    if wp != c.proj_p.in_dim || wg != c.proj_g.in_dim {
        return Err(Error::shape(
            "encode_common",
            format!("widths {}/{}", c.proj_p.in_dim, c.proj_g.in_dim),
            format!("{wp}/{wg}"),
        ));
    }
    let lp = c.proj_p.apply(g, h_p_o);
    let lg = c.proj_g.apply(g, h_g_o);
    let attention = g.matmul_t(lp, lg);
    let recv_p = g.mean_cols(attention);
    let at = g.transpose(attention);
    let recv_g = g.mean_cols(at);
    let gp = c.gate_p.apply(g, recv_p);
    let gate_p = g.sigmoid(gp);
    let gg = c.gate_g.apply(g, recv_g);
    let gate_g = g.sigmoid(gg);
    let h_p_c = g.mul_col(h_p_o, gate_p);
    let h_g_c = g.mul_col(h_g_o, gate_g);
    Ok(CommonOutput {
        h_p_c,
        h_g_c,
        attention,
        gate_p,
        gate_g,
    })
}

/// h_m^r = decoder([h_m^s ; h_m^c]) per token.
pub fn reconstruct<M: TokenMap + ?Sized>(g: &mut Graph, h_s: Var, h_c: Var, decoder: &M) -> Result<Var> {
    let (ss, cs) = (g.shape(h_s), g.shape(h_c));
    if ss != cs {
        return Err(Error::shape("reconstruct", format!("{ss:?}"), format!("{cs:?}")));
    }
    if ss.1 * 2 != decoder.in_dim() {
        return Err(Error::shape("reconstruct decoder input", decoder.in_dim(), ss.1 * 2));
    }
    let joined = g.concat_cols(&[h_s, h_c]);
    Ok(decoder.apply(g, joined))
}

/// The eight decoupled tensors of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct RepresentationBundle {
    pub h_p_o: Var,
    pub h_g_o: Var,
    pub h_p_s: Var,
    pub h_g_s: Var,
    pub h_p_c: Var,
    pub h_g_c: Var,
    pub h_p_r: Var,
    pub h_g_r: Var,
}

impl RepresentationBundle {
    pub fn snapshot(&self, tape: &Tape) -> RepresentationValues {
        let v = |x: Var| tape.value(x).clone();
        RepresentationValues {
            h_p_o: v(self.h_p_o),
            h_g_o: v(self.h_g_o),
            h_p_s: v(self.h_p_s),
            h_g_s: v(self.h_g_s),
            h_p_c: v(self.h_p_c),
            h_g_c: v(self.h_g_c),
            h_p_r: v(self.h_p_r),
            h_g_r: v(self.h_g_r),
        }
    }
}

/// Owned copy of a [`RepresentationBundle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationValues {
    pub h_p_o: Mat,
    pub h_g_o: Mat,
    pub h_p_s: Mat,
    pub h_g_s: Mat,
    pub h_p_c: Mat,
    pub h_g_c: Mat,
    pub h_p_r: Mat,
    pub h_g_r: Mat,
}

impl RepresentationValues {
    pub fn all(&self) -> [&Mat; 8] {
        [
            &self.h_p_o,
            &self.h_g_o,
            &self.h_p_s,
            &self.h_g_s,
            &self.h_p_c,
            &self.h_g_c,
            &self.h_p_r,
            &self.h_g_r,
        ]
    }
}

/// Runs the full decomposition block on embedded tokens.
pub fn decompose(g: &mut Graph, h_p_o: Var, h_g_o: Var, params: &MrdParams) -> Result<RepresentationBundle> {
    let h_p_s = encode_specific(g, h_p_o, Modality::Pathology, params)?;
    let h_g_s = encode_specific(g, h_g_o, Modality::Genomic, params)?;
    let common = encode_common(g, h_p_o, h_g_o, params)?;
    let h_p_r = reconstruct(g, h_p_s, common.h_p_c, params.decoder(Modality::Pathology))?;
    let h_g_r = reconstruct(g, h_g_s, common.h_g_c, params.decoder(Modality::Genomic))?;
    Ok(RepresentationBundle {
        h_p_o,
        h_g_o,
        h_p_s,
        h_g_s,
        h_p_c: common.h_p_c,
        h_g_c: common.h_g_c,
        h_p_r,
        h_g_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use crate::nn::ParamStore;
    use crate::special::std_normal_cdf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.5..1.5))
    }

    fn setup(d_in_p: usize, d_in_g: usize, d: usize) -> (ParamStore, EmbeddingHeads, MrdParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let heads = EmbeddingHeads::new(&mut init, d_in_p, d_in_g, d);
        let mrd = MrdParams::new(&mut init, d, 4);
        (store, heads, mrd)
    }

    // --- independent oracles: plain loops, no tape ---

    fn affine_oracle(x: &Mat, w: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows(), w.cols());
        for i in 0..x.rows() {
            for j in 0..w.cols() {
                let mut s = b[(0, j)];
                for k in 0..x.cols() {
                    s += x[(i, k)] * w[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    fn mlp_oracle(x: &Mat, mlp: &Mlp, s: &ParamStore) -> Mat {
        let h = affine_oracle(x, s.get(mlp.fc1.w), s.get(mlp.fc1.b));
        let gamma = s.get(mlp.norm.gamma);
        let beta = s.get(mlp.norm.beta);
        let mut a = Mat::zeros(h.rows(), h.cols());
        for i in 0..h.rows() {
            let n = h.cols() as f64;
            let mean: f64 = (0..h.cols()).map(|j| h[(i, j)]).sum::<f64>() / n;
            let var: f64 = (0..h.cols()).map(|j| (h[(i, j)] - mean).powi(2)).sum::<f64>() / n;
            for j in 0..h.cols() {
                let z = (h[(i, j)] - mean) / (var + 1e-5).sqrt() * gamma[(0, j)] + beta[(0, j)];
                a[(i, j)] = z * std_normal_cdf(z);
            }
        }
        affine_oracle(&a, s.get(mlp.fc2.w), s.get(mlp.fc2.b))
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn identity_head_passes_through() {
        let mut store = ParamStore::new();
        let head = Affine {
            w: store.add("w", Mat::identity(4)),
            b: store.add("b", Mat::zeros(1, 4)),
            in_dim: 4,
            out_dim: 4,
        };
        let heads = EmbeddingHeads {
            pathology: head.clone(),
            genomic: head,
            d: 4,
        };
        let x = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let out = embed_pathology(&mut g, xv, &heads).unwrap();
        assert_eq!(g.value(out), &x);
        let one = g.input(Mat::from_fn(1, 4, |_, j| j as f64));
        let out = embed_genomics(&mut g, one, &heads).unwrap();
        assert_eq!(g.shape(out), (1, 4));
    }

    #[test]
    fn zero_input_yields_bias_rows() {
        let (store, heads, _) = setup(4, 3, 2);
        let mut g = Graph::new(&store);
        let x = g.input(Mat::zeros(5, 4));
        let out = embed_pathology(&mut g, x, &heads).unwrap();
        let b = store.get(heads.pathology.b);
        for i in 0..5 {
            assert_eq!(g.value(out).row(i), b.row(0));
        }
    }

    #[test]
    fn embedding_matches_matmul_oracle() {
        let (store, heads, _) = setup(4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4);
        let y = random(&mut rng, 6, 3);
        let mut g = Graph::new(&store);
        let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
        let p = embed_pathology(&mut g, xv, &heads).unwrap();
        let q = embed_genomics(&mut g, yv, &heads).unwrap();
        assert_close(g.value(p), &affine_oracle(&x, store.get(heads.pathology.w), store.get(heads.pathology.b)), 1e-12);
        assert_close(g.value(q), &affine_oracle(&y, store.get(heads.genomic.w), store.get(heads.genomic.b)), 1e-12);
    }

    #[test]
    fn width_mismatch_names_both_widths() {
        let (store, heads, _) = setup(4, 3, 2);
        let mut g = Graph::new(&store);
        let x = g.input(Mat::zeros(2, 5));
        let err = embed_pathology(&mut g, x, &heads).unwrap_err().to_string();
        assert!(err.contains("width 4") && err.contains("width 5"), "{err}");
    }

    #[test]
    fn specific_encoder_shape_and_oracle() {
        let (store, _, mrd) = setup(4, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random(&mut rng, 5, 8);
        let mut g = Graph::new(&store);
        let hv = g.input(h.clone());
        let s = encode_specific(&mut g, hv, Modality::Pathology, &mrd).unwrap();
        assert_eq!(g.shape(s), (5, 8));
        assert_close(g.value(s), &mlp_oracle(&h, &mrd.specific_p, &store), 1e-12);
        let bad = g.input(Mat::filled(2, 8, f64::NAN));
        assert!(matches!(encode_specific(&mut g, bad, Modality::Genomic, &mrd), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zeroed_specific_encoder_gives_constant_rows() {
        let (mut store, _, mrd) = setup(4, 3, 8);
        store.set(mrd.specific_p.fc1.w, Mat::zeros(8, 8));
        store.set(mrd.specific_p.fc2.w, Mat::zeros(8, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(&store);
        let hv = g.input(random(&mut rng, 4, 8));
        let s = encode_specific(&mut g, hv, Modality::Pathology, &mrd).unwrap();
        let b2 = store.get(mrd.specific_p.fc2.b);
        for i in 0..4 {
            assert_eq!(g.value(s).row(i), b2.row(0));
        }
    }

    #[test]
    fn common_encoder_matches_step_by_step_oracle() {
        let d = 6;
        let (store, _, mrd) = setup(4, 3, d);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hp = random(&mut rng, 3, d);
        let hg = random(&mut rng, 6, d);
        let mut g = Graph::new(&store);
        let (pv, gv) = (g.input(hp.clone()), g.input(hg.clone()));
        let out = encode_common(&mut g, pv, gv, &mrd).unwrap();
        assert_eq!(g.shape(out.attention), (3, 6));
        assert_eq!(g.shape(out.gate_p), (3, 1));
        assert_eq!(g.shape(out.gate_g), (6, 1));

        let c = &mrd.common;
        let lp = affine_oracle(&hp, store.get(c.proj_p.w), store.get(c.proj_p.b));
        let lg = affine_oracle(&hg, store.get(c.proj_g.w), store.get(c.proj_g.b));
        let mut att = Mat::zeros(3, 6);
        for i in 0..3 {
            for j in 0..6 {
                att[(i, j)] = (0..d).map(|k| lp[(i, k)] * lg[(j, k)]).sum();
            }
        }
        let row_mean = Mat::from_fn(3, 1, |i, _| (0..6).map(|j| att[(i, j)]).sum::<f64>() / 6.0);
        let col_mean = Mat::from_fn(6, 1, |j, _| (0..3).map(|i| att[(i, j)]).sum::<f64>() / 3.0);
        let gp = mlp_oracle(&row_mean, &c.gate_p, &store).map(sigmoid);
        let gg = mlp_oracle(&col_mean, &c.gate_g, &store).map(sigmoid);
        let want_p = Mat::from_fn(3, d, |i, k| gp[(i, 0)] * hp[(i, k)]);
        let want_g = Mat::from_fn(6, d, |j, k| gg[(j, 0)] * hg[(j, k)]);
        assert_close(g.value(out.attention), &att, 1e-12);
        assert_close(g.value(out.h_p_c), &want_p, 1e-12);
        assert_close(g.value(out.h_g_c), &want_g, 1e-12);
    }

    #[test]
    fn zero_projection_gives_constant_gates() {
        let d = 4;
        let (mut store, _, mrd) = setup(4, 3, d);
        store.set(mrd.common.proj_p.w, Mat::zeros(d, d));
        store.set(mrd.common.proj_p.b, Mat::zeros(1, d));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hp = random(&mut rng, 4, d);
        let mut g = Graph::new(&store);
        let (pv, gv) = (g.input(hp.clone()), g.input(random(&mut rng, 6, d)));
        let out = encode_common(&mut g, pv, gv, &mrd).unwrap();
        assert!(g.value(out.attention).as_slice().iter().all(|&a| a == 0.0));
        let gate0 = mlp_oracle(&Mat::zeros(1, 1), &mrd.common.gate_p, &store).map(sigmoid)[(0, 0)];
        for i in 0..4 {
            assert!((g.value(out.gate_p)[(i, 0)] - gate0).abs() < 1e-15);
            for k in 0..d {
                assert!((g.value(out.h_p_c)[(i, k)] - gate0 * hp[(i, k)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gates_attenuate_tokens() {
        let d = 8;
        let (store, _, mrd) = setup(4, 3, d);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n_p = rng.random_range(1..10);
            let hp = random(&mut rng, n_p, d).scaled(3.0);
            let hg = random(&mut rng, 6, d).scaled(3.0);
            let mut g = Graph::new(&store);
            let (pv, gv) = (g.input(hp.clone()), g.input(hg.clone()));
            let out = encode_common(&mut g, pv, gv, &mrd).unwrap();
            for &gate in g.value(out.gate_p).as_slice().iter().chain(g.value(out.gate_g).as_slice()) {
                assert!(gate > 0.0 && gate < 1.0);
            }
            for i in 0..n_p {
                let n_c: f64 = g.value(out.h_p_c).row(i).iter().map(|v| v * v).sum();
                let n_o: f64 = hp.row(i).iter().map(|v| v * v).sum();
                assert!(n_c <= n_o);
            }
        }
    }

    #[test]
    fn selector_decoder_returns_specific_half() {
        let d = 3;
        let mut store = ParamStore::new();
        let sel = Mat::from_fn(2 * d, d, |i, j| if i == j { 1.0 } else { 0.0 });
        let decoder = Affine {
            w: store.add("sel.w", sel),
            b: store.add("sel.b", Mat::zeros(1, d)),
            in_dim: 2 * d,
            out_dim: d,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hs = random(&mut rng, 4, d);
        let mut g = Graph::new(&store);
        let (sv, cv) = (g.input(hs.clone()), g.input(random(&mut rng, 4, d)));
        let r = reconstruct(&mut g, sv, cv, &decoder).unwrap();
        assert_eq!(g.value(r), &hs);
        let short = g.input(Mat::zeros(3, d));
        assert!(reconstruct(&mut g, sv, short, &decoder).is_err());
    }

    #[test]
    fn reconstruction_decoder_matches_oracle_and_zero_case() {
        let d = 4;
        let (mut store, _, mrd) = setup(4, 3, d);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let hs = random(&mut rng, 5, d);
        let hc = random(&mut rng, 5, d);
        let joined = Mat::from_fn(5, 2 * d, |i, j| if j < d { hs[(i, j)] } else { hc[(i, j - d)] });
        {
            let mut g = Graph::new(&store);
            let (sv, cv) = (g.input(hs.clone()), g.input(hc.clone()));
            let r = reconstruct(&mut g, sv, cv, &mrd.decoder_p).unwrap();
            assert_close(g.value(r), &mlp_oracle(&joined, &mrd.decoder_p, &store), 1e-12);
        }
        store.set(mrd.decoder_p.fc2.w, Mat::zeros(d, d));
        let mut g = Graph::new(&store);
        let (sv, cv) = (g.input(hs), g.input(hc));
        let r = reconstruct(&mut g, sv, cv, &mrd.decoder_p).unwrap();
        let b = store.get(mrd.decoder_p.fc2.b);
        for i in 0..5 {
            assert_eq!(g.value(r).row(i), b.row(0));
        }
    }

    #[test]
    fn common_encoder_gradients_match_finite_differences() {
        let d = 4;
        let (store, _, mrd) = setup(4, 3, d);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hp = random(&mut rng, 3, d);
        let hg = random(&mut rng, 6, d);
        let readout = Mat::from_fn(9, d, |i, j| ((i * d + j) as f64 * 0.37).sin());
        let eval = |s: &ParamStore| -> (f64, Vec<Mat>) {
            let mut g = Graph::new(s);
            let (pv, gv) = (g.input(hp.clone()), g.input(hg.clone()));
            let out = encode_common(&mut g, pv, gv, &mrd).unwrap();
            let both = g.concat_rows(&[out.h_p_c, out.h_g_c]);
            let w = g.input(readout.clone());
            let m = g.mul(both, w);
            let loss = g.sum_all(m);
            let value = g.value(loss).item();
            (value, g.param_grads(loss))
        };
        let (_, grads) = eval(&store);
        let h = 1e-5;
        for id in store.ids() {
            if !store.name(id).starts_with("mrd.common") {
                continue;
            }
            let (mut num_sq, mut diff_sq, mut ana_sq) = (0.0, 0.0, 0.0);
            for e in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).as_mut_slice()[e] += h;
                let mut minus = store.clone();
                minus.get_mut(id).as_mut_slice()[e] -= h;
                let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = grads[id.index()].as_slice()[e];
                num_sq += num * num;
                ana_sq += a * a;
                diff_sq += (a - num) * (a - num);
            }
            let rel = diff_sq.sqrt() / num_sq.sqrt().max(ana_sq.sqrt()).max(1e-6);
            assert!(rel < 1e-4, "{}: rel err {rel}", store.name(id));
        }
    }
}
