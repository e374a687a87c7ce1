//! Joint representation: stream concatenation, cross-attention, the
//! class-token transformer decoder (multi-head attention, Nystrom
//! approximation, PPEG position encoding) and orthogonal fusion.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::encoders::RepresentationBundle;
use crate::error::{Error, Result};
use crate::nn::{Affine, Graph, Init, LayerNorm, ParamId, TokenMap};
use crate::tensor::Mat;

/// Threshold on ‖f_c‖ below which orthogonal projection is undefined.
pub const DEGENERATE_NORM: f64 = 1e-8;
pub const DEFAULT_HEADS: usize = 2;
pub const DEFAULT_LANDMARKS: usize = 64;
pub const DEFAULT_PINV_ITERS: usize = 6;
pub const PPEG_KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Nystrom when the token count exceeds twice the landmark count.
    #[default]
    Auto,
    Exact,
    Nystrom,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolVariant {
    /// Mean over [f_c_vec ; orthogonal tokens].
    #[default]
    WithCommon,
    /// Mean over the orthogonal tokens only.
    OrthOnly,
}

/// How the projection handles a near-zero common vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Error when ‖f_c‖ ≤ 1e-8.
    #[default]
    Strict,
    /// Add 1e-8 to ⟨f_c, f_c⟩.
    Regularized,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionOptions {
    pub attention: AttentionMode,
    pub pool: PoolVariant,
    pub denominator: Denominator,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MsaParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub out: Affine,
}

impl MsaParams {
    fn new(init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            w_q: init.uniform(format!("{name}.w_q"), d, d, d),
            w_k: init.uniform(format!("{name}.w_k"), d, d, d),
            w_v: init.uniform(format!("{name}.w_v"), d, d, d),
            out: Affine::new(init, &format!("{name}.out"), d, d),
        }
    }
}

/// One depthwise kernel per entry of [`PPEG_KERNELS`]: weight d×k², bias 1×d.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PpegParams {
    pub kernels: Vec<(usize, ParamId, ParamId)>,
}

impl PpegParams {
    fn new(init: &mut Init, name: &str, d: usize) -> Self {
        let kernels = PPEG_KERNELS
            .iter()
            .map(|&k| {
                let w = init.uniform(format!("{name}.conv{k}.weight"), d, k * k, k * k);
                let b = init.uniform(format!("{name}.conv{k}.bias"), 1, d, k * k);
                (k, w, b)
            })
            .collect();
        Self { kernels }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderParams {
    pub class_token: ParamId,
    pub norm1: LayerNorm,
    pub msa1: MsaParams,
    pub ppeg: PpegParams,
    pub norm2: LayerNorm,
    pub msa2: MsaParams,
}

impl DecoderParams {
    fn new(init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            class_token: init.uniform(format!("{name}.class_token"), 1, d, 1),
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), d),
            msa1: MsaParams::new(init, &format!("{name}.msa1"), d),
            ppeg: PpegParams::new(init, &format!("{name}.ppeg"), d),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d),
            msa2: MsaParams::new(init, &format!("{name}.msa2"), d),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub decoder_s: DecoderParams,
    pub decoder_c: DecoderParams,
    pub fuse: Affine,
    pub d: usize,
    pub n_heads: usize,
    pub n_landmarks: usize,
    pub pinv_iters: usize,
}

impl FusionParams {
    pub fn new(init: &mut Init, d: usize, n_heads: usize, n_landmarks: usize, pinv_iters: usize) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::config("n_heads", format!("must divide d={d}, got {n_heads}")));
        }
        if n_landmarks == 0 {
            return Err(Error::config("n_landmarks", "must be >= 1"));
        }
        Ok(Self {
            w_q: init.uniform("fusion.cross.w_q", d, d, d),
            w_k: init.uniform("fusion.cross.w_k", d, d, d),
            w_v: init.uniform("fusion.cross.w_v", d, d, d),
            decoder_s: DecoderParams::new(init, "fusion.decoder_s", d),
            decoder_c: DecoderParams::new(init, "fusion.decoder_c", d),
            fuse: Affine::new(init, "fusion.fuse", d, d),
            d,
            n_heads,
            n_landmarks,
            pinv_iters,
        })
    }
}

/// f_s^o = [h_p^s ; h_g^s], f_c^o = [h_p^c ; h_g^c] along the token axis.
pub fn concat_streams(g: &mut Graph, bundle: &RepresentationBundle) -> Result<(Var, Var)> {
    let w = g.shape(bundle.h_p_s).1;
    for v in [bundle.h_g_s, bundle.h_p_c, bundle.h_g_c] {
        if g.shape(v).1 != w {
            return Err(Error::shape("concat_streams", format!("width {w}"), format!("width {}", g.shape(v).1)));
        }
    }
    let f_s = g.concat_rows(&[bundle.h_p_s, bundle.h_g_s]);
    let f_c = g.concat_rows(&[bundle.h_p_c, bundle.h_g_c]);
    Ok((f_s, f_c))
}

/// softmax(q kᵀ · scale) v
fn exact_attention(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Var {
    let s = g.matmul_t(q, k);
    let s = g.scale(s, scale);
    let a = g.softmax_rows(s);
    g.matmul(a, v)
}

/// Single-head attention with shared W_q/W_k/W_v, scaled by 1/√d.
pub fn cross_attention(g: &mut Graph, query: Var, kv: Var, params: &FusionParams) -> Result<Var> {
    if g.shape(kv).0 == 0 {
        return Err(Error::shape("cross_attention", "at least one key", "0 keys"));
    }
    let (wq, wk) = (g.shape(query).1, g.shape(kv).1);
    if wq != params.d || wk != params.d {
        return Err(Error::shape("cross_attention", format!("width {}", params.d), format!("{wq}/{wk}")));
    }
    let w_q = g.param(params.w_q);
    let w_k = g.param(params.w_k);
    let w_v = g.param(params.w_v);
    let q = g.matmul(query, w_q);
    let k = g.matmul(kv, w_k);
    let v = g.matmul(kv, w_v);
    Ok(exact_attention(g, q, k, v, 1.0 / (params.d as f64).sqrt()))
}

/// m×n matrix whose row s averages the s-th of m contiguous segments.
fn segment_means(m: usize, n: usize) -> Mat {
    let mut p = Mat::zeros(m, n);
    for s in 0..m {
        let (lo, hi) = (s * n / m, (s + 1) * n / m);
        for j in lo..hi {
            p[(s, j)] = 1.0 / (hi - lo) as f64;
        }
    }
    p
}

/// Iterative Moore-Penrose pseudo-inverse.
fn pinv(g: &mut Graph, a: Var, iters: usize) -> Var {
    let n = g.shape(a).0;
    let at = g.transpose(a);
    let col = g.max_col_sum(a);
    let row = g.max_col_sum(at);
    let norm = g.mul(col, row);
    let mut z = g.div_scalar(at, norm);
    let eye = |g: &mut Graph, c: f64| g.input(Mat::identity(n).scaled(c));
    for _ in 0..iters {
        let az = g.matmul(a, z);
        let i7 = eye(g, 7.0);
        let t = g.sub(i7, az);
        let t = g.matmul(az, t);
        let i15 = eye(g, 15.0);
        let t = g.sub(i15, t);
        let t = g.matmul(az, t);
        let i13 = eye(g, 13.0);
        let t = g.sub(i13, t);
        let zt = g.matmul(z, t);
        z = g.scale(zt, 0.25);
    }
    z
}

/// Nystrom approximation of softmax(q kᵀ) v with segment-mean landmarks.
/// With n ≤ m the landmarks are the tokens themselves.
fn nystrom_attention(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64, n_landmarks: usize, iters: usize) -> Var {
    let n = g.shape(q).0;
    let q = g.scale(q, scale);
    let (ql, kl) = if n <= n_landmarks {
        (q, k)
    } else {
        let p = g.input(segment_means(n_landmarks, n));
        (g.matmul(p, q), g.matmul(p, k))
    };
    let s1 = g.matmul_t(q, kl);
    let k1 = g.softmax_rows(s1);
    let s2 = g.matmul_t(ql, kl);
    let k2 = g.softmax_rows(s2);
    let s3 = g.matmul_t(ql, k);
    let k3 = g.softmax_rows(s3);
    let z = pinv(g, k2, iters);
    let left = g.matmul(k1, z);
    let right = g.matmul(k3, v);
    g.matmul(left, right)
}

fn use_nystrom(mode: AttentionMode, n: usize, n_landmarks: usize) -> bool {
    match mode {
        AttentionMode::Auto => n > 2 * n_landmarks,
        AttentionMode::Exact => false,
        AttentionMode::Nystrom => true,
    }
}

/// Multi-head self-attention.
pub fn multi_head_attention(g: &mut Graph, x: Var, msa: &MsaParams, params: &FusionParams, mode: AttentionMode) -> Var {
    let n = g.shape(x).0;
    let dh = params.d / params.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let w_q = g.param(msa.w_q);
    let w_k = g.param(msa.w_k);
    let w_v = g.param(msa.w_v);
    let q = g.matmul(x, w_q);
    let k = g.matmul(x, w_k);
    let v = g.matmul(x, w_v);
    let nystrom = use_nystrom(mode, n, params.n_landmarks);
    let heads: Vec<Var> = (0..params.n_heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            if nystrom {
                nystrom_attention(g, qh, kh, vh, scale, params.n_landmarks, params.pinv_iters)
            } else {
                exact_attention(g, qh, kh, vh, scale)
            }
        })
        .collect();
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
    msa.out.apply(g, joined)
}

/// Square-grid position encoding. Pads n tokens to ceil(√n)² by repeating
/// leading tokens, adds depthwise convolutions of every kernel size, and
/// truncates back to n.
pub fn ppeg(g: &mut Graph, tokens: Var, params: &PpegParams) -> Result<Var> {
    let n = g.shape(tokens).0;
    if n == 0 {
        return Err(Error::shape("ppeg", "at least one token", "0 tokens"));
    }
    let side = (n as f64).sqrt().ceil() as usize;
    let side = if (side - 1) * (side - 1) >= n { side - 1 } else { side };
    let m = side * side;
    let grid = if m == n {
        tokens
    } else {
        g.gather_rows(tokens, (0..m).map(|i| i % n).collect())
    };
    let mut out = grid;
    for &(k, w, b) in &params.kernels {
        let w = g.param(w);
        let b = g.param(b);
        let conv = g.depthwise_conv(grid, w, b, side, k);
        out = g.add(out, conv);
    }
    Ok(if m == n { out } else { g.slice_rows(out, 0, n) })
}

/// Class-token transformer decoder: two pre-norm attention blocks with
/// PPEG between them. Returns n+1 tokens, class token first.
pub fn transformer_decoder(
    g: &mut Graph,
    tokens: Var,
    dec: &DecoderParams,
    params: &FusionParams,
    mode: AttentionMode,
) -> Result<Var> {
    let (n, w) = g.shape(tokens);
    if w != params.d {
        return Err(Error::shape("transformer_decoder", format!("width {}", params.d), format!("width {w}")));
    }
    if !g.value(tokens).is_finite() {
        return Err(Error::NonFinite("transformer_decoder input".into()));
    }
    let cls = g.param(dec.class_token);
    let x = g.concat_rows(&[cls, tokens]);
    let h = dec.norm1.apply(g, x);
    let a = multi_head_attention(g, h, &dec.msa1, params, mode);
    let f1 = g.add(a, x);
    let cls1 = g.slice_rows(f1, 0, 1);
    let content = g.slice_rows(f1, 1, n);
    let pe = ppeg(g, content, &dec.ppeg)?;
    let f2 = g.concat_rows(&[cls1, pe]);
    let h = dec.norm2.apply(g, f2);
    let a = multi_head_attention(g, h, &dec.msa2, params, mode);
    Ok(g.add(a, f2))
}

/// Splits each token into its projection onto `f_c_vec` and the
/// orthogonal residual. Returns (orth, proj).
pub fn orthogonal_decompose(g: &mut Graph, tokens: Var, f_c_vec: Var, denom: Denominator) -> Result<(Var, Var)> {
    let (_, w) = g.shape(tokens);
    if g.shape(f_c_vec) != (1, w) {
        return Err(Error::shape("orthogonal_decompose", format!("(1, {w})"), format!("{:?}", g.shape(f_c_vec))));
    }
    let sq = g.matmul_t(f_c_vec, f_c_vec);
    let sq = match denom {
        Denominator::Strict => {
            let norm = g.value(sq).item().sqrt();
            if !(norm > DEGENERATE_NORM) {
                return Err(Error::DegenerateCommon(norm));
            }
            sq
        }
        Denominator::Regularized => g.offset(sq, DEGENERATE_NORM),
    };
    let dots = g.matmul_t(tokens, f_c_vec);
    let coef = g.div_scalar(dots, sq);
    let proj = g.matmul(coef, f_c_vec);
    let orth = g.sub(tokens, proj);
    Ok((orth, proj))
}

#[derive(Clone, Copy, Debug)]
pub struct DhofOutput {
    pub f_c_vec: Var,
    pub orth: Var,
    pub proj: Var,
    pub pooled: Var,
    pub f_mm: Var,
}

/// Orthogonal fusion of the decoder outputs into f_mm (1×d).
pub fn dhof_fuse(g: &mut Graph, f_s: Var, f_c: Var, params: &FusionParams, opts: &FusionOptions) -> Result<DhofOutput> {
    let (n_s, _) = g.shape(f_s);
    if n_s < 2 {
        return Err(Error::shape("dhof_fuse", "class token plus content tokens", format!("{n_s} tokens")));
    }
    let f_c_vec = g.slice_rows(f_c, 0, 1);
    let content = g.slice_rows(f_s, 1, n_s - 1);
    let (orth, proj) = orthogonal_decompose(g, content, f_c_vec, opts.denominator)?;
    let pooled = match opts.pool {
        PoolVariant::WithCommon => {
            let all = g.concat_rows(&[f_c_vec, orth]);
            g.mean_rows(all)
        }
        PoolVariant::OrthOnly => g.mean_rows(orth),
    };
    let f_mm = params.fuse.apply(g, pooled);
    Ok(DhofOutput {
        f_c_vec,
        orth,
        proj,
        pooled,
        f_mm,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    pub f_s_o: Var,
    pub f_c_o: Var,
    pub f_s_prime: Var,
    pub f_c_prime: Var,
    pub f_s: Var,
    pub f_c: Var,
    pub dhof: DhofOutput,
}

impl FusedVars {
    pub fn snapshot(&self, g: &Graph) -> FusedState {
        let v = |x: Var| g.value(x).clone();
        FusedState {
            f_s_o: v(self.f_s_o),
            f_c_o: v(self.f_c_o),
            f_s_prime: v(self.f_s_prime),
            f_c_prime: v(self.f_c_prime),
            f_s: v(self.f_s),
            f_c: v(self.f_c),
            f_s_proj: v(self.dhof.proj),
            f_s_orth: v(self.dhof.orth),
            f_mm: v(self.dhof.f_mm),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedState {
    pub f_s_o: Mat,
    pub f_c_o: Mat,
    pub f_s_prime: Mat,
    pub f_c_prime: Mat,
    pub f_s: Mat,
    pub f_c: Mat,
    pub f_s_proj: Mat,
    pub f_s_orth: Mat,
    pub f_mm: Mat,
}

/// concat → cross-attention both ways → decoders → orthogonal fusion.
pub fn fuse(g: &mut Graph, bundle: &RepresentationBundle, params: &FusionParams, opts: &FusionOptions) -> Result<FusedVars> {
    let (f_s_o, f_c_o) = concat_streams(g, bundle).map_err(|e| e.at_stage("concat"))?;
    let f_s_prime = cross_attention(g, f_c_o, f_s_o, params).map_err(|e| e.at_stage("cross-attention"))?;
    let f_c_prime = cross_attention(g, f_s_o, f_c_o, params).map_err(|e| e.at_stage("cross-attention"))?;
    let f_s = transformer_decoder(g, f_s_prime, &params.decoder_s, params, opts.attention)
        .map_err(|e| e.at_stage("specific decoder"))?;
    let f_c = transformer_decoder(g, f_c_prime, &params.decoder_c, params, opts.attention)
        .map_err(|e| e.at_stage("common decoder"))?;
    let dhof = dhof_fuse(g, f_s, f_c, params, opts).map_err(|e| e.at_stage("orthogonal fusion"))?;
    Ok(FusedVars {
        f_s_o,
        f_c_o,
        f_s_prime,
        f_c_prime,
        f_s,
        f_c,
        dhof,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn setup(d: usize, n_heads: usize, n_landmarks: usize) -> (ParamStore, FusionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let p = FusionParams::new(&mut init, d, n_heads, n_landmarks, DEFAULT_PINV_ITERS).unwrap();
        (store, p)
    }

    fn zero_matching(store: &mut ParamStore, pred: impl Fn(&str) -> bool) {
        let ids: Vec<_> = store.ids().filter(|&id| pred(store.name(id))).collect();
        for id in ids {
            let (r, c) = store.get(id).shape();
            store.set(id, Mat::zeros(r, c));
        }
    }

    fn max_rel(a: &Mat, b: &Mat) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs() / (1.0 + y.abs()))
            .fold(0.0, f64::max)
    }

    fn bundle_of(g: &mut Graph, mats: [Mat; 4]) -> RepresentationBundle {
        let [ps, gs, pc, gc] = mats.map(|m| g.input(m));
        RepresentationBundle {
            h_p_o: pc,
            h_g_o: gc,
            h_p_s: ps,
            h_g_s: gs,
            h_p_c: pc,
            h_g_c: gc,
            h_p_r: ps,
            h_g_r: gs,
        }
    }

    #[test]
    fn concat_preserves_order_and_round_trips() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let ps = Mat::from_fn(4, 3, |i, _| (i + 1) as f64);
        let gs = Mat::from_fn(6, 3, |i, _| (i + 5) as f64);
        let b = bundle_of(&mut g, [ps.clone(), gs.clone(), ps.scaled(2.0), gs.scaled(2.0)]);
        let (f_s, f_c) = concat_streams(&mut g, &b).unwrap();
        assert_eq!(g.shape(f_s), (10, 3));
        assert_eq!(g.shape(f_c), (10, 3));
        for i in 0..10 {
            assert_eq!(g.value(f_s)[(i, 0)], (i + 1) as f64);
        }
        assert_eq!(g.value(f_s).slice_rows(0, 4), ps);
        assert_eq!(g.value(f_s).slice_rows(4, 6), gs);
        let mut bad = b;
        bad.h_g_c = g.input(Mat::zeros(6, 2));
        assert!(concat_streams(&mut g, &bad).is_err());
    }

    #[test]
    fn single_key_attention_returns_value_row() {
        let (store, p) = setup(4, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let key = random(&mut rng, 1, 4);
        let want = key.matmul(store.get(p.w_v));
        for _ in 0..3 {
            let mut g = Graph::new(&store);
            let q = g.input(random(&mut rng, 3, 4));
            let kv = g.input(key.clone());
            let out = cross_attention(&mut g, q, kv, &p).unwrap();
            for i in 0..3 {
                for j in 0..4 {
                    assert!((g.value(out)[(i, j)] - want[(0, j)]).abs() < 1e-14);
                }
            }
        }
        let mut g = Graph::new(&store);
        let q = g.input(random(&mut rng, 3, 4));
        let empty = g.input(Mat::zeros(0, 4));
        assert!(cross_attention(&mut g, q, empty, &p).is_err());
    }

    #[test]
    fn zero_query_key_maps_give_uniform_attention() {
        let (mut store, p) = setup(4, 1, 4);
        store.set(p.w_q, Mat::zeros(4, 4));
        store.set(p.w_k, Mat::zeros(4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kv = random(&mut rng, 5, 4);
        let mean = kv.matmul(store.get(p.w_v)).mean_rows();
        let mut g = Graph::new(&store);
        let (qv, kvv) = (g.input(random(&mut rng, 3, 4)), g.input(kv));
        let out = cross_attention(&mut g, qv, kvv, &p).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((g.value(out)[(i, j)] - mean[(0, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_attention_matches_row_softmax_oracle() {
        let d = 4;
        let (store, p) = setup(d, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qm = random(&mut rng, 3, d);
        let km = random(&mut rng, 5, d);
        let (q, k, v) = (
            qm.matmul(store.get(p.w_q)),
            km.matmul(store.get(p.w_k)),
            km.matmul(store.get(p.w_v)),
        );
        let mut want = Mat::zeros(3, d);
        for i in 0..3 {
            let logits: Vec<f64> = (0..5)
                .map(|j| (0..d).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                want[(i, c)] = (0..5).map(|j| e[j] / z * v[(j, c)]).sum();
            }
        }
        let mut g = Graph::new(&store);
        let (qv, kv) = (g.input(qm), g.input(km));
        let out = cross_attention(&mut g, qv, kv, &p).unwrap();
        assert!(max_rel(g.value(out), &want) < 1e-13);
    }

    #[test]
    fn zeroed_decoder_is_residual_identity() {
        let d = 4;
        let (mut store, p) = setup(d, 2, 4);
        zero_matching(&mut store, |n| {
            n.starts_with("fusion.decoder_s") && !n.contains("norm") && !n.contains("class_token")
        });
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 10, d);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let out = transformer_decoder(&mut g, xv, &p.decoder_s, &p, AttentionMode::Auto).unwrap();
        assert_eq!(g.shape(out), (11, d));
        let cls = store.get(p.decoder_s.class_token);
        assert_eq!(g.value(out).row(0), cls.row(0));
        assert_eq!(g.value(out).slice_rows(1, 10), x);
    }

    fn nystrom_gap(iters: usize) -> f64 {
        let d = 8;
        let (store, mut p) = setup(d, 2, 16);
        p.pinv_iters = iters;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 9, d);
        let run = |mode| {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let out = transformer_decoder(&mut g, xv, &p.decoder_s, &p, mode).unwrap();
            g.value(out).clone()
        };
        let (exact, approx) = (run(AttentionMode::Exact), run(AttentionMode::Nystrom));
        exact.zip_map(&approx, |a, b| a - b).norm() / exact.norm()
    }

    // Six iterations leave ~5e-3 on this input; the gap closes as the
    // pseudo-inverse converges.
    #[test]
    fn nystrom_with_enough_landmarks_matches_exact() {
        let rel = nystrom_gap(12);
        assert!(rel < 1e-4, "rel {rel}");
        assert!(nystrom_gap(DEFAULT_PINV_ITERS) > rel);
    }

    #[test]
    fn nystrom_with_few_landmarks_is_finite_and_shaped() {
        let d = 8;
        let (store, p) = setup(d, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 20, d);
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let out = transformer_decoder(&mut g, xv, &p.decoder_s, &p, AttentionMode::Auto).unwrap();
        assert_eq!(g.shape(out), (21, d));
        assert!(g.value(out).is_finite());
    }

    #[test]
    fn segment_means_rows_average_disjoint_blocks() {
        let p = segment_means(3, 7);
        for s in 0..3 {
            assert!((p.row(s).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let col_hits: Vec<usize> = (0..7).map(|j| (0..3).filter(|&s| p[(s, j)] > 0.0).count()).collect();
        assert!(col_hits.iter().all(|&c| c == 1));
    }

    #[test]
    fn pinv_inverts_a_well_conditioned_matrix() {
        let store = ParamStore::new();
        let m = Mat::from_rows(&[vec![0.6, 0.3, 0.1], vec![0.2, 0.7, 0.1], vec![0.1, 0.2, 0.7]]);
        let mut g = Graph::new(&store);
        let a = g.input(m.clone());
        let z = pinv(&mut g, a, 10);
        let prod = m.matmul(g.value(z));
        assert!(max_rel(&prod, &Mat::identity(3)) < 1e-10);
    }

    #[test]
    fn ppeg_identity_and_padding() {
        let (mut store, p) = setup(2, 1, 4);
        zero_matching(&mut store, |n| n.contains("ppeg"));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 5, 9, 10] {
            let x = random(&mut rng, n, 2);
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let out = ppeg(&mut g, xv, &p.decoder_s.ppeg).unwrap();
            assert_eq!(g.value(out), &x, "n={n}");
        }
    }

    #[test]
    fn ppeg_matches_hand_convolution() {
        // n = 4, d = 2: a 2×2 grid; only the 3×3 kernel is active.
        let (mut store, p) = setup(2, 1, 4);
        zero_matching(&mut store, |n| n.contains("ppeg"));
        let (_, w3, b3) = p.decoder_s.ppeg.kernels[0];
        let kernel = Mat::from_rows(&[
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        ]);
        store.set(w3, kernel);
        store.set(b3, Mat::row_vector(&[0.5, -1.0]));
        // grid channel 0: [[1, 2], [3, 4]]; channel 1: [[10, 20], [30, 40]]
        let x = Mat::from_rows(&[vec![1.0, 10.0], vec![2.0, 20.0], vec![3.0, 30.0], vec![4.0, 40.0]]);
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let out = ppeg(&mut g, xv, &p.decoder_s.ppeg).unwrap();
        // Position (0,0) sees kernel taps (1,1),(1,2),(2,1),(2,2) = 5,6,8,9 over 1,2,3,4.
        let c00 = 5.0 * 1.0 + 6.0 * 2.0 + 8.0 * 3.0 + 9.0 * 4.0 + 0.5;
        let c01 = 4.0 * 1.0 + 5.0 * 2.0 + 7.0 * 3.0 + 8.0 * 4.0 + 0.5;
        let c10 = 2.0 * 1.0 + 3.0 * 2.0 + 5.0 * 3.0 + 6.0 * 4.0 + 0.5;
        let c11 = 1.0 * 1.0 + 2.0 * 2.0 + 4.0 * 3.0 + 5.0 * 4.0 + 0.5;
        let want = Mat::from_rows(&[
            vec![1.0 + c00, 10.0 + 10.0 - 1.0],
            vec![2.0 + c01, 20.0 + 20.0 - 1.0],
            vec![3.0 + c10, 30.0 + 30.0 - 1.0],
            vec![4.0 + c11, 40.0 + 40.0 - 1.0],
        ]);
        assert_eq!(g.value(out), &want);
    }

    #[test]
    fn orthogonal_decompose_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let fc = g.input(Mat::row_vector(&[1.0, 2.0, 2.0]));
        let par = g.input(Mat::row_vector(&[-0.5, -1.0, -1.0]));
        let (orth, _) = orthogonal_decompose(&mut g, par, fc, Denominator::Strict).unwrap();
        assert!(g.value(orth).max_abs() < 1e-15);
        let perp = Mat::row_vector(&[2.0, -1.0, 0.0]);
        let pv = g.input(perp.clone());
        let (orth, proj) = orthogonal_decompose(&mut g, pv, fc, Denominator::Strict).unwrap();
        assert_eq!(g.value(orth), &perp);
        assert_eq!(g.value(proj).max_abs(), 0.0);
        let zero = g.input(Mat::zeros(1, 3));
        assert!(matches!(
            orthogonal_decompose(&mut g, pv, zero, Denominator::Strict),
            Err(Error::DegenerateCommon(_))
        ));
        let (orth, _) = orthogonal_decompose(&mut g, pv, zero, Denominator::Regularized).unwrap();
        assert_eq!(g.value(orth), &perp);
    }

    #[test]
    fn orthogonal_decompose_audit_and_reconstruction() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let x = random(&mut rng, 8, 16);
            let f = random(&mut rng, 1, 16);
            let mut g = Graph::new(&store);
            let (xv, fv) = (g.input(x.clone()), g.input(f.clone()));
            let (orth, proj) = orthogonal_decompose(&mut g, xv, fv, Denominator::Strict).unwrap();
            let (o, pr) = (g.value(orth), g.value(proj));
            for i in 0..8 {
                let dot: f64 = o.row(i).iter().zip(f.row(0)).map(|(a, b)| a * b).sum();
                let no: f64 = o.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(dot.abs() / (no * f.norm() + DEGENERATE_NORM) < 1e-6);
                for j in 0..16 {
                    let back = o[(i, j)] + pr[(i, j)];
                    assert!((back - x[(i, j)]).abs() <= 1e-10 * x[(i, j)].abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn dhof_parallel_collapse_and_two_token_mean() {
        let d = 3;
        let (store, p) = setup(d, 1, 4);
        let fc_vec = Mat::row_vector(&[1.0, 0.5, -1.0]);
        let fc = Mat::vstack(&[&fc_vec, &Mat::zeros(2, d)]);
        let affine = |x: &Mat| x.matmul(store.get(p.fuse.w)).zip_map(store.get(p.fuse.b), |a, b| a + b);

        let fs = Mat::vstack(&[&Mat::zeros(1, d), &fc_vec.scaled(2.0), &fc_vec.scaled(-0.5), &fc_vec.scaled(3.0)]);
        let mut g = Graph::new(&store);
        let (sv, cv) = (g.input(fs), g.input(fc.clone()));
        let out = dhof_fuse(&mut g, sv, cv, &p, &FusionOptions::default()).unwrap();
        let want_pool = fc_vec.scaled(1.0 / 4.0);
        assert!(max_rel(g.value(out.pooled), &want_pool) < 1e-15);
        assert!(max_rel(g.value(out.f_mm), &affine(&want_pool)) < 1e-14);

        let token = Mat::row_vector(&[1.0, 0.0, 1.0]);
        let fs = Mat::vstack(&[&Mat::zeros(1, d), &token]);
        let mut g = Graph::new(&store);
        let (sv, cv) = (g.input(fs), g.input(fc));
        let out = dhof_fuse(&mut g, sv, cv, &p, &FusionOptions::default()).unwrap();
        let want = fc_vec.zip_map(&token, |a, b| (a + b) / 2.0);
        assert!(max_rel(g.value(out.pooled), &want) < 1e-15);
        let opts = FusionOptions {
            pool: PoolVariant::OrthOnly,
            ..Default::default()
        };
        let out = dhof_fuse(&mut g, sv, cv, &p, &opts).unwrap();
        assert!(max_rel(g.value(out.pooled), &token) < 1e-15);
    }

    #[test]
    fn dhof_matches_composed_oracle() {
        let d = 4;
        let (store, p) = setup(d, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fs = random(&mut rng, 6, d);
        let fc = random(&mut rng, 6, d);
        let f = fc.slice_rows(0, 1);
        let ff: f64 = f.row(0).iter().map(|v| v * v).sum();
        let mut rows = vec![f.row(0).to_vec()];
        for i in 1..6 {
            let c: f64 = fs.row(i).iter().zip(f.row(0)).map(|(a, b)| a * b).sum::<f64>() / ff;
            rows.push((0..d).map(|j| fs[(i, j)] - c * f[(0, j)]).collect());
        }
        let pooled = Mat::from_rows(&rows).mean_rows();
        let want = pooled.matmul(store.get(p.fuse.w)).zip_map(store.get(p.fuse.b), |a, b| a + b);
        let mut g = Graph::new(&store);
        let (sv, cv) = (g.input(fs), g.input(fc));
        let out = dhof_fuse(&mut g, sv, cv, &p, &FusionOptions::default()).unwrap();
        assert!(max_rel(g.value(out.f_mm), &want) < 1e-13);
    }

    fn fuse_random(store: &ParamStore, p: &FusionParams, mats: [Mat; 4]) -> Mat {
        let mut g = Graph::new(store);
        let b = bundle_of(&mut g, mats);
        let out = fuse(&mut g, &b, p, &FusionOptions::default()).unwrap();
        g.value(out.dhof.f_mm).clone()
    }

    #[test]
    fn f_mm_invariant_to_pathology_permutation_without_ppeg() {
        let d = 4;
        let (mut store, p) = setup(d, 2, 64);
        zero_matching(&mut store, |n| n.contains("ppeg"));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ps = random(&mut rng, 5, d);
        let gs = random(&mut rng, 3, d);
        let pc = random(&mut rng, 5, d);
        let gc = random(&mut rng, 3, d);
        let perm = [3, 0, 4, 1, 2];
        let permute = |m: &Mat| Mat::from_fn(5, d, |i, j| m[(perm[i], j)]);
        let a = fuse_random(&store, &p, [ps.clone(), gs.clone(), pc.clone(), gc.clone()]);
        let b = fuse_random(&store, &p, [permute(&ps), gs, permute(&pc), gc]);
        assert!(max_rel(&a, &b) < 1e-12);
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let d = 4;
        let (store, p) = setup(d, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mats = [random(&mut rng, 3, d), random(&mut rng, 2, d), random(&mut rng, 3, d), random(&mut rng, 2, d)];
        let eval = |s: &ParamStore| -> (f64, Vec<Mat>) {
            let mut g = Graph::new(s);
            let b = bundle_of(&mut g, mats.clone());
            let out = fuse(&mut g, &b, &p, &FusionOptions::default()).unwrap();
            let m = out.dhof.f_mm;
            let sq = g.mul(m, m);
            let loss = g.sum_all(sq);
            (g.value(loss).item(), g.param_grads(loss))
        };
        let (_, grads) = eval(&store);
        let h = 1e-5;
        for id in store.ids() {
            let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
            for e in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).as_mut_slice()[e] += h;
                let mut minus = store.clone();
                minus.get_mut(id).as_mut_slice()[e] -= h;
                let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = grads[id.index()].as_slice()[e];
                diff += (a - num).powi(2);
                na += a * a;
                nn += num * num;
            }
            let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-6);
            assert!(rel < 1e-4, "{}: rel {rel}", store.name(id));
        }
    }
}
