//! The velocity network u(x, t, y1) and its exact reverse-mode gradients.
//!
//! Pipeline: fold steps into patch tokens → initial convolution → aligned
//! positional embedding → L transformer layers (attention over the
//! concatenation of sequence and condition tokens, feed-forward, both
//! wrapped in modulated layer norm and valid-step masked) → final linear
//! projection → unfold. The padded region of input and output is forced to
//! zero, so valid steps can never observe the tail.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{
    layernorm_bwd, layernorm_fwd, linear_bwd, linear_fwd, mlp_bwd, mlp_fwd, sinusoid, LnCache,
    MlpCache,
};
use crate::nn::params::{ConvP, LayerP, ModulationP, NetConfig, NetParams};
use crate::nn::real::Real;

/// Shape metadata of one profile-shaped state.
#[derive(Debug, Clone, Copy)]
pub struct SeqMeta {
    pub padded_len: usize,
    pub valid_len: usize,
    pub steps_per_day: usize,
    /// 0 = Monday.
    pub first_weekday: u32,
}

impl SeqMeta {
    pub fn of_profile(p: &crate::data::Profile) -> Self {
        SeqMeta {
            padded_len: p.padded_len(),
            valid_len: p.valid_len,
            steps_per_day: p.steps_per_day,
            first_weekday: p.first_weekday,
        }
    }
}

/// Valid-step mask over tokens: keys in `valid_tokens..seq_tokens` are
/// hidden from every query, so valid steps only attend to valid steps (and
/// condition tokens, which are appended after `seq_tokens` and never
/// masked). Materialized lazily as an additive -inf bias.
#[derive(Debug, Clone, Copy)]
pub struct StepMask {
    pub valid_tokens: usize,
    pub seq_tokens: usize,
}

impl StepMask {
    pub fn key_masked(&self, j: usize) -> bool {
        j >= self.valid_tokens && j < self.seq_tokens
    }
}

pub(crate) struct AttnCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
}

/// Scaled dot-product attention over `cat` (sequence tokens then condition
/// tokens) with masked padded keys. Returns all rows; callers keep the first
/// `seq_tokens` rows.
pub(crate) fn attention_fwd<F: Real>(
    cat: &Array2<F>,
    layer: &LayerP<F>,
    n_heads: usize,
    mask: &StepMask,
) -> (Array2<F>, AttnCache<F>) {
    let m = cat.nrows();
    let d = cat.ncols();
    let dh = d / n_heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let q = linear_fwd(cat, &layer.wq);
    let k = linear_fwd(cat, &layer.wk);
    let v = linear_fwd(cat, &layer.wv);
    let mut ctx = Array2::zeros((m, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|x| x * scale);
        for j in mask.valid_tokens..mask.seq_tokens {
            scores.column_mut(j).fill(F::neg_infinity());
        }
        // Row softmax; at least one key is always unmasked.
        for mut row in scores.rows_mut() {
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum = sum + *x;
            }
            let inv = F::one() / sum;
            for x in row.iter_mut() {
                *x = *x * inv;
            }
        }
        ctx.slice_mut(cols).assign(&scores.dot(&vh));
        probs.push(scores);
    }
    let out = linear_fwd(&ctx, &layer.wo);
    (out, AttnCache { q, k, v, probs, ctx })
}

pub(crate) fn attention_bwd<F: Real>(
    cat: &Array2<F>,
    cache: &AttnCache<F>,
    d_out: &Array2<F>,
    layer: &LayerP<F>,
    n_heads: usize,
    grads: &mut LayerP<F>,
) -> Array2<F> {
    let m = cat.nrows();
    let d = cat.ncols();
    let dh = d / n_heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let d_ctx = linear_bwd(&cache.ctx, d_out, &layer.wo, &mut grads.wo);
    let mut dq = Array2::zeros((m, d));
    let mut dk = Array2::zeros((m, d));
    let mut dv = Array2::zeros((m, d));
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let probs = &cache.probs[h];
        let d_ctx_h = d_ctx.slice(cols);
        let vh = cache.v.slice(cols);
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        let d_probs = d_ctx_h.dot(&vh.t());
        dv.slice_mut(cols).assign(&probs.t().dot(&d_ctx_h));
        // Softmax backward: ds = p * (dp - sum(dp * p, axis=1)).
        let mut d_scores = &d_probs * probs;
        let row_dot = d_scores.sum_axis(Axis(1));
        for (i, mut row) in d_scores.rows_mut().into_iter().enumerate() {
            let rd = row_dot[i];
            for (j, x) in row.iter_mut().enumerate() {
                *x = probs[(i, j)] * (d_probs[(i, j)] - rd);
            }
        }
        d_scores.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&d_scores.dot(&kh));
        dk.slice_mut(cols).assign(&d_scores.t().dot(&qh));
    }
    let mut d_cat = linear_bwd(cat, &dq, &layer.wq, &mut grads.wq);
    d_cat += &linear_bwd(cat, &dk, &layer.wk, &mut grads.wk);
    d_cat += &linear_bwd(cat, &dv, &layer.wv, &mut grads.wv);
    d_cat
}

fn conv_fwd<F: Real>(x: &Array2<F>, p: &ConvP<F>) -> Array2<F> {
    let n = x.nrows();
    let kernel = p.w.shape()[0];
    let half = (kernel / 2) as isize;
    let d = p.w.shape()[2];
    let mut out = Array2::zeros((n, d));
    out += &p.b;
    for dk in 0..kernel {
        let offset = dk as isize - half;
        let lo = (-offset).max(0) as usize;
        let hi = ((n as isize - offset).min(n as isize)).max(0) as usize;
        if lo >= hi {
            continue;
        }
        let src = x.slice(s![(lo as isize + offset) as usize..(hi as isize + offset) as usize, ..]);
        let w_dk = p.w.index_axis(Axis(0), dk);
        let contrib = src.dot(&w_dk);
        let mut dst = out.slice_mut(s![lo..hi, ..]);
        dst += &contrib;
    }
    out
}

fn conv_bwd<F: Real>(x: &Array2<F>, d_out: &Array2<F>, p: &ConvP<F>, grads: &mut ConvP<F>) {
    let n = x.nrows();
    let kernel = p.w.shape()[0];
    let half = (kernel / 2) as isize;
    grads.b += &d_out.sum_axis(Axis(0));
    for dk in 0..kernel {
        let offset = dk as isize - half;
        let lo = (-offset).max(0) as usize;
        let hi = ((n as isize - offset).min(n as isize)).max(0) as usize;
        if lo >= hi {
            continue;
        }
        let src = x.slice(s![(lo as isize + offset) as usize..(hi as isize + offset) as usize, ..]);
        let d_dst = d_out.slice(s![lo..hi, ..]);
        let mut w_dk = grads.w.index_axis_mut(Axis(0), dk);
        w_dk += &src.t().dot(&d_dst);
    }
}

struct ModTrace<F> {
    lambda: Array2<F>,
    beta: Array2<F>,
    sigma: Array2<F>,
    lambda_cache: MlpCache<F>,
    beta_cache: MlpCache<F>,
    sigma_cache: MlpCache<F>,
}

fn modulation_fwd<F: Real>(cond_vec: &Array2<F>, p: &ModulationP<F>) -> ModTrace<F> {
    let (lambda, lambda_cache) = mlp_fwd(cond_vec, &p.lambda);
    let (beta, beta_cache) = mlp_fwd(cond_vec, &p.beta);
    let (sigma, sigma_cache) = mlp_fwd(cond_vec, &p.sigma);
    ModTrace { lambda, beta, sigma, lambda_cache, beta_cache, sigma_cache }
}

struct LayerTrace<F> {
    ln1: LnCache<F>,
    mod1: ModTrace<F>,
    cat: Array2<F>,
    attn: AttnCache<F>,
    sub_out: Array2<F>,
    ln2: LnCache<F>,
    mod2: ModTrace<F>,
    ff_in: Array2<F>,
    ff_cache: MlpCache<F>,
    ff_out: Array2<F>,
}

/// Every intermediate value one backward pass needs.
pub struct Trace<F> {
    n_tokens: usize,
    x_folded: Array2<F>,
    pe_sin: Array2<F>,
    pe_cache: MlpCache<F>,
    t_sin: Array2<F>,
    t_cache: MlpCache<F>,
    cond_vec: Array2<F>,
    codes: Vec<usize>,
    layers: Vec<LayerTrace<F>>,
    h_final: Array2<F>,
}

/// Resolution of the time embedding grid: t in [0,1] is snapped to one of
/// 1000 bins before the sinusoidal embedding.
const T_BINS: f64 = 1000.0;

/// The parameterized velocity field.
#[derive(Debug, Clone)]
pub struct VelocityNet<F> {
    pub config: NetConfig,
    pub params: NetParams<F>,
}

impl<F: Real> VelocityNet<F> {
    pub fn init<R: Rng>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = NetParams::init(&config, rng);
        Ok(VelocityNet { config, params })
    }

    pub fn new(config: NetConfig, params: NetParams<F>) -> Result<Self> {
        config.validate()?;
        Ok(VelocityNet { config, params })
    }

    fn check_meta(&self, meta: &SeqMeta) -> Result<(usize, usize, usize)> {
        let p = self.config.patch_len;
        if meta.padded_len % p != 0 || meta.valid_len % p != 0 || meta.steps_per_day % p != 0 {
            return Err(Error::invalid(format!(
                "padded_len {}, valid_len {} and steps_per_day {} must all be multiples of patch_len {p}",
                meta.padded_len, meta.valid_len, meta.steps_per_day
            )));
        }
        if meta.valid_len == 0 || meta.valid_len > meta.padded_len {
            return Err(Error::invalid("valid_len must be in 1..=padded_len"));
        }
        if meta.first_weekday > 6 {
            return Err(Error::invalid("first_weekday must be in 0..=6"));
        }
        Ok((meta.padded_len / p, meta.valid_len / p, meta.steps_per_day / p))
    }

    fn check_codes(&self, codes: &[usize]) -> Result<()> {
        if codes.len() != self.config.n_cond_fields() {
            return Err(Error::invalid(format!(
                "{} condition codes given, network expects {}",
                codes.len(),
                self.config.n_cond_fields()
            )));
        }
        for (j, (&c, &v)) in codes.iter().zip(&self.config.cond_vocab_sizes).enumerate() {
            if c >= v {
                return Err(Error::invalid(format!("condition code {c} out of range for field {j} (vocab {v})")));
            }
        }
        Ok(())
    }

    /// Condition tokens (one per field: value embedding plus slot embedding)
    /// and the summed condition vector used by the modulation pathway.
    fn embed_conditions(&self, codes: &[usize], t: F) -> (Array2<F>, Array2<F>, Array2<F>, MlpCache<F>) {
        let d = self.config.model_dim;
        let k = codes.len();
        let t_idx = (t.as_f64() * T_BINS).round().clamp(0.0, T_BINS) as usize;
        let t_sin = sinusoid::<F>(t_idx, d).insert_axis(Axis(0));
        let (t_emb, t_cache) = mlp_fwd(&t_sin, &self.params.t_mlp);
        let mut cond_vec = t_emb;
        let mut cond_tokens = Array2::zeros((k, d));
        for (j, &c) in codes.iter().enumerate() {
            let e = self.params.cond_tables[j].row(c);
            {
                let mut row = cond_vec.row_mut(0);
                row += &e;
            }
            let mut tok = cond_tokens.row_mut(j);
            tok += &e;
            tok += &self.params.slot_embed.row(j);
        }
        (cond_tokens, cond_vec, t_sin, t_cache)
    }

    /// Forward pass returning the velocity and the trace for backward.
    ///
    /// The input's padded region is ignored (treated as zero) and the
    /// output's padded region is exactly zero.
    pub fn forward_traced(
        &self,
        x: &[F],
        t: F,
        codes: &[usize],
        meta: &SeqMeta,
    ) -> Result<(Vec<F>, Trace<F>)> {
        let (n, vt, day_tokens) = self.check_meta(meta)?;
        self.check_codes(codes)?;
        if x.len() != meta.padded_len {
            return Err(Error::invalid(format!(
                "input has {} steps, metadata says {}",
                x.len(),
                meta.padded_len
            )));
        }
        if !t.is_finite() || x[..meta.valid_len].iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite input to velocity network"));
        }
        let p = self.config.patch_len;
        let d = self.config.model_dim;

        let mut x_folded = Array2::zeros((n, p));
        for i in 0..meta.valid_len {
            x_folded[(i / p, i % p)] = x[i];
        }

        let tokens = conv_fwd(&x_folded, &self.params.conv);

        let shift = meta.first_weekday as usize * day_tokens;
        let mut pe_sin = Array2::zeros((n, d));
        for i in 0..n {
            pe_sin.row_mut(i).assign(&sinusoid(i + shift, d));
        }
        let (pe, pe_cache) = mlp_fwd(&pe_sin, &self.params.pe_mlp);

        let mut h = tokens;
        h += &pe;

        let (cond_tokens, cond_vec, t_sin, t_cache) = self.embed_conditions(codes, t);
        let mask = StepMask { valid_tokens: vt, seq_tokens: n };

        let mut layers = Vec::with_capacity(self.config.n_layers);
        for layer in &self.params.layers {
            // Attention sub-layer.
            let (xhat1, ln1) = layernorm_fwd(&h);
            let mod1 = modulation_fwd(&cond_vec, &layer.attn_mod);
            let mut mod_in = &xhat1 * &mod1.lambda;
            mod_in += &mod1.beta;
            let cat = concatenate(Axis(0), &[mod_in.view(), cond_tokens.view()]).unwrap();
            let (attn_all, attn) = attention_fwd(&cat, layer, self.config.n_heads, &mask);
            let sub_out = attn_all.slice(s![..n, ..]).to_owned();
            h += &(&sub_out * &mod1.sigma);

            // Feed-forward sub-layer.
            let (xhat2, ln2) = layernorm_fwd(&h);
            let mod2 = modulation_fwd(&cond_vec, &layer.ff_mod);
            let mut ff_in = &xhat2 * &mod2.lambda;
            ff_in += &mod2.beta;
            let (ff_out, ff_cache) = mlp_fwd(&ff_in, &layer.ff);
            h += &(&ff_out * &mod2.sigma);

            layers.push(LayerTrace {
                ln1,
                mod1,
                cat,
                attn,
                sub_out,
                ln2,
                mod2,
                ff_in,
                ff_cache,
                ff_out,
            });
        }

        let out_tok = linear_fwd(&h, &self.params.final_proj);
        let mut out = vec![F::zero(); meta.padded_len];
        for i in 0..meta.valid_len {
            out[i] = out_tok[(i / p, i % p)];
        }
        if out[..meta.valid_len].iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("velocity network produced non-finite output"));
        }

        let trace = Trace {
            n_tokens: n,
            x_folded,
            pe_sin,
            pe_cache,
            t_sin,
            t_cache,
            cond_vec,
            codes: codes.to_vec(),
            layers,
            h_final: h,
        };
        Ok((out, trace))
    }

    /// Forward pass without keeping the trace.
    pub fn forward(&self, x: &[F], t: F, codes: &[usize], meta: &SeqMeta) -> Result<Vec<F>> {
        Ok(self.forward_traced(x, t, codes, meta)?.0)
    }

    /// Accumulate exact parameter gradients for `d(loss)/d(output)` into
    /// `grads`. `d_out` entries beyond the valid region are ignored.
    pub fn backward(&self, trace: &Trace<F>, d_out: &[F], meta: &SeqMeta, grads: &mut NetParams<F>) {
        let p = self.config.patch_len;
        let d = self.config.model_dim;
        let n = trace.n_tokens;
        let k = trace.codes.len();

        let mut d_tok = Array2::zeros((n, p));
        for i in 0..meta.valid_len {
            d_tok[(i / p, i % p)] = d_out[i];
        }

        let mut dh = linear_bwd(&trace.h_final, &d_tok, &self.params.final_proj, &mut grads.final_proj);
        let mut d_cond_vec: Array2<F> = Array2::zeros((1, d));
        let mut d_cond_tokens: Array2<F> = Array2::zeros((k, d));

        for (idx, (layer, lt)) in self
            .params
            .layers
            .iter()
            .zip(trace.layers.iter())
            .enumerate()
            .rev()
        {
            let glayer = &mut grads.layers[idx];

            // Feed-forward sub-layer backward.
            let d_ff_out = &dh * &lt.mod2.sigma;
            let d_sigma2 = (&dh * &lt.ff_out).sum_axis(Axis(0)).insert_axis(Axis(0));
            d_cond_vec += &mlp_bwd(
                &trace.cond_vec,
                &lt.mod2.sigma_cache,
                &d_sigma2,
                &layer.ff_mod.sigma,
                &mut glayer.ff_mod.sigma,
            );
            let d_ff_in = mlp_bwd(&lt.ff_in, &lt.ff_cache, &d_ff_out, &layer.ff, &mut glayer.ff);
            let d_xhat2 = &d_ff_in * &lt.mod2.lambda;
            let d_lambda2 = (&d_ff_in * &lt.ln2.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
            let d_beta2 = d_ff_in.sum_axis(Axis(0)).insert_axis(Axis(0));
            d_cond_vec += &mlp_bwd(
                &trace.cond_vec,
                &lt.mod2.lambda_cache,
                &d_lambda2,
                &layer.ff_mod.lambda,
                &mut glayer.ff_mod.lambda,
            );
            d_cond_vec += &mlp_bwd(
                &trace.cond_vec,
                &lt.mod2.beta_cache,
                &d_beta2,
                &layer.ff_mod.beta,
                &mut glayer.ff_mod.beta,
            );
            dh += &layernorm_bwd(&lt.ln2, &d_xhat2);

            // Attention sub-layer backward.
            let d_sub = &dh * &lt.mod1.sigma;
            let d_sigma1 = (&dh * &lt.sub_out).sum_axis(Axis(0)).insert_axis(Axis(0));
            d_cond_vec += &mlp_bwd(
                &trace.cond_vec,
                &lt.mod1.sigma_cache,
                &d_sigma1,
                &layer.attn_mod.sigma,
                &mut glayer.attn_mod.sigma,
            );
            let mut d_attn_all = Array2::zeros((n + k, d));
            d_attn_all.slice_mut(s![..n, ..]).assign(&d_sub);
            let d_cat = attention_bwd(&lt.cat, &lt.attn, &d_attn_all, layer, self.config.n_heads, glayer);
            let d_mod_in = d_cat.slice(s![..n, ..]);
            d_cond_tokens += &d_cat.slice(s![n.., ..]);
            let d_xhat1 = &d_mod_in * &lt.mod1.lambda;
            let d_lambda1 = (&d_mod_in.to_owned() * &lt.ln1.xhat)
                .sum_axis(Axis(0))
                .insert_axis(Axis(0));
            let d_beta1 = d_mod_in.sum_axis(Axis(0)).insert_axis(Axis(0));
            d_cond_vec += &mlp_bwd(
                &trace.cond_vec,
                &lt.mod1.lambda_cache,
                &d_lambda1,
                &layer.attn_mod.lambda,
                &mut glayer.attn_mod.lambda,
            );
            d_cond_vec += &mlp_bwd(
                &trace.cond_vec,
                &lt.mod1.beta_cache,
                &d_beta1,
                &layer.attn_mod.beta,
                &mut glayer.attn_mod.beta,
            );
            dh += &layernorm_bwd(&lt.ln1, &d_xhat1);
        }

        // dh is now the gradient at conv output + positional embedding.
        mlp_bwd(&trace.pe_sin, &trace.pe_cache, &dh, &self.params.pe_mlp, &mut grads.pe_mlp);
        conv_bwd(&trace.x_folded, &dh, &self.params.conv, &mut grads.conv);

        // Condition pathways.
        mlp_bwd(&trace.t_sin, &trace.t_cache, &d_cond_vec, &self.params.t_mlp, &mut grads.t_mlp);
        for (j, &c) in trace.codes.iter().enumerate() {
            let mut table_row = grads.cond_tables[j].row_mut(c);
            table_row += &d_cond_vec.row(0);
            table_row += &d_cond_tokens.row(j);
            let mut slot_row = grads.slot_embed.row_mut(j);
            slot_row += &d_cond_tokens.row(j);
        }
    }
}

/// One forward held for a later backward; calling backward without a
/// recorded forward is a state error.
pub struct NetSession<'a, F: Real> {
    net: &'a VelocityNet<F>,
    recorded: Option<(Trace<F>, SeqMeta)>,
}

impl<'a, F: Real> NetSession<'a, F> {
    pub fn new(net: &'a VelocityNet<F>) -> Self {
        NetSession { net, recorded: None }
    }

    pub fn forward(&mut self, x: &[F], t: F, codes: &[usize], meta: &SeqMeta) -> Result<Vec<F>> {
        let (out, trace) = self.net.forward_traced(x, t, codes, meta)?;
        self.recorded = Some((trace, *meta));
        Ok(out)
    }

    /// Gradients of a scalar loss with `d(loss)/d(output) = d_out`.
    pub fn backward(&mut self, d_out: &[F]) -> Result<NetParams<F>> {
        let (trace, meta) = self
            .recorded
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward".into()))?;
        let mut grads = NetParams::zeros(&self.net.config);
        self.net.backward(&trace, d_out, &meta, &mut grads);
        Ok(grads)
    }
}

/// Sinusoidal positional embedding of a step index.
pub fn sinusoidal_pe<F: Real>(t: usize, d: usize) -> Array1<F> {
    sinusoid(t, d)
}

/// Weekday-aligned positional embedding: the plain embedding pipeline
/// (sinusoid, then the PE MLP) evaluated at the shifted index
/// `t + w * t_day`, so equal shifted indices give equal embeddings no matter
/// which weekday the sequence starts on.
pub fn aligned_pe<F: Real>(
    t: usize,
    first_weekday: u32,
    t_day: usize,
    params: &NetParams<F>,
    d: usize,
) -> Array1<F> {
    let idx = t + first_weekday as usize * t_day;
    let sin = sinusoid::<F>(idx, d).insert_axis(Axis(0));
    let (emb, _) = mlp_fwd(&sin, &params.pe_mlp);
    emb.index_axis(Axis(0), 0).to_owned()
}

/// Valid-step masked self-attention over a sequence (no condition tokens).
pub fn masked_attention<F: Real>(
    x: &Array2<F>,
    mask: &StepMask,
    layer: &LayerP<F>,
    n_heads: usize,
) -> Result<Array2<F>> {
    if mask.valid_tokens == 0 {
        return Err(Error::invalid("attention needs at least one valid step"));
    }
    if mask.seq_tokens != x.nrows() {
        return Err(Error::invalid("mask seq_tokens must match sequence length"));
    }
    let (out, _) = attention_fwd(x, layer, n_heads, mask);
    Ok(out)
}

/// Attention over the concatenation of sequence and condition tokens;
/// returns only the sequence rows. Condition tokens are never masked.
pub fn mm_attention<F: Real>(
    x: &Array2<F>,
    cond_tokens: &Array2<F>,
    mask: &StepMask,
    layer: &LayerP<F>,
    n_heads: usize,
) -> Result<Array2<F>> {
    if mask.valid_tokens == 0 {
        return Err(Error::invalid("attention needs at least one valid step"));
    }
    if mask.seq_tokens != x.nrows() {
        return Err(Error::invalid("mask seq_tokens must match sequence length"));
    }
    let cat = concatenate(Axis(0), &[x.view(), cond_tokens.view()]).unwrap();
    let (out, _) = attention_fwd(&cat, layer, n_heads, mask);
    Ok(out.slice(s![..x.nrows(), ..]).to_owned())
}

/// Modulated pre-norm residual block:
/// `x + sigma * sublayer(lambda * layernorm(x) + beta)` with
/// lambda/beta/sigma produced from the condition vector.
pub fn adaln_modulate<F: Real>(
    x: &Array2<F>,
    cond_vec: &Array2<F>,
    mod_params: &ModulationP<F>,
    sublayer: impl FnOnce(&Array2<F>) -> Array2<F>,
) -> Array2<F> {
    let (xhat, _) = layernorm_fwd(x);
    let mt = modulation_fwd(cond_vec, mod_params);
    let mut inner = &xhat * &mt.lambda;
    inner += &mt.beta;
    let sub = sublayer(&inner);
    let mut out = x.clone();
    out += &(&sub * &mt.sigma);
    out
}
