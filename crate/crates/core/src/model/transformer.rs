//! Forward pass, masked cross-entropy and manual backward for one sequence.
//!
//! All matrices are row-major `out × in`; activations are `T × width`.

use super::{AdapterLayout, BaseLayout, ParameterSet};
use crate::corpus::tokenizer::{Token, PAD};
use crate::corpus::FimExample;
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub base: bool,
    pub adapters: bool,
}

impl GradRequest {
    pub const ADAPTERS: GradRequest = GradRequest {
        base: false,
        adapters: true,
    };
    pub const BASE: GradRequest = GradRequest {
        base: true,
        adapters: false,
    };
}

#[derive(Debug, Clone, Default)]
pub struct Grads {
    pub base: Option<Vec<f64>>,
    pub adapters: Option<Vec<f64>>,
}

/// Examples padded to a common length with `PAD`.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub examples: Vec<&'a FimExample>,
}

impl<'a> Batch<'a> {
    pub fn new(examples: Vec<&'a FimExample>) -> Self {
        Batch { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Token matrix padded with `PAD`, and matching loss masks (false on padding).
    pub fn padded(&self) -> (Vec<Vec<Token>>, Vec<Vec<bool>>) {
        let width = self.examples.iter().map(|e| e.len()).max().unwrap_or(0);
        self.examples
            .iter()
            .map(|e| {
                let mut toks = e.sequence.clone();
                toks.resize(width, PAD);
                let mut mask = e.loss_mask.clone();
                mask.resize(width, false);
                (toks, mask)
            })
            .unzip()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y = x · Wᵀ` for `x: T × din`, `w: dout × din`.
fn linear(x: &[f64], w: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let t = x.len() / din;
    let mut y = vec![0.0; t * dout];
    for (xr, yr) in x.chunks_exact(din).zip(y.chunks_exact_mut(dout)) {
        for (o, wr) in w.chunks_exact(din).enumerate() {
            yr[o] = dot(xr, wr);
        }
    }
    y
}

/// Accumulates `dx += dy · W` and optionally `dw += dyᵀ · x`.
fn linear_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    din: usize,
    dout: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for (dyr, dxr) in dy.chunks_exact(dout).zip(dx.chunks_exact_mut(din)) {
            for (o, wr) in w.chunks_exact(din).enumerate() {
                let g = dyr[o];
                if g != 0.0 {
                    axpy(dxr, g, wr);
                }
            }
        }
    }
    if let Some(dw) = dw {
        for (dyr, xr) in dy.chunks_exact(dout).zip(x.chunks_exact(din)) {
            for (o, dwr) in dw.chunks_exact_mut(din).enumerate() {
                let g = dyr[o];
                if g != 0.0 {
                    axpy(dwr, g, xr);
                }
            }
        }
    }
}

/// RMS norm with gain; returns normalized output and per-row `1/rms`.
fn rms_norm(x: &[f64], gain: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut y = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let ms = dot(xr, xr) / d as f64;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        inv.push(r);
        for i in 0..d {
            yr[i] = xr[i] * r * gain[i];
        }
    }
    (y, inv)
}

fn rms_norm_backward(
    dy: &[f64],
    x: &[f64],
    gain: &[f64],
    inv: &[f64],
    dx: &mut [f64],
    dgain: Option<&mut [f64]>,
) {
    let d = gain.len();
    let mut dgain = dgain;
    let mut dn = vec![0.0; d];
    for (((dyr, xr), dxr), &r) in dy
        .chunks_exact(d)
        .zip(x.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(inv)
    {
        let mut proj = 0.0;
        for i in 0..d {
            let n = xr[i] * r;
            dn[i] = dyr[i] * gain[i];
            proj += dn[i] * n;
            if let Some(dg) = dgain.as_deref_mut() {
                dg[i] += dyr[i] * n;
            }
        }
        proj /= d as f64;
        for i in 0..d {
            dxr[i] += r * (dn[i] - xr[i] * r * proj);
        }
    }
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

struct LayerCache {
    x_in: Vec<f64>,
    h1: Vec<f64>,
    inv1: Vec<f64>,
    zq: Vec<f64>,
    zv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    x_mid: Vec<f64>,
    h2: Vec<f64>,
    inv2: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    hf: Vec<f64>,
    invf: Vec<f64>,
}

struct Net<'a> {
    p: &'a ParameterSet,
    base: BaseLayout,
    adapters: AdapterLayout,
    use_adapters: bool,
}

impl<'a> Net<'a> {
    fn new(p: &'a ParameterSet, use_adapters: bool) -> Self {
        Net {
            p,
            base: p.base_layout(),
            adapters: p.adapter_layout(),
            use_adapters,
        }
    }

    fn w(&self, r: &std::ops::Range<usize>) -> &'a [f64] {
        &self.p.base[r.clone()]
    }

    fn ad(&self, r: &std::ops::Range<usize>) -> &'a [f64] {
        &self.p.adapters[r.clone()]
    }

    /// Projection with optional LoRA branch: `x Wᵀ + s (x Aᵀ) Bᵀ`; returns (y, x Aᵀ).
    fn lora_proj(&self, x: &[f64], w: &[f64], a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.p.model.d_model;
        let r = self.p.lora.rank;
        let mut y = linear(x, w, d, d);
        if !self.use_adapters {
            return (y, Vec::new());
        }
        let z = linear(x, a, d, r);
        let delta = linear(&z, b, r, d);
        let s = self.p.lora.scaling();
        axpy(&mut y, s, &delta);
        (y, z)
    }

    fn forward(&self, tokens: &[Token]) -> ForwardCache {
        let cfg = &self.p.model;
        let (d, f, nh) = (cfg.d_model, cfg.d_ffn(), cfg.n_heads);
        let hd = cfg.head_dim();
        let t_len = tokens.len();
        let scale = 1.0 / (hd as f64).sqrt();

        let tok_emb = self.w(&self.base.tok_emb);
        let pos_emb = self.w(&self.base.pos_emb);
        let mut x = vec![0.0; t_len * d];
        for (t, xr) in x.chunks_exact_mut(d).enumerate() {
            let tok = tokens[t] as usize;
            let e = &tok_emb[tok * d..(tok + 1) * d];
            let p = &pos_emb[t * d..(t + 1) * d];
            for i in 0..d {
                xr[i] = e[i] + p[i];
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (li, l) in self.base.layers.iter().enumerate() {
            let [aq, bq, av, bv] = &self.adapters.layers[li];
            let (h1, inv1) = rms_norm(&x, self.w(&l.norm1));
            let (q, zq) = self.lora_proj(&h1, self.w(&l.wq), self.ad(aq), self.ad(bq));
            let k = linear(&h1, self.w(&l.wk), d, d);
            let (v, zv) = self.lora_proj(&h1, self.w(&l.wv), self.ad(av), self.ad(bv));

            let mut probs = vec![0.0; nh * t_len * t_len];
            let mut attn = vec![0.0; t_len * d];
            for h in 0..nh {
                let off = h * hd;
                for i in 0..t_len {
                    let qi = &q[i * d + off..i * d + off + hd];
                    let row = &mut probs[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let s = dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for rj in row.iter_mut().take(i + 1) {
                        *rj = (*rj - max).exp();
                        sum += *rj;
                    }
                    let out = &mut attn[i * d + off..i * d + off + hd];
                    for j in 0..=i {
                        row[j] /= sum;
                        axpy(out, row[j], &v[j * d + off..j * d + off + hd]);
                    }
                }
            }
            let proj = linear(&attn, self.w(&l.wo), d, d);
            let mut x_mid = x.clone();
            axpy(&mut x_mid, 1.0, &proj);

            let (h2, inv2) = rms_norm(&x_mid, self.w(&l.norm2));
            let u = linear(&h2, self.w(&l.w1), d, f);
            let a: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mlp = linear(&a, self.w(&l.w2), f, d);
            let mut x_out = x_mid.clone();
            axpy(&mut x_out, 1.0, &mlp);

            layers.push(LayerCache {
                x_in: std::mem::replace(&mut x, x_out),
                h1,
                inv1,
                zq,
                zv,
                q,
                k,
                v,
                probs,
                attn,
                x_mid,
                h2,
                inv2,
                u,
                a,
            });
        }
        let (hf, invf) = rms_norm(&x, self.w(&self.base.norm_f));
        ForwardCache {
            layers,
            x_final: x,
            hf,
            invf,
        }
    }

    fn logits_at(&self, cache: &ForwardCache, t: usize) -> Vec<f64> {
        let d = self.p.model.d_model;
        let hf = &cache.hf[t * d..(t + 1) * d];
        self.w(&self.base.head)
            .chunks_exact(d)
            .map(|wr| dot(hf, wr))
            .collect()
    }

    /// Backward from `d hf` (gradient w.r.t. the final normalized hidden states).
    fn backward(&self, tokens: &[Token], cache: &ForwardCache, dhf: &[f64], grads: &mut Grads) {
        let cfg = &self.p.model;
        let (d, f, nh) = (cfg.d_model, cfg.d_ffn(), cfg.n_heads);
        let hd = cfg.head_dim();
        let r = self.p.lora.rank;
        let s = self.p.lora.scaling();
        let t_len = tokens.len();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut gbase = grads.base.take();
        let mut gad = grads.adapters.take();

        macro_rules! gb {
            ($range:expr) => {
                gbase.as_mut().map(|g| &mut g[$range.clone()])
            };
        }

        let mut dx = vec![0.0; t_len * d];
        rms_norm_backward(
            dhf,
            &cache.x_final,
            self.w(&self.base.norm_f),
            &cache.invf,
            &mut dx,
            gb!(self.base.norm_f),
        );

        for (li, l) in self.base.layers.iter().enumerate().rev() {
            let c = &cache.layers[li];
            let [aq, bq, av, bv] = &self.adapters.layers[li];

            // MLP block: x_out = x_mid + gelu(h2 W1ᵀ) W2ᵀ
            let mut da = vec![0.0; t_len * f];
            linear_backward(&dx, &c.a, self.w(&l.w2), f, d, Some(&mut da), gb!(l.w2));
            for (g, &u) in da.iter_mut().zip(&c.u) {
                *g *= gelu_grad(u);
            }
            let mut dh2 = vec![0.0; t_len * d];
            linear_backward(&da, &c.h2, self.w(&l.w1), d, f, Some(&mut dh2), gb!(l.w1));
            let mut dx_mid = dx;
            rms_norm_backward(&dh2, &c.x_mid, self.w(&l.norm2), &c.inv2, &mut dx_mid, gb!(l.norm2));

            // attention block: x_mid = x_in + attn Woᵀ
            let mut dattn = vec![0.0; t_len * d];
            linear_backward(&dx_mid, &c.attn, self.w(&l.wo), d, d, Some(&mut dattn), gb!(l.wo));
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            let mut dp = vec![0.0; t_len];
            for h in 0..nh {
                let off = h * hd;
                for i in 0..t_len {
                    let row = &c.probs[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
                    let doi = &dattn[i * d + off..i * d + off + hd];
                    let mut rowdot = 0.0;
                    for j in 0..=i {
                        dp[j] = dot(doi, &c.v[j * d + off..j * d + off + hd]);
                        rowdot += row[j] * dp[j];
                        axpy(&mut dv[j * d + off..j * d + off + hd], row[j], doi);
                    }
                    for j in 0..=i {
                        let ds = row[j] * (dp[j] - rowdot) * scale;
                        if ds != 0.0 {
                            axpy(&mut dq[i * d + off..i * d + off + hd], ds, &c.k[j * d + off..j * d + off + hd]);
                            axpy(&mut dk[j * d + off..j * d + off + hd], ds, &c.q[i * d + off..i * d + off + hd]);
                        }
                    }
                }
            }

            let mut dh1 = vec![0.0; t_len * d];
            linear_backward(&dk, &c.h1, self.w(&l.wk), d, d, Some(&mut dh1), gb!(l.wk));
            for (dy, w, a_r, b_r, z) in [
                (&dq, &l.wq, aq, bq, &c.zq),
                (&dv, &l.wv, av, bv, &c.zv),
            ] {
                linear_backward(dy, &c.h1, self.w(w), d, d, Some(&mut dh1), gb!(w));
                if !self.use_adapters {
                    continue;
                }
                // y += s (h1 Aᵀ) Bᵀ
                let dy_s: Vec<f64> = dy.iter().map(|&g| g * s).collect();
                let mut dz = vec![0.0; t_len * r];
                let db = gad.as_mut().map(|g| &mut g[b_r.clone()]);
                linear_backward(&dy_s, z, self.ad(b_r), r, d, Some(&mut dz), db);
                let da_ = gad.as_mut().map(|g| &mut g[a_r.clone()]);
                linear_backward(&dz, &c.h1, self.ad(a_r), d, r, Some(&mut dh1), da_);
            }
            let mut dx_in = dx_mid;
            rms_norm_backward(&dh1, &c.x_in, self.w(&l.norm1), &c.inv1, &mut dx_in, gb!(l.norm1));
            dx = dx_in;
        }

        if let Some(g) = gbase.as_mut() {
            for (t, dxr) in dx.chunks_exact(d).enumerate() {
                let tok = tokens[t] as usize;
                let te = self.base.tok_emb.start + tok * d;
                axpy(&mut g[te..te + d], 1.0, dxr);
                let pe = self.base.pos_emb.start + t * d;
                axpy(&mut g[pe..pe + d], 1.0, dxr);
            }
        }
        grads.base = gbase;
        grads.adapters = gad;
    }
}

fn check_tokens(p: &ParameterSet, tokens: &[Token]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    if tokens.len() > p.model.context_len {
        return Err(Error::Invalid(format!(
            "sequence of {} tokens exceeds context length {}",
            tokens.len(),
            p.model.context_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= p.model.vocab_size) {
        return Err(Error::Invalid(format!("token id {bad} outside vocabulary")));
    }
    Ok(())
}

/// Logits at every position, with or without the adapter branch.
pub fn logits_all(p: &ParameterSet, tokens: &[Token], use_adapters: bool) -> Result<Vec<Vec<f64>>> {
    check_tokens(p, tokens)?;
    let net = Net::new(p, use_adapters);
    let cache = net.forward(tokens);
    Ok((0..tokens.len()).map(|t| net.logits_at(&cache, t)).collect())
}

pub(crate) fn last_logits(p: &ParameterSet, tokens: &[Token]) -> Result<Vec<f64>> {
    check_tokens(p, tokens)?;
    let net = Net::new(p, true);
    let cache = net.forward(tokens);
    Ok(net.logits_at(&cache, tokens.len() - 1))
}

fn log_softmax_loss(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    let loss = sum.ln() + max - logits[target];
    (loss, probs)
}

/// Mean cross-entropy over the masked positions of one example, plus the
/// requested gradients. Returns `None` when the example has no masked target.
pub fn loss_and_grad(p: &ParameterSet, ex: &FimExample, req: GradRequest) -> Result<Option<(f64, Grads)>> {
    let tokens = &ex.sequence;
    check_tokens(p, tokens)?;
    let positions: Vec<usize> = (0..tokens.len().saturating_sub(1))
        .filter(|&t| ex.loss_mask[t])
        .collect();
    if positions.is_empty() {
        return Ok(None);
    }
    let net = Net::new(p, true);
    let cache = net.forward(tokens);
    let d = p.model.d_model;
    let m = positions.len() as f64;
    let want_grad = req.base || req.adapters;
    let mut loss = 0.0;
    let mut dhf = if want_grad { vec![0.0; tokens.len() * d] } else { Vec::new() };
    let mut grads = Grads {
        base: req.base.then(|| vec![0.0; p.base.len()]),
        adapters: req.adapters.then(|| vec![0.0; p.adapters.len()]),
    };
    let head = net.w(&net.base.head);
    for &t in &positions {
        let logits = net.logits_at(&cache, t);
        let target = tokens[t + 1] as usize;
        let (l, mut probs) = log_softmax_loss(&logits, target);
        loss += l;
        if !want_grad {
            continue;
        }
        probs[target] -= 1.0;
        let dhf_t = &mut dhf[t * d..(t + 1) * d];
        let hf = &cache.hf[t * d..(t + 1) * d];
        let mut ghead = grads.base.as_mut().map(|g| &mut g[net.base.head.clone()]);
        for (v, wr) in head.chunks_exact(d).enumerate() {
            let g = probs[v] / m;
            axpy(dhf_t, g, wr);
            if let Some(gh) = ghead.as_deref_mut() {
                axpy(&mut gh[v * d..(v + 1) * d], g, hf);
            }
        }
    }
    let loss = loss / m;
    if want_grad {
        net.backward(tokens, &cache, &dhf, &mut grads);
    }
    Ok(Some((loss, grads)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// `(example id, loss)` for every example with at least one masked target.
    pub per_example: Vec<(String, f64)>,
    pub mean_loss: f64,
    /// Ids excluded for having no masked positions.
    pub excluded: Vec<String>,
}

pub fn forward_loss(p: &ParameterSet, batch: &Batch) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let req = GradRequest {
        base: false,
        adapters: false,
    };
    let mut per_example = Vec::with_capacity(batch.len());
    let mut excluded = Vec::new();
    for ex in &batch.examples {
        match loss_and_grad(p, ex, req)? {
            Some((l, _)) => {
                if !l.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss on example {}", ex.id)));
                }
                per_example.push((ex.id.clone(), l));
            }
            None => {
                log::warn!("example {} has no masked positions; excluded", ex.id);
                excluded.push(ex.id.clone());
            }
        }
    }
    let mean_loss = if per_example.is_empty() {
        f64::NAN
    } else {
        per_example.iter().map(|(_, l)| l).sum::<f64>() / per_example.len() as f64
    };
    Ok(LossReport {
        per_example,
        mean_loss,
        excluded,
    })
}

/// Gradient of each example's loss with respect to the adapter scalars,
/// computed by one backward pass per example. Examples without masked
/// positions yield a zero gradient.
pub fn per_example_gradients(p: &ParameterSet, batch: &Batch) -> Result<Vec<(f64, Vec<f64>)>> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    batch
        .examples
        .iter()
        .map(|ex| {
            let (loss, g) = match loss_and_grad(p, ex, GradRequest::ADAPTERS)? {
                Some((l, g)) => (l, g.adapters.expect("adapter grads requested")),
                None => (f64::NAN, vec![0.0; p.adapters.len()]),
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient on example {}", ex.id)));
            }
            Ok((loss, g))
        })
        .collect()
}
