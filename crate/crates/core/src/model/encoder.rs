//! Encoder forward pass with cached activations and the matching manual
//! backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::linalg::{gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, matmul};
use super::linalg::{LayerNormCache, Real, View, ViewMut};
use super::params::{LayerParams, ModelConfig, ParameterSet};
use crate::error::{Error, Result};

/// A padded batch of `n` sequences of length `len`, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub n: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub attention: Vec<u8>,
}

impl Batch {
    pub fn new(n: usize, len: usize, ids: Vec<u32>, segments: Vec<u8>, attention: Vec<u8>) -> Result<Self> {
        let size = n * len;
        if n == 0 || len == 0 || ids.len() != size || segments.len() != size || attention.len() != size {
            return Err(Error::input(format!(
                "batch {n}x{len} got {} ids, {} segments, {} mask entries",
                ids.len(),
                segments.len(),
                attention.len()
            )));
        }
        Ok(Self {
            n,
            len,
            ids,
            segments,
            attention,
        })
    }

    /// One sequence, segment 0 everywhere.
    pub fn single(ids: &[u32], attention: &[u8]) -> Result<Self> {
        Self::new(1, ids.len(), ids.to_vec(), vec![0; ids.len()], attention.to_vec())
    }

    /// Stacks equal-length rows, then drops trailing columns that are
    /// padding in every row.
    pub fn from_rows<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [u32], &'a [u8], &'a [u8])>,
    {
        let mut ids = Vec::new();
        let mut segments = Vec::new();
        let mut attention = Vec::new();
        let mut n = 0;
        let mut len = None;
        for (i, s, a) in rows {
            if *len.get_or_insert(i.len()) != i.len() || s.len() != i.len() || a.len() != i.len() {
                return Err(Error::input("batch rows differ in length"));
            }
            ids.extend_from_slice(i);
            segments.extend_from_slice(s);
            attention.extend_from_slice(a);
            n += 1;
        }
        let len = len.unwrap_or(0);
        let batch = Self::new(n, len, ids, segments, attention)?;
        let used = (0..n)
            .map(|b| {
                let row = &batch.attention[b * len..(b + 1) * len];
                row.iter().rposition(|&m| m != 0).map_or(0, |p| p + 1)
            })
            .max()
            .unwrap_or(0);
        Ok(batch.truncated(used.max(1)))
    }

    fn truncated(self, keep: usize) -> Self {
        if keep >= self.len {
            return self;
        }
        fn cut<X: Copy>(v: &[X], len: usize, keep: usize) -> Vec<X> {
            v.chunks(len).flat_map(|r| r[..keep].iter().copied()).collect()
        }
        Self {
            n: self.n,
            len: keep,
            ids: cut(&self.ids, self.len, keep),
            segments: cut(&self.segments, self.len, keep),
            attention: cut(&self.attention, self.len, keep),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.len > config.max_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds max_len {}",
                self.len, config.max_len
            )));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::input(format!("token id {id} outside vocabulary of {}", config.vocab_size)));
        }
        if self.segments.iter().any(|&s| s as usize >= config.n_segments) {
            return Err(Error::input("segment id out of range"));
        }
        if self.attention.iter().any(|&a| a > 1) {
            return Err(Error::input("attention mask entries must be 0 or 1"));
        }
        for b in 0..self.n {
            if self.attention[b * self.len..(b + 1) * self.len].iter().all(|&a| a == 0) {
                return Err(Error::input(format!("sequence {b} has no attended position")));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.n * self.len
    }
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
fn dropout_mask<T: Real>(rng: &mut Option<&mut ChaCha8Rng>, p: f64, count: usize) -> Option<Vec<T>> {
    let rng = rng.as_deref_mut()?;
    if p <= 0.0 {
        return None;
    }
    let keep = T::c(1.0 / (1.0 - p));
    Some((0..count).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect())
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
    }
}

pub struct LayerCache<T> {
    input: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities, `[n, heads, len, len]`.
    pub probs: Vec<T>,
    attn_drop: Option<Vec<T>>,
    ctx: Vec<T>,
    drop1: Option<Vec<T>>,
    ln1: LayerNormCache<T>,
    x1: Vec<T>,
    u: Vec<T>,
    cdf: Vec<T>,
    f: Vec<T>,
    drop2: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
}

pub struct EncoderCache<T> {
    emb_drop: Option<Vec<T>>,
    pub layers: Vec<LayerCache<T>>,
    /// Final hidden states, `[n * len, d_model]`.
    pub output: Vec<T>,
}

/// Runs the encoder. Dropout is active iff `rng` is given.
pub fn encode<T: Real>(
    p: &ParameterSet<T>,
    batch: &Batch,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderCache<T>> {
    let cfg = &p.config;
    batch.validate(cfg)?;
    let d = cfg.d_model;
    let mut x = vec![T::zero(); batch.rows() * d];
    for b in 0..batch.n {
        for i in 0..batch.len {
            let r = b * batch.len + i;
            let tok = batch.ids[r] as usize * d;
            let seg = batch.segments[r] as usize * d;
            let row = &mut x[r * d..(r + 1) * d];
            for j in 0..d {
                row[j] = p.token_emb.data[tok + j] + p.position_emb.data[i * d + j] + p.segment_emb.data[seg + j];
            }
        }
    }
    let emb_drop = dropout_mask(&mut rng, cfg.dropout, x.len());
    apply_mask(&mut x, &emb_drop);

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &p.layers {
        let (cache, out) = layer_forward(lp, cfg, batch, x, &mut rng);
        layers.push(cache);
        x = out;
    }
    Ok(EncoderCache {
        emb_drop,
        layers,
        output: x,
    })
}

fn head_view<T>(m: &[T], b: usize, h: usize, len: usize, d: usize, dh: usize) -> View<'_, T> {
    View::strided(m, b * len * d + h * dh, len, dh, d, 1)
}

fn head_view_mut<T>(m: &mut [T], b: usize, h: usize, len: usize, d: usize, dh: usize) -> ViewMut<'_, T> {
    ViewMut::strided(m, b * len * d + h * dh, len, dh, d, 1)
}

fn layer_forward<T: Real>(
    lp: &LayerParams<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    input: Vec<T>,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> (LayerCache<T>, Vec<T>) {
    let (n, len) = (batch.n, batch.len);
    let rows = n * len;
    let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let eps = T::c(cfg.layernorm_eps);
    let scale = T::c(1.0 / (dh as f64).sqrt());

    let q = linear(&input, &lp.wq.data, &lp.bq.data, rows, d, d);
    let k = linear(&input, &lp.wk.data, &lp.bk.data, rows, d, d);
    let v = linear(&input, &lp.wv.data, &lp.bv.data, rows, d, d);

    let block = len * len;
    let mut probs = vec![T::zero(); n * heads * block];
    for b in 0..n {
        let keys = &batch.attention[b * len..(b + 1) * len];
        for h in 0..heads {
            let off = (b * heads + h) * block;
            let s = &mut probs[off..off + block];
            matmul(
                scale,
                head_view(&q, b, h, len, d, dh),
                head_view(&k, b, h, len, d, dh).t(),
                T::zero(),
                ViewMut::new(s, len, len),
            );
            for row in s.chunks_mut(len) {
                softmax_masked(row, keys);
            }
        }
    }
    let attn_drop = dropout_mask(rng, cfg.dropout, probs.len());
    let mut ctx = vec![T::zero(); rows * d];
    {
        let dropped;
        let used: &[T] = match &attn_drop {
            Some(m) => {
                dropped = probs.iter().zip(m).map(|(&a, &k)| a * k).collect::<Vec<T>>();
                &dropped
            }
            None => &probs,
        };
        for b in 0..n {
            for h in 0..heads {
                let off = (b * heads + h) * block;
                matmul(
                    T::one(),
                    View::new(&used[off..off + block], len, len),
                    head_view(&v, b, h, len, d, dh),
                    T::zero(),
                    head_view_mut(&mut ctx, b, h, len, d, dh),
                );
            }
        }
    }

    let mut a = linear(&ctx, &lp.wo.data, &lp.bo.data, rows, d, d);
    let drop1 = dropout_mask(rng, cfg.dropout, a.len());
    apply_mask(&mut a, &drop1);
    a.iter_mut().zip(&input).for_each(|(a, &x)| *a += x);
    let (x1, ln1) = layer_norm(&a, &lp.ln1_gain.data, &lp.ln1_bias.data, d, eps);

    let u = linear(&x1, &lp.w1.data, &lp.b1.data, rows, d, cfg.d_ff);
    let (f, cdf) = gelu(&u);
    let mut f2 = linear(&f, &lp.w2.data, &lp.b2.data, rows, cfg.d_ff, d);
    let drop2 = dropout_mask(rng, cfg.dropout, f2.len());
    apply_mask(&mut f2, &drop2);
    f2.iter_mut().zip(&x1).for_each(|(a, &x)| *a += x);
    let (out, ln2) = layer_norm(&f2, &lp.ln2_gain.data, &lp.ln2_bias.data, d, eps);

    let cache = LayerCache {
        input,
        q,
        k,
        v,
        probs,
        attn_drop,
        ctx,
        drop1,
        ln1,
        x1,
        u,
        cdf,
        f,
        drop2,
        ln2,
    };
    (cache, out)
}

/// Softmax over the attended keys; masked keys get exactly zero weight.
fn softmax_masked<T: Real>(row: &mut [T], keys: &[u8]) {
    let mut max = T::neg_infinity();
    for (v, &k) in row.iter().zip(keys) {
        if k != 0 && *v > max {
            max = *v;
        }
    }
    let mut sum = T::zero();
    for (v, &k) in row.iter_mut().zip(keys) {
        *v = if k != 0 { (*v - max).exp() } else { T::zero() };
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Back-propagates `d_output` (gradient w.r.t. the final hidden states)
/// through the encoder, accumulating parameter gradients into `g`.
pub fn encode_backward<T: Real>(
    p: &ParameterSet<T>,
    batch: &Batch,
    cache: &EncoderCache<T>,
    d_output: Vec<T>,
    g: &mut ParameterSet<T>,
) {
    let cfg = &p.config;
    let d = cfg.d_model;
    let mut dx = d_output;
    for ((lp, lc), lg) in p.layers.iter().zip(&cache.layers).zip(g.layers.iter_mut()).rev() {
        dx = layer_backward(lp, cfg, batch, lc, dx, lg);
    }
    apply_mask(&mut dx, &cache.emb_drop);
    for b in 0..batch.n {
        for i in 0..batch.len {
            let r = b * batch.len + i;
            let tok = batch.ids[r] as usize * d;
            let seg = batch.segments[r] as usize * d;
            for j in 0..d {
                let gv = dx[r * d + j];
                g.token_emb.data[tok + j] += gv;
                g.position_emb.data[i * d + j] += gv;
                g.segment_emb.data[seg + j] += gv;
            }
        }
    }
}

fn layer_backward<T: Real>(
    lp: &LayerParams<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    c: &LayerCache<T>,
    d_out: Vec<T>,
    g: &mut LayerParams<T>,
) -> Vec<T> {
    let (n, len) = (batch.n, batch.len);
    let rows = n * len;
    let (d, heads, dh, dff) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff);
    let scale = T::c(1.0 / (dh as f64).sqrt());

    let dr2 = layer_norm_backward(&d_out, &c.ln2, &lp.ln2_gain.data, d, &mut g.ln2_gain.data, &mut g.ln2_bias.data);
    let mut dx1 = dr2.clone();
    let mut df2 = dr2;
    apply_mask(&mut df2, &c.drop2);
    let mut du = linear_backward(&c.f, &lp.w2.data, &df2, rows, dff, d, &mut g.w2.data, &mut g.b2.data, None)
        .expect("fresh gradient");
    gelu_backward(&c.u, &c.cdf, &mut du);
    linear_backward(&c.x1, &lp.w1.data, &du, rows, d, dff, &mut g.w1.data, &mut g.b1.data, Some(&mut dx1));

    let dr1 = layer_norm_backward(&dx1, &c.ln1, &lp.ln1_gain.data, d, &mut g.ln1_gain.data, &mut g.ln1_bias.data);
    let mut dx = dr1.clone();
    let mut da = dr1;
    apply_mask(&mut da, &c.drop1);
    let dctx = linear_backward(&c.ctx, &lp.wo.data, &da, rows, d, d, &mut g.wo.data, &mut g.bo.data, None)
        .expect("fresh gradient");

    let block = len * len;
    let mut dq = vec![T::zero(); rows * d];
    let mut dk = vec![T::zero(); rows * d];
    let mut dv = vec![T::zero(); rows * d];
    let mut dp = vec![T::zero(); block];
    let mut pd = vec![T::zero(); block];
    for b in 0..n {
        for h in 0..heads {
            let off = (b * heads + h) * block;
            let probs = &c.probs[off..off + block];
            let used: &[T] = match &c.attn_drop {
                Some(m) => {
                    pd.iter_mut()
                        .zip(probs.iter().zip(&m[off..off + block]))
                        .for_each(|(o, (&a, &k))| *o = a * k);
                    &pd
                }
                None => probs,
            };
            let dctx_h = head_view(&dctx, b, h, len, d, dh);
            // dV = P_used^T dctx
            matmul(T::one(), View::new(used, len, len).t(), dctx_h, T::zero(), head_view_mut(&mut dv, b, h, len, d, dh));
            // dP_used = dctx V^T
            matmul(T::one(), dctx_h, head_view(&c.v, b, h, len, d, dh).t(), T::zero(), ViewMut::new(&mut dp, len, len));
            if let Some(m) = &c.attn_drop {
                dp.iter_mut().zip(&m[off..off + block]).for_each(|(x, &k)| *x *= k);
            }
            // softmax backward, row by row: dS = P * (dP - <dP, P>)
            for (dr, pr) in dp.chunks_mut(len).zip(probs.chunks(len)) {
                let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                dr.iter_mut().zip(pr).for_each(|(x, &pv)| *x = pv * (*x - dot));
            }
            let ds = View::new(&dp, len, len);
            matmul(scale, ds, head_view(&c.k, b, h, len, d, dh), T::zero(), head_view_mut(&mut dq, b, h, len, d, dh));
            matmul(scale, ds.t(), head_view(&c.q, b, h, len, d, dh), T::zero(), head_view_mut(&mut dk, b, h, len, d, dh));
        }
    }
    linear_backward(&c.input, &lp.wq.data, &dq, rows, d, d, &mut g.wq.data, &mut g.bq.data, Some(&mut dx));
    linear_backward(&c.input, &lp.wk.data, &dk, rows, d, d, &mut g.wk.data, &mut g.bk.data, Some(&mut dx));
    linear_backward(&c.input, &lp.wv.data, &dv, rows, d, d, &mut g.wv.data, &mut g.bv.data, Some(&mut dx));
    dx
}
