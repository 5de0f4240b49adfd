//! Output heads: the tied masked-token projection and the `[CLS]`
//! classifier, each with its loss gradient.

use rand_chacha::ChaCha8Rng;

use super::encoder::{encode, Batch};
use super::linalg::{log_sum_exp, matmul, Real, View, ViewMut};
use super::params::{ClassifierHead, ParameterSet};
use crate::error::{Error, Result};
use crate::masking::IGNORE_LABEL;

/// Masked-token head evaluated on the labeled rows only.
pub struct MtmOutput<T> {
    /// Sum of per-position cross-entropies (natural log).
    pub loss_sum: f64,
    pub count: usize,
    rows: Vec<usize>,
    targets: Vec<usize>,
    probs: Vec<T>,
}

impl<T> MtmOutput<T> {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count as f64
    }
}

fn labeled_rows(labels: &[i32], vocab: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (r, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        if l < 0 || l as usize >= vocab {
            return Err(Error::input(format!("label {l} outside vocabulary of {vocab}")));
        }
        rows.push(r);
        targets.push(l as usize);
    }
    if rows.is_empty() {
        return Err(Error::input("no labeled position"));
    }
    Ok((rows, targets))
}

/// Logits `rows x vocab` of the tied projection for the given hidden rows.
fn project<T: Real>(p: &ParameterSet<T>, hidden: &[T], rows: &[usize]) -> Vec<T> {
    let (d, v) = (p.config.d_model, p.config.vocab_size);
    let mut h = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        h.extend_from_slice(&hidden[r * d..(r + 1) * d]);
    }
    let mut logits = Vec::with_capacity(rows.len() * v);
    for _ in rows {
        logits.extend_from_slice(&p.mtm_bias.data);
    }
    matmul(
        T::one(),
        View::new(&h, rows.len(), d),
        View::new(&p.token_emb.data, v, d).t(),
        T::one(),
        ViewMut::new(&mut logits, rows.len(), v),
    );
    logits
}

pub fn mtm_forward<T: Real>(p: &ParameterSet<T>, hidden: &[T], labels: &[i32]) -> Result<MtmOutput<T>> {
    let v = p.config.vocab_size;
    let (rows, targets) = labeled_rows(labels, v)?;
    let mut probs = project(p, hidden, &rows);
    let mut loss_sum = 0.0;
    for (row, &t) in probs.chunks_mut(v).zip(&targets) {
        let lse = log_sum_exp(row);
        loss_sum += lse - row[t].f64();
        row.iter_mut().for_each(|x| *x = T::c((x.f64() - lse).exp()));
    }
    Ok(MtmOutput {
        loss_sum,
        count: rows.len(),
        rows,
        targets,
        probs,
    })
}

/// Gradient of `scale * loss_sum`; returns the gradient w.r.t. `hidden`.
pub fn mtm_backward<T: Real>(
    p: &ParameterSet<T>,
    hidden: &[T],
    out: &MtmOutput<T>,
    scale: T,
    g: &mut ParameterSet<T>,
) -> Vec<T> {
    let (d, v) = (p.config.d_model, p.config.vocab_size);
    let m = out.rows.len();
    let mut dlogits = out.probs.clone();
    for (row, &t) in dlogits.chunks_mut(v).zip(&out.targets) {
        row[t] -= T::one();
        row.iter_mut().for_each(|x| *x *= scale);
    }
    let mut h = Vec::with_capacity(m * d);
    for &r in &out.rows {
        h.extend_from_slice(&hidden[r * d..(r + 1) * d]);
    }
    matmul(
        T::one(),
        View::new(&dlogits, m, v).t(),
        View::new(&h, m, d),
        T::one(),
        ViewMut::new(&mut g.token_emb.data, v, d),
    );
    for row in dlogits.chunks(v) {
        g.mtm_bias.data.iter_mut().zip(row).for_each(|(b, &x)| *b += x);
    }
    let mut dh = vec![T::zero(); m * d];
    matmul(T::one(), View::new(&dlogits, m, v), View::new(&p.token_emb.data, v, d), T::zero(), ViewMut::new(&mut dh, m, d));
    let mut d_hidden = vec![T::zero(); hidden.len()];
    for (i, &r) in out.rows.iter().enumerate() {
        d_hidden[r * d..(r + 1) * d].copy_from_slice(&dh[i * d..(i + 1) * d]);
    }
    d_hidden
}

/// Full logits `[n * len, vocab]` in inference mode.
pub fn forward<T: Real>(p: &ParameterSet<T>, batch: &Batch) -> Result<Vec<T>> {
    let cache = encode(p, batch, None)?;
    let rows: Vec<usize> = (0..batch.rows()).collect();
    Ok(project(p, &cache.output, &rows))
}

/// Mean cross-entropy over labeled positions of a `[rows, vocab]` logit
/// matrix.
pub fn mtm_loss<T: Real>(logits: &[T], labels: &[i32], vocab: usize) -> Result<f64> {
    if logits.len() != labels.len() * vocab {
        return Err(Error::input(format!(
            "{} logits for {} labels over vocabulary {vocab}",
            logits.len(),
            labels.len()
        )));
    }
    let (rows, targets) = labeled_rows(labels, vocab)?;
    let total: f64 = rows
        .iter()
        .zip(&targets)
        .map(|(&r, &t)| {
            let row = &logits[r * vocab..(r + 1) * vocab];
            log_sum_exp(row) - row[t].f64()
        })
        .sum();
    Ok(total / rows.len() as f64)
}

/// Classifier applied to the first position of every sequence.
pub struct ClsOutput<T> {
    /// `[n, n_classes]`.
    pub logits: Vec<T>,
    features: Vec<T>,
    drop: Option<Vec<T>>,
}

pub fn cls_forward<T: Real>(
    head: &ClassifierHead<T>,
    hidden: &[T],
    n: usize,
    len: usize,
    d: usize,
    rng: Option<&mut ChaCha8Rng>,
    dropout: f64,
) -> ClsOutput<T> {
    let c = head.n_classes();
    let mut features = Vec::with_capacity(n * d);
    for b in 0..n {
        let r = b * len;
        features.extend_from_slice(&hidden[r * d..(r + 1) * d]);
    }
    let drop = match rng {
        Some(rng) if dropout > 0.0 => {
            use rand::Rng;
            let keep = T::c(1.0 / (1.0 - dropout));
            let m: Vec<T> = (0..features.len())
                .map(|_| if rng.gen::<f64>() < dropout { T::zero() } else { keep })
                .collect();
            features.iter_mut().zip(&m).for_each(|(f, &k)| *f *= k);
            Some(m)
        }
        _ => None,
    };
    let mut logits = Vec::with_capacity(n * c);
    for _ in 0..n {
        logits.extend_from_slice(&head.bias.data);
    }
    matmul(T::one(), View::new(&features, n, d), View::new(&head.weight.data, d, c), T::one(), ViewMut::new(&mut logits, n, c));
    ClsOutput { logits, features, drop }
}

pub fn argmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy of the classifier and its gradients; returns
/// `(loss, d_hidden)` where `d_hidden` is nonzero only at first positions.
pub fn cls_backward<T: Real>(
    head: &ClassifierHead<T>,
    out: &ClsOutput<T>,
    targets: &[usize],
    len: usize,
    d: usize,
    g: &mut ClassifierHead<T>,
) -> Result<(f64, Vec<T>)> {
    let c = head.n_classes();
    let n = targets.len();
    if out.logits.len() != n * c {
        return Err(Error::input("classifier targets do not match the batch"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::input(format!("class {t} outside {c} classes")));
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut dlogits = vec![T::zero(); n * c];
    for ((row, drow), &t) in out.logits.chunks(c).zip(dlogits.chunks_mut(c)).zip(targets) {
        let lse = log_sum_exp(row);
        loss += lse - row[t].f64();
        for (j, (dv, &v)) in drow.iter_mut().zip(row).enumerate() {
            let p = (v.f64() - lse).exp();
            *dv = T::c(scale * (p - if j == t { 1.0 } else { 0.0 }));
        }
    }
    matmul(T::one(), View::new(&out.features, n, d).t(), View::new(&dlogits, n, c), T::one(), ViewMut::new(&mut g.weight.data, d, c));
    for row in dlogits.chunks(c) {
        g.bias.data.iter_mut().zip(row).for_each(|(b, &x)| *b += x);
    }
    let mut df = vec![T::zero(); n * d];
    matmul(T::one(), View::new(&dlogits, n, c), View::new(&head.weight.data, d, c).t(), T::zero(), ViewMut::new(&mut df, n, d));
    if let Some(m) = &out.drop {
        df.iter_mut().zip(m).for_each(|(x, &k)| *x *= k);
    }
    let mut d_hidden = vec![T::zero(); n * len * d];
    for b in 0..n {
        d_hidden[b * len * d..b * len * d + d].copy_from_slice(&df[b * d..(b + 1) * d]);
    }
    Ok((loss * scale, d_hidden))
}
