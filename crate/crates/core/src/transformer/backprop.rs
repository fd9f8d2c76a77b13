//! Non-cached causal forward pass, its reverse-mode gradient, and a
//! finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, TinyLmModel, TransformerError, NORM_EPS};
use crate::numerics::{
    cross_entropy_with_grad, dot, inv_rms, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc,
    softmax_in_place, RopeTable, ROPE_BASE,
};

/// Per-position training targets.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// One token id per input position.
    Hard(&'a [usize]),
    /// One probability distribution over the vocabulary per input position.
    Soft(&'a [Vec<f64>]),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Hard(t) => t.len(),
            Targets::Soft(t) => t.len(),
        }
    }
}

struct LayerActs {
    x_in: Vec<f64>,
    inv_r1: Vec<f64>,
    h1: Vec<f64>,
    v: Vec<f64>,
    qr: Vec<f64>,
    kr: Vec<f64>,
    /// `[head][t][s]`, zero above the diagonal.
    probs: Vec<f64>,
    att: Vec<f64>,
    x_mid: Vec<f64>,
    inv_r2: Vec<f64>,
    h2: Vec<f64>,
    a: Vec<f64>,
    u: Vec<f64>,
}

/// Activations of a full causal forward pass over positions `0..len`.
pub struct FullForward {
    tokens: Vec<usize>,
    layers: Vec<LayerActs>,
    x_final: Vec<f64>,
    inv_rf: Vec<f64>,
    hf: Vec<f64>,
    logits: Vec<f64>,
    vocab: usize,
    all_rows: bool,
}

impl FullForward {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Next-token logits after position `t`.
    pub fn logits(&self, t: usize) -> &[f64] {
        let row = if self.all_rows { t } else { 0 };
        assert!(self.all_rows || t + 1 == self.len(), "only the last row was computed");
        &self.logits[row * self.vocab..(row + 1) * self.vocab]
    }

    pub fn last_logits(&self) -> &[f64] {
        self.logits(self.len() - 1)
    }
}

fn silu(a: f64) -> f64 {
    a / (1.0 + (-a).exp())
}

fn silu_grad(a: f64) -> f64 {
    let s = 1.0 / (1.0 + (-a).exp());
    s * (1.0 + a * (1.0 - s))
}

fn rms_rows(x: &[f64], gain: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut inv = Vec::with_capacity(rows);
    let mut out = vec![0.0; x.len()];
    for (t, row) in x.chunks(d).enumerate() {
        let r = inv_rms(row, NORM_EPS);
        inv.push(r);
        for ((o, xv), g) in out[t * d..(t + 1) * d].iter_mut().zip(row).zip(gain) {
            *o = g * xv * r;
        }
    }
    (inv, out)
}

/// Full causal forward pass; `tokens[t]` sits at position `t`.
pub fn forward_full(model: &TinyLmModel, tokens: &[usize]) -> Result<FullForward> {
    run_forward(model, tokens, true)
}

pub(crate) fn run_forward(
    model: &TinyLmModel,
    tokens: &[usize],
    all_rows: bool,
) -> Result<FullForward> {
    if tokens.is_empty() {
        return Err(TransformerError::StreamTooShort(0));
    }
    for &tok in tokens {
        model.check_token(tok)?;
    }
    let c = *model.config();
    let (d, f, v, nh, dh) = (c.d_model, c.d_ff, c.vocab_size, c.n_heads, c.d_head());
    let t_len = tokens.len();
    let layout = model.layout();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut rope = RopeTable::new(dh, ROPE_BASE).expect("validated config");
    rope.ensure(t_len);

    let mut x: Vec<f64> = tokens
        .iter()
        .flat_map(|&tok| model.embedding_row(tok).iter().copied())
        .collect();
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in &layout.layers {
        let x_in = x.clone();
        let (inv_r1, h1) = rms_rows(&x, model.slice(&l.attn_norm), d);
        let mut q = vec![0.0; t_len * d];
        let mut k = vec![0.0; t_len * d];
        let mut val = vec![0.0; t_len * d];
        matmul_acc(&h1, model.slice(&l.wq), &mut q, t_len, d, d);
        matmul_acc(&h1, model.slice(&l.wk), &mut k, t_len, d, d);
        matmul_acc(&h1, model.slice(&l.wv), &mut val, t_len, d, d);
        let mut qr = vec![0.0; t_len * d];
        let mut kr = vec![0.0; t_len * d];
        for t in 0..t_len {
            for hd in 0..nh {
                let s = t * d + hd * dh..t * d + (hd + 1) * dh;
                rope.rotate_into(&q[s.clone()], t, &mut qr[s.clone()]);
                rope.rotate_into(&k[s.clone()], t, &mut kr[s]);
            }
        }
        let mut probs = vec![0.0; nh * t_len * t_len];
        let mut att = vec![0.0; t_len * d];
        for hd in 0..nh {
            for t in 0..t_len {
                let qrow = &qr[t * d + hd * dh..t * d + (hd + 1) * dh];
                let prow = &mut probs[(hd * t_len + t) * t_len..(hd * t_len + t) * t_len + t + 1];
                for (s, p) in prow.iter_mut().enumerate() {
                    *p = dot(qrow, &kr[s * d + hd * dh..s * d + (hd + 1) * dh]) * scale;
                }
                softmax_in_place(prow);
                let out = &mut att[t * d + hd * dh..t * d + (hd + 1) * dh];
                for (s, &p) in prow.iter().enumerate() {
                    let vrow = &val[s * d + hd * dh..s * d + (hd + 1) * dh];
                    for (o, vv) in out.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
        matmul_acc(&att, model.slice(&l.wo), &mut x, t_len, d, d);
        let x_mid = x.clone();
        let (inv_r2, h2) = rms_rows(&x, model.slice(&l.mlp_norm), d);
        let mut a = vec![0.0; t_len * f];
        matmul_acc(&h2, model.slice(&l.w1), &mut a, t_len, d, f);
        let u: Vec<f64> = a.iter().map(|&z| silu(z)).collect();
        matmul_acc(&u, model.slice(&l.w2), &mut x, t_len, f, d);
        layers.push(LayerActs {
            x_in,
            inv_r1,
            h1,
            v: val,
            qr,
            kr,
            probs,
            att,
            x_mid,
            inv_r2,
            h2,
            a,
            u,
        });
    }
    let (inv_rf, hf) = rms_rows(&x, model.slice(&layout.final_norm), d);
    let logits = if all_rows {
        let mut out = vec![0.0; t_len * v];
        matmul_acc(&hf, model.slice(&layout.lm_head), &mut out, t_len, d, v);
        out
    } else {
        let mut out = vec![0.0; v];
        matmul_acc(&hf[(t_len - 1) * d..], model.slice(&layout.lm_head), &mut out, 1, d, v);
        out
    };
    Ok(FullForward {
        tokens: tokens.to_vec(),
        layers,
        x_final: x,
        inv_rf,
        hf,
        logits,
        vocab: v,
        all_rows,
    })
}

/// Gradient of RMS norm rows; accumulates the gain gradient into `dgain`.
fn rms_backward(x: &[f64], inv_r: &[f64], gain: &[f64], dy: &[f64], dgain: &mut [f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (t, &r) in inv_r.iter().enumerate() {
        let xs = &x[t * d..(t + 1) * d];
        let dys = &dy[t * d..(t + 1) * d];
        let mut s = 0.0;
        for i in 0..d {
            s += dys[i] * gain[i] * xs[i];
            dgain[i] += dys[i] * xs[i] * r;
        }
        let coef = r * r * r * s / d as f64;
        for i in 0..d {
            dx[t * d + i] = gain[i] * dys[i] * r - coef * xs[i];
        }
    }
    dx
}

fn backward(model: &TinyLmModel, acts: &FullForward, dlogits: &[f64]) -> Vec<f64> {
    let c = *model.config();
    let (d, f, v, nh, dh) = (c.d_model, c.d_ff, c.vocab_size, c.n_heads, c.d_head());
    let t_len = acts.len();
    let layout = model.layout();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut rope = RopeTable::new(dh, ROPE_BASE).expect("validated config");
    rope.ensure(t_len);
    let mut g = vec![0.0; layout.total];

    matmul_at_b_acc(&acts.hf, dlogits, &mut g[layout.lm_head.clone()], t_len, d, v);
    let mut dhf = vec![0.0; t_len * d];
    matmul_a_bt_acc(dlogits, model.slice(&layout.lm_head), &mut dhf, t_len, v, d);
    let mut dx = rms_backward(
        &acts.x_final,
        &acts.inv_rf,
        model.slice(&layout.final_norm),
        &dhf,
        &mut g[layout.final_norm.clone()],
        d,
    );

    for (l, a) in layout.layers.iter().zip(&acts.layers).rev() {
        // MLP branch.
        let mut du = vec![0.0; t_len * f];
        matmul_a_bt_acc(&dx, model.slice(&l.w2), &mut du, t_len, d, f);
        matmul_at_b_acc(&a.u, &dx, &mut g[l.w2.clone()], t_len, f, d);
        let da: Vec<f64> = du.iter().zip(&a.a).map(|(g, &z)| g * silu_grad(z)).collect();
        matmul_at_b_acc(&a.h2, &da, &mut g[l.w1.clone()], t_len, d, f);
        let mut dh2 = vec![0.0; t_len * d];
        matmul_a_bt_acc(&da, model.slice(&l.w1), &mut dh2, t_len, f, d);
        let dmid = rms_backward(&a.x_mid, &a.inv_r2, model.slice(&l.mlp_norm), &dh2, &mut g[l.mlp_norm.clone()], d);
        let dx_mid: Vec<f64> = dx.iter().zip(&dmid).map(|(p, q)| p + q).collect();

        // Attention branch.
        matmul_at_b_acc(&a.att, &dx_mid, &mut g[l.wo.clone()], t_len, d, d);
        let mut datt = vec![0.0; t_len * d];
        matmul_a_bt_acc(&dx_mid, model.slice(&l.wo), &mut datt, t_len, d, d);
        let mut dqr = vec![0.0; t_len * d];
        let mut dkr = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut dp = vec![0.0; t_len];
        for hd in 0..nh {
            let hs = |t: usize| t * d + hd * dh..t * d + (hd + 1) * dh;
            for t in 0..t_len {
                let prow = &a.probs[(hd * t_len + t) * t_len..(hd * t_len + t) * t_len + t + 1];
                let dout = &datt[hs(t)];
                let mut weighted = 0.0;
                for s in 0..=t {
                    dp[s] = dot(dout, &a.v[hs(s)]);
                    weighted += dp[s] * prow[s];
                    for (dvv, o) in dv[hs(s)].iter_mut().zip(dout) {
                        *dvv += prow[s] * o;
                    }
                }
                for s in 0..=t {
                    let ds = prow[s] * (dp[s] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for i in 0..dh {
                        dqr[t * d + hd * dh + i] += ds * a.kr[s * d + hd * dh + i];
                        dkr[s * d + hd * dh + i] += ds * a.qr[t * d + hd * dh + i];
                    }
                }
            }
        }
        for t in 0..t_len {
            for hd in 0..nh {
                let s = t * d + hd * dh..t * d + (hd + 1) * dh;
                rope.unrotate(&mut dqr[s.clone()], t);
                rope.unrotate(&mut dkr[s], t);
            }
        }
        matmul_at_b_acc(&a.h1, &dqr, &mut g[l.wq.clone()], t_len, d, d);
        matmul_at_b_acc(&a.h1, &dkr, &mut g[l.wk.clone()], t_len, d, d);
        matmul_at_b_acc(&a.h1, &dv, &mut g[l.wv.clone()], t_len, d, d);
        let mut dh1 = vec![0.0; t_len * d];
        matmul_a_bt_acc(&dqr, model.slice(&l.wq), &mut dh1, t_len, d, d);
        matmul_a_bt_acc(&dkr, model.slice(&l.wk), &mut dh1, t_len, d, d);
        matmul_a_bt_acc(&dv, model.slice(&l.wv), &mut dh1, t_len, d, d);
        let din = rms_backward(&a.x_in, &a.inv_r1, model.slice(&l.attn_norm), &dh1, &mut g[l.attn_norm.clone()], d);
        dx = dx_mid.iter().zip(&din).map(|(p, q)| p + q).collect();
    }

    for (t, &tok) in acts.tokens.iter().enumerate() {
        let start = layout.embedding.start + tok * d;
        for (gv, dv) in g[start..start + d].iter_mut().zip(&dx[t * d..(t + 1) * d]) {
            *gv += dv;
        }
    }
    g
}

/// Mean cross-entropy over positions and its gradient with respect to every
/// parameter.
pub fn loss_and_grad(
    model: &TinyLmModel,
    inputs: &[usize],
    targets: Targets<'_>,
) -> Result<(f64, Vec<f64>)> {
    if targets.len() != inputs.len() {
        return Err(TransformerError::Config(format!(
            "{} targets for {} inputs",
            targets.len(),
            inputs.len()
        )));
    }
    let acts = forward_full(model, inputs)?;
    let v = model.config().vocab_size;
    let n = inputs.len() as f64;
    let mut dlogits = vec![0.0; inputs.len() * v];
    let mut loss = 0.0;
    for t in 0..inputs.len() {
        let logits = acts.logits(t);
        let drow = &mut dlogits[t * v..(t + 1) * v];
        match targets {
            Targets::Hard(tgt) => {
                let (l, g) = cross_entropy_with_grad(logits, tgt[t]).map_err(|_| {
                    TransformerError::TokenOutOfRange {
                        token: tgt[t],
                        vocab: v,
                    }
                })?;
                loss += l;
                for (dst, gv) in drow.iter_mut().zip(g) {
                    *dst = gv / n;
                }
            }
            Targets::Soft(dist) => {
                let mut p = logits.to_vec();
                softmax_in_place(&mut p);
                for i in 0..v {
                    if dist[t][i] > 0.0 {
                        loss -= dist[t][i] * p[i].ln();
                    }
                    drow[i] = (p[i] - dist[t][i]) / n;
                }
            }
        }
    }
    let grad = backward(model, &acts, &dlogits);
    Ok((loss / n, grad))
}

/// Mean next-token loss of `seq[1..]` given its prefixes.
pub fn sequence_loss(model: &TinyLmModel, seq: &[usize]) -> Result<f64> {
    if seq.len() < 2 {
        return Err(TransformerError::StreamTooShort(seq.len()));
    }
    let acts = forward_full(model, &seq[..seq.len() - 1])?;
    let mut total = 0.0;
    for t in 0..seq.len() - 1 {
        let (l, _) = cross_entropy_with_grad(acts.logits(t), seq[t + 1]).map_err(|_| {
            TransformerError::TokenOutOfRange {
                token: seq[t + 1],
                vocab: model.config().vocab_size,
            }
        })?;
        total += l;
    }
    Ok(total / (seq.len() - 1) as f64)
}

/// Mean of [`sequence_loss`] over a batch.
pub fn batch_loss(model: &TinyLmModel, batch: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    for seq in batch {
        total += sequence_loss(model, seq)?;
    }
    Ok(total / batch.len().max(1) as f64)
}

pub(crate) fn batch_loss_and_grad(model: &TinyLmModel, batch: &[Vec<usize>]) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params().len()];
    for seq in batch {
        if seq.len() < 2 {
            return Err(TransformerError::StreamTooShort(seq.len()));
        }
        let (l, g) = loss_and_grad(model, &seq[..seq.len() - 1], Targets::Hard(&seq[1..]))?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let n = batch.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Number of parameters sampled; all of them when larger than the model.
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 256,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, analytic, finite difference)`.
    pub entries: Vec<(usize, f64, f64)>,
}

/// Largest relative error between analytic and central-difference gradients
/// of the mean batch loss, over a random parameter subset.
pub fn grad_check(model: &TinyLmModel, batch: &[Vec<usize>]) -> Result<f64> {
    grad_check_with(model, batch, &GradCheckOptions::default()).map(|r| r.max_rel_err)
}

/// Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check_with(
    model: &TinyLmModel,
    batch: &[Vec<usize>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, analytic) = batch_loss_and_grad(model, batch)?;
    let total = analytic.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut indices = sample(&mut rng, total, opts.samples.min(total)).into_vec();
    indices.sort_unstable();
    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(indices.len());
    let mut max_rel_err: f64 = 0.0;
    for idx in indices {
        let orig = probe.params()[idx];
        probe.params_mut()[idx] = orig + opts.step;
        let up = batch_loss(&probe, batch)?;
        probe.params_mut()[idx] = orig - opts.step;
        let down = batch_loss(&probe, batch)?;
        probe.params_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        max_rel_err = max_rel_err.max(rel);
        entries.push((idx, a, numeric));
    }
    Ok(GradCheckReport {
        max_rel_err,
        entries,
    })
}
