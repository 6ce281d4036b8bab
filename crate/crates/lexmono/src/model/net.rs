//! The differentiable core: a small transformer encoder with closed-form
//! backward passes for its fixed layer set.
//!
//! Everything is f64 and strictly serial, so forward, loss, and gradients
//! are bit-reproducible. Gradient correctness is pinned by finite-difference
//! tests rather than by any external framework.

use ndarray::{s, Array1, Array2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// Parameter vector layout: embeddings, embedding layernorm, then 16 tensors
// per encoder layer, then the classifier head.
const TOK: usize = 0;
const POS: usize = 1;
const LNE_G: usize = 2;
const LNE_B: usize = 3;
const PER_LAYER: usize = 16;
const WQ: usize = 0;
const BQ: usize = 1;
const WK: usize = 2;
const BK: usize = 3;
const WV: usize = 4;
const BV: usize = 5;
const WO: usize = 6;
const BO: usize = 7;
const LN1G: usize = 8;
const LN1B: usize = 9;
const W1: usize = 10;
const B1: usize = 11;
const W2: usize = 12;
const B2: usize = 13;
const LN2G: usize = 14;
const LN2B: usize = 15;

#[derive(Clone)]
pub(crate) struct Net {
    pub rows: usize,
    pub width: usize,
    pub heads: usize,
    pub params: Vec<Array2<f64>>,
    names: Vec<String>,
}

fn layer_base(r: usize) -> usize {
    4 + PER_LAYER * r
}

impl Net {
    pub fn layout(
        rows: usize,
        width: usize,
        ff: usize,
        vocab_size: usize,
        max_len: usize,
    ) -> Vec<(String, (usize, usize))> {
        let mut entries = vec![
            ("tok_emb".to_string(), (vocab_size, width)),
            ("pos_emb".to_string(), (max_len, width)),
            ("ln_e.g".to_string(), (1, width)),
            ("ln_e.b".to_string(), (1, width)),
        ];
        for r in 0..rows {
            for (name, shape) in [
                ("attn.wq", (width, width)),
                ("attn.bq", (1, width)),
                ("attn.wk", (width, width)),
                ("attn.bk", (1, width)),
                ("attn.wv", (width, width)),
                ("attn.bv", (1, width)),
                ("attn.wo", (width, width)),
                ("attn.bo", (1, width)),
                ("ln1.g", (1, width)),
                ("ln1.b", (1, width)),
                ("ffn.w1", (width, ff)),
                ("ffn.b1", (1, ff)),
                ("ffn.w2", (ff, width)),
                ("ffn.b2", (1, width)),
                ("ln2.g", (1, width)),
                ("ln2.b", (1, width)),
            ] {
                entries.push((format!("layer{}.{}", r + 1, name), shape));
            }
        }
        entries.push(("head.w".to_string(), (width, 2)));
        entries.push(("head.b".to_string(), (1, 2)));
        entries
    }

    pub fn new(
        rows: usize,
        width: usize,
        heads: usize,
        vocab_size: usize,
        max_len: usize,
        seed: u64,
    ) -> Self {
        let ff = 4 * width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = Self::layout(rows, width, ff, vocab_size, max_len);
        let mut params = Vec::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        for (name, (r, c)) in entries {
            let tensor = if name.ends_with(".g") {
                Array2::ones((r, c))
            } else if name.ends_with(".b") || name.starts_with("head.b") {
                Array2::zeros((r, c))
            } else if name.ends_with("_emb") {
                sample_uniform(&mut rng, r, c, 0.05)
            } else {
                // Xavier-uniform for weight matrices.
                let a = (6.0 / (r + c) as f64).sqrt();
                sample_uniform(&mut rng, r, c, a)
            };
            params.push(tensor);
            names.push(name);
        }
        Net {
            rows,
            width,
            heads,
            params,
            names,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn zero_like(&self) -> Vec<Array2<f64>> {
        self.params
            .iter()
            .map(|p| Array2::zeros(p.raw_dim()))
            .collect()
    }

    fn p(&self, idx: usize) -> &Array2<f64> {
        &self.params[idx]
    }

    fn lp(&self, r: usize, offset: usize) -> &Array2<f64> {
        &self.params[layer_base(r) + offset]
    }

    fn head_w(&self) -> &Array2<f64> {
        &self.params[self.params.len() - 2]
    }

    fn head_b(&self) -> &Array2<f64> {
        &self.params[self.params.len() - 1]
    }

    /// Token + position embeddings followed by layer normalization; the
    /// row-0 representation.
    pub fn embed(&self, tokens: &[usize]) -> Array2<f64> {
        let seq = tokens.len();
        let mut x = Array2::zeros((seq, self.width));
        for (i, &t) in tokens.iter().enumerate() {
            let sum = &self.p(TOK).row(t) + &self.p(POS).row(i);
            x.row_mut(i).assign(&sum);
        }
        layer_norm(&x, self.p(LNE_G), self.p(LNE_B)).0
    }

    /// One encoder layer: attention and feed-forward sublayers with residual
    /// connections and post-sublayer normalization.
    pub fn layer_forward(&self, r: usize, x: &Array2<f64>) -> Array2<f64> {
        self.layer_forward_tape(r, x).0
    }

    fn layer_forward_tape(&self, r: usize, x: &Array2<f64>) -> (Array2<f64>, LayerTape) {
        let seq = x.nrows();
        let dh = self.width / self.heads;
        let q = x.dot(self.lp(r, WQ)) + self.lp(r, BQ);
        let k = x.dot(self.lp(r, WK)) + self.lp(r, BK);
        let v = x.dot(self.lp(r, WV)) + self.lp(r, BV);

        let mut probs = Vec::with_capacity(self.heads);
        let mut ctx = Array2::zeros((seq, self.width));
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            let p = softmax_rows(&scores);
            ctx.slice_mut(cols).assign(&p.dot(&vh));
            probs.push(p);
        }
        let attn = ctx.dot(self.lp(r, WO)) + self.lp(r, BO);
        let res1 = x + &attn;
        let (h1, ln1) = layer_norm(&res1, self.lp(r, LN1G), self.lp(r, LN1B));

        let f1 = h1.dot(self.lp(r, W1)) + self.lp(r, B1);
        let g1 = f1.mapv(gelu);
        let f2 = g1.dot(self.lp(r, W2)) + self.lp(r, B2);
        let res2 = &h1 + &f2;
        let (out, ln2) = layer_norm(&res2, self.lp(r, LN2G), self.lp(r, LN2B));

        let tape = LayerTape {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            ctx,
            ln1,
            h1,
            f1,
            g1,
            ln2,
        };
        (out, tape)
    }

    /// All row representations for a sequence: index 0 is the embedding
    /// output, index r the output of encoder layer r.
    pub fn forward_rows(&self, tokens: &[usize]) -> Vec<Array2<f64>> {
        let mut rows = Vec::with_capacity(self.rows + 1);
        rows.push(self.embed(tokens));
        for r in 0..self.rows {
            let next = self.layer_forward(r, &rows[r]);
            rows.push(next);
        }
        rows
    }

    /// Recomputes everything above `start_row`, starting from a (possibly
    /// patched) row output, and returns the top-row representation.
    pub fn forward_from_row(&self, start_row: usize, x: Array2<f64>) -> Array2<f64> {
        let mut x = x;
        for r in start_row..self.rows {
            x = self.layer_forward(r, &x);
        }
        x
    }

    /// Class scores read from the top-row CLS vector (position 0).
    pub fn logits(&self, top: &Array2<f64>) -> [f64; 2] {
        let cls = top.row(0);
        let out = cls.dot(self.head_w()) + &self.head_b().row(0);
        [out[0], out[1]]
    }

    /// Full forward with intermediate tapes, for training.
    fn forward_tape(&self, tokens: &[usize]) -> ([f64; 2], ForwardTape) {
        let x0 = {
            let seq = tokens.len();
            let mut x = Array2::zeros((seq, self.width));
            for (i, &t) in tokens.iter().enumerate() {
                let sum = &self.p(TOK).row(t) + &self.p(POS).row(i);
                x.row_mut(i).assign(&sum);
            }
            x
        };
        let (e, ln_e) = layer_norm(&x0, self.p(LNE_G), self.p(LNE_B));
        let mut layers = Vec::with_capacity(self.rows);
        let mut x = e;
        for r in 0..self.rows {
            let (next, tape) = self.layer_forward_tape(r, &x);
            layers.push(tape);
            x = next;
        }
        let logits = self.logits(&x);
        let tape = ForwardTape {
            tokens: tokens.to_vec(),
            ln_e,
            layers,
            top: x,
        };
        (logits, tape)
    }

    /// Cross-entropy loss of one example (optionally class-weighted).
    pub fn loss(&self, tokens: &[usize], label_idx: usize, weight: f64) -> f64 {
        let (logits, _) = self.forward_tape(tokens);
        cross_entropy(&logits, label_idx) * weight
    }

    /// Loss and parameter gradients for one example, accumulated into
    /// `grads` (which must follow `zero_like` layout).
    pub fn loss_and_grad(
        &self,
        tokens: &[usize],
        label_idx: usize,
        weight: f64,
        grads: &mut [Array2<f64>],
    ) -> f64 {
        let (logits, tape) = self.forward_tape(tokens);
        let loss = cross_entropy(&logits, label_idx) * weight;

        // d loss / d logits = softmax − onehot, scaled by the weight.
        let probs = softmax2(&logits);
        let mut dlogits = Array2::zeros((1, 2));
        dlogits[[0, 0]] = (probs[0] - if label_idx == 0 { 1.0 } else { 0.0 }) * weight;
        dlogits[[0, 1]] = (probs[1] - if label_idx == 1 { 1.0 } else { 0.0 }) * weight;

        // Head: logits = cls · W + b.
        let cls = tape.top.row(0).insert_axis(Axis(0)).to_owned();
        let n = self.params.len();
        grads[n - 2] += &cls.t().dot(&dlogits);
        grads[n - 1] += &dlogits;
        let mut d_top = Array2::zeros(tape.top.raw_dim());
        d_top
            .row_mut(0)
            .assign(&dlogits.dot(&self.head_w().t()).row(0));

        // Encoder layers in reverse.
        let mut d_out = d_top;
        for r in (0..self.rows).rev() {
            d_out = self.layer_backward(r, &tape.layers[r], d_out, grads);
        }

        // Embedding layernorm, then scatter into the embedding tables.
        let (g_lne, rest) = grads[LNE_G..].split_first_mut().unwrap();
        let d_emb = layer_norm_backward(&d_out, &tape.ln_e, self.p(LNE_G), g_lne, &mut rest[0]);
        for (i, &t) in tape.tokens.iter().enumerate() {
            let row = d_emb.row(i);
            grads[TOK].row_mut(t).scaled_add(1.0, &row);
            grads[POS].row_mut(i).scaled_add(1.0, &row);
        }
        loss
    }

    fn layer_backward(
        &self,
        r: usize,
        tape: &LayerTape,
        d_out: Array2<f64>,
        grads: &mut [Array2<f64>],
    ) -> Array2<f64> {
        let base = layer_base(r);
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // LN2 ← out.
        let (g2, rest) = grads[base + LN2G..].split_first_mut().unwrap();
        let d_res2 = layer_norm_backward(&d_out, &tape.ln2, self.lp(r, LN2G), g2, &mut rest[0]);

        // FFN with residual: res2 = h1 + W2·gelu(W1·h1 + b1) + b2.
        let mut d_h1 = d_res2.clone();
        let d_f2 = d_res2;
        grads[base + W2] += &tape.g1.t().dot(&d_f2);
        grads[base + B2] += &sum_rows(&d_f2);
        let d_g1 = d_f2.dot(&self.lp(r, W2).t());
        let d_f1 = &d_g1 * &tape.f1.mapv(gelu_prime);
        grads[base + W1] += &tape.h1.t().dot(&d_f1);
        grads[base + B1] += &sum_rows(&d_f1);
        d_h1 += &d_f1.dot(&self.lp(r, W1).t());

        // LN1 ← h1.
        let (g1, rest) = grads[base + LN1G..].split_first_mut().unwrap();
        let d_res1 = layer_norm_backward(&d_h1, &tape.ln1, self.lp(r, LN1G), g1, &mut rest[0]);

        // Attention with residual: res1 = x + Wo·ctx + bo.
        let mut d_x = d_res1.clone();
        let d_attn = d_res1;
        grads[base + WO] += &tape.ctx.t().dot(&d_attn);
        grads[base + BO] += &sum_rows(&d_attn);
        let d_ctx = d_attn.dot(&self.lp(r, WO).t());

        let mut d_q = Array2::zeros(tape.q.raw_dim());
        let mut d_k = Array2::zeros(tape.k.raw_dim());
        let mut d_v = Array2::zeros(tape.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &tape.probs[h];
            let d_ctx_h = d_ctx.slice(cols);
            let vh = tape.v.slice(cols);
            let qh = tape.q.slice(cols);
            let kh = tape.k.slice(cols);

            let d_p = d_ctx_h.dot(&vh.t());
            d_v.slice_mut(cols).assign(&p.t().dot(&d_ctx_h));

            // Softmax backward row-wise: p ⊙ (dp − Σ dp⊙p).
            let inner = (&d_p * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_scores = p * &(&d_p - &inner);

            d_q.slice_mut(cols)
                .assign(&d_scores.dot(&kh).mapv(|x| x * scale));
            d_k.slice_mut(cols)
                .assign(&d_scores.t().dot(&qh).mapv(|x| x * scale));
        }

        grads[base + WQ] += &tape.x.t().dot(&d_q);
        grads[base + BQ] += &sum_rows(&d_q);
        grads[base + WK] += &tape.x.t().dot(&d_k);
        grads[base + BK] += &sum_rows(&d_k);
        grads[base + WV] += &tape.x.t().dot(&d_v);
        grads[base + BV] += &sum_rows(&d_v);

        d_x += &d_q.dot(&self.lp(r, WQ).t());
        d_x += &d_k.dot(&self.lp(r, WK).t());
        d_x += &d_v.dot(&self.lp(r, WV).t());
        d_x
    }
}

fn sample_uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, a: f64) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-a, a);
    Array2::from_shape_fn((r, c), |_| dist.sample(rng))
}

pub(crate) fn cross_entropy(logits: &[f64; 2], label_idx: usize) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[label_idx]
}

pub(crate) fn softmax2(logits: &[f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LnTape {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LnTape) {
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let centered = x - &mean.clone().insert_axis(Axis(1));
    let var = centered.mapv(|c| c * c).mean_axis(Axis(1)).unwrap();
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &inv_std.clone().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnTape { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    tape: &LnTape,
    g: &Array2<f64>,
    g_grad: &mut Array2<f64>,
    b_grad: &mut Array2<f64>,
) -> Array2<f64> {
    *g_grad += &sum_rows(&(dy * &tape.xhat));
    *b_grad += &sum_rows(dy);

    let dxhat = dy * g;
    let mean_dxhat = dxhat.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
    let mean_dxhat_xhat = (&dxhat * &tape.xhat)
        .mean_axis(Axis(1))
        .unwrap()
        .insert_axis(Axis(1));
    let inner = &dxhat - &mean_dxhat - &(&tape.xhat * &mean_dxhat_xhat);
    inner * &tape.inv_std.clone().insert_axis(Axis(1))
}

fn sum_rows(x: &Array2<f64>) -> Array2<f64> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|s| (s - m).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|e| e / z);
    }
    out
}

struct LayerTape {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln1: LnTape,
    h1: Array2<f64>,
    f1: Array2<f64>,
    g1: Array2<f64>,
    ln2: LnTape,
}

struct ForwardTape {
    tokens: Vec<usize>,
    ln_e: LnTape,
    layers: Vec<LayerTape>,
    top: Array2<f64>,
}

/// Adam with the usual bias correction.
pub(crate) struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &[Array2<f64>], lr: f64) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        self.t += 1;
        let (beta1, beta2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut *m)
                .and(g)
                .for_each(|m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            ndarray::Zip::from(&mut *v)
                .and(g)
                .for_each(|v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(seed: u64) -> Net {
        Net::new(2, 8, 2, 12, 10, seed)
    }

    fn tokens() -> Vec<usize> {
        vec![0, 5, 6, 1, 7, 8, 1]
    }

    /// Central finite differences over every parameter entry.
    fn finite_diff_check(net: &mut Net, tokens: &[usize], label: usize, tol: f64) {
        let mut grads = net.zero_like();
        net.loss_and_grad(tokens, label, 1.0, &mut grads);
        let h = 1e-5;
        for ti in 0..net.params.len() {
            let dim = net.params[ti].raw_dim();
            for r in 0..dim[0] {
                for c in 0..dim[1] {
                    let orig = net.params[ti][[r, c]];
                    net.params[ti][[r, c]] = orig + h;
                    let up = net.loss(tokens, label, 1.0);
                    net.params[ti][[r, c]] = orig - h;
                    let down = net.loss(tokens, label, 1.0);
                    net.params[ti][[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = grads[ti][[r, c]];
                    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        (analytic - numeric).abs() / denom <= tol,
                        "tensor {} [{},{}]: analytic {analytic} vs numeric {numeric}",
                        net.names()[ti],
                        r,
                        c
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [0, 1, 2] {
            let mut net = tiny_net(seed);
            finite_diff_check(&mut net, &tokens(), (seed % 2) as usize, 1e-3);
        }
    }

    #[test]
    fn forward_rows_and_tape_agree() {
        let net = tiny_net(3);
        let toks = tokens();
        let rows = net.forward_rows(&toks);
        assert_eq!(rows.len(), net.rows + 1);
        let (logits, _) = net.forward_tape(&toks);
        let direct = net.logits(&rows[net.rows]);
        assert_eq!(logits, direct);
    }

    #[test]
    fn forward_from_row_reproduces_full_pass() {
        let net = tiny_net(4);
        let toks = tokens();
        let rows = net.forward_rows(&toks);
        let top = net.forward_from_row(1, rows[1].clone());
        assert_eq!(net.logits(&top), net.logits(&rows[net.rows]));
    }

    #[test]
    fn cross_entropy_is_stable_for_extreme_logits() {
        assert!(cross_entropy(&[1e18, 0.0], 0).is_finite());
        assert!(cross_entropy(&[-1e18, 0.0], 1).is_finite());
        let p = softmax2(&[3.0, 3.0]);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_reduces_loss_on_fixed_example() {
        let mut net = tiny_net(5);
        let toks = tokens();
        let before = net.loss(&toks, 0, 1.0);
        let mut adam = Adam::new(&net.params, 1e-2);
        for _ in 0..25 {
            let mut grads = net.zero_like();
            net.loss_and_grad(&toks, 0, 1.0, &mut grads);
            adam.step(&mut net.params, &grads);
        }
        let after = net.loss(&toks, 0, 1.0);
        assert!(after < before * 0.1, "loss {before} -> {after}");
    }

    #[test]
    fn weighted_loss_scales_gradients() {
        let net = tiny_net(6);
        let toks = tokens();
        let mut g1 = net.zero_like();
        net.loss_and_grad(&toks, 0, 1.0, &mut g1);
        let mut g2 = net.zero_like();
        net.loss_and_grad(&toks, 0, 2.0, &mut g2);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}
