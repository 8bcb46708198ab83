//! A small BERT-style transformer encoder with a tied-embedding MLM head and
//! hand-written backward passes.
//!
//! Each sentence is processed at its own length. That is equivalent to
//! padding to a common length with padded keys masked out of attention,
//! since no position ever attends to padding.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::params::{slice1, slice2, view1, view2, xavier_uniform, Parameters, TensorView};
use crate::vocab::TokenId;

const LN_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error("sequence of {len} tokens exceeds the maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    Empty,
    #[error("token id {0} is outside the vocabulary")]
    BadToken(TokenId),
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg: String| Err(EncoderError::InvalidConfig(msg));
        if self.hidden == 0 || self.heads == 0 || self.ff == 0 {
            return bad("hidden, heads and ff must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.max_seq_len < 2 {
            return bad("max sequence length must be at least 2".into());
        }
        if self.vocab_size == 0 {
            return bad("empty vocabulary".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / d;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            let k = *inv;
            row.mapv_inplace(|v| v * k);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, cache: &LnCache, dy: &Array2<f64>, grads: &mut LayerNorm) -> Array2<f64> {
        grads.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grads.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            out.assign(&((&g - mean_g - &(&xh * mean_gx)) * inv));
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and returns `dx = dy Wᵀ`.
fn affine_backward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dw += &x.t().dot(dy);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1: LayerNorm,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2: LayerNorm,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    ln1: LnCache,
    h1: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ln2: LnCache,
}

impl EncoderLayer {
    fn init<R: Rng + ?Sized>(d: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            wq: xavier_uniform(d, d, rng),
            bq: Array1::zeros(d),
            wk: xavier_uniform(d, d, rng),
            bk: Array1::zeros(d),
            wv: xavier_uniform(d, d, rng),
            bv: Array1::zeros(d),
            wo: xavier_uniform(d, d, rng),
            bo: Array1::zeros(d),
            ln1: LayerNorm::new(d),
            w1: xavier_uniform(d, ff, rng),
            b1: Array1::zeros(ff),
            w2: xavier_uniform(ff, d, rng),
            b2: Array1::zeros(d),
            ln2: LayerNorm::new(d),
        }
    }

    fn zeros(d: usize, ff: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln1: LayerNorm::zeros(d),
            w1: Array2::zeros((d, ff)),
            b1: Array1::zeros(ff),
            w2: Array2::zeros((ff, d)),
            b2: Array1::zeros(d),
            ln2: LayerNorm::zeros(d),
        }
    }

    fn forward(&self, x: &Array2<f64>, heads: usize) -> (Array2<f64>, LayerCache) {
        let (n, d) = x.dim();
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = affine(x, &self.wq, &self.bq);
        let k = affine(x, &self.wk, &self.bk);
        let v = affine(x, &self.wv, &self.bv);
        let mut context = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let attn = affine(&context, &self.wo, &self.bo);
        let (h1, ln1) = self.ln1.forward(&(x + &attn));
        let ff_pre = affine(&h1, &self.w1, &self.b1);
        let ff_act = ff_pre.mapv(gelu);
        let ff_out = affine(&ff_act, &self.w2, &self.b2);
        let (out, ln2) = self.ln2.forward(&(&h1 + &ff_out));
        (
            out,
            LayerCache {
                input: x.clone(),
                q,
                k,
                v,
                probs,
                context,
                ln1,
                h1,
                ff_pre,
                ff_act,
                ln2,
            },
        )
    }

    fn backward(&self, cache: &LayerCache, d_out: &Array2<f64>, heads: usize, g: &mut Self) -> Array2<f64> {
        let d = cache.input.ncols();
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let d_r2 = self.ln2.backward(&cache.ln2, d_out, &mut g.ln2);
        let d_ff_act = affine_backward(cache.ff_act.view(), &self.w2, &d_r2, &mut g.w2, &mut g.b2);
        let d_ff_pre = &d_ff_act * &cache.ff_pre.mapv(gelu_grad);
        let d_h1 = &d_r2 + &affine_backward(cache.h1.view(), &self.w1, &d_ff_pre, &mut g.w1, &mut g.b1);

        let d_r1 = self.ln1.backward(&cache.ln1, &d_h1, &mut g.ln1);
        let d_context = affine_backward(cache.context.view(), &self.wo, &d_r1, &mut g.wo, &mut g.bo);

        let mut d_q = Array2::zeros(cache.q.raw_dim());
        let mut d_k = Array2::zeros(cache.k.raw_dim());
        let mut d_v = Array2::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dk..(h + 1) * dk];
            let d_ctx = d_context.slice(cols);
            let d_p = d_ctx.dot(&cache.v.slice(cols).t());
            d_v.slice_mut(cols).assign(&p.t().dot(&d_ctx));
            let row_dot = (&d_p * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_scores = p * &(&d_p - &row_dot) * scale;
            d_q.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
            d_k.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
        }
        let x = cache.input.view();
        let mut d_x = d_r1;
        d_x += &affine_backward(x, &self.wq, &d_q, &mut g.wq, &mut g.bq);
        d_x += &affine_backward(x, &self.wk, &d_k, &mut g.wk, &mut g.bk);
        d_x += &affine_backward(x, &self.wv, &d_v, &mut g.wv, &mut g.bv);
        d_x
    }
}

/// Encoder parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub embedding_ln: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
    pub head_ln: LayerNorm,
    /// Output bias of the tied-embedding MLM decoder.
    pub output_bias: Array1<f64>,
}

/// Forward intermediates for one sequence.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    ids: Vec<TokenId>,
    embedding_ln: LnCache,
    layers: Vec<LayerCache>,
    /// `hidden[0]` is the embedding output, `hidden[l]` the output of layer `l`.
    pub hidden: Vec<Array2<f64>>,
}

impl EncoderCache {
    pub fn final_hidden(&self) -> &Array2<f64> {
        self.hidden.last().expect("at least the embedding output")
    }
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.hidden;
        let token_embedding = xavier_uniform(config.vocab_size, d, rng);
        let position_embedding = xavier_uniform(config.max_seq_len, d, rng);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer::init(d, config.ff, rng))
            .collect();
        let head_w = xavier_uniform(d, d, rng);
        Ok(Self {
            token_embedding,
            position_embedding,
            embedding_ln: LayerNorm::new(d),
            layers,
            head_w,
            head_b: Array1::zeros(d),
            head_ln: LayerNorm::new(d),
            output_bias: Array1::zeros(config.vocab_size),
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        let d = c.hidden;
        Self {
            config: c.clone(),
            token_embedding: Array2::zeros((c.vocab_size, d)),
            position_embedding: Array2::zeros((c.max_seq_len, d)),
            embedding_ln: LayerNorm::zeros(d),
            layers: (0..c.layers).map(|_| EncoderLayer::zeros(d, c.ff)).collect(),
            head_w: Array2::zeros((d, d)),
            head_b: Array1::zeros(d),
            head_ln: LayerNorm::zeros(d),
            output_bias: Array1::zeros(c.vocab_size),
        }
    }

    pub fn forward(&self, ids: &[TokenId]) -> Result<EncoderCache, EncoderError> {
        let n = ids.len();
        if n == 0 {
            return Err(EncoderError::Empty);
        }
        if n > self.config.max_seq_len {
            return Err(EncoderError::TooLong {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        let mut emb = Array2::zeros((n, self.config.hidden));
        for (row, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(EncoderError::BadToken(id));
            }
            let mut r = emb.row_mut(row);
            r.assign(&self.token_embedding.row(id as usize));
            r += &self.position_embedding.row(row);
        }
        let (mut x, embedding_ln) = self.embedding_ln.forward(&emb);
        let mut hidden = Vec::with_capacity(self.layers.len() + 1);
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            hidden.push(x.clone());
            let (out, cache) = layer.forward(&x, self.config.heads);
            layers.push(cache);
            x = out;
        }
        hidden.push(x);
        Ok(EncoderCache {
            ids: ids.to_vec(),
            embedding_ln,
            layers,
            hidden,
        })
    }

    /// Masked-LM cross-entropy summed over `targets` (row, original id).
    /// Accumulates `scale` times the gradients of that sum into `grads` and
    /// returns `(loss_sum, scale · dloss/dfinal_hidden)`.
    pub fn mlm_loss(
        &self,
        cache: &EncoderCache,
        targets: &[(usize, TokenId)],
        scale: f64,
        grads: &mut Encoder,
    ) -> (f64, Array2<f64>) {
        let top = cache.final_hidden();
        let mut d_top = Array2::zeros(top.raw_dim());
        if targets.is_empty() {
            return (0.0, d_top);
        }
        let rows: Vec<usize> = targets.iter().map(|&(r, _)| r).collect();
        let selected = top.select(Axis(0), &rows);
        let pre = affine(&selected, &self.head_w, &self.head_b);
        let act = pre.mapv(gelu);
        let (transformed, ln_cache) = self.head_ln.forward(&act);
        let mut probs = transformed.dot(&self.token_embedding.t()) + &self.output_bias;
        softmax_rows(&mut probs);

        let mut loss = 0.0;
        let mut d_logits = probs;
        for (i, &(_, target)) in targets.iter().enumerate() {
            let p = d_logits[[i, target as usize]];
            loss -= p.max(f64::MIN_POSITIVE).ln();
            d_logits[[i, target as usize]] -= 1.0;
        }
        d_logits *= scale;

        grads.output_bias += &d_logits.sum_axis(Axis(0));
        grads.token_embedding += &d_logits.t().dot(&transformed);
        let d_transformed = d_logits.dot(&self.token_embedding);
        let d_act = self.head_ln.backward(&ln_cache, &d_transformed, &mut grads.head_ln);
        let d_pre = &d_act * &pre.mapv(gelu_grad);
        let d_selected = affine_backward(selected.view(), &self.head_w, &d_pre, &mut grads.head_w, &mut grads.head_b);
        for (i, &row) in rows.iter().enumerate() {
            let mut r = d_top.row_mut(row);
            r += &d_selected.row(i);
        }
        (loss, d_top)
    }

    /// Backpropagates `d_top` (gradient w.r.t. the final hidden states) plus
    /// an optional gradient injected at `hidden[tap]`, accumulating into
    /// `grads`.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        d_top: Array2<f64>,
        tap: Option<(usize, &Array2<f64>)>,
        grads: &mut Encoder,
    ) {
        let mut d = d_top;
        let inject = |level: usize, d: &mut Array2<f64>| {
            if let Some((t, g)) = tap {
                if t == level {
                    *d += g;
                }
            }
        };
        for (l, (layer, layer_cache)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            inject(l + 1, &mut d);
            d = layer.backward(layer_cache, &d, self.config.heads, &mut grads.layers[l]);
        }
        inject(0, &mut d);
        let d_emb = self
            .embedding_ln
            .backward(&cache.embedding_ln, &d, &mut grads.embedding_ln);
        for (row, &id) in cache.ids.iter().enumerate() {
            let g = d_emb.row(row);
            let mut tok = grads.token_embedding.row_mut(id as usize);
            tok += &g;
            let mut pos = grads.position_embedding.row_mut(row);
            pos += &g;
        }
    }

    /// Row of the token-embedding matrix.
    pub fn embedding(&self, id: TokenId) -> ArrayView1<'_, f64> {
        self.token_embedding.row(id as usize)
    }
}

impl Parameters for Encoder {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = vec![
            view2("encoder.token_embedding".into(), &self.token_embedding),
            view2("encoder.position_embedding".into(), &self.position_embedding),
            view1("encoder.embedding_ln.gamma".into(), &self.embedding_ln.gamma),
            view1("encoder.embedding_ln.beta".into(), &self.embedding_ln.beta),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("encoder.layer{i}.{s}");
            out.extend([
                view2(n("wq"), &l.wq),
                view1(n("bq"), &l.bq),
                view2(n("wk"), &l.wk),
                view1(n("bk"), &l.bk),
                view2(n("wv"), &l.wv),
                view1(n("bv"), &l.bv),
                view2(n("wo"), &l.wo),
                view1(n("bo"), &l.bo),
                view1(n("ln1.gamma"), &l.ln1.gamma),
                view1(n("ln1.beta"), &l.ln1.beta),
                view2(n("w1"), &l.w1),
                view1(n("b1"), &l.b1),
                view2(n("w2"), &l.w2),
                view1(n("b2"), &l.b2),
                view1(n("ln2.gamma"), &l.ln2.gamma),
                view1(n("ln2.beta"), &l.ln2.beta),
            ]);
        }
        out.extend([
            view2("encoder.head.w".into(), &self.head_w),
            view1("encoder.head.b".into(), &self.head_b),
            view1("encoder.head_ln.gamma".into(), &self.head_ln.gamma),
            view1("encoder.head_ln.beta".into(), &self.head_ln.beta),
            view1("encoder.output_bias".into(), &self.output_bias),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            slice2(&mut self.token_embedding),
            slice2(&mut self.position_embedding),
            slice1(&mut self.embedding_ln.gamma),
            slice1(&mut self.embedding_ln.beta),
        ];
        for l in &mut self.layers {
            out.extend([
                slice2(&mut l.wq),
                slice1(&mut l.bq),
                slice2(&mut l.wk),
                slice1(&mut l.bk),
                slice2(&mut l.wv),
                slice1(&mut l.bv),
                slice2(&mut l.wo),
                slice1(&mut l.bo),
                slice1(&mut l.ln1.gamma),
                slice1(&mut l.ln1.beta),
                slice2(&mut l.w1),
                slice1(&mut l.b1),
                slice2(&mut l.w2),
                slice1(&mut l.b2),
                slice1(&mut l.ln2.gamma),
                slice1(&mut l.ln2.beta),
            ]);
        }
        out.extend([
            slice2(&mut self.head_w),
            slice1(&mut self.head_b),
            slice1(&mut self.head_ln.gamma),
            slice1(&mut self.head_ln.beta),
            slice1(&mut self.output_bias),
        ]);
        out
    }
}
