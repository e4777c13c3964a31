//! Pre-norm transformer encoder with learned positions and a GELU feed-forward.
//!
//! Every forward returns a cache; the matching backward accumulates parameter
//! gradients into an `Encoder` of zeros and returns the gradient with respect
//! to the input embedding rows, which the soft-token path needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear, LnCache};
use super::ops::{gelu, gelu_grad, softmax_in_place, EmbeddingMatrix};
use super::params::Params;
use super::tensor::{dot, Matrix, Scalar};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 4,
            ffn_width: 256,
            max_len: 40,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    /// BERT-base dimensions, for reference.
    pub fn bert_base() -> Self {
        Self {
            d: 768,
            layers: 12,
            heads: 12,
            ffn_width: 3072,
            max_len: 40,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.ffn_width == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument("encoder dimensions must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d={} not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// One input position: a hard token id or a distribution over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub enum SoftRow<T> {
    Hard(u32),
    Soft(Vec<T>),
}

#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a, T> {
    Ids(&'a [u32]),
    Rows(&'a [SoftRow<T>]),
}

impl<T> EncoderInput<'_, T> {
    pub fn len(&self) -> usize {
        match self {
            EncoderInput::Ids(ids) => ids.len(),
            EncoderInput::Rows(rows) => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder<T> {
    pub cfg: EncoderConfig,
    pub vocab_size: usize,
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    ctx: Matrix<T>,
    attn_drop: Option<Vec<T>>,
    ln2: LnCache<T>,
    b: Matrix<T>,
    u: Matrix<T>,
    act: Matrix<T>,
    ffn_drop: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    emb_drop: Option<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    ln_f: LnCache<T>,
}

fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

fn apply_mask<T: Scalar>(x: &mut Matrix<T>, mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.data.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

impl<T: Scalar> Block<T> {
    fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        Self {
            ln1: LayerNorm::new(d),
            wq: Linear::new(d, d, INIT_STD, rng),
            wk: Linear::new(d, d, INIT_STD, rng),
            wv: Linear::new(d, d, INIT_STD, rng),
            wo: Linear::new(d, d, INIT_STD, rng),
            ln2: LayerNorm::new(d),
            ff1: Linear::new(d, cfg.ffn_width, INIT_STD, rng),
            ff2: Linear::new(cfg.ffn_width, d, INIT_STD, rng),
        }
    }

    pub(crate) fn forward(
        &self,
        x: &Matrix<T>,
        heads: usize,
        dropout: f64,
        mut rng: Option<&mut (dyn rand::RngCore + 'static)>,
    ) -> (Matrix<T>, BlockCache<T>) {
        let n = x.rows;
        let d = x.cols;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();

        let (a, ln1) = self.ln1.forward(x);
        let q = self.wq.forward(&a);
        let k = self.wk.forward(&a);
        let v = self.wv.forward(&a);

        let mut ctx = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[off..off + dh];
                let row = p.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k.row(j)[off..off + dh]) * scale;
                }
                softmax_in_place(row);
            }
            for i in 0..n {
                for j in 0..n {
                    let pij = p.get(i, j);
                    let vj = &v.row(j)[off..off + dh];
                    let ci = &mut ctx.row_mut(i)[off..off + dh];
                    for (c, &vv) in ci.iter_mut().zip(vj) {
                        *c += pij * vv;
                    }
                }
            }
            probs.push(p);
        }

        let mut o = self.wo.forward(&ctx);
        let attn_drop = match (dropout > 0.0, rng.as_deref_mut()) {
            (true, Some(r)) => Some(dropout_mask(o.len(), dropout, r)),
            _ => None,
        };
        apply_mask(&mut o, &attn_drop);
        let mut h2 = x.clone();
        h2.add_assign(&o);

        let (b, ln2) = self.ln2.forward(&h2);
        let u = self.ff1.forward(&b);
        let act = u.map(gelu);
        let mut f = self.ff2.forward(&act);
        let ffn_drop = match (dropout > 0.0, rng.as_deref_mut()) {
            (true, Some(r)) => Some(dropout_mask(f.len(), dropout, r)),
            _ => None,
        };
        apply_mask(&mut f, &ffn_drop);
        h2.add_assign(&f);

        let cache = BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            ln2,
            b,
            u,
            act,
            ffn_drop,
        };
        (h2, cache)
    }

    pub(crate) fn backward(&self, c: &BlockCache<T>, dy: &Matrix<T>, heads: usize, g: &mut Block<T>) -> Matrix<T> {
        let n = dy.rows;
        let d = dy.cols;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();

        // feed-forward branch
        let mut df = dy.clone();
        apply_mask(&mut df, &c.ffn_drop);
        let dact = self.ff2.backward(&c.act, &df, &mut g.ff2);
        let mut du = dact;
        for (x, &uu) in du.data.iter_mut().zip(&c.u.data) {
            *x *= gelu_grad(uu);
        }
        let db = self.ff1.backward(&c.b, &du, &mut g.ff1);
        let mut dh2 = dy.clone();
        dh2.add_assign(&self.ln2.backward(&c.ln2, &db, &mut g.ln2));

        // attention branch
        let mut do_ = dh2.clone();
        apply_mask(&mut do_, &c.attn_drop);
        let dctx = self.wo.backward(&c.ctx, &do_, &mut g.wo);

        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for h in 0..heads {
            let off = h * dh;
            let p = &c.probs[h];
            for i in 0..n {
                let dci = &dctx.row(i)[off..off + dh];
                // dP_ij = dctx_i · v_j
                let dp: Vec<T> = (0..n).map(|j| dot(dci, &c.v.row(j)[off..off + dh])).collect();
                let pr = p.row(i);
                let s = dot(pr, &dp);
                for j in 0..n {
                    let pij = pr[j];
                    // dv_j += P_ij · dctx_i
                    let dvj = &mut dv.row_mut(j)[off..off + dh];
                    for (x, &dc) in dvj.iter_mut().zip(dci) {
                        *x += pij * dc;
                    }
                    let ds = pij * (dp[j] - s) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &c.k.row(j)[off..off + dh];
                    let dqi = &mut dq.row_mut(i)[off..off + dh];
                    for (x, &kk) in dqi.iter_mut().zip(kj) {
                        *x += ds * kk;
                    }
                    let qi = &c.q.row(i)[off..off + dh];
                    let dkj = &mut dk.row_mut(j)[off..off + dh];
                    for (x, &qq) in dkj.iter_mut().zip(qi) {
                        *x += ds * qq;
                    }
                }
            }
        }
        let mut da = self.wq.backward(&c.a, &dq, &mut g.wq);
        da.add_assign(&self.wk.backward(&c.a, &dk, &mut g.wk));
        da.add_assign(&self.wv.backward(&c.a, &dv, &mut g.wv));
        dh2.add_assign(&self.ln1.backward(&c.ln1, &da, &mut g.ln1));
        dh2
    }

    fn tensors_named(&self, prefix: &str) -> Vec<(String, &Matrix<T>)> {
        let mut v = self.ln1.tensors_named(&format!("{prefix}.ln1"));
        v.extend(self.wq.tensors_named(&format!("{prefix}.wq")));
        v.extend(self.wk.tensors_named(&format!("{prefix}.wk")));
        v.extend(self.wv.tensors_named(&format!("{prefix}.wv")));
        v.extend(self.wo.tensors_named(&format!("{prefix}.wo")));
        v.extend(self.ln2.tensors_named(&format!("{prefix}.ln2")));
        v.extend(self.ff1.tensors_named(&format!("{prefix}.ff1")));
        v.extend(self.ff2.tensors_named(&format!("{prefix}.ff2")));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = self.ln1.tensors_mut();
        v.extend(self.wq.tensors_mut());
        v.extend(self.wk.tensors_mut());
        v.extend(self.wv.tensors_mut());
        v.extend(self.wo.tensors_mut());
        v.extend(self.ln2.tensors_mut());
        v.extend(self.ff1.tensors_mut());
        v.extend(self.ff2.tensors_mut());
        v
    }
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let tok_emb = Matrix::randn(vocab_size, cfg.d, INIT_STD, rng);
        let pos_emb = Matrix::randn(cfg.max_len, cfg.d, INIT_STD, rng);
        let blocks = (0..cfg.layers).map(|_| Block::new(cfg, rng)).collect();
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(cfg.d),
        })
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    fn validate_input(&self, input: &EncoderInput<'_, T>) -> Result<()> {
        let n = input.len();
        if n == 0 {
            return Err(Error::EmptyText);
        }
        if n > self.cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.cfg.max_len,
            });
        }
        let check_id = |id: u32| {
            if (id as usize) < self.vocab_size {
                Ok(())
            } else {
                Err(Error::TokenOutOfRange {
                    id: id as usize,
                    size: self.vocab_size,
                })
            }
        };
        match input {
            EncoderInput::Ids(ids) => ids.iter().try_for_each(|&id| check_id(id)),
            EncoderInput::Rows(rows) => rows.iter().try_for_each(|r| match r {
                SoftRow::Hard(id) => check_id(*id),
                SoftRow::Soft(p) if p.len() == self.vocab_size => Ok(()),
                SoftRow::Soft(p) => Err(Error::Shape(format!(
                    "soft row of length {} for vocabulary of {}",
                    p.len(),
                    self.vocab_size
                ))),
            }),
        }
    }

    /// Token (or expected token) embedding plus position for each input row.
    fn embed(&self, input: &EncoderInput<'_, T>) -> Matrix<T> {
        let n = input.len();
        let d = self.cfg.d;
        let mut x = Matrix::zeros(n, d);
        for i in 0..n {
            let row = x.row_mut(i);
            match input {
                EncoderInput::Ids(ids) => row.copy_from_slice(self.tok_emb.row(ids[i] as usize)),
                EncoderInput::Rows(rows) => match &rows[i] {
                    SoftRow::Hard(id) => row.copy_from_slice(self.tok_emb.row(*id as usize)),
                    SoftRow::Soft(p) => {
                        for (v, &pv) in p.iter().enumerate() {
                            if pv == T::zero() {
                                continue;
                            }
                            for (o, &e) in row.iter_mut().zip(self.tok_emb.row(v)) {
                                *o += pv * e;
                            }
                        }
                    }
                },
            }
            for (o, &pe) in row.iter_mut().zip(self.pos_emb.row(i)) {
                *o += pe;
            }
        }
        x
    }

    /// Full forward. Passing `rng` enables dropout (training mode).
    pub fn forward(
        &self,
        input: EncoderInput<'_, T>,
        mut rng: Option<&mut (dyn rand::RngCore + 'static)>,
    ) -> Result<(Matrix<T>, EncoderCache<T>)> {
        self.validate_input(&input)?;
        let p = self.cfg.dropout;
        let mut x = self.embed(&input);
        let emb_drop = match (p > 0.0, rng.as_deref_mut()) {
            (true, Some(r)) => Some(dropout_mask(x.len(), p, r)),
            _ => None,
        };
        apply_mask(&mut x, &emb_drop);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, self.cfg.heads, p, rng.as_deref_mut());
            caches.push(c);
            x = y;
        }
        let (y, ln_f) = self.ln_f.forward(&x);
        Ok((
            y,
            EncoderCache {
                emb_drop,
                blocks: caches,
                ln_f,
            },
        ))
    }

    /// Inference-mode forward (dropout off).
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<EmbeddingMatrix<T>> {
        let (y, _) = self.forward(EncoderInput::Ids(ids), None)?;
        Ok(EmbeddingMatrix::all_valid(y))
    }

    /// Backward from `dy` (n×d). Accumulates into `g` and returns the gradient
    /// with respect to the summed token+position input rows.
    pub fn backward(
        &self,
        input: EncoderInput<'_, T>,
        cache: &EncoderCache<T>,
        dy: &Matrix<T>,
        g: &mut Encoder<T>,
    ) -> Matrix<T> {
        let mut dx = self.ln_f.backward(&cache.ln_f, dy, &mut g.ln_f);
        for (l, b) in self.blocks.iter().enumerate().rev() {
            dx = b.backward(&cache.blocks[l], &dx, self.cfg.heads, &mut g.blocks[l]);
        }
        apply_mask(&mut dx, &cache.emb_drop);
        let d = self.cfg.d;
        for i in 0..dx.rows {
            let dr = dx.row(i);
            for (o, &v) in g.pos_emb.row_mut(i).iter_mut().zip(dr) {
                *o += v;
            }
            let mut add_tok = |id: usize, w: T| {
                let r = &mut g.tok_emb.data[id * d..(id + 1) * d];
                for (o, &v) in r.iter_mut().zip(dr) {
                    *o += w * v;
                }
            };
            match &input {
                EncoderInput::Ids(ids) => add_tok(ids[i] as usize, T::one()),
                EncoderInput::Rows(rows) => match &rows[i] {
                    SoftRow::Hard(id) => add_tok(*id as usize, T::one()),
                    SoftRow::Soft(p) => {
                        for (v, &pv) in p.iter().enumerate() {
                            if pv != T::zero() {
                                add_tok(v, pv);
                            }
                        }
                    }
                },
            }
        }
        dx
    }

    /// `d loss / d p_v = E[v] · dx` for one soft input row.
    pub fn soft_row_grad(&self, dx_row: &[T]) -> Vec<T> {
        (0..self.vocab_size).map(|v| dot(self.tok_emb.row(v), dx_row)).collect()
    }
}

impl<T: Scalar> Params<T> for Encoder<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut v = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            v.extend(b.tensors_named(&format!("block{l}")));
        }
        v.extend(self.ln_f.tensors_named("ln_f"));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend(self.ln_f.tensors_mut());
        v
    }
}
