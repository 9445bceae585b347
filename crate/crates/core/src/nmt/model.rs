//! Encoder-decoder forward and backward passes.
//!
//! Pre-norm blocks: `x + drop(sublayer(norm(x)))`, with a final norm on each
//! stack. Sources get `</s>` appended; targets are fed as `<s> y` and
//! predicted as `y </s>`.

use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::float::Float;
use super::layers::{
    apply_mask, attention, attention_backward, dropout_mask, feedforward, feedforward_backward, layer_norm,
    layer_norm_backward, linear, AttnCache, AttnGrads, AttnShape, AttnWeights, FfCache, NormCache,
};
use super::params::{AttnIdx, FfIdx, ModelParams, NormIdx};
use crate::error::{Error, Result};
use crate::vocab::{BOS_ID, EOS_ID, PAD_ID};

/// Padded id matrices for a batch of sentence pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub(crate) size: usize,
    pub(crate) src_len: usize,
    pub(crate) tgt_len: usize,
    pub(crate) src: Vec<usize>,
    pub(crate) src_lens: Vec<usize>,
    pub(crate) tgt_in: Vec<usize>,
    pub(crate) tgt_out: Vec<usize>,
    pub(crate) tgt_lens: Vec<usize>,
}

impl Batch {
    /// Builds a batch from `(source ids, target ids)` without specials.
    pub fn new(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Self> {
        Self::with_padding(pairs, 0, 0)
    }

    /// Like [`Batch::new`] but pads to at least the given lengths.
    pub fn with_padding(pairs: &[(Vec<usize>, Vec<usize>)], min_src: usize, min_tgt: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus("batch"));
        }
        let src_lens: Vec<usize> = pairs.iter().map(|(s, _)| s.len() + 1).collect();
        let tgt_lens: Vec<usize> = pairs.iter().map(|(_, t)| t.len() + 1).collect();
        let src_len = src_lens.iter().copied().max().unwrap_or(1).max(min_src);
        let tgt_len = tgt_lens.iter().copied().max().unwrap_or(1).max(min_tgt);
        let n = pairs.len();
        let mut src = vec![PAD_ID; n * src_len];
        let mut tgt_in = vec![PAD_ID; n * tgt_len];
        let mut tgt_out = vec![PAD_ID; n * tgt_len];
        for (b, (s, t)) in pairs.iter().enumerate() {
            let row = &mut src[b * src_len..];
            row[..s.len()].copy_from_slice(s);
            row[s.len()] = EOS_ID;
            let row_in = &mut tgt_in[b * tgt_len..];
            row_in[0] = BOS_ID;
            row_in[1..=t.len()].copy_from_slice(t);
            let row_out = &mut tgt_out[b * tgt_len..];
            row_out[..t.len()].copy_from_slice(t);
            row_out[t.len()] = EOS_ID;
        }
        Ok(Self {
            size: n,
            src_len,
            tgt_len,
            src,
            src_lens,
            tgt_in,
            tgt_out,
            tgt_lens,
        })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Number of predicted target tokens (including `</s>`).
    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }

    fn check(&self, src_vocab: usize, tgt_vocab: usize) -> Result<()> {
        for &id in &self.src {
            if id >= src_vocab {
                return Err(Error::IdOutOfRange { id, size: src_vocab });
            }
        }
        for &id in self.tgt_in.iter().chain(&self.tgt_out) {
            if id >= tgt_vocab {
                return Err(Error::IdOutOfRange { id, size: tgt_vocab });
            }
        }
        Ok(())
    }
}

/// Regularization used by a training forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOpts {
    pub dropout: f64,
    pub embed_dropout: bool,
    pub label_smoothing: f64,
}

/// Loss summary of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    /// Token-mean training objective (equals `nll / tokens` without label
    /// smoothing).
    pub loss: f64,
    /// Summed negative log-likelihood of the reference tokens.
    pub nll: f64,
    pub tokens: usize,
}

struct EmbedTape<F> {
    drop: Option<Array2<F>>,
}

struct EncLayerTape<F> {
    n1: Array2<F>,
    c1: NormCache<F>,
    attn: AttnCache<F>,
    r1: Option<Array2<F>>,
    n2: Array2<F>,
    c2: NormCache<F>,
    ff: FfCache<F>,
    r2: Option<Array2<F>>,
}

struct DecLayerTape<F> {
    n1: Array2<F>,
    c1: NormCache<F>,
    self_attn: AttnCache<F>,
    r1: Option<Array2<F>>,
    n2: Array2<F>,
    c2: NormCache<F>,
    cross: AttnCache<F>,
    r2: Option<Array2<F>>,
    n3: Array2<F>,
    c3: NormCache<F>,
    ff: FfCache<F>,
    r3: Option<Array2<F>>,
}

pub(crate) struct Encoded<F> {
    pub memory: Array2<F>,
    emb: EmbedTape<F>,
    layers: Vec<EncLayerTape<F>>,
    norm: NormCache<F>,
}

struct Decoded<F> {
    out: Array2<F>,
    emb: EmbedTape<F>,
    layers: Vec<DecLayerTape<F>>,
    norm: NormCache<F>,
}

fn attn_weights<F: Float>(t: &[Array2<F>], i: AttnIdx) -> AttnWeights<'_, F> {
    AttnWeights {
        wq: &t[i.wq],
        bq: &t[i.bq],
        wk: &t[i.wk],
        bk: &t[i.bk],
        wv: &t[i.wv],
        bv: &t[i.bv],
        wo: &t[i.wo],
        bo: &t[i.bo],
    }
}

fn attn_grads<F: Float>(g: &mut [Array2<F>], i: AttnIdx) -> AttnGrads<'_, F> {
    let [wq, bq, wk, bk, wv, bv, wo, bo] = g
        .get_disjoint_mut([i.wq, i.bq, i.wk, i.bk, i.wv, i.bv, i.wo, i.bo])
        .expect("distinct attention tensors");
    AttnGrads {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

fn norm_fwd<F: Float>(t: &[Array2<F>], i: NormIdx, x: &Array2<F>) -> (Array2<F>, NormCache<F>) {
    layer_norm(x, &t[i.gain], &t[i.bias])
}

fn norm_bwd<F: Float>(
    t: &[Array2<F>],
    g: &mut [Array2<F>],
    i: NormIdx,
    c: &NormCache<F>,
    dy: &Array2<F>,
) -> Array2<F> {
    let [gg, gb] = g.get_disjoint_mut([i.gain, i.bias]).expect("distinct norm tensors");
    layer_norm_backward(c, &t[i.gain], dy, gg, gb)
}

fn ff_fwd<F: Float>(
    t: &[Array2<F>],
    i: FfIdx,
    x: &Array2<F>,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> (Array2<F>, FfCache<F>) {
    feedforward(x, &t[i.w1], &t[i.b1], &t[i.w2], &t[i.b2], p, rng)
}

fn ff_bwd<F: Float>(
    t: &[Array2<F>],
    g: &mut [Array2<F>],
    i: FfIdx,
    x: &Array2<F>,
    c: &FfCache<F>,
    dy: &Array2<F>,
) -> Array2<F> {
    let [gw1, gb1, gw2, gb2] = g.get_disjoint_mut([i.w1, i.b1, i.w2, i.b2]).expect("distinct ff tensors");
    feedforward_backward(x, &t[i.w1], &t[i.w2], c, dy, gw1, gb1, gw2, gb2)
}

fn embed<F: Float>(
    table: &Array2<F>,
    ids: &[usize],
    len: usize,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> (Array2<F>, EmbedTape<F>) {
    let d = table.ncols();
    let scale = F::of((d as f64).sqrt());
    let pe = super::layers::positional_encoding::<F>(len, d);
    let mut x = Array2::zeros((ids.len(), d));
    for (r, (mut row, &id)) in x.rows_mut().into_iter().zip(ids).enumerate() {
        row.assign(&table.row(id));
        row *= scale;
        row += &pe.row(r % len);
    }
    let drop = dropout_mask(x.dim(), p, rng);
    apply_mask(&mut x, &drop);
    (x, EmbedTape { drop })
}

fn embed_backward<F: Float>(grad: &mut Array2<F>, ids: &[usize], tape: &EmbedTape<F>, dx: &Array2<F>) {
    let scale = F::of((grad.ncols() as f64).sqrt());
    let mut dx = dx.clone();
    apply_mask(&mut dx, &tape.drop);
    for (row, &id) in dx.rows().into_iter().zip(ids) {
        if id == PAD_ID {
            continue;
        }
        let mut g = grad.row_mut(id);
        g.scaled_add(scale, &row);
    }
}

fn residual<F: Float>(x: &Array2<F>, mut f: Array2<F>, p: f64, rng: Option<&mut ChaCha8Rng>) -> (Array2<F>, Option<Array2<F>>) {
    let drop = dropout_mask(f.dim(), p, rng);
    apply_mask(&mut f, &drop);
    f += x;
    (f, drop)
}

impl<F: Float> ModelParams<F> {
    pub(crate) fn encode_ids(
        &self,
        src: &[usize],
        src_lens: &[usize],
        src_len: usize,
        opts: &ForwardOpts,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Encoded<F> {
        let t = &self.tensors;
        let l = &self.layout;
        let batch = src_lens.len();
        let p = opts.dropout;
        let p_emb = if opts.embed_dropout { p } else { 0.0 };
        let (mut x, emb) = embed(&t[l.src_emb], src, src_len, p_emb, rng.as_deref_mut());
        let shape = AttnShape {
            batch,
            len_q: src_len,
            len_k: src_len,
            key_lens: src_lens,
            causal: false,
            heads: self.hyper.heads,
        };
        let mut layers = Vec::with_capacity(l.enc.len());
        for li in &l.enc {
            let (n1, c1) = norm_fwd(t, li.norm1, &x);
            let (a, attn) = attention(&n1, &n1, &attn_weights(t, li.attn), shape, p, rng.as_deref_mut());
            let (x1, r1) = residual(&x, a, p, rng.as_deref_mut());
            let (n2, c2) = norm_fwd(t, li.norm2, &x1);
            let (f, ff) = ff_fwd(t, li.ff, &n2, p, rng.as_deref_mut());
            let (x2, r2) = residual(&x1, f, p, rng.as_deref_mut());
            layers.push(EncLayerTape {
                n1,
                c1,
                attn,
                r1,
                n2,
                c2,
                ff,
                r2,
            });
            x = x2;
        }
        let (memory, norm) = norm_fwd(t, l.enc_norm, &x);
        Encoded {
            memory,
            emb,
            layers,
            norm,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_ids(
        &self,
        memory: &Array2<F>,
        src_lens: &[usize],
        src_len: usize,
        tgt_in: &[usize],
        tgt_lens: &[usize],
        tgt_len: usize,
        opts: &ForwardOpts,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Decoded<F> {
        let t = &self.tensors;
        let l = &self.layout;
        let batch = tgt_lens.len();
        let p = opts.dropout;
        let p_emb = if opts.embed_dropout { p } else { 0.0 };
        let (mut x, emb) = embed(&t[l.tgt_emb], tgt_in, tgt_len, p_emb, rng.as_deref_mut());
        let self_shape = AttnShape {
            batch,
            len_q: tgt_len,
            len_k: tgt_len,
            key_lens: tgt_lens,
            causal: true,
            heads: self.hyper.heads,
        };
        let cross_shape = AttnShape {
            batch,
            len_q: tgt_len,
            len_k: src_len,
            key_lens: src_lens,
            causal: false,
            heads: self.hyper.heads,
        };
        let mut layers = Vec::with_capacity(l.dec.len());
        for li in &l.dec {
            let (n1, c1) = norm_fwd(t, li.norm1, &x);
            let (a, self_attn) = attention(
                &n1,
                &n1,
                &attn_weights(t, li.self_attn),
                self_shape,
                p,
                rng.as_deref_mut(),
            );
            let (x1, r1) = residual(&x, a, p, rng.as_deref_mut());
            let (n2, c2) = norm_fwd(t, li.norm2, &x1);
            let (c, cross) = attention(
                &n2,
                memory,
                &attn_weights(t, li.cross_attn),
                cross_shape,
                p,
                rng.as_deref_mut(),
            );
            let (x2, r2) = residual(&x1, c, p, rng.as_deref_mut());
            let (n3, c3) = norm_fwd(t, li.norm3, &x2);
            let (f, ff) = ff_fwd(t, li.ff, &n3, p, rng.as_deref_mut());
            let (x3, r3) = residual(&x2, f, p, rng.as_deref_mut());
            layers.push(DecLayerTape {
                n1,
                c1,
                self_attn,
                r1,
                n2,
                c2,
                cross,
                r2,
                n3,
                c3,
                ff,
                r3,
            });
            x = x3;
        }
        let (out, norm) = norm_fwd(t, l.dec_norm, &x);
        Decoded {
            out,
            emb,
            layers,
            norm,
        }
    }

    /// Loss and parameter gradients for one batch. Dropout is active only
    /// when `rng` is given.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        opts: &ForwardOpts,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossStats, Vec<Array2<F>>)> {
        let (stats, grads) = self.run(batch, opts, rng, true)?;
        Ok((stats, grads.expect("gradients requested")))
    }

    /// Loss without gradients or dropout.
    pub fn batch_loss(&self, batch: &Batch, opts: &ForwardOpts) -> Result<LossStats> {
        Ok(self.run(batch, opts, None, false)?.0)
    }

    /// Loss with dropout drawn from `rng` and no gradients.
    #[cfg(test)]
    pub(crate) fn batch_loss_with(&self, batch: &Batch, opts: &ForwardOpts, rng: &mut ChaCha8Rng) -> Result<LossStats> {
        Ok(self.run(batch, opts, Some(rng), false)?.0)
    }

    fn run(
        &self,
        batch: &Batch,
        opts: &ForwardOpts,
        mut rng: Option<&mut ChaCha8Rng>,
        backward: bool,
    ) -> Result<(LossStats, Option<Vec<Array2<F>>>)> {
        batch.check(self.hyper.src_vocab, self.hyper.tgt_vocab)?;
        let t = &self.tensors;
        let l = &self.layout;
        let enc = self.encode_ids(&batch.src, &batch.src_lens, batch.src_len, opts, rng.as_deref_mut());
        let dec = self.decode_ids(
            &enc.memory,
            &batch.src_lens,
            batch.src_len,
            &batch.tgt_in,
            &batch.tgt_lens,
            batch.tgt_len,
            opts,
            rng,
        );

        let rows: Vec<usize> = (0..batch.tgt_out.len())
            .filter(|&r| r % batch.tgt_len < batch.tgt_lens[r / batch.tgt_len])
            .collect();
        let h = dec.out.select(Axis(0), &rows);
        let mut logits = linear(&h, &t[l.out_w], &t[l.out_b]);
        let v = logits.ncols();
        let eps = opts.label_smoothing;
        let n = rows.len();
        let mut objective = 0.0;
        let mut nll = 0.0;
        for (mut row, &r) in logits.rows_mut().into_iter().zip(&rows) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|z| z - max);
            let lse = row.iter().map(|&z| z.exp()).sum::<F>().ln();
            row.mapv_inplace(|z| z - lse);
            let gold = batch.tgt_out[r];
            let lp_gold = row[gold].as_f64();
            nll -= lp_gold;
            objective -= if eps > 0.0 {
                let mean_lp = row.sum().as_f64() / v as f64;
                (1.0 - eps) * lp_gold + eps * mean_lp
            } else {
                lp_gold
            };
        }
        let stats = LossStats {
            loss: objective / n as f64,
            nll,
            tokens: n,
        };
        if !backward {
            return Ok((stats, None));
        }

        // logits now hold log-probabilities; dL/dz = (p - q) / n
        let inv_n = F::of(1.0 / n as f64);
        let off = F::of(eps / v as f64);
        let on = F::of(1.0 - eps);
        let mut dlogits = logits;
        for (mut row, &r) in dlogits.rows_mut().into_iter().zip(&rows) {
            row.mapv_inplace(|lp| (lp.exp() - off) * inv_n);
            row[batch.tgt_out[r]] -= on * inv_n;
        }

        let mut g: Vec<Array2<F>> = t.iter().map(|x| Array2::zeros(x.dim())).collect();
        let dh = {
            let [gw, gb] = g.get_disjoint_mut([l.out_w, l.out_b]).expect("distinct output tensors");
            super::layers::linear_backward(&h, &t[l.out_w], &dlogits, gw, gb)
        };
        let mut dout = Array2::zeros(dec.out.dim());
        for (i, &r) in rows.iter().enumerate() {
            dout.row_mut(r).assign(&dh.row(i));
        }

        // decoder
        let mut dx = norm_bwd(t, &mut g, l.dec_norm, &dec.norm, &dout);
        let mut dmem = Array2::zeros(enc.memory.dim());
        let self_shape = AttnShape {
            batch: batch.size,
            len_q: batch.tgt_len,
            len_k: batch.tgt_len,
            key_lens: &batch.tgt_lens,
            causal: true,
            heads: self.hyper.heads,
        };
        let cross_shape = AttnShape {
            batch: batch.size,
            len_q: batch.tgt_len,
            len_k: batch.src_len,
            key_lens: &batch.src_lens,
            causal: false,
            heads: self.hyper.heads,
        };
        for (li, tape) in l.dec.iter().zip(&dec.layers).rev() {
            let mut df = dx.clone();
            apply_mask(&mut df, &tape.r3);
            let dn3 = ff_bwd(t, &mut g, li.ff, &tape.n3, &tape.ff, &df);
            dx += &norm_bwd(t, &mut g, li.norm3, &tape.c3, &dn3);

            let mut dc = dx.clone();
            apply_mask(&mut dc, &tape.r2);
            let (dn2, dm) = attention_backward(
                &tape.n2,
                &enc.memory,
                &attn_weights(t, li.cross_attn),
                attn_grads(&mut g, li.cross_attn),
                cross_shape,
                &tape.cross,
                &dc,
            );
            dmem += &dm;
            dx += &norm_bwd(t, &mut g, li.norm2, &tape.c2, &dn2);

            let mut da = dx.clone();
            apply_mask(&mut da, &tape.r1);
            let (dq, dkv) = attention_backward(
                &tape.n1,
                &tape.n1,
                &attn_weights(t, li.self_attn),
                attn_grads(&mut g, li.self_attn),
                self_shape,
                &tape.self_attn,
                &da,
            );
            let dn1 = dq + dkv;
            dx += &norm_bwd(t, &mut g, li.norm1, &tape.c1, &dn1);
        }
        embed_backward(&mut g[l.tgt_emb], &batch.tgt_in, &dec.emb, &dx);

        // encoder
        let mut dx = norm_bwd(t, &mut g, l.enc_norm, &enc.norm, &dmem);
        let enc_shape = AttnShape {
            batch: batch.size,
            len_q: batch.src_len,
            len_k: batch.src_len,
            key_lens: &batch.src_lens,
            causal: false,
            heads: self.hyper.heads,
        };
        for (li, tape) in l.enc.iter().zip(&enc.layers).rev() {
            let mut df = dx.clone();
            apply_mask(&mut df, &tape.r2);
            let dn2 = ff_bwd(t, &mut g, li.ff, &tape.n2, &tape.ff, &df);
            dx += &norm_bwd(t, &mut g, li.norm2, &tape.c2, &dn2);

            let mut da = dx.clone();
            apply_mask(&mut da, &tape.r1);
            let (dq, dkv) = attention_backward(
                &tape.n1,
                &tape.n1,
                &attn_weights(t, li.attn),
                attn_grads(&mut g, li.attn),
                enc_shape,
                &tape.attn,
                &da,
            );
            let dn1 = dq + dkv;
            dx += &norm_bwd(t, &mut g, li.norm1, &tape.c1, &dn1);
        }
        embed_backward(&mut g[l.src_emb], &batch.src, &enc.emb, &dx);
        Ok((stats, Some(g)))
    }

    /// Next-token log-probabilities after each prefix. All prefixes share
    /// one encoded source (`memory` rows for a single sentence).
    pub(crate) fn next_log_probs(&self, memory: &Array2<F>, src_len: usize, prefixes: &[Vec<usize>]) -> Array2<F> {
        let n = prefixes.len();
        let len = prefixes.iter().map(Vec::len).max().unwrap_or(1);
        let mut ids = vec![PAD_ID; n * len];
        for (b, p) in prefixes.iter().enumerate() {
            ids[b * len..b * len + p.len()].copy_from_slice(p);
        }
        let lens: Vec<usize> = prefixes.iter().map(Vec::len).collect();
        let mem = ndarray::concatenate(Axis(0), &vec![memory.view(); n]).expect("equal widths");
        let src_lens = vec![src_len; n];
        let dec = self.decode_ids(&mem, &src_lens, src_len, &ids, &lens, len, &ForwardOpts::default(), None);
        let last: Vec<usize> = lens.iter().enumerate().map(|(b, &k)| b * len + k - 1).collect();
        let h = dec.out.select(Axis(0), &last);
        let mut logits = linear(&h, &self.tensors[self.layout.out_w], &self.tensors[self.layout.out_b]);
        for mut row in logits.rows_mut() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
            row.mapv_inplace(|z| z - lse);
        }
        logits
    }

    /// Encodes one source sentence (without the trailing `</s>`).
    pub(crate) fn encode_sentence(&self, src: &[usize]) -> Result<(Array2<F>, usize)> {
        let mut ids = src.to_vec();
        ids.push(EOS_ID);
        for &id in &ids {
            if id >= self.hyper.src_vocab {
                return Err(Error::IdOutOfRange {
                    id,
                    size: self.hyper.src_vocab,
                });
            }
        }
        let len = ids.len();
        let enc = self.encode_ids(&ids, &[len], len, &ForwardOpts::default(), None);
        Ok((enc.memory, len))
    }

    /// Full next-token distributions at every target position (teacher
    /// forcing), one row per position of `tgt_in = <s> y`.
    pub fn position_log_probs(&self, src: &[usize], tgt: &[usize]) -> Result<Array2<F>> {
        let batch = Batch::new(&[(src.to_vec(), tgt.to_vec())])?;
        batch.check(self.hyper.src_vocab, self.hyper.tgt_vocab)?;
        let opts = ForwardOpts::default();
        let enc = self.encode_ids(&batch.src, &batch.src_lens, batch.src_len, &opts, None);
        let dec = self.decode_ids(
            &enc.memory,
            &batch.src_lens,
            batch.src_len,
            &batch.tgt_in,
            &batch.tgt_lens,
            batch.tgt_len,
            &opts,
            None,
        );
        let mut logits = linear(&dec.out, &self.tensors[self.layout.out_w], &self.tensors[self.layout.out_b]);
        for mut row in logits.rows_mut() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
            row.mapv_inplace(|z| z - lse);
        }
        Ok(logits)
    }
}

/// Rng used for dropout at a given update.
pub(crate) fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    crate::rng::derived_rng(seed, &[0xd20f, step])
}
