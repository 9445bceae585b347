//! Forward/backward primitives on row-major activations of shape
//! `(batch * len, D)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::float::Float;

pub(crate) const LN_EPS: f64 = 1e-6;

pub(crate) fn linear<F: Float>(x: &Array2<F>, w: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let mut y = x.dot(w);
    y += &b.row(0);
    y
}

/// Accumulates parameter gradients and returns the input gradient.
pub(crate) fn linear_backward<F: Float>(
    x: &Array2<F>,
    w: &Array2<F>,
    dy: &Array2<F>,
    gw: &mut Array2<F>,
    gb: &mut Array2<F>,
) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), dy, F::one(), gw);
    let mut row = gb.row_mut(0);
    row += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub(crate) struct NormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

pub(crate) fn layer_norm<F: Float>(x: &Array2<F>, g: &Array2<F>, b: &Array2<F>) -> (Array2<F>, NormCache<F>) {
    let d = F::of(x.ncols() as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *is = F::one() / (var + eps).sqrt();
        row *= *is;
    }
    let mut y = &xhat * &g.row(0);
    y += &b.row(0);
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<F: Float>(
    cache: &NormCache<F>,
    g: &Array2<F>,
    dy: &Array2<F>,
    gg: &mut Array2<F>,
    gb: &mut Array2<F>,
) -> Array2<F> {
    let d = F::of(dy.ncols() as f64);
    {
        let mut row = gg.row_mut(0);
        row += &(dy * &cache.xhat).sum_axis(Axis(0));
    }
    {
        let mut row = gb.row_mut(0);
        row += &dy.sum_axis(Axis(0));
    }
    let mut dx = dy * &g.row(0);
    for ((mut row, xh), &is) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / d;
        Zip::from(&mut row).and(&xh).for_each(|v, &h| *v = (*v - mean_d - h * mean_dx) * is);
    }
    dx
}

/// Inverted-dropout mask: entries are 0 or `1/(1-p)`. `None` when inactive.
pub(crate) fn dropout_mask<F: Float, R: Rng + ?Sized>(
    shape: (usize, usize),
    p: f64,
    rng: Option<&mut R>,
) -> Option<Array2<F>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = F::of(1.0 / (1.0 - p));
    Some(Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    }))
}

pub(crate) fn apply_mask<F: Float>(x: &mut Array2<F>, mask: &Option<Array2<F>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

/// Key visibility for one attention call.
#[derive(Clone, Copy)]
pub(crate) struct AttnShape<'a> {
    pub batch: usize,
    pub len_q: usize,
    pub len_k: usize,
    /// Valid key count per batch row; keys beyond it are padding.
    pub key_lens: &'a [usize],
    pub causal: bool,
    pub heads: usize,
}

pub(crate) struct AttnWeights<'a, F> {
    pub wq: &'a Array2<F>,
    pub bq: &'a Array2<F>,
    pub wk: &'a Array2<F>,
    pub bk: &'a Array2<F>,
    pub wv: &'a Array2<F>,
    pub bv: &'a Array2<F>,
    pub wo: &'a Array2<F>,
    pub bo: &'a Array2<F>,
}

pub(crate) struct AttnGrads<'a, F> {
    pub wq: &'a mut Array2<F>,
    pub bq: &'a mut Array2<F>,
    pub wk: &'a mut Array2<F>,
    pub bk: &'a mut Array2<F>,
    pub wv: &'a mut Array2<F>,
    pub bv: &'a mut Array2<F>,
    pub wo: &'a mut Array2<F>,
    pub bo: &'a mut Array2<F>,
}

pub(crate) struct AttnCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Softmax output per (batch, head).
    probs: Vec<Array2<F>>,
    drops: Vec<Option<Array2<F>>>,
    ctx: Array2<F>,
}

fn block<F>(x: &Array2<F>, b: usize, len: usize, h: usize, dh: usize) -> ArrayView2<'_, F> {
    x.slice(s![b * len..(b + 1) * len, h * dh..(h + 1) * dh])
}

/// Multi-head attention. `xq` supplies queries, `xkv` keys and values.
pub(crate) fn attention<F: Float, R: Rng + ?Sized>(
    xq: &Array2<F>,
    xkv: &Array2<F>,
    w: &AttnWeights<'_, F>,
    shape: AttnShape<'_>,
    p_drop: f64,
    mut rng: Option<&mut R>,
) -> (Array2<F>, AttnCache<F>) {
    let q = linear(xq, w.wq, w.bq);
    let k = linear(xkv, w.wk, w.bk);
    let v = linear(xkv, w.wv, w.bv);
    let d = q.ncols();
    let dh = d / shape.heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut ctx = Array2::zeros((shape.batch * shape.len_q, d));
    let mut probs = Vec::with_capacity(shape.batch * shape.heads);
    let mut drops = Vec::with_capacity(shape.batch * shape.heads);
    for b in 0..shape.batch {
        let klen = shape.key_lens[b];
        for h in 0..shape.heads {
            let qb = block(&q, b, shape.len_q, h, dh);
            let kb = block(&k, b, shape.len_k, h, dh);
            let vb = block(&v, b, shape.len_k, h, dh);
            let mut sc = qb.dot(&kb.t());
            for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                let visible = if shape.causal { klen.min(i + 1) } else { klen };
                let visible = visible.max(1);
                let mut max = F::neg_infinity();
                for (j, x) in row.iter_mut().enumerate() {
                    if j < visible {
                        *x *= scale;
                        if *x > max {
                            max = *x;
                        }
                    }
                }
                let mut sum = F::zero();
                for (j, x) in row.iter_mut().enumerate() {
                    if j < visible {
                        *x = (*x - max).exp();
                        sum += *x;
                    } else {
                        *x = F::zero();
                    }
                }
                row /= sum;
            }
            let mask = dropout_mask::<F, R>(sc.dim(), p_drop, rng.as_deref_mut());
            let out = match &mask {
                Some(m) => (&sc * m).dot(&vb),
                None => sc.dot(&vb),
            };
            ctx.slice_mut(s![b * shape.len_q..(b + 1) * shape.len_q, h * dh..(h + 1) * dh])
                .assign(&out);
            probs.push(sc);
            drops.push(mask);
        }
    }
    let y = linear(&ctx, w.wo, w.bo);
    (
        y,
        AttnCache {
            q,
            k,
            v,
            probs,
            drops,
            ctx,
        },
    )
}

/// Returns `(dxq, dxkv)`.
pub(crate) fn attention_backward<F: Float>(
    xq: &Array2<F>,
    xkv: &Array2<F>,
    w: &AttnWeights<'_, F>,
    g: AttnGrads<'_, F>,
    shape: AttnShape<'_>,
    cache: &AttnCache<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    let dctx = linear_backward(&cache.ctx, w.wo, dy, g.wo, g.bo);
    let d = cache.q.ncols();
    let dh = d / shape.heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let idx = b * shape.heads + h;
            let p = &cache.probs[idx];
            let qrows = s![b * shape.len_q..(b + 1) * shape.len_q, h * dh..(h + 1) * dh];
            let krows = s![b * shape.len_k..(b + 1) * shape.len_k, h * dh..(h + 1) * dh];
            let dout = dctx.slice(qrows);
            let vb = block(&cache.v, b, shape.len_k, h, dh);
            let kb = block(&cache.k, b, shape.len_k, h, dh);
            let qb = block(&cache.q, b, shape.len_q, h, dh);
            let mut dp = dout.dot(&vb.t());
            match &cache.drops[idx] {
                Some(m) => {
                    let pd = p * m;
                    dv.slice_mut(krows).assign(&pd.t().dot(&dout));
                    dp *= m;
                }
                None => dv.slice_mut(krows).assign(&p.t().dot(&dout)),
            }
            // softmax backward, then the 1/sqrt(dh) scale
            for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<F>();
                Zip::from(&mut drow).and(&prow).for_each(|x, &pp| *x = pp * (*x - dot) * scale);
            }
            dq.slice_mut(qrows).assign(&dp.dot(&kb));
            dk.slice_mut(krows).assign(&dp.t().dot(&qb));
        }
    }
    let dxq = linear_backward(xq, w.wq, &dq, g.wq, g.bq);
    let mut dxkv = linear_backward(xkv, w.wk, &dk, g.wk, g.bk);
    dxkv += &linear_backward(xkv, w.wv, &dv, g.wv, g.bv);
    (dxq, dxkv)
}

pub(crate) struct FfCache<F> {
    pre: Array2<F>,
    act: Array2<F>,
    drop: Option<Array2<F>>,
}

pub(crate) fn feedforward<F: Float, R: Rng + ?Sized>(
    x: &Array2<F>,
    w1: &Array2<F>,
    b1: &Array2<F>,
    w2: &Array2<F>,
    b2: &Array2<F>,
    p_drop: f64,
    rng: Option<&mut R>,
) -> (Array2<F>, FfCache<F>) {
    let pre = linear(x, w1, b1);
    let mut act = pre.mapv(|v| v.max(F::zero()));
    let drop = dropout_mask::<F, R>(act.dim(), p_drop, rng);
    apply_mask(&mut act, &drop);
    let y = linear(&act, w2, b2);
    (y, FfCache { pre, act, drop })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn feedforward_backward<F: Float>(
    x: &Array2<F>,
    w1: &Array2<F>,
    w2: &Array2<F>,
    cache: &FfCache<F>,
    dy: &Array2<F>,
    gw1: &mut Array2<F>,
    gb1: &mut Array2<F>,
    gw2: &mut Array2<F>,
    gb2: &mut Array2<F>,
) -> Array2<F> {
    let mut dact = linear_backward(&cache.act, w2, dy, gw2, gb2);
    apply_mask(&mut dact, &cache.drop);
    Zip::from(&mut dact)
        .and(&cache.pre)
        .for_each(|d, &p| {
            if p <= F::zero() {
                *d = F::zero();
            }
        });
    linear_backward(x, w1, &dact, gw1, gb1)
}

/// Fixed sinusoidal position table, `len × d`.
pub(crate) fn positional_encoding<F: Float>(len: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 / rate;
        F::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = derived_rng(seed, &[]);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = rand_mat(5, 8, 1);
        let (y, _) = layer_norm(&x, &Array2::ones((1, 8)), &Array2::zeros((1, 8)));
        for row in y.rows() {
            assert!(row.mean().unwrap().abs() < 1e-12);
            let var = row.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn attention_rows_are_distributions_and_respect_masks() {
        let x = rand_mat(2 * 4, 8, 2);
        let w: Vec<Array2<f64>> = (0..4).map(|i| rand_mat(8, 8, 10 + i)).collect();
        let z = Array2::zeros((1, 8));
        let weights = AttnWeights {
            wq: &w[0],
            bq: &z,
            wk: &w[1],
            bk: &z,
            wv: &w[2],
            bv: &z,
            wo: &w[3],
            bo: &z,
        };
        let lens = [4, 2];
        let shape = AttnShape {
            batch: 2,
            len_q: 4,
            len_k: 4,
            key_lens: &lens,
            causal: true,
            heads: 2,
        };
        let (_, cache) = attention::<f64, ChaCha8Rng>(&x, &x, &weights, shape, 0.0, None);
        for (idx, p) in cache.probs.iter().enumerate() {
            let klen = lens[idx / 2];
            for (i, row) in p.rows().into_iter().enumerate() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                for (j, &v) in row.iter().enumerate() {
                    if j > i || j >= klen {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut rng = derived_rng(3, &[]);
        let m: Array2<f64> = dropout_mask((100, 100), 0.25, Some(&mut rng)).unwrap();
        let kept = m.iter().filter(|&&v| v > 0.0).count() as f64 / 1e4;
        assert!((kept - 0.75).abs() < 0.03);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        assert!(dropout_mask::<f64, ChaCha8Rng>((2, 2), 0.5, None).is_none());
    }

    #[test]
    fn positional_encoding_first_row() {
        let pe: Array2<f64> = positional_encoding(3, 4);
        assert_eq!(pe.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[[1, 2]] - (0.01f64).sin()).abs() < 1e-15);
    }
}
