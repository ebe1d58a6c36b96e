//! Variable-length packing and segment-local multi-head self-attention.
//!
//! Inputs with different token counts `N_1..N_b` are concatenated into one
//! `[ΣN_i, C]` matrix with cumulative `offsets` (`offsets[0] = 0`,
//! `offsets[b] = ΣN_i`). Attention is then evaluated per segment, so tokens
//! of one input never see tokens of another.

use ndarray::{s, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rayon::prelude::*;

use crate::error::{OryxError, Result};
use crate::init::SeededRng;
use crate::nn::{join, Gradients, Linear, Parameterized};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch<T> {
    /// `[ΣN_i, C]`; the leading unit batch axis is implicit.
    pub tokens: Array2<T>,
    /// `b + 1` cumulative offsets.
    pub offsets: Vec<usize>,
}

impl<T: Scalar> PackedBatch<T> {
    pub fn num_segments(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn channels(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn segment(&self, i: usize) -> ArrayView2<'_, T> {
        self.tokens.slice(s![self.offsets[i]..self.offsets[i + 1], ..])
    }

    /// Checks the offset invariants against the token matrix.
    pub fn validate(&self) -> Result<()> {
        let offs = &self.offsets;
        if offs.len() < 2 {
            return Err(OryxError::Integrity(format!(
                "need at least two offsets, found {}",
                offs.len()
            )));
        }
        if offs[0] != 0 {
            return Err(OryxError::Integrity(format!("offsets[0] = {} (expected 0)", offs[0])));
        }
        if let Some(k) = offs.windows(2).position(|w| w[1] <= w[0]) {
            return Err(OryxError::Integrity(format!(
                "offsets not strictly increasing at {k}: {} -> {}",
                offs[k],
                offs[k + 1]
            )));
        }
        let last = *offs.last().expect("len >= 2");
        if last != self.tokens.nrows() {
            return Err(OryxError::Integrity(format!(
                "offsets end at {last} but {} tokens are packed",
                self.tokens.nrows()
            )));
        }
        Ok(())
    }
}

pub fn pack<T: Scalar>(sequences: &[ArrayView2<'_, T>]) -> Result<PackedBatch<T>> {
    let first = sequences
        .first()
        .ok_or_else(|| OryxError::invalid("cannot pack an empty list"))?;
    let c = first.ncols();
    let mut offsets = Vec::with_capacity(sequences.len() + 1);
    offsets.push(0);
    for (i, seq) in sequences.iter().enumerate() {
        if seq.ncols() != c {
            return Err(OryxError::shape(format!(
                "sequence {i} has {} channels, expected {c}",
                seq.ncols()
            )));
        }
        if seq.nrows() == 0 {
            return Err(OryxError::invalid(format!("sequence {i} is empty")));
        }
        offsets.push(offsets[i] + seq.nrows());
    }
    let tokens = ndarray::concatenate(Axis(0), sequences)
        .map_err(|e| OryxError::shape(e.to_string()))?;
    Ok(PackedBatch { tokens, offsets })
}

pub fn unpack<T: Scalar>(batch: &PackedBatch<T>) -> Result<Vec<Array2<T>>> {
    batch.validate()?;
    Ok((0..batch.num_segments()).map(|i| batch.segment(i).to_owned()).collect())
}

/// Multi-head attention projections. Biased `C → C` maps for Q, K, V and output.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub heads: usize,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn init(rng: &mut SeededRng, channels: usize, heads: usize) -> Result<Self> {
        Self::init_with_std(rng, channels, heads, crate::nn::INIT_STD)
    }

    pub fn init_with_std(rng: &mut SeededRng, channels: usize, heads: usize, std: f64) -> Result<Self> {
        check_heads(channels, heads)?;
        Ok(Self {
            heads,
            q: Linear::init_with_std(rng, channels, channels, true, std),
            k: Linear::init_with_std(rng, channels, channels, true, std),
            v: Linear::init_with_std(rng, channels, channels, true, std),
            out: Linear::init_with_std(rng, channels, channels, true, std),
        })
    }

    pub fn channels(&self) -> usize {
        self.q.d_in()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    fn check(&self, c: usize) -> Result<()> {
        check_heads(c, self.heads)?;
        for (name, l) in [("q", &self.q), ("k", &self.k), ("v", &self.v), ("out", &self.out)] {
            if l.d_in() != c || l.d_out() != c {
                return Err(OryxError::shape(format!(
                    "{name} projection is {}x{}, tokens have {c} channels",
                    l.d_in(),
                    l.d_out()
                )));
            }
        }
        Ok(())
    }
}

fn check_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || c % heads != 0 {
        return Err(OryxError::shape(format!("{c} channels not divisible by {heads} heads")));
    }
    Ok(())
}

impl<T: Scalar> Parameterized<T> for AttentionWeights<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.q.params(&join(prefix, "q"), out);
        self.k.params(&join(prefix, "k"), out);
        self.v.params(&join(prefix, "v"), out);
        self.out.params(&join(prefix, "out"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.q.params_mut(&join(prefix, "q"), out);
        self.k.params_mut(&join(prefix, "k"), out);
        self.v.params_mut(&join(prefix, "v"), out);
        self.out.params_mut(&join(prefix, "out"), out);
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub(crate) fn softmax_rows<T: Scalar>(scores: &mut Array2<T>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Intermediates for the attention backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    context: Array2<T>,
    /// `probs[segment][head]`, each `[N_i, N_i]`.
    probs: Vec<Vec<Array2<T>>>,
}

/// Per-segment scaled dot-product attention on already-projected Q, K, V.
fn segment_context<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    offsets: &[usize],
    heads: usize,
    keep_probs: bool,
) -> (Array2<T>, Vec<Vec<Array2<T>>>) {
    let c = q.ncols();
    let hd = c / heads;
    let scale = T::one() / T::from_usize_lossy(hd).sqrt();
    let per_segment: Vec<(Array2<T>, Vec<Array2<T>>)> = offsets
        .par_windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let mut ctx = Array2::zeros((b - a, c));
            let mut probs = Vec::new();
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let qh = q.slice(s![a..b, cols.clone()]);
                let kh = k.slice(s![a..b, cols.clone()]);
                let vh = v.slice(s![a..b, cols.clone()]);
                let mut scores = qh.dot(&kh.t()) * scale;
                softmax_rows(&mut scores);
                ctx.slice_mut(s![.., cols]).assign(&scores.dot(&vh));
                if keep_probs {
                    probs.push(scores);
                }
            }
            (ctx, probs)
        })
        .collect();
    let mut context = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(per_segment.len());
    for (w, (ctx, p)) in offsets.windows(2).zip(per_segment) {
        context.slice_mut(s![w[0]..w[1], ..]).assign(&ctx);
        probs.push(p);
    }
    (context, probs)
}

impl<T: Scalar> AttentionWeights<T> {
    /// Attention over a packed matrix; returns `[ΣN_i, C]`.
    pub fn forward_packed(&self, x: ArrayView2<'_, T>, offsets: &[usize]) -> Array2<T> {
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let (context, _) = segment_context(&q, &k, &v, offsets, self.heads, false);
        self.out.forward(context.view())
    }

    pub fn forward_packed_train(&self, x: ArrayView2<'_, T>, offsets: &[usize]) -> (Array2<T>, AttentionCache<T>) {
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let (context, probs) = segment_context(&q, &k, &v, offsets, self.heads, true);
        let y = self.out.forward(context.view());
        (y, AttentionCache { q, k, v, context, probs })
    }

    pub fn backward_packed(
        &self,
        x: ArrayView2<'_, T>,
        offsets: &[usize],
        dy: ArrayView2<'_, T>,
        cache: &AttentionCache<T>,
        grads: &mut Gradients<T>,
        prefix: &str,
    ) -> Array2<T> {
        let dctx = self.out.backward(cache.context.view(), dy, grads, &join(prefix, "out"));
        let c = self.channels();
        let hd = c / self.heads;
        let scale = T::one() / T::from_usize_lossy(hd).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (seg, w) in offsets.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            for h in 0..self.heads {
                let cols = h * hd..(h + 1) * hd;
                let p = &cache.probs[seg][h];
                let qh = cache.q.slice(s![a..b, cols.clone()]);
                let kh = cache.k.slice(s![a..b, cols.clone()]);
                let vh = cache.v.slice(s![a..b, cols.clone()]);
                let g = dctx.slice(s![a..b, cols.clone()]);
                dv.slice_mut(s![a..b, cols.clone()]).assign(&p.t().dot(&g));
                let dp = g.dot(&vh.t());
                let mut ds = &dp * p;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&prow, |d, &pv| *d = *d - pv * dot);
                }
                ds.mapv_inplace(|v| v * scale);
                dq.slice_mut(s![a..b, cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![a..b, cols]).assign(&ds.t().dot(&qh));
            }
        }
        let mut dx = self.q.backward(x, dq.view(), grads, &join(prefix, "q"));
        dx += &self.k.backward(x, dk.view(), grads, &join(prefix, "k"));
        dx += &self.v.backward(x, dv.view(), grads, &join(prefix, "v"));
        dx
    }
}

/// Segment-local self-attention over a packed batch.
pub fn segment_attention<T: Scalar>(batch: &PackedBatch<T>, weights: &AttentionWeights<T>) -> Result<PackedBatch<T>> {
    batch.validate()?;
    weights.check(batch.channels())?;
    Ok(PackedBatch {
        tokens: weights.forward_packed(batch.tokens.view(), &batch.offsets),
        offsets: batch.offsets.clone(),
    })
}

/// Same contract as [`segment_attention`], computed as one dense
/// `[ΣN, ΣN]` score matrix with a block-diagonal mask. Kept for benchmarking.
pub fn masked_attention<T: Scalar>(batch: &PackedBatch<T>, weights: &AttentionWeights<T>) -> Result<PackedBatch<T>> {
    batch.validate()?;
    weights.check(batch.channels())?;
    let x = batch.tokens.view();
    let (q, k, v) = (weights.q.forward(x), weights.k.forward(x), weights.v.forward(x));
    let n = x.nrows();
    let hd = weights.head_dim();
    let scale = T::one() / T::from_usize_lossy(hd).sqrt();
    let mut segment_of = vec![0usize; n];
    for (i, w) in batch.offsets.windows(2).enumerate() {
        segment_of[w[0]..w[1]].fill(i);
    }
    let mut context = Array2::zeros((n, weights.channels()));
    for h in 0..weights.heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t()) * scale;
        for ((i, j), sc) in scores.indexed_iter_mut() {
            if segment_of[i] != segment_of[j] {
                *sc = T::neg_infinity();
            }
        }
        softmax_rows(&mut scores);
        context
            .slice_mut(s![.., cols.clone()])
            .assign(&scores.dot(&v.slice(s![.., cols])));
    }
    Ok(PackedBatch {
        tokens: weights.out.forward(context.view()),
        offsets: batch.offsets.clone(),
    })
}

/// Textbook scaled dot-product attention written as scalar loops.
///
/// Shares no code with the packed path; used as the reference it is checked against.
pub fn dense_oracle_attention<T: Scalar>(x: ArrayView2<'_, T>, weights: &AttentionWeights<T>) -> Result<Array2<T>> {
    let (n, c) = x.dim();
    weights.check(c)?;
    let probs = dense_oracle_probs(x, weights)?;
    let v = oracle_project(x, &weights.v);
    let hd = c / weights.heads;
    let mut ctx = vec![vec![T::zero(); c]; n];
    for (h, p) in probs.iter().enumerate() {
        for i in 0..n {
            for d in 0..hd {
                let mut acc = T::zero();
                for j in 0..n {
                    acc += p[[i, j]] * v[j][h * hd + d];
                }
                ctx[i][h * hd + d] = acc;
            }
        }
    }
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        for o in 0..c {
            let mut acc = weights.out.bias.as_ref().map_or(T::zero(), |b| b[o]);
            for m in 0..c {
                acc += ctx[i][m] * weights.out.weight[[m, o]];
            }
            out[[i, o]] = acc;
        }
    }
    Ok(out)
}

/// Per-head attention weights `softmax(q kᵀ / √d_head)` from the scalar oracle.
pub fn dense_oracle_probs<T: Scalar>(x: ArrayView2<'_, T>, weights: &AttentionWeights<T>) -> Result<Vec<Array2<T>>> {
    let (n, c) = x.dim();
    weights.check(c)?;
    let q = oracle_project(x, &weights.q);
    let k = oracle_project(x, &weights.k);
    let hd = c / weights.heads;
    let scale = T::one() / T::from_usize_lossy(hd).sqrt();
    let mut all = Vec::with_capacity(weights.heads);
    for h in 0..weights.heads {
        let mut p = Array2::zeros((n, n));
        for i in 0..n {
            let mut logits = vec![T::zero(); n];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut dot = T::zero();
                for d in 0..hd {
                    dot += q[i][h * hd + d] * k[j][h * hd + d];
                }
                *l = dot * scale;
            }
            let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                denom += *l;
            }
            for j in 0..n {
                p[[i, j]] = logits[j] / denom;
            }
        }
        all.push(p);
    }
    Ok(all)
}

fn oracle_project<T: Scalar>(x: ArrayView2<'_, T>, l: &Linear<T>) -> Vec<Vec<T>> {
    let (n, c) = x.dim();
    (0..n)
        .map(|i| {
            (0..l.d_out())
                .map(|o| {
                    let mut acc = l.bias.as_ref().map_or(T::zero(), |b| b[o]);
                    for m in 0..c {
                        acc += x[[i, m]] * l.weight[[m, o]];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use proptest::prelude::*;

    fn seqs(lengths: &[usize], c: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = init::rng(seed);
        lengths.iter().map(|&n| init::normal(&mut rng, (n, c), 1.0)).collect()
    }

    fn views(xs: &[Array2<f64>]) -> Vec<ArrayView2<'_, f64>> {
        xs.iter().map(|a| a.view()).collect()
    }

    #[test]
    fn offsets_are_cumulative() {
        let xs = seqs(&[4, 6], 3, 0);
        let b = pack(&views(&xs)).unwrap();
        assert_eq!(b.offsets, vec![0, 4, 10]);
        assert_eq!(b.total_tokens(), 10);
        assert_eq!(pack(&views(&seqs(&[5], 3, 0))).unwrap().offsets, vec![0, 5]);
        assert_eq!(pack(&views(&seqs(&[1, 1, 1], 3, 0))).unwrap().offsets, vec![0, 1, 2, 3]);
    }

    #[test]
    fn pack_errors() {
        let empty: Vec<ArrayView2<'_, f64>> = vec![];
        assert!(matches!(pack(&empty), Err(OryxError::InvalidInput(_))));
        let mut xs = seqs(&[2], 3, 0);
        xs.extend(seqs(&[2], 4, 1));
        assert!(matches!(pack(&views(&xs)), Err(OryxError::Shape(_))));
    }

    #[test]
    fn corrupted_offsets_fail_integrity() {
        let xs = seqs(&[4, 6], 3, 0);
        let mut b = pack(&views(&xs)).unwrap();
        b.offsets[1] = 11;
        assert!(matches!(unpack(&b), Err(OryxError::Integrity(_))));
        b.offsets = vec![0, 4, 9];
        assert!(matches!(unpack(&b), Err(OryxError::Integrity(_))));
        b.offsets = vec![1, 4, 10];
        assert!(matches!(unpack(&b), Err(OryxError::Integrity(_))));
        b.offsets = vec![0, 4, 4, 10];
        assert!(matches!(unpack(&b), Err(OryxError::Integrity(_))));
    }

    #[test]
    fn round_trips() {
        for lengths in [vec![4, 6], vec![5]] {
            let xs = seqs(&lengths, 3, 2);
            assert_eq!(unpack(&pack(&views(&xs)).unwrap()).unwrap(), xs);
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut rng = init::rng(0);
        assert!(AttentionWeights::<f64>::init(&mut rng, 6, 4).is_err());
    }

    #[test]
    fn single_token_returns_value_projection() {
        let mut rng = init::rng(4);
        let w = AttentionWeights::<f64>::init_with_std(&mut rng, 8, 2, 0.5).unwrap();
        let x = seqs(&[1], 8, 5).remove(0);
        let out = dense_oracle_attention(x.view(), &w).unwrap();
        let expected = w.out.forward(w.v.forward(x.view()).view());
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn equal_keys_give_uniform_weights() {
        let mut rng = init::rng(6);
        let mut w = AttentionWeights::<f64>::init_with_std(&mut rng, 4, 1, 0.5).unwrap();
        w.k.weight.fill(0.0);
        let x = seqs(&[5], 4, 7).remove(0);
        let probs = dense_oracle_probs(x.view(), &w).unwrap();
        assert!(probs[0].iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn oracle_rows_are_normalised() {
        let mut rng = init::rng(8);
        let w = AttentionWeights::<f64>::init_with_std(&mut rng, 8, 2, 0.5).unwrap();
        let x = seqs(&[4], 8, 9).remove(0);
        for p in dense_oracle_probs(x.view(), &w).unwrap() {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn masked_strategy_agrees_with_segmented() {
        let mut rng = init::rng(10);
        let w = AttentionWeights::<f64>::init_with_std(&mut rng, 8, 2, 0.4).unwrap();
        let xs = seqs(&[3, 7, 2], 8, 11);
        let b = pack(&views(&xs)).unwrap();
        let a = segment_attention(&b, &w).unwrap();
        let m = masked_attention(&b, &w).unwrap();
        for (x, y) in a.tokens.iter().zip(m.tokens.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = init::rng(12);
        let w = AttentionWeights::<f64>::init_with_std(&mut rng, 4, 2, 0.5).unwrap();
        let xs = seqs(&[3, 2], 4, 13);
        let b = pack(&views(&xs)).unwrap();
        let r: Array2<f64> = init::normal(&mut rng, (5, 4), 1.0);
        let loss = |x: &Array2<f64>| (&w.forward_packed(x.view(), &b.offsets) * &r).sum();
        let (_, cache) = w.forward_packed_train(b.tokens.view(), &b.offsets);
        let mut grads = Gradients::new();
        let dx = w.backward_packed(b.tokens.view(), &b.offsets, r.view(), &cache, &mut grads, "attn");
        let h = 1e-5;
        for idx in [(0, 0), (2, 3), (4, 1)] {
            let mut xp = b.tokens.clone();
            xp[idx] += h;
            let mut xm = b.tokens.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-8, "{idx:?}: {fd} vs {}", dx[idx]);
        }
        assert_eq!(grads.len(), 8);
    }

    proptest! {
        #[test]
        fn pack_unpack_is_lossless(lengths in proptest::collection::vec(1usize..12, 1..100), seed in 0u64..1000) {
            let xs = seqs(&lengths, 3, seed);
            let packed = pack(&views(&xs)).unwrap();
            let back = unpack(&packed).unwrap();
            prop_assert_eq!(back.len(), xs.len());
            for (a, b) in back.iter().zip(xs.iter()) {
                prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }

        #[test]
        fn segment_order_permutes_outputs(lengths in proptest::collection::vec(1usize..8, 2..5), seed in 0u64..100) {
            let mut rng = init::rng(seed);
            let w = AttentionWeights::<f64>::init_with_std(&mut rng, 8, 2, 0.4).unwrap();
            let xs = seqs(&lengths, 8, seed + 1);
            let fwd = unpack(&segment_attention(&pack(&views(&xs)).unwrap(), &w).unwrap()).unwrap();
            let rev: Vec<_> = xs.iter().rev().cloned().collect();
            let bwd = unpack(&segment_attention(&pack(&views(&rev)).unwrap(), &w).unwrap()).unwrap();
            for (a, b) in fwd.iter().zip(bwd.iter().rev()) {
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}
