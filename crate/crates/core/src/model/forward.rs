use super::params::{LayerParams, ModelConfig, ModelParams};
use super::ModelError;
use crate::vocab::{TokenId, TokenRole, VocabManifest};
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const NORM_EPS: f64 = 1e-5;

/// Keys (already rotated) and values for every processed position.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    len: usize,
}

impl ForwardCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self::with_capacity(config, config.max_seq)
    }

    fn with_capacity(config: &ModelConfig, capacity: usize) -> Self {
        let shape = (capacity, config.model_dim);
        Self {
            keys: (0..config.layers).map(|_| Array2::zeros(shape)).collect(),
            values: (0..config.layers).map(|_| Array2::zeros(shape)).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn clear(&mut self) {
        self.len = 0;
    }
}

/// Per-layer activations kept for the backward pass.
pub(crate) struct LayerTrace {
    x_in: Array2<f64>,
    n1: Array2<f64>,
    r1: Array1<f64>,
    q: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn_cat: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    x_mid: Array2<f64>,
    n2: Array2<f64>,
    r2: Array1<f64>,
    gate: Array2<f64>,
    up: Array2<f64>,
    hidden: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
}

pub(crate) struct Trace {
    layers: Vec<LayerTrace>,
    x_final: Array2<f64>,
    nf: Array2<f64>,
    rf: Array1<f64>,
    /// The cache holds k and v for the whole sequence.
    cache: ForwardCache,
}

/// Dropout randomness for one forward pass.
pub(crate) struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let keep = 1.0 / (1.0 - self.p);
        let p = self.p;
        Array2::from_shape_simple_fn((rows, cols), || if self.rng.random::<f64>() < p { 0.0 } else { keep })
    }
}

fn rmsnorm(x: &Array2<f64>, gain: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let rinv = x.map_axis(Axis(1), |row| 1.0 / (row.dot(&row) / d + NORM_EPS).sqrt());
    let mut out = x.clone();
    for (mut row, &r) in out.rows_mut().into_iter().zip(&rinv) {
        row *= r;
        row *= gain;
    }
    (out, rinv)
}

fn rmsnorm_backward(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    rinv: &Array1<f64>,
    dy: &Array2<f64>,
    dgain: &mut Array1<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    for t in 0..x.nrows() {
        let (xr, dyr, r) = (x.row(t), dy.row(t), rinv[t]);
        let gdy = &dyr * gain;
        let s = gdy.dot(&xr);
        let r3 = r * r * r / d;
        dx.row_mut(t).assign(&(&gdy * r - &xr * (r3 * s)));
        dgain.scaled_add(r, &(&dyr * &xr));
    }
    dx
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Rotates each `(2i, 2i+1)` pair within every head by `pos · base^(−2i/hd)`.
/// `direction = -1.0` applies the inverse rotation.
fn rope(x: &mut ArrayViewMut2<f64>, pos0: usize, heads: usize, base: f64, direction: f64) {
    let hd = x.ncols() / heads;
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / hd as f64)).collect();
    for (t, mut row) in x.rows_mut().into_iter().enumerate() {
        let pos = (pos0 + t) as f64;
        for (i, &f) in freqs.iter().enumerate() {
            let (sin, cos) = (direction * pos * f).sin_cos();
            for h in 0..heads {
                let a = h * hd + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cos - x1 * sin;
                row[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

fn softmax_rows_causal(scores: &mut Array2<f64>, pos0: usize) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let visible = pos0 + i + 1;
        let max = row.slice(s![..visible]).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < visible {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row /= sum;
    }
}

fn layer_forward(
    lp: &LayerParams,
    config: &ModelConfig,
    layer: usize,
    x: &Array2<f64>,
    pos0: usize,
    cache: &mut ForwardCache,
    dropout: &mut Option<Dropout<'_>>,
    keep_trace: bool,
) -> (Array2<f64>, Option<LayerTrace>) {
    let n = x.nrows();
    let (heads, hd) = (config.heads, config.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let total = pos0 + n;

    let (n1, r1) = rmsnorm(x, &lp.attn_norm);
    let mut q = n1.dot(&lp.wq);
    let mut k = n1.dot(&lp.wk);
    let v = n1.dot(&lp.wv);
    rope(&mut q.view_mut(), pos0, heads, config.rope_base, 1.0);
    rope(&mut k.view_mut(), pos0, heads, config.rope_base, 1.0);
    cache.keys[layer].slice_mut(s![pos0..total, ..]).assign(&k);
    cache.values[layer].slice_mut(s![pos0..total, ..]).assign(&v);

    let mut attn_cat = Array2::zeros((n, config.model_dim));
    let mut probs = Vec::with_capacity(if keep_trace { heads } else { 0 });
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let kh = cache.keys[layer].slice(s![..total, h * hd..(h + 1) * hd]);
        let vh = cache.values[layer].slice(s![..total, h * hd..(h + 1) * hd]);
        let mut scores = q.slice(cols).dot(&kh.t());
        scores *= scale;
        softmax_rows_causal(&mut scores, pos0);
        attn_cat.slice_mut(cols).assign(&scores.dot(&vh));
        if keep_trace {
            probs.push(scores);
        }
    }
    let mut a = attn_cat.dot(&lp.wo);
    let attn_drop = dropout.as_mut().map(|d| d.mask(n, config.model_dim));
    if let Some(m) = &attn_drop {
        a *= m;
    }
    let x_mid = x + &a;

    let (n2, r2) = rmsnorm(&x_mid, &lp.ffn_norm);
    let gate = n2.dot(&lp.w_gate);
    let up = n2.dot(&lp.w_up);
    let hidden = ndarray::Zip::from(&gate).and(&up).map_collect(|&g, &u| silu(g) * u);
    let mut f = hidden.dot(&lp.w_down);
    let ffn_drop = dropout.as_mut().map(|d| d.mask(n, config.model_dim));
    if let Some(m) = &ffn_drop {
        f *= m;
    }
    let out = &x_mid + &f;

    let trace = keep_trace.then(|| LayerTrace {
        x_in: x.clone(),
        n1,
        r1,
        q,
        probs,
        attn_cat,
        attn_drop,
        x_mid,
        n2,
        r2,
        gate,
        up,
        hidden,
        ffn_drop,
    });
    (out, trace)
}

impl ModelParams {
    fn check_tokens(&self, tokens: &[TokenId], pos0: usize) -> Result<(), ModelError> {
        let needed = pos0 + tokens.len();
        if needed > self.config.max_seq {
            return Err(ModelError::SeqOverflow { needed, max_seq: self.config.max_seq });
        }
        let vocab = self.config.vocab_total;
        if let Some((pos, &id)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= vocab) {
            return Err(ModelError::InvalidToken { id, pos: pos0 + pos, vocab });
        }
        Ok(())
    }

    fn embed(&self, tokens: &[TokenId]) -> Array2<f64> {
        let mut x = Array2::zeros((tokens.len(), self.config.model_dim));
        for (mut row, &t) in x.rows_mut().into_iter().zip(tokens) {
            row.assign(&self.tok_emb.row(t as usize));
        }
        x
    }

    /// Logits (`tokens.len() × vocab_total`) for `tokens`, which continue the
    /// positions already held in `cache`. Without a cache the tokens start at
    /// position 0. Dropout is never applied here.
    pub fn forward(&self, tokens: &[TokenId], cache: Option<&mut ForwardCache>) -> Result<Array2<f64>, ModelError> {
        let mut scratch;
        let cache = match cache {
            Some(c) => c,
            None => {
                scratch = ForwardCache::with_capacity(&self.config, tokens.len());
                &mut scratch
            }
        };
        let pos0 = cache.len;
        self.check_tokens(tokens, pos0)?;
        if pos0 + tokens.len() > cache.capacity() {
            return Err(ModelError::SeqOverflow { needed: pos0 + tokens.len(), max_seq: cache.capacity() });
        }
        if tokens.is_empty() {
            return Ok(Array2::zeros((0, self.config.vocab_total)));
        }
        let mut x = self.embed(tokens);
        for (l, lp) in self.layers.iter().enumerate() {
            x = layer_forward(lp, &self.config, l, &x, pos0, cache, &mut None, false).0;
        }
        cache.len = pos0 + tokens.len();
        let (nf, _) = rmsnorm(&x, &self.final_norm);
        Ok(nf.dot(&self.w_out))
    }

    /// Full-sequence forward that records what backward needs.
    pub(crate) fn forward_traced(
        &self,
        tokens: &[TokenId],
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<(Array2<f64>, Trace), ModelError> {
        self.check_tokens(tokens, 0)?;
        let mut cache = ForwardCache::with_capacity(&self.config, tokens.len());
        let mut x = self.embed(tokens);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, lp) in self.layers.iter().enumerate() {
            let (out, tr) = layer_forward(lp, &self.config, l, &x, 0, &mut cache, &mut dropout, true);
            layers.push(tr.expect("trace requested"));
            x = out;
        }
        cache.len = tokens.len();
        let (nf, rf) = rmsnorm(&x, &self.final_norm);
        let logits = nf.dot(&self.w_out);
        Ok((logits, Trace { layers, x_final: x, nf, rf, cache }))
    }

    /// Accumulates parameter gradients for `dlogits` into `grads`.
    pub(crate) fn backward(&self, tokens: &[TokenId], trace: &Trace, dlogits: &Array2<f64>, grads: &mut ModelParams) {
        let cfg = &self.config;
        let (heads, hd) = (cfg.heads, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();

        grads.w_out += &trace.nf.t().dot(dlogits);
        let dnf = dlogits.dot(&self.w_out.t());
        let mut dx = rmsnorm_backward(&trace.x_final, &self.final_norm, &trace.rf, &dnf, &mut grads.final_norm);

        for (l, lp) in self.layers.iter().enumerate().rev() {
            let tr = &trace.layers[l];
            let g = &mut grads.layers[l];
            let keys = trace.cache.keys[l].view();
            let values = trace.cache.values[l].view();

            // feed-forward
            let mut df = dx.clone();
            if let Some(m) = &tr.ffn_drop {
                df *= m;
            }
            g.w_down += &tr.hidden.t().dot(&df);
            let dhidden = df.dot(&lp.w_down.t());
            let dgate = ndarray::Zip::from(&dhidden)
                .and(&tr.up)
                .and(&tr.gate)
                .map_collect(|&dh, &u, &z| dh * u * silu_grad(z));
            let dup = ndarray::Zip::from(&dhidden).and(&tr.gate).map_collect(|&dh, &z| dh * silu(z));
            g.w_gate += &tr.n2.t().dot(&dgate);
            g.w_up += &tr.n2.t().dot(&dup);
            let dn2 = dgate.dot(&lp.w_gate.t()) + dup.dot(&lp.w_up.t());
            dx += &rmsnorm_backward(&tr.x_mid, &lp.ffn_norm, &tr.r2, &dn2, &mut g.ffn_norm);

            // attention
            let mut da = dx.clone();
            if let Some(m) = &tr.attn_drop {
                da *= m;
            }
            g.wo += &tr.attn_cat.t().dot(&da);
            let dcat = da.dot(&lp.wo.t());
            let mut dq = Array2::zeros(dx.raw_dim());
            let mut dk = Array2::zeros(dx.raw_dim());
            let mut dv = Array2::zeros(dx.raw_dim());
            for h in 0..heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let p = &tr.probs[h];
                let d_o: ArrayView2<f64> = dcat.slice(cols);
                let dp = d_o.dot(&values.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&d_o));
                let mut ds = p * &dp;
                let row_dot = ds.sum_axis(Axis(1));
                ds = p * &(&dp - &row_dot.insert_axis(Axis(1)));
                ds *= scale;
                dq.slice_mut(cols).assign(&ds.dot(&keys.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&tr.q.slice(cols)));
            }
            rope(&mut dq.view_mut(), 0, heads, cfg.rope_base, -1.0);
            rope(&mut dk.view_mut(), 0, heads, cfg.rope_base, -1.0);
            g.wq += &tr.n1.t().dot(&dq);
            g.wk += &tr.n1.t().dot(&dk);
            g.wv += &tr.n1.t().dot(&dv);
            let dn1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
            dx += &rmsnorm_backward(&tr.x_in, &lp.attn_norm, &tr.r1, &dn1, &mut g.attn_norm);
        }

        for (row, &t) in dx.rows().into_iter().zip(tokens) {
            let mut e = grads.tok_emb.row_mut(t as usize);
            e += &row;
        }
    }

    /// Attention distributions of `query` over positions `0..=query`, for
    /// every layer and head, plus their average.
    pub fn attention_probe(
        &self,
        manifest: &VocabManifest,
        tokens: &[TokenId],
        query: usize,
    ) -> Result<AttentionProbe, ModelError> {
        if query >= tokens.len() {
            return Err(ModelError::QueryOutOfRange { query, len: tokens.len() });
        }
        let prefix = &tokens[..=query];
        let (_, trace) = self.forward_traced(prefix, None)?;
        let per_layer: Vec<Vec<Vec<f64>>> = trace
            .layers
            .iter()
            .map(|lt| lt.probs.iter().map(|p| p.row(query).to_vec()).collect())
            .collect();
        let rows = (self.config.layers * self.config.heads) as f64;
        let mut average = vec![0.0; query + 1];
        for head in per_layer.iter().flatten() {
            for (a, v) in average.iter_mut().zip(head) {
                *a += v / rows;
            }
        }
        let labels = prefix
            .iter()
            .map(|&t| manifest.classify(t).map_err(|_| ModelError::InvalidToken { id: t, pos: 0, vocab: self.config.vocab_total }))
            .collect::<Result<_, _>>()?;
        Ok(AttentionProbe { query, per_layer, average, labels })
    }
}

#[derive(Debug, Clone)]
pub struct AttentionProbe {
    pub query: usize,
    /// `[layer][head][key position]`
    pub per_layer: Vec<Vec<Vec<f64>>>,
    pub average: Vec<f64>,
    pub labels: Vec<TokenRole>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> ModelParams {
        ModelParams::init(&ModelConfig::new(2, 2, 16, 41, 64).with_seed(seed)).unwrap()
    }

    fn toks(n: usize) -> Vec<TokenId> {
        (0..n).map(|i| ((i * 7 + 3) % 41) as u32).collect()
    }

    #[test]
    fn shape_and_causality() {
        let m = model(1);
        let t = toks(12);
        let a = m.forward(&t, None).unwrap();
        assert_eq!(a.dim(), (12, 41));
        let mut t2 = t.clone();
        t2[5] = (t2[5] + 1) % 41;
        let b = m.forward(&t2, None).unwrap();
        assert_eq!(a.slice(s![..5, ..]), b.slice(s![..5, ..]));
        assert_ne!(a.row(5), b.row(5));
    }

    #[test]
    fn incremental_matches_full() {
        let m = model(2);
        let t = toks(20);
        let full = m.forward(&t, None).unwrap();
        let mut cache = ForwardCache::new(&m.config);
        m.forward(&t[..7], Some(&mut cache)).unwrap();
        for i in 7..20 {
            let step = m.forward(&t[i..i + 1], Some(&mut cache)).unwrap();
            for (a, b) in step.row(0).iter().zip(full.row(i)) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
        assert_eq!(cache.len(), 20);
    }

    #[test]
    fn traced_forward_matches_inference() {
        let m = model(3);
        let t = toks(9);
        let (a, _) = m.forward_traced(&t, None).unwrap();
        let b = m.forward(&t, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn overflow_and_bad_ids() {
        let m = model(4);
        assert!(matches!(m.forward(&toks(65), None), Err(ModelError::SeqOverflow { .. })));
        assert!(matches!(m.forward(&[41], None), Err(ModelError::InvalidToken { .. })));
        let mut cache = ForwardCache::new(&m.config);
        m.forward(&toks(60), Some(&mut cache)).unwrap();
        assert!(m.forward(&toks(5), Some(&mut cache)).is_err());
    }

    #[test]
    fn rope_scores_depend_on_offset_only() {
        let cfg = ModelConfig::new(1, 2, 8, 4, 64);
        let mut a = Array2::from_shape_fn((1, 8), |(_, j)| (j as f64 * 0.37).sin());
        let mut b = Array2::from_shape_fn((1, 8), |(_, j)| (j as f64 * 0.91).cos());
        let score = |pq: usize, pk: usize, a: &Array2<f64>, b: &Array2<f64>| {
            let (mut q, mut k) = (a.clone(), b.clone());
            rope(&mut q.view_mut(), pq, cfg.heads, cfg.rope_base, 1.0);
            rope(&mut k.view_mut(), pk, cfg.heads, cfg.rope_base, 1.0);
            q.row(0).dot(&k.row(0))
        };
        let base = score(7, 3, &a, &b);
        for shift in [1, 5, 20, 40] {
            assert!((score(7 + shift, 3 + shift, &a, &b) - base).abs() < 1e-10);
        }
        assert!((score(8, 3, &a, &b) - base).abs() > 1e-6);
        // rotation then inverse rotation is the identity
        let orig = a.clone();
        rope(&mut a.view_mut(), 11, 2, 10_000.0, 1.0);
        rope(&mut a.view_mut(), 11, 2, 10_000.0, -1.0);
        for (x, y) in a.iter().zip(&orig) {
            assert!((x - y).abs() < 1e-12);
        }
        b.fill(0.0);
    }

    #[test]
    fn probe_rows_normalized() {
        let m = model(5);
        let man = VocabManifest::new(16, 8, 4, 8).unwrap();
        let t = toks(10);
        let p = m.attention_probe(&man, &t, 6).unwrap();
        assert_eq!(p.per_layer.len(), 2);
        for head in p.per_layer.iter().flatten() {
            assert_eq!(head.len(), 7);
            assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert!((p.average.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(p.labels.len(), 7);
        let single = m.attention_probe(&man, &t[..1], 0).unwrap();
        assert_eq!(single.average, vec![1.0]);
        assert!(m.attention_probe(&man, &t, 10).is_err());
    }
}
