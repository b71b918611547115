use super::ModelError;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Standard deviation of the initial weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Hidden width of the gated feed-forward.
    pub ffn_dim: usize,
    pub vocab_total: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub dropout_p: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// A config with `ffn_dim = 2 · model_dim`, RoPE base 10000 and no dropout.
    pub fn new(layers: usize, heads: usize, model_dim: usize, vocab_total: usize, max_seq: usize) -> Self {
        Self {
            layers,
            heads,
            model_dim,
            ffn_dim: 2 * model_dim,
            vocab_total,
            max_seq,
            rope_base: 10_000.0,
            dropout_p: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: String| Err(ModelError::InvalidConfig(s));
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return bad("layers, heads, model_dim and ffn_dim must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} must be even for rotary pairing", self.head_dim()));
        }
        if self.vocab_total == 0 || self.max_seq == 0 {
            return bad("vocab_total and max_seq must be positive".into());
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return bad(format!("rope_base {} must be > 1", self.rope_base));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} must lie in [0, 1)", self.dropout_p));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ffn_norm: Array1<f64>,
    pub w_gate: Array2<f64>,
    pub w_up: Array2<f64>,
    pub w_down: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `vocab × dim`
    pub tok_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Array1<f64>,
    /// `dim × vocab`
    pub w_out: Array2<f64>,
}

struct TruncNormal {
    normal: Normal<f64>,
    bound: f64,
}

impl TruncNormal {
    fn new(std: f64) -> Self {
        Self { normal: Normal::new(0.0, std).expect("finite std"), bound: 3.0 * std }
    }

    fn matrix(&self, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || loop {
            let x = self.normal.sample(rng);
            if x.abs() <= self.bound {
                break x;
            }
        })
    }
}

impl ModelParams {
    /// Truncated-normal initialization (±3σ, σ = 0.02); the residual output
    /// projections use σ / √(2·layers). Norm gains start at 1.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, v) = (config.model_dim, config.ffn_dim, config.vocab_total);
        let base = TruncNormal::new(INIT_STD);
        let resid = TruncNormal::new(INIT_STD / (2.0 * config.layers as f64).sqrt());

        let tok_emb = base.matrix(v, d, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                attn_norm: Array1::ones(d),
                wq: base.matrix(d, d, &mut rng),
                wk: base.matrix(d, d, &mut rng),
                wv: base.matrix(d, d, &mut rng),
                wo: resid.matrix(d, d, &mut rng),
                ffn_norm: Array1::ones(d),
                w_gate: base.matrix(d, f, &mut rng),
                w_up: base.matrix(d, f, &mut rng),
                w_down: resid.matrix(f, d, &mut rng),
            })
            .collect();
        let w_out = base.matrix(d, v, &mut rng);
        Ok(Self { config: config.clone(), tok_emb, layers, final_norm: Array1::ones(d), w_out })
    }

    /// Same shapes, all zeros. Used for gradient accumulators and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.tok_emb.as_slice().expect("standard layout")];
        for l in &self.layers {
            out.push(l.attn_norm.as_slice().expect("standard layout"));
            for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
                out.push(m.as_slice().expect("standard layout"));
            }
            out.push(l.ffn_norm.as_slice().expect("standard layout"));
            for m in [&l.w_gate, &l.w_up, &l.w_down] {
                out.push(m.as_slice().expect("standard layout"));
            }
        }
        out.push(self.final_norm.as_slice().expect("standard layout"));
        out.push(self.w_out.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.tok_emb.as_slice_mut().expect("standard layout")];
        for l in &mut self.layers {
            out.push(l.attn_norm.as_slice_mut().expect("standard layout"));
            for m in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
                out.push(m.as_slice_mut().expect("standard layout"));
            }
            out.push(l.ffn_norm.as_slice_mut().expect("standard layout"));
            for m in [&mut l.w_gate, &mut l.w_up, &mut l.w_down] {
                out.push(m.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.final_norm.as_slice_mut().expect("standard layout"));
        out.push(self.w_out.as_slice_mut().expect("standard layout"));
        out
    }

    /// Names matching the order of [`tensors`](Self::tensors).
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["tok_emb".to_string()];
        for i in 0..self.layers.len() {
            for n in ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down"] {
                out.push(format!("layers.{i}.{n}"));
            }
        }
        out.push("final_norm".into());
        out.push("w_out".into());
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::new(2, 2, 16, 41, 32).with_seed(9);
        let a = ModelParams::init(&cfg).unwrap();
        let b = ModelParams::init(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        for t in a.tensors() {
            assert!(t.iter().all(|x| x.abs() <= 6.0 * INIT_STD + 1.0));
        }
        let weights = a.tok_emb.iter().chain(a.w_out.iter());
        assert!(weights.into_iter().all(|x| x.abs() <= 6.0 * INIT_STD));
        let c = ModelParams::init(&cfg.clone().with_seed(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        let cfg = ModelConfig::new(1, 4, 65, 41, 32);
        assert!(matches!(ModelParams::init(&cfg), Err(ModelError::InvalidConfig(_))));
        // head_dim 3 is odd
        assert!(ModelConfig::new(1, 2, 6, 41, 32).validate().is_err());
        let mut cfg = ModelConfig::new(1, 2, 8, 41, 32);
        cfg.dropout_p = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tensor_views_line_up() {
        let p = ModelParams::init(&ModelConfig::new(3, 2, 8, 20, 16)).unwrap();
        assert_eq!(p.tensors().len(), p.tensor_names().len());
        assert_eq!(p.tensors().len(), 1 + 3 * 9 + 2);
        let d = 8;
        let per_layer = 2 * d + 4 * d * d + 3 * d * 16;
        assert_eq!(p.num_params(), 20 * d + 3 * per_layer + d + d * 20);
        let z = p.zeros_like();
        assert!(z.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
        assert!(z.same_shape(&p));
    }
}
