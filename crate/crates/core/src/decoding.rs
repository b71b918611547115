//! Mode-aware sampling: text and image spans use separate hyperparameters,
//! image spans add classifier-free guidance from a second model stream and
//! can be held to the span grammar.

use crate::model::{ForwardCache, ModelError, ModelParams};
use crate::unirep::{parse_image, validate, ImageTokenGrid, ParseError};
use crate::vocab::{Axis, TokenId, TokenRole, VocabManifest, BOS, EOI, EOL, EOS, SOI};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("logit vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no token is allowed")]
    EmptyAllowed,
    #[error("logit {index} is not finite")]
    NonFiniteLogit { index: usize },
    #[error("invalid decode parameters: {0}")]
    InvalidParams(String),
    #[error("decoder state is inconsistent: {0}")]
    InconsistentState(String),
    #[error("token {token} at position {pos} is not in the vocabulary")]
    UnknownToken { token: TokenId, pos: usize },
    #[error("prompt of {prompt} tokens plus {max_tokens} new ones exceeds the model window of {max_seq}")]
    WindowOverflow { prompt: usize, max_tokens: usize, max_seq: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub top_k: usize,
    pub cfg_scale: f64,
}

impl DecodeParams {
    /// T 1.0, top-k 5, no guidance.
    pub fn text_default() -> Self {
        Self { temperature: 1.0, top_k: 5, cfg_scale: 0.0 }
    }

    /// T 1.0, top-k 2000, guidance 4.0.
    pub fn image_default() -> Self {
        Self { temperature: 1.0, top_k: 2000, cfg_scale: 4.0 }
    }

    /// `top_k` larger than the candidate set is clamped at sampling time, so
    /// only positivity is checked here.
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(DecodeError::InvalidParams(format!("temperature {} must be > 0", self.temperature)));
        }
        if self.top_k == 0 {
            return Err(DecodeError::InvalidParams("top_k must be >= 1".into()));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(DecodeError::InvalidParams(format!("cfg_scale {} must be >= 0", self.cfg_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Text,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expect {
    HeightInd,
    WidthInd,
    Code,
    Eol,
    Eoi,
    /// Any token in text mode. In image mode this means the span already
    /// broke the grammar and no constraint can be derived.
    Free,
}

/// Grammar cursor over the token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeState {
    pub mode: Mode,
    pub declared_h: u32,
    pub declared_w: u32,
    /// Rows finished so far.
    pub row: u32,
    /// Codes emitted in the current row.
    pub col: u32,
    pub expect: Expect,
}

impl Default for DecodeState {
    fn default() -> Self {
        Self { mode: Mode::Text, declared_h: 0, declared_w: 0, row: 0, col: 0, expect: Expect::Free }
    }
}

impl DecodeState {
    /// Replays `tokens` from the initial text state.
    pub fn replay(manifest: &VocabManifest, tokens: &[TokenId]) -> Result<Self, DecodeError> {
        let mut s = Self::default();
        for (pos, &t) in tokens.iter().enumerate() {
            s.advance(manifest, t).map_err(|_| DecodeError::UnknownToken { token: t, pos })?;
        }
        Ok(s)
    }

    /// Consumes one token. Mode changes only at SOI (from text) and EOI (from
    /// image). A token that breaks the grammar leaves image mode with
    /// `Expect::Free` until the next EOI.
    pub fn advance(&mut self, manifest: &VocabManifest, token: TokenId) -> Result<(), DecodeError> {
        let role = manifest.classify(token).map_err(|_| DecodeError::UnknownToken { token, pos: 0 })?;
        match self.mode {
            Mode::Text => {
                if role == TokenRole::Soi {
                    *self = Self { mode: Mode::Image, expect: Expect::HeightInd, ..Self::default() };
                }
            }
            Mode::Image => {
                if role == TokenRole::Eoi {
                    *self = Self::default();
                    return Ok(());
                }
                self.expect = match (self.expect, role) {
                    (Expect::HeightInd, TokenRole::HeightInd(v)) => {
                        self.declared_h = v;
                        Expect::WidthInd
                    }
                    (Expect::WidthInd, TokenRole::WidthInd(v)) => {
                        self.declared_w = v;
                        Expect::Code
                    }
                    (Expect::Code, TokenRole::ImageCode(_)) => {
                        self.col += 1;
                        if self.col == self.declared_w {
                            Expect::Eol
                        } else {
                            Expect::Code
                        }
                    }
                    (Expect::Eol, TokenRole::Eol) => {
                        self.row += 1;
                        self.col = 0;
                        if self.row == self.declared_h {
                            Expect::Eoi
                        } else {
                            Expect::Code
                        }
                    }
                    _ => Expect::Free,
                };
            }
        }
        Ok(())
    }
}

/// Allowed-token flags indexed by token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    allowed: Vec<bool>,
}

impl TokenMask {
    pub fn all(vocab_total: usize) -> Self {
        Self { allowed: vec![true; vocab_total] }
    }

    pub fn only(vocab_total: usize, tokens: impl IntoIterator<Item = TokenId>) -> Self {
        let mut allowed = vec![false; vocab_total];
        for t in tokens {
            allowed[t as usize] = true;
        }
        Self { allowed }
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.allowed.get(token as usize).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.allowed.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| i as TokenId)
    }
}

/// Guided logits `cond + s·(cond − uncond)`.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], scale: f64) -> Result<Vec<f64>, DecodeError> {
    if cond.len() != uncond.len() {
        return Err(DecodeError::LengthMismatch(cond.len(), uncond.len()));
    }
    Ok(cond.iter().zip(uncond).map(|(&l, &u)| l + scale * (l - u)).collect())
}

/// Tokens the span grammar permits next.
pub fn constraint_mask(state: &DecodeState, manifest: &VocabManifest) -> Result<TokenMask, DecodeError> {
    let total = manifest.total() as usize;
    let indicators = |axis| (1..=manifest.max_side).map(move |v| manifest.indicator_token(axis, v).expect("in range"));
    let inconsistent = |why: &str| Err(DecodeError::InconsistentState(why.into()));
    let mask = match (state.mode, state.expect) {
        (Mode::Text, Expect::Free) => {
            let allowed = (0..total as TokenId)
                .map(|t| !manifest.classify(t).expect("in range").is_image_internal())
                .collect();
            TokenMask { allowed }
        }
        (Mode::Text, _) => return inconsistent("text mode expects a grammar token"),
        (Mode::Image, Expect::Free) => return inconsistent("image span already broke the grammar"),
        (Mode::Image, Expect::HeightInd) => TokenMask::only(total, indicators(Axis::Height)),
        (Mode::Image, Expect::WidthInd) => TokenMask::only(total, indicators(Axis::Width)),
        (Mode::Image, Expect::Code) => {
            if state.col >= state.declared_w || state.row >= state.declared_h {
                return inconsistent("cursor outside the declared shape");
            }
            TokenMask::only(total, manifest.code_base()..manifest.total())
        }
        (Mode::Image, Expect::Eol) => {
            if state.col != state.declared_w {
                return inconsistent("row end before the declared width");
            }
            TokenMask::only(total, [EOL])
        }
        (Mode::Image, Expect::Eoi) => {
            if state.row != state.declared_h {
                return inconsistent("span end before the declared height");
            }
            TokenMask::only(total, [EOI])
        }
    };
    Ok(mask)
}

/// Candidate tokens and their probabilities: disallowed tokens removed, the
/// `top_k` highest logits kept (ties toward the lower id), then softmax at
/// `temperature`. Sorted by descending probability.
pub fn sample_distribution(
    logits: &[f64],
    params: &DecodeParams,
    allowed: &TokenMask,
) -> Result<Vec<(TokenId, f64)>, DecodeError> {
    params.validate()?;
    if allowed.len() != logits.len() {
        return Err(DecodeError::LengthMismatch(logits.len(), allowed.len()));
    }
    if let Some(index) = logits.iter().position(|l| !l.is_finite()) {
        return Err(DecodeError::NonFiniteLogit { index });
    }
    let mut cands: Vec<TokenId> = allowed.tokens().collect();
    if cands.is_empty() {
        return Err(DecodeError::EmptyAllowed);
    }
    cands.sort_by(|&a, &b| logits[b as usize].total_cmp(&logits[a as usize]).then(a.cmp(&b)));
    cands.truncate(params.top_k);
    let max = logits[cands[0] as usize];
    let weights: Vec<f64> = cands.iter().map(|&t| ((logits[t as usize] - max) / params.temperature).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(cands.into_iter().zip(weights).map(|(t, w)| (t, w / z)).collect())
}

/// Draws one token from [`sample_distribution`] using a single uniform draw.
pub fn sample_step<R: Rng>(
    logits: &[f64],
    params: &DecodeParams,
    allowed: &TokenMask,
    rng: &mut R,
) -> Result<TokenId, DecodeError> {
    let dist = sample_distribution(logits, params, allowed)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(t, p) in &dist {
        acc += p;
        if u < acc {
            return Ok(t);
        }
    }
    Ok(dist.last().expect("non-empty").0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub text: DecodeParams,
    pub image: DecodeParams,
    pub seed: u64,
    pub max_tokens: usize,
    /// Hold image spans to the span grammar.
    pub constrained: bool,
    /// Incremental decoding with KV caches; off recomputes every prefix.
    pub use_cache: bool,
    /// Keep the conditional logits of every step.
    pub record_logits: bool,
    /// Text-mode tokens that end generation once sampled.
    pub stop_tokens: Vec<TokenId>,
    /// End right after the first completed image span.
    pub stop_after_image: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            text: DecodeParams::text_default(),
            image: DecodeParams::image_default(),
            seed: 0,
            max_tokens: 256,
            constrained: true,
            use_cache: true,
            record_logits: false,
            stop_tokens: vec![EOS],
            stop_after_image: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    StopToken,
    ImageDone,
    MaxTokens,
}

/// What was in force when one token was sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub token: TokenId,
    pub mode: Mode,
    pub params: DecodeParams,
    /// Logit of the sampled token after guidance.
    pub sampled_logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub prompt: Vec<TokenId>,
    /// Sampled tokens, without the prompt.
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepTrace>,
    pub seed: u64,
    pub text_params: DecodeParams,
    pub image_params: DecodeParams,
    pub stop: StopReason,
    /// Generation ended inside an image span.
    pub truncated_image: bool,
    /// Conditional logits per step, when recorded.
    #[serde(skip)]
    pub logits: Vec<Vec<f64>>,
}

impl GenerationResult {
    pub fn full_sequence(&self) -> Vec<TokenId> {
        self.prompt.iter().chain(&self.tokens).copied().collect()
    }

    /// Every image span that the generated tokens open or finish, parsed.
    pub fn images(&self, manifest: &VocabManifest) -> Vec<Result<ImageTokenGrid, ParseError>> {
        let full = self.full_sequence();
        let from = match DecodeState::replay(manifest, &self.prompt) {
            Ok(s) if s.mode == Mode::Image => self.prompt.iter().rposition(|&t| t == SOI).unwrap_or(0),
            _ => self.prompt.len(),
        };
        validate(manifest, &full)
            .spans
            .into_iter()
            .filter(|s| s.start >= from)
            .map(|s| parse_image(manifest, &full, s.start).map(|(g, _)| g))
            .collect()
    }
}

/// A model context that can produce next-token logits for its tokens.
struct Stream {
    tokens: Vec<TokenId>,
    cache: Option<ForwardCache>,
}

impl Stream {
    fn new(model: &ModelParams, tokens: Vec<TokenId>, use_cache: bool) -> Self {
        Self { tokens, cache: use_cache.then(|| ForwardCache::new(&model.config)) }
    }

    fn next_logits(&mut self, model: &ModelParams) -> Result<Vec<f64>, ModelError> {
        let logits = match &mut self.cache {
            Some(c) => {
                let fed = c.len();
                model.forward(&self.tokens[fed..], Some(c))?
            }
            None => model.forward(&self.tokens, None)?,
        };
        Ok(logits.row(logits.nrows() - 1).to_vec())
    }
}

/// Unconditional context for an image span opened at `soi` in `tokens`.
fn uncond_context(tokens: &[TokenId], soi: usize) -> Vec<TokenId> {
    std::iter::once(BOS).chain(tokens[soi..].iter().copied()).collect()
}

/// Samples up to `cfg.max_tokens` tokens after `prompt`. In image mode the
/// guided logits come from the full-context stream and a second stream that
/// sees only `BOS SOI` and the span so far; that stream is dropped at EOI.
pub fn generate(
    model: &ModelParams,
    manifest: &VocabManifest,
    prompt: &[TokenId],
    cfg: &GenerateConfig,
) -> Result<GenerationResult, DecodeError> {
    cfg.text.validate()?;
    cfg.image.validate()?;
    if prompt.is_empty() {
        return Err(DecodeError::EmptyPrompt);
    }
    let max_seq = model.config.max_seq;
    if prompt.len() + cfg.max_tokens > max_seq + 1 {
        return Err(DecodeError::WindowOverflow { prompt: prompt.len(), max_tokens: cfg.max_tokens, max_seq });
    }
    let mut state = DecodeState::replay(manifest, prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cond = Stream::new(model, prompt.to_vec(), cfg.use_cache);
    let mut uncond = match state.mode {
        Mode::Image => {
            let soi = prompt.iter().rposition(|&t| t == SOI).expect("image mode implies an SOI");
            Some(Stream::new(model, uncond_context(prompt, soi), cfg.use_cache))
        }
        Mode::Text => None,
    };
    let mut out = GenerationResult {
        prompt: prompt.to_vec(),
        tokens: Vec::new(),
        steps: Vec::new(),
        seed: cfg.seed,
        text_params: cfg.text,
        image_params: cfg.image,
        stop: StopReason::MaxTokens,
        truncated_image: false,
        logits: Vec::new(),
    };
    let free = TokenMask::all(manifest.total() as usize);

    while out.tokens.len() < cfg.max_tokens {
        let l_cond = cond.next_logits(model)?;
        let mode = state.mode;
        let params = if mode == Mode::Image { cfg.image } else { cfg.text };
        let guided = match (&mut uncond, mode) {
            (Some(u), Mode::Image) if params.cfg_scale != 0.0 => cfg_combine(&l_cond, &u.next_logits(model)?, params.cfg_scale)?,
            _ => l_cond.clone(),
        };
        let token = if cfg.constrained {
            sample_step(&guided, &params, &constraint_mask(&state, manifest)?, &mut rng)?
        } else {
            sample_step(&guided, &params, &free, &mut rng)?
        };
        out.steps.push(StepTrace { token, mode, params, sampled_logit: guided[token as usize] });
        if cfg.record_logits {
            out.logits.push(l_cond);
        }
        out.tokens.push(token);
        state.advance(manifest, token)?;
        cond.tokens.push(token);
        match (mode, state.mode) {
            (Mode::Text, Mode::Image) => uncond = Some(Stream::new(model, vec![BOS, SOI], cfg.use_cache)),
            (Mode::Image, Mode::Text) => uncond = None,
            _ => {
                if let Some(u) = &mut uncond {
                    u.tokens.push(token);
                }
            }
        }
        if mode == Mode::Image && state.mode == Mode::Text && cfg.stop_after_image {
            out.stop = StopReason::ImageDone;
            break;
        }
        if mode == Mode::Text && state.mode == Mode::Text && cfg.stop_tokens.contains(&token) {
            out.stop = StopReason::StopToken;
            break;
        }
    }
    out.truncated_image = state.mode == Mode::Image;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::unirep::encode_grid;
    use proptest::prelude::*;

    fn manifest() -> VocabManifest {
        VocabManifest::new(16, 6, 4, 8).unwrap()
    }

    fn model(m: &VocabManifest, seed: u64) -> ModelParams {
        ModelParams::init(&ModelConfig::new(2, 2, 16, m.total() as usize, 96).with_seed(seed)).unwrap()
    }

    #[test]
    fn cfg_examples() {
        assert_eq!(cfg_combine(&[2.0, 0.0], &[1.0, 0.5], 3.0).unwrap(), vec![5.0, -1.5]);
        assert_eq!(cfg_combine(&[0.3, -7.0], &[9.0, 1.0], 0.0).unwrap(), vec![0.3, -7.0]);
        assert_eq!(cfg_combine(&[1.5, 2.5], &[1.5, 2.5], 11.0).unwrap(), vec![1.5, 2.5]);
        assert!(matches!(cfg_combine(&[1.0], &[1.0, 2.0], 1.0), Err(DecodeError::LengthMismatch(1, 2))));
    }

    #[test]
    fn top2_distribution() {
        let p = DecodeParams { temperature: 1.0, top_k: 2, cfg_scale: 0.0 };
        let d = sample_distribution(&[3.0, 2.0, 1.0, 0.0], &p, &TokenMask::all(4)).unwrap();
        let e = (1.0f64).exp();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].0, 0);
        assert!((d[0].1 - e / (e + 1.0)).abs() < 1e-12);
        assert!((d[0].1 - 0.7311).abs() < 1e-4 && (d[1].1 - 0.2689).abs() < 1e-4);

        let greedy = DecodeParams { top_k: 1, ..p };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(sample_step(&[0.1, 4.0, 3.9], &greedy, &TokenMask::all(3), &mut rng).unwrap(), 1);
        }
        let only = TokenMask::only(4, [2]);
        for _ in 0..50 {
            assert_eq!(sample_step(&[100.0, 50.0, -100.0, 0.0], &p, &only, &mut rng).unwrap(), 2);
        }
        assert!(matches!(sample_step(&[1.0, 2.0], &p, &TokenMask::only(2, []), &mut rng), Err(DecodeError::EmptyAllowed)));
        assert!(sample_step(&[f64::NAN, 2.0], &p, &TokenMask::all(2), &mut rng).is_err());
        assert!(DecodeParams { temperature: 0.0, ..p }.validate().is_err());
    }

    #[test]
    fn mask_examples() {
        let m = manifest();
        let s = DecodeState::replay(&m, &[BOS, SOI]).unwrap();
        let want: Vec<TokenId> = (1..=4).map(|v| m.indicator_token(Axis::Height, v).unwrap()).collect();
        assert_eq!(constraint_mask(&s, &m).unwrap().tokens().collect::<Vec<_>>(), want);

        let grid = ImageTokenGrid::filled(2, 3, 1);
        let span = encode_grid(&m, &grid).unwrap();
        // SOI H W c c c
        let s = DecodeState::replay(&m, &span[..6]).unwrap();
        assert_eq!((s.declared_w, s.col), (3, 3));
        assert_eq!(constraint_mask(&s, &m).unwrap().tokens().collect::<Vec<_>>(), vec![EOL]);
        let s = DecodeState::replay(&m, &span[..span.len() - 1]).unwrap();
        assert_eq!((s.row, s.declared_h), (2, 2));
        assert_eq!(constraint_mask(&s, &m).unwrap().tokens().collect::<Vec<_>>(), vec![EOI]);

        let text = constraint_mask(&DecodeState::default(), &m).unwrap();
        assert!(text.contains(SOI) && text.contains(EOS) && text.contains(m.text_base()));
        assert!(!text.contains(EOL) && !text.contains(EOI) && !text.contains(m.code_base()));
        assert!(!text.contains(m.height_base() + 1));

        let bad = DecodeState { mode: Mode::Image, expect: Expect::Eol, declared_w: 3, col: 1, declared_h: 1, row: 0 };
        assert!(matches!(constraint_mask(&bad, &m), Err(DecodeError::InconsistentState(_))));
    }

    #[test]
    fn constrained_spans_parse_and_modes_switch() {
        let m = manifest();
        let p = model(&m, 5);
        for seed in 0..10 {
            let cfg = GenerateConfig { seed, max_tokens: 40, stop_after_image: true, ..Default::default() };
            let r = generate(&p, &m, &[BOS, SOI], &cfg).unwrap();
            if !r.truncated_image {
                let (_, end) = parse_image(&m, &r.full_sequence(), 1).unwrap();
                assert_eq!(end, r.full_sequence().len());
                assert_eq!(r.stop, StopReason::ImageDone);
            }
            assert!(r.steps.iter().all(|s| s.mode == Mode::Image && s.params.top_k == 2000));
        }
    }

    #[test]
    fn zero_guidance_matches_conditional_only_and_cache_is_transparent() {
        let m = manifest();
        let p = model(&m, 6);
        let base = GenerateConfig { seed: 3, max_tokens: 30, record_logits: true, ..Default::default() };
        let a = generate(&p, &m, &[BOS, SOI], &GenerateConfig { image: DecodeParams { cfg_scale: 0.0, ..base.image }, ..base.clone() })
            .unwrap();
        let b = generate(&p, &m, &[BOS, SOI], &GenerateConfig { image: DecodeParams { cfg_scale: 0.0, ..base.image }, ..base.clone() })
            .unwrap();
        assert_eq!(a, b);

        let cached = generate(&p, &m, &[BOS, 20, SOI], &base).unwrap();
        let fresh = generate(&p, &m, &[BOS, 20, SOI], &GenerateConfig { use_cache: false, ..base.clone() }).unwrap();
        assert_eq!(cached.tokens, fresh.tokens);
        for (x, y) in cached.logits.iter().zip(&fresh.logits) {
            for (a, b) in x.iter().zip(y) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn window_and_prompt_errors() {
        let m = manifest();
        let p = model(&m, 1);
        let cfg = GenerateConfig { max_tokens: 200, ..Default::default() };
        assert!(matches!(generate(&p, &m, &[BOS], &cfg), Err(DecodeError::WindowOverflow { .. })));
        assert!(matches!(generate(&p, &m, &[], &GenerateConfig::default()), Err(DecodeError::EmptyPrompt)));
        let r = generate(&p, &m, &[BOS, SOI], &GenerateConfig { max_tokens: 3, ..Default::default() }).unwrap();
        assert!(r.truncated_image);
        assert_eq!(r.stop, StopReason::MaxTokens);
    }

    proptest! {
        #[test]
        fn state_tracks_encoded_spans(h in 1u32..=4, w in 1u32..=4, code in 0u32..6) {
            let m = manifest();
            let span = encode_grid(&m, &ImageTokenGrid::filled(h, w, code)).unwrap();
            let mut s = DecodeState::default();
            for &t in &span {
                prop_assert!(constraint_mask(&s, &m).unwrap().contains(t));
                s.advance(&m, t).unwrap();
                prop_assert!(s.col <= w && s.row <= h);
            }
            prop_assert_eq!(s, DecodeState::default());
        }
    }
}
