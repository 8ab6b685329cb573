//! Token alphabets, absorbing mask states, aligned track containers, and the
//! scalar normalizer applied to continuous tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u16;

/// Discrete alphabet of `size` real symbols plus one absorbing mask symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::arg(format!("vocabulary size must be >= 2, got {size}")));
        }
        if size >= TokenId::MAX as usize {
            return Err(Error::arg(format!("vocabulary size {size} does not fit token ids")));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// The mask id sits just past the real symbols.
    pub fn mask_id(&self) -> TokenId {
        self.size as TokenId
    }

    pub fn is_real(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self { size: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContinuousTokenSpec {
    dim: usize,
}

impl ContinuousTokenSpec {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("continuous token dimension must be >= 1"));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Default for ContinuousTokenSpec {
    fn default() -> Self {
        Self { dim: 4 }
    }
}

/// One sample: a discrete track and a continuous track aligned by position.
///
/// Continuous tokens are stored row-major, `dim` values per position. A set
/// `struct_mask[i]` puts position `i` in the absorbing state; the numeric
/// content at such a position is ignored by every consumer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackPair {
    pub seq: Vec<TokenId>,
    pub struct_tokens: Vec<f32>,
    pub struct_mask: Vec<bool>,
    dim: usize,
}

impl TrackPair {
    pub fn new(
        seq: Vec<TokenId>,
        struct_tokens: Vec<f32>,
        struct_mask: Vec<bool>,
        dim: usize,
    ) -> Result<Self> {
        let len = seq.len();
        if len == 0 {
            return Err(Error::arg("track length must be >= 1"));
        }
        if dim == 0 {
            return Err(Error::arg("continuous token dimension must be >= 1"));
        }
        if struct_tokens.len() != len * dim || struct_mask.len() != len {
            return Err(Error::arg(format!(
                "misaligned tracks: seq {len}, struct values {} (dim {dim}), mask {}",
                struct_tokens.len(),
                struct_mask.len()
            )));
        }
        Ok(Self { seq, struct_tokens, struct_mask, dim })
    }

    /// A clean pair with no structure masks.
    pub fn clean(seq: Vec<TokenId>, struct_tokens: Vec<f32>, dim: usize) -> Result<Self> {
        let mask = vec![false; seq.len()];
        Self::new(seq, struct_tokens, mask, dim)
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.struct_tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn token_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.struct_tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn has_masks(&self, vocab: &Vocabulary) -> bool {
        self.seq.iter().any(|&s| !vocab.is_real(s)) || self.struct_mask.iter().any(|&m| m)
    }
}

/// Global scalar divisor for continuous tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScaler {
    pub scale: f64,
    pub fitted_mean: f64,
    pub fitted_var: f64,
}

impl TokenScaler {
    pub fn with_scale(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::arg(format!("scale must be positive and finite, got {scale}")));
        }
        Ok(Self { scale, fitted_mean: 0.0, fitted_var: scale * scale })
    }

    pub fn identity() -> Self {
        Self { scale: 1.0, fitted_mean: 0.0, fitted_var: 1.0 }
    }

    pub fn apply(&self, z: &[f32]) -> Vec<f32> {
        z.iter().map(|&v| (v as f64 / self.scale) as f32).collect()
    }

    pub fn invert(&self, z: &[f32]) -> Vec<f32> {
        z.iter().map(|&v| (v as f64 * self.scale) as f32).collect()
    }

    pub fn apply_f64(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| v / self.scale).collect()
    }

    pub fn invert_f64(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| v * self.scale).collect()
    }

    /// Scales the unmasked continuous tokens of a pair in place.
    pub fn apply_pair(&self, pair: &mut TrackPair) {
        for i in 0..pair.len() {
            if !pair.struct_mask[i] {
                for v in pair.token_mut(i) {
                    *v = (*v as f64 / self.scale) as f32;
                }
            }
        }
    }

    pub fn invert_pair(&self, pair: &mut TrackPair) {
        for i in 0..pair.len() {
            if !pair.struct_mask[i] {
                for v in pair.token_mut(i) {
                    *v = (*v as f64 * self.scale) as f32;
                }
            }
        }
    }
}

const MIN_SCALE: f64 = 1e-12;

/// Per-token sample standard deviation (Bessel-corrected) of the entries of one token.
pub(crate) fn token_std(z: &[f32]) -> f64 {
    let n = z.len() as f64;
    let mean = z.iter().map(|&v| v as f64).sum::<f64>() / n;
    let ss = z.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
    (ss / (n - 1.0)).sqrt()
}

/// Fits the scale as the mean over positions of the per-token standard deviation.
///
/// The global element mean and variance are recorded for diagnostics only;
/// the mean is never subtracted.
pub fn fit_scaler<'a, I>(dataset: I) -> Result<TokenScaler>
where
    I: IntoIterator<Item = &'a TrackPair>,
{
    let mut n_tokens = 0usize;
    let mut std_sum = 0.0f64;
    let mut n_elems = 0usize;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for pair in dataset {
        if pair.struct_mask.iter().any(|&m| m) {
            return Err(Error::Fit("dataset contains masked structure positions".into()));
        }
        if pair.dim() < 2 {
            return Err(Error::Fit("per-token std needs at least two entries per token".into()));
        }
        for i in 0..pair.len() {
            let z = pair.token(i);
            std_sum += token_std(z);
            n_tokens += 1;
            for &v in z {
                let v = v as f64;
                sum += v;
                sum_sq += v * v;
                n_elems += 1;
            }
        }
    }
    if n_tokens == 0 {
        return Err(Error::Fit("empty dataset".into()));
    }
    let scale = std_sum / n_tokens as f64;
    if !(scale.is_finite() && scale > MIN_SCALE) {
        return Err(Error::Fit(format!("degenerate token spread (scale {scale:e})")));
    }
    let mean = sum / n_elems as f64;
    let var = (sum_sq / n_elems as f64 - mean * mean).max(0.0);
    Ok(TokenScaler { scale, fitted_mean: mean, fitted_var: var })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn vocabulary_mask_is_outside_alphabet() {
        let v = Vocabulary::new(8).unwrap();
        assert_eq!(v.mask_id(), 8);
        assert!(!v.is_real(v.mask_id()));
        assert!(v.is_real(7));
        assert!(Vocabulary::new(1).is_err());
    }

    #[test]
    fn misaligned_tracks_rejected() {
        assert!(TrackPair::new(vec![0, 1], vec![0.0; 3], vec![false; 2], 2).is_err());
        assert!(TrackPair::new(vec![], vec![], vec![], 2).is_err());
        assert!(TrackPair::new(vec![0], vec![0.0; 2], vec![false; 2], 2).is_err());
    }

    #[test]
    fn apply_and_invert_by_hand() {
        let s = TokenScaler::with_scale(2.0).unwrap();
        assert_eq!(s.apply(&[4.0, -2.0]), vec![2.0, -1.0]);
        assert_eq!(s.invert(&[2.0, -1.0]), vec![4.0, -2.0]);
        let id = TokenScaler::with_scale(1.0).unwrap();
        assert_eq!(id.apply(&[0.3, -7.5]), vec![0.3, -7.5]);
        let s = TokenScaler::with_scale(5.345).unwrap();
        assert_eq!(s.invert(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn paper_corpus_statistics_scale() {
        // A corpus whose per-token std equals the global std sqrt(28.562).
        let s = TokenScaler { scale: 28.562f64.sqrt(), fitted_mean: -0.432, fitted_var: 28.562 };
        assert!((s.scale - 5.345).abs() < 1e-3);
    }

    #[test]
    fn zero_variance_dataset_is_fit_error() {
        let pair = TrackPair::clean(vec![0, 1, 2], vec![0.0; 12], 4).unwrap();
        assert!(matches!(fit_scaler([&pair]), Err(Error::Fit(_))));
    }

    #[test]
    fn empty_or_masked_dataset_is_fit_error() {
        let empty: Vec<TrackPair> = Vec::new();
        assert!(fit_scaler(&empty).is_err());
        let pair = TrackPair::new(vec![0], vec![1.0, 2.0], vec![true], 2).unwrap();
        assert!(fit_scaler([&pair]).is_err());
    }

    /// Two-pass per-token std, coded without the library helper.
    fn oracle_mean_token_std(data: &[f32], dim: usize) -> f64 {
        let mut acc = 0.0;
        let n = data.len() / dim;
        for t in 0..n {
            let row = &data[t * dim..(t + 1) * dim];
            let mut m = 0.0;
            for &x in row {
                m += x as f64;
            }
            m /= dim as f64;
            let mut v = 0.0;
            for &x in row {
                v += (x as f64 - m) * (x as f64 - m);
            }
            acc += (v / (dim as f64 - 1.0)).sqrt();
        }
        acc / n as f64
    }

    #[test]
    fn gaussian_dataset_scale_matches_two_pass_oracle() {
        // N(0, 4 I) in 20 dimensions, 10^5 tokens.
        let dim = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0f64, 2.0).unwrap();
        let mut pairs = Vec::new();
        let mut all = Vec::new();
        for _ in 0..1000 {
            let vals: Vec<f32> = (0..100 * dim).map(|_| normal.sample(&mut rng) as f32).collect();
            all.extend_from_slice(&vals);
            pairs.push(TrackPair::clean(vec![0; 100], vals, dim).unwrap());
        }
        let s = fit_scaler(&pairs).unwrap();
        let oracle = oracle_mean_token_std(&all, dim);
        assert!((s.scale - oracle).abs() < 1e-9 * oracle, "{} vs {}", s.scale, oracle);
        assert!((s.scale - 2.0).abs() < 0.04, "scale {}", s.scale);
        assert!((s.fitted_var - 4.0).abs() < 0.08);
    }

    #[test]
    fn self_scaled_dataset_has_unit_mean_token_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.7f64, 3.0).unwrap();
        let mut pairs: Vec<TrackPair> = (0..50)
            .map(|_| {
                let vals = (0..16 * 4).map(|_| normal.sample(&mut rng) as f32).collect();
                TrackPair::clean(vec![0; 16], vals, 4).unwrap()
            })
            .collect();
        let s = fit_scaler(&pairs).unwrap();
        for p in &mut pairs {
            s.apply_pair(p);
        }
        let after = fit_scaler(&pairs).unwrap();
        assert!((after.scale - 1.0).abs() < 1e-6, "{}", after.scale);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(1000))]
        #[test]
        fn apply_invert_round_trip(
            scale in 1e-3f64..1e3,
            z in proptest::collection::vec(-1e4f64..1e4, 1..32),
        ) {
            let s = TokenScaler::with_scale(scale).unwrap();
            let back = s.invert_f64(&s.apply_f64(&z));
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (a, b) in z.iter().zip(&back) {
                proptest::prop_assert!((a - b).abs() <= 1e-6 * norm.max(f64::MIN_POSITIVE));
            }
        }
    }
}
