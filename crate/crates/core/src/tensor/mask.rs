/// Boolean `T×T` self-attention mask; `allowed(q, k)` means query `q` may attend key `k`.
///
/// Kept out of [`super::Tensor`] because its additive form contains `-inf`,
/// which tensors reject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Every query sees every key.
    pub fn full(len: usize) -> Self {
        Self {
            len,
            allowed: vec![true; len * len],
        }
    }

    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, |q, k| k <= q)
    }

    /// Block streaming mask. Frames are grouped into chunks of `chunk` frames; a query sees
    /// its whole chunk plus the `history` frames immediately before the chunk start.
    pub fn streaming(len: usize, chunk: usize, history: usize) -> Self {
        let chunk = chunk.max(1);
        Self::from_fn(len, |q, k| {
            let start = (q / chunk) * chunk;
            let end = start + chunk;
            k < end && k + history >= start
        })
    }

    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(len * len);
        for q in 0..len {
            for k in 0..len {
                allowed.push(f(q, k));
            }
        }
        Self { len, allowed }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.len + k]
    }

    pub(crate) fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.len..(q + 1) * self.len]
    }

    /// Additive form: `0` where allowed, `-inf` where masked.
    pub fn additive(&self) -> Vec<f64> {
        self.allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_mask_allows_everything() {
        assert_eq!(AttentionMask::full(5).count_allowed(), 25);
    }

    #[test]
    fn causal_is_lower_triangular() {
        let m = AttentionMask::causal(3);
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(m.allowed(q, k), k <= q);
            }
        }
    }

    #[test]
    fn streaming_window_for_chunk_two_history_two() {
        // 1-based query frame 5 sits in chunk 3 (frames 5-6) and sees frames 3..=6.
        let m = AttentionMask::streaming(6, 2, 2);
        let seen: Vec<usize> = (0..6).filter(|&k| m.allowed(4, k)).map(|k| k + 1).collect();
        assert_eq!(seen, vec![3, 4, 5, 6]);
    }

    #[test]
    fn streaming_never_sees_past_chunk_end() {
        for (len, chunk, hist) in [(10, 3, 0), (10, 3, 7), (17, 4, 4)] {
            let m = AttentionMask::streaming(len, chunk, hist);
            for q in 0..len {
                let chunk_end = (q / chunk + 1) * chunk;
                for k in chunk_end..len {
                    assert!(!m.allowed(q, k));
                }
            }
        }
    }

    #[test]
    fn wide_streaming_equals_full() {
        assert_eq!(AttentionMask::streaming(7, 7, 7), AttentionMask::full(7));
        assert_eq!(AttentionMask::streaming(7, 9, 12), AttentionMask::full(7));
    }
}
