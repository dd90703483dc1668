//! Seeded synthetic token generators.
//!
//! Two distributions are offered. `Gaussian` draws iid standard normal
//! entries and scales token `i` by a deterministic amplitude that ramps
//! linearly from 0.5 at the start of the sequence to 1.5 at the end, giving
//! blocks genuinely different spreads the way real activations have
//! position-dependent scale. `Heavy` draws a log-normal(0, 1) length times
//! a uniformly random unit direction, producing the occasional token with a
//! norm far above the bulk.
//!
//! Determinism contract: a (seed, head, stream, shape, dist) tuple fully
//! determines the output. Heads and the Q/K/V streams get their own
//! sub-seeds through a splitmix64 mix, so head 1's keys never share a
//! sample sequence with head 0's queries. Every generated entry is rounded
//! through f32, which makes a generate/write/read cycle lossless for the
//! on-disk f32 format.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, TokenMatrix};

/// Token distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dist {
    Gaussian,
    Heavy,
}

impl std::str::FromStr for Dist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Dist::Gaussian),
            "heavy" => Ok(Dist::Heavy),
            other => Err(Error::Config {
                field: "dist",
                reason: format!("unknown distribution {other:?}, expected gaussian or heavy"),
            }),
        }
    }
}

impl std::fmt::Display for Dist {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dist::Gaussian => "gaussian",
            Dist::Heavy => "heavy",
        })
    }
}

/// Input role within one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Query = 0,
    Key = 1,
    Value = 2,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the sub-seed for one (head, stream) pair from a base seed.
///
/// The base seed is mixed with the head index, then with the stream index,
/// each through one splitmix64 round, so nearby inputs land on unrelated
/// generator states.
pub fn derive_seed(base: u64, head: u64, stream: Stream) -> u64 {
    let h = splitmix64(base ^ splitmix64(head));
    splitmix64(h ^ splitmix64(0x5EED_0000 + stream as u64))
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates a seeded `rows x cols` token matrix.
pub fn generate_tokens(seed: u64, rows: usize, cols: usize, dist: Dist) -> Result<TokenMatrix> {
    if rows == 0 {
        return Err(Error::ZeroDim("rows"));
    }
    if cols == 0 {
        return Err(Error::ZeroDim("cols"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(rows * cols);
    match dist {
        Dist::Gaussian => {
            for i in 0..rows {
                let amp = if rows == 1 {
                    1.0
                } else {
                    0.5 + i as f64 / (rows - 1) as f64
                };
                for _ in 0..cols {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(round_f32(amp * z));
                }
            }
        }
        Dist::Heavy => {
            for _ in 0..rows {
                let scale = f64::exp(rng.sample::<f64, _>(StandardNormal));
                let mut dir: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
                let mut norm = l2_norm(&dir);
                while norm == 0.0 {
                    for v in &mut dir {
                        *v = rng.sample(StandardNormal);
                    }
                    norm = l2_norm(&dir);
                }
                data.extend(dir.iter().map(|v| round_f32(scale * v / norm)));
            }
        }
    }
    TokenMatrix::new(rows, cols, data)
}

/// Generates the Q, K, V triple for one head.
pub fn generate_head(
    seed: u64,
    head: u64,
    rows: usize,
    cols: usize,
    dist: Dist,
) -> Result<(TokenMatrix, TokenMatrix, TokenMatrix)> {
    let q = generate_tokens(derive_seed(seed, head, Stream::Query), rows, cols, dist)?;
    let k = generate_tokens(derive_seed(seed, head, Stream::Key), rows, cols, dist)?;
    let v = generate_tokens(derive_seed(seed, head, Stream::Value), rows, cols, dist)?;
    Ok((q, k, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_tokens(42, 16, 8, Dist::Gaussian).unwrap();
        let b = generate_tokens(42, 16, 8, Dist::Gaussian).unwrap();
        assert_eq!(a, b);
        let c = generate_tokens(43, 16, 8, Dist::Gaussian).unwrap();
        assert_ne!(a, c);

        let h = generate_tokens(42, 16, 8, Dist::Heavy).unwrap();
        let h2 = generate_tokens(42, 16, 8, Dist::Heavy).unwrap();
        assert_eq!(h, h2);
        assert_ne!(a, h);
    }

    #[test]
    fn entries_are_f32_exact() {
        for dist in [Dist::Gaussian, Dist::Heavy] {
            let m = generate_tokens(7, 64, 16, dist).unwrap();
            for v in m.as_slice() {
                assert_eq!(*v, *v as f32 as f64);
            }
        }
    }

    #[test]
    fn sub_seeds_separate_heads_and_streams() {
        let mut seen = std::collections::HashSet::new();
        for head in 0..4 {
            for stream in [Stream::Query, Stream::Key, Stream::Value] {
                assert!(seen.insert(derive_seed(99, head, stream)));
            }
        }
        let (q, k, v) = generate_head(99, 0, 32, 8, Dist::Gaussian).unwrap();
        assert_ne!(q, k);
        assert_ne!(q, v);
        assert_ne!(k, v);
        let (q1, _, _) = generate_head(99, 1, 32, 8, Dist::Gaussian).unwrap();
        assert_ne!(q, q1);
    }

    #[test]
    fn gaussian_amplitude_ramps_along_the_sequence() {
        let m = generate_tokens(3, 2048, 16, Dist::Gaussian).unwrap();
        let band_rms = |lo: usize, hi: usize| {
            let mut s = 0.0;
            let mut n = 0usize;
            for i in lo..hi {
                for v in m.row(i) {
                    s += v * v;
                    n += 1;
                }
            }
            (s / n as f64).sqrt()
        };
        let head = band_rms(0, 256);
        let tail = band_rms(2048 - 256, 2048);
        assert!(head < 0.75, "early-band rms {head} should sit near 0.56");
        assert!(tail > 1.2, "late-band rms {tail} should sit near 1.44");
    }

    #[test]
    fn heavy_tokens_have_log_normal_lengths() {
        let m = generate_tokens(11, 4096, 32, Dist::Heavy).unwrap();
        let logs: Vec<f64> = m.iter_rows().map(|r| l2_norm(r).ln()).collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let var = logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / logs.len() as f64;
        assert!(mean.abs() < 0.08, "log-norm mean {mean} should be near 0");
        assert!(
            (var - 1.0).abs() < 0.12,
            "log-norm variance {var} should be near 1"
        );
    }

    #[test]
    fn heavy_norms_show_more_kurtosis_than_gaussian() {
        let kurtosis = |xs: &[f64]| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
            m4 / (m2 * m2)
        };
        for seed in 0..20 {
            let h = generate_tokens(seed, 512, 64, Dist::Heavy).unwrap();
            let g = generate_tokens(seed, 512, 64, Dist::Gaussian).unwrap();
            let hk = kurtosis(&h.iter_rows().map(l2_norm).collect::<Vec<_>>());
            let gk = kurtosis(&g.iter_rows().map(l2_norm).collect::<Vec<_>>());
            assert!(
                hk > gk,
                "seed {seed}: heavy norm kurtosis {hk} should exceed gaussian {gk}"
            );
        }
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn shapes_and_finiteness(seed in 0u64..1000, rows in 1usize..64, cols in 1usize..16) {
                for dist in [Dist::Gaussian, Dist::Heavy] {
                    let m = generate_tokens(seed, rows, cols, dist).unwrap();
                    prop_assert_eq!(m.rows(), rows);
                    prop_assert_eq!(m.cols(), cols);
                    prop_assert!(m.as_slice().iter().all(|v| v.is_finite()));
                }
            }
        }
    }
}
