//! Masking strategies that turn a batch into a sub-branch input.
//!
//! Masks are exact-count: `floor(n * r)` of the `n` patch positions are
//! masked, chosen by a seeded shuffle. The class token is never maskable.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{permutation, StreamKey};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::vit::{Bound, TokenPositions, Vit};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    #[default]
    TokenRemoval,
    MaskToken,
    ZeroFill,
}

/// Masking strategy, ratio and the stream its masks are drawn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    /// Cell size in pixels for zero-fill; ignored by the token strategies.
    pub patch_size: usize,
    pub stream: StreamKey,
}

impl MaskSpec {
    pub fn new(strategy: MaskStrategy, ratio: f64, patch_size: usize, stream: StreamKey) -> Result<Self> {
        check_ratio(ratio)?;
        if strategy == MaskStrategy::ZeroFill && patch_size == 0 {
            return Err(Error::Config("zero-fill needs a positive mask patch size".into()));
        }
        Ok(MaskSpec {
            strategy,
            ratio,
            patch_size,
            stream,
        })
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Range {
            what: "mask ratio",
            value: r,
            range: "[0, 1]",
        })
    }
}

/// Kept and masked patch positions of one sample, both ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskOutcome {
    pub kept: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskOutcome {
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.kept.len() + self.masked.len()];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }
}

/// `floor(n * r)`, with a small tolerance so that ratios like 0.6 written
/// in decimal do not lose a token to rounding.
pub fn masked_count(n: usize, r: f64) -> usize {
    ((n as f64 * r + 1e-9).floor() as usize).min(n)
}

/// Exactly `masked_count(n, r)` uniformly chosen masked positions.
pub fn sample_mask<R: RngCore + ?Sized>(n: usize, r: f64, rng: &mut R) -> MaskOutcome {
    let m = masked_count(n, r);
    let perm = permutation(n, rng);
    let mut masked = perm[..m].to_vec();
    let mut kept = perm[m..].to_vec();
    masked.sort_unstable();
    kept.sort_unstable();
    MaskOutcome { kept, masked }
}

/// One independent mask per sample, all drawn from `spec.stream`.
pub fn sample_masks(batch: usize, n: usize, spec: &MaskSpec) -> Vec<MaskOutcome> {
    let mut rng = spec.stream.rng();
    (0..batch).map(|_| sample_mask(n, spec.ratio, &mut rng)).collect()
}

/// Keeps only the unmasked tokens of `[N, T, D]`, in original order.
pub fn token_removal<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    outcomes: &[MaskOutcome],
) -> Result<(Var, TokenPositions)> {
    let keep: Vec<Vec<usize>> = outcomes.iter().map(|o| o.kept.clone()).collect();
    if keep.iter().any(Vec::is_empty) {
        return Err(Error::Contract("token removal would leave no tokens".into()));
    }
    let out = tape.gather_tokens(tokens, &keep)?;
    Ok((out, TokenPositions::Kept(keep)))
}

/// Replaces masked tokens of `[N, T, D]` with the learnable mask token.
pub fn mask_token_fill<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    outcomes: &[MaskOutcome],
    mask_token: Var,
) -> Result<Var> {
    let shape = tape.shape(tokens);
    if shape.len() != 3 || outcomes.len() != shape[0] {
        return Err(Error::shape("mask_token_fill", shape, &[outcomes.len()]));
    }
    let t = shape[1];
    let mut flags = Vec::with_capacity(outcomes.len() * t);
    for o in outcomes {
        let f = o.flags();
        if f.len() != t {
            return Err(Error::shape("mask_token_fill", &[f.len()], &[t]));
        }
        flags.extend(f);
    }
    tape.mask_fill(tokens, mask_token, flags)
}

/// Zeroes `floor(cells * r)` square cells of side `patch_size` in every image.
pub fn zero_fill_image<T: Real>(images: &Tensor<T>, ratio: f64, patch_size: usize, stream: StreamKey) -> Result<Tensor<T>> {
    check_ratio(ratio)?;
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("zero_fill_image", s, &[0, 0, 0, 0]));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {patch_size}-pixel cells"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let mut out = images.clone();
    let mut rng = stream.rng();
    let data = out.data_mut();
    for img in 0..n {
        let outcome = sample_mask(gh * gw, ratio, &mut rng);
        for &cell in &outcome.masked {
            let (cy, cx) = (cell / gw, cell % gw);
            for ch in 0..c {
                for y in cy * patch_size..(cy + 1) * patch_size {
                    let row = ((img * c + ch) * h + y) * w;
                    data[row + cx * patch_size..row + (cx + 1) * patch_size].fill(T::zero());
                }
            }
        }
    }
    Ok(out)
}

/// Embeds `images` under `spec`, returning the token sequence ready for
/// [`Vit::forward`] together with its surviving positions.
pub fn embed_masked<T: Real>(
    vit: &Vit,
    tape: &mut Tape<T>,
    bound: &Bound,
    images: &Tensor<T>,
    spec: &MaskSpec,
) -> Result<(Var, TokenPositions)> {
    let n = images.shape().first().copied().unwrap_or(0);
    let patches = vit.config().num_patches();
    match spec.strategy {
        MaskStrategy::TokenRemoval => {
            if patches - masked_count(patches, spec.ratio) == 0 {
                return Err(Error::Contract("token removal would leave no tokens".into()));
            }
            let x = tape.leaf(images, false);
            let x = vit.project_patches(tape, bound, x)?;
            let x = vit.add_positions(tape, bound, x)?;
            let outcomes = sample_masks(n, patches, spec);
            let (x, positions) = token_removal(tape, x, &outcomes)?;
            Ok((vit.prepend_class(tape, bound, x)?, positions))
        }
        MaskStrategy::MaskToken => {
            let x = tape.leaf(images, false);
            let x = vit.project_patches(tape, bound, x)?;
            let outcomes = sample_masks(n, patches, spec);
            let x = mask_token_fill(tape, x, &outcomes, vit.mask_token_var(bound))?;
            let x = vit.add_positions(tape, bound, x)?;
            Ok((vit.prepend_class(tape, bound, x)?, TokenPositions::All))
        }
        MaskStrategy::ZeroFill => {
            let filled = zero_fill_image(images, spec.ratio, spec.patch_size, spec.stream)?;
            let x = tape.leaf(&filled, false);
            Ok((vit.patch_embed(tape, bound, x)?, TokenPositions::All))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn key(seed: u64) -> StreamKey {
        StreamKey::new(seed, Purpose::SubMask, 0)
    }

    #[test]
    fn counts_and_identity() {
        let mut rng = key(0).rng();
        let o = sample_mask(16, 0.5, &mut rng);
        assert_eq!((o.masked.len(), o.kept.len()), (8, 8));
        let o = sample_mask(10, 0.0, &mut rng);
        assert!(o.masked.is_empty());
        assert_eq!(o.kept, (0..10).collect::<Vec<_>>());
        assert_eq!(masked_count(10, 0.75), 7);
        assert_eq!(masked_count(5, 0.6), 3);
        assert_eq!(masked_count(4, 1.0), 4);
    }

    #[test]
    fn seeded_golden_mask() {
        // independent Fisher-Yates with Lemire draws, written out longhand
        use rand::RngCore;
        let mut rng = key(7).rng();
        let mut idx: Vec<usize> = (0..10).collect();
        for i in (1..10).rev() {
            let bound = (i + 1) as u64;
            let threshold = bound.wrapping_neg() % bound;
            let j = loop {
                let m = (rng.next_u64() as u128) * (bound as u128);
                if (m as u64) >= threshold {
                    break (m >> 64) as usize;
                }
            };
            idx.swap(i, j);
        }
        let mut want: Vec<usize> = idx[..7].to_vec();
        want.sort_unstable();

        let o = sample_mask(10, 0.75, &mut key(7).rng());
        assert_eq!(o.masked, want);
        assert_eq!(o.masked, vec![0, 2, 3, 5, 6, 7, 9]);
        assert_eq!(o.kept, vec![1, 4, 8]);
    }

    #[test]
    fn same_key_same_masks() {
        let spec = MaskSpec::new(MaskStrategy::TokenRemoval, 0.5, 0, key(3)).unwrap();
        assert_eq!(sample_masks(4, 16, &spec), sample_masks(4, 16, &spec));
        let other = MaskSpec {
            stream: StreamKey::new(3, Purpose::SubMask, 1),
            ..spec
        };
        assert_ne!(sample_masks(4, 16, &spec), sample_masks(4, 16, &other));
    }

    #[test]
    fn ratio_out_of_range() {
        assert!(matches!(
            MaskSpec::new(MaskStrategy::MaskToken, 1.5, 0, key(0)),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn removal_gathers_and_scatters() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_fn(&[1, 4, 2], |i| i as f64), true);
        let o = MaskOutcome {
            kept: vec![0, 2],
            masked: vec![1, 3],
        };
        let (y, pos) = token_removal(&mut tape, x, &[o]).unwrap();
        assert_eq!(tape.value(y), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(pos, TokenPositions::Kept(vec![vec![0, 2]]));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);

        let empty = MaskOutcome {
            kept: vec![],
            masked: vec![0, 1, 2, 3],
        };
        assert!(matches!(token_removal(&mut tape, x, &[empty]), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_token_fill_all_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_fn(&[2, 3, 2], |i| i as f64), true);
        let token = tape.leaf(&Tensor::new(vec![2], vec![-1.0, 7.0]).unwrap(), true);
        let all = sample_mask(3, 1.0, &mut key(1).rng());
        let some = sample_mask(3, 0.4, &mut key(2).rng());
        let y = mask_token_fill(&mut tape, x, &[all.clone(), some.clone()], token).unwrap();
        let vals = tape.value(y).to_vec();
        for t in 0..3 {
            assert_eq!(&vals[t * 2..t * 2 + 2], &[-1.0, 7.0]);
        }
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let count = (all.masked.len() + some.masked.len()) as f64;
        assert_eq!(tape.grad(token).unwrap(), &[count, count]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_fn(&[1, 3, 2], |i| i as f64), true);
        let token = tape.leaf(&Tensor::zeros(&[2]), true);
        let none = sample_mask(3, 0.0, &mut key(1).rng());
        let y = mask_token_fill(&mut tape, x, &[none], token).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn zero_fill_cells() {
        let images = Tensor::<f32>::full(&[3, 2, 32, 32], 1.0);
        let same = zero_fill_image(&images, 0.0, 16, key(0)).unwrap();
        assert_eq!(same, images);
        let out = zero_fill_image(&images, 0.5, 16, key(0)).unwrap();
        for img in out.data().chunks(2 * 32 * 32) {
            let zeros = img.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, 2 * 32 * 32 / 2);
            let mut cells = 0;
            for cy in 0..2 {
                for cx in 0..2 {
                    let v = img[(cy * 16) * 32 + cx * 16];
                    let uniform = (0..2).all(|ch| {
                        (0..16).all(|y| {
                            (0..16).all(|x| img[(ch * 32 + cy * 16 + y) * 32 + cx * 16 + x] == v)
                        })
                    });
                    assert!(uniform);
                    cells += usize::from(v == 0.0);
                }
            }
            assert_eq!(cells, 2);
        }
        assert!(matches!(zero_fill_image(&images, 0.5, 5, key(0)), Err(Error::Config(_))));
    }
}
