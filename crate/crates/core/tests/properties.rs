use augsub::analysis::{flop_estimate, metrics_csv, parse_metrics};
use augsub::masking::{masked_count, sample_mask, sample_masks, MaskSpec, MaskStrategy};
use augsub::rng::{uniform01, Purpose, StreamKey};
use augsub::tensor::{grad_check, row_entropy, Tape, Tensor, Var};
use augsub::trainer::TrainRecord;
use augsub::vit::VitConfig;
use proptest::prelude::*;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = StreamKey::new(seed, Purpose::Test, 17).rng();
    Tensor::from_fn(shape, |_| scale * (2.0 * uniform01(&mut rng) - 1.0))
}

fn distribution(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = StreamKey::new(seed, Purpose::Test, 99).rng();
    let mut t: Vec<f64> = (0..rows * cols).map(|_| uniform01(&mut rng) + 0.05).collect();
    for r in t.chunks_mut(cols) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Reduces any output to a scalar through fixed random weights so every
/// output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let w = random(&shape, seed ^ 0xabc, 1.0);
    let w = tape.leaf(&w, false);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn check(
    mut params: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> augsub::Result<Var>,
) -> f64 {
    grad_check(|t, v| f(t, v), &mut params, 1e-6).unwrap().max_rel_error
}

const PRIM_TOL: f64 = 1e-4;

macro_rules! grad_ok {
    ($e:expr) => {{
        let err = $e;
        prop_assert!(err < PRIM_TOL, "max relative error {}", err);
    }};
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mask_counts_and_partition(n in 1usize..=256, ri in 0usize..6, seed in any::<u64>()) {
        let (num, den) = [(0, 1), (1, 4), (2, 5), (1, 2), (3, 5), (3, 4)][ri];
        let r = num as f64 / den as f64;
        let expected = n * num / den;
        prop_assert_eq!(masked_count(n, r), expected);
        let out = sample_mask(n, r, &mut StreamKey::new(seed, Purpose::SubMask, 0).rng());
        prop_assert_eq!(out.masked.len(), expected);
        prop_assert_eq!(out.kept.len(), n - expected);
        let mut all: Vec<usize> = out.kept.iter().chain(&out.masked).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(out.kept.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn batch_masks_are_reproducible(batch in 1usize..6, n in 1usize..40, seed in any::<u64>()) {
        let spec = MaskSpec::new(MaskStrategy::TokenRemoval, 0.5, 0, StreamKey::new(seed, Purpose::SubMask, 2)).unwrap();
        let a = sample_masks(batch, n, &spec);
        prop_assert_eq!(a.len(), batch);
        prop_assert_eq!(a, sample_masks(batch, n, &spec));
    }

    #[test]
    fn softmax_rows_and_shift(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), c in -50.0f64..50.0) {
        let x = random(&[rows, cols], seed, 8.0);
        let shifted = Tensor::new(vec![rows, cols], x.data().iter().map(|v| v + c).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&x, false);
        let b = tape.leaf(&shifted, false);
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        for r in tape.value(sa).chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for (p, q) in tape.value(sa).iter().zip(tape.value(sb)) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn soft_ce_of_own_softmax_is_entropy(rows in 1usize..5, cols in 2usize..9, seed in any::<u64>()) {
        let q = random(&[rows, cols], seed, 4.0);
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&q, false);
        let p = tape.softmax(z).unwrap();
        let probs = tape.value(p).to_vec();
        let target = tape.constant(&[rows, cols], probs.clone()).unwrap();
        let ce = tape.cross_entropy_soft(z, target).unwrap();
        let h = row_entropy(&probs, cols).iter().sum::<f64>() / rows as f64;
        prop_assert!((tape.scalar(ce) - h).abs() < 1e-6);
    }

    #[test]
    fn one_hot_soft_ce_is_hard_ce(rows in 1usize..5, cols in 2usize..9, seed in any::<u64>()) {
        let q = random(&[rows, cols], seed, 4.0);
        let labels: Vec<usize> = (0..rows).map(|i| (seed as usize + 3 * i) % cols).collect();
        let mut onehot = vec![0.0; rows * cols];
        for (i, &y) in labels.iter().enumerate() {
            onehot[i * cols + y] = 1.0;
        }
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&q, false);
        let t = tape.constant(&[rows, cols], onehot).unwrap();
        let ce = tape.cross_entropy_soft(z, t).unwrap();
        let mut hard = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let r = &q.data()[i * cols..(i + 1) * cols];
            let m = r.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            hard += lse - r[y];
        }
        prop_assert!((tape.scalar(ce) - hard / rows as f64).abs() < 1e-6);
    }

    #[test]
    fn backward_is_additive(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let x = random(&[3, 4], seed, 1.0);
        let w = random(&[4, 5], seed.wrapping_add(1), 1.0);
        let target = distribution(3, 5, seed);
        let grads = |ca: f64, cb: f64| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(&x, true);
            let wv = tape.leaf(&w, true);
            let z = tape.matmul(xv, wv).unwrap();
            let t = tape.constant(&[3, 5], target.clone()).unwrap();
            let a = tape.cross_entropy_soft(z, t).unwrap();
            let g = tape.gelu(z);
            let b = tape.sum(g);
            let a = tape.scale(a, ca);
            let b = tape.scale(b, cb);
            let l = tape.add(a, b).unwrap();
            tape.backward(l).unwrap();
            let mut out = tape.grad_or_zeros(xv);
            out.extend(tape.grad_or_zeros(wv));
            out
        };
        let (ga, gb, gab) = (grads(1.0, 0.0), grads(0.0, 1.0), grads(alpha, beta));
        for i in 0..gab.len() {
            prop_assert!((gab[i] - (alpha * ga[i] + beta * gb[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn flops_are_monotone_in_keep_ratio(k1 in 0.01f64..=1.0, k2 in 0.01f64..=1.0, dim in 1usize..5, depth in 1usize..5) {
        let c = VitConfig { dim: 16 * dim, depth, heads: 2, ..VitConfig::default() };
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        let a = flop_estimate(&c, lo).unwrap();
        let b = flop_estimate(&c, hi).unwrap();
        prop_assert!(a.ratio <= b.ratio);
        prop_assert!(a.ratio > 1.0 && b.ratio <= 2.0);
    }

    #[test]
    fn metrics_csv_roundtrip(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = StreamKey::new(seed, Purpose::Test, 5).rng();
        let mut v = || 10.0 * uniform01(&mut rng) - 2.0;
        let records: Vec<TrainRecord> = (1..=n)
            .map(|e| TrainRecord {
                epoch: e,
                step: 7 * e,
                loss_total: v(),
                loss_main: v(),
                loss_sub: v(),
                probe_eq1: v(),
                probe_eq2: v(),
                grad_norm_main: v(),
                grad_norm_sub: v(),
                lr: v() * 1e-4,
                train_acc: v(),
                eval_acc: v(),
            })
            .collect();
        let text = metrics_csv(&records);
        let back = parse_metrics(&text).unwrap();
        prop_assert_eq!(back.len(), n);
        prop_assert_eq!(metrics_csv(&back), text);
        for (a, b) in records.iter().zip(&back) {
            prop_assert!((a.loss_total - b.loss_total).abs() <= 1e-8 * a.loss_total.abs().max(1e-300));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn matmul_and_linear_gradients(m in 1usize..4, k in 1usize..5, n in 1usize..4, seed in any::<u64>()) {
        let p = vec![random(&[m, k], seed, 1.0), random(&[k, n], seed + 1, 1.0), random(&[n], seed + 2, 1.0)];
        grad_ok!(check(p.clone(), |t, v| { let y = t.matmul(v[0], v[1])?; Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p, |t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; Ok(weighted_sum(t, y, seed)) }));
    }

    #[test]
    fn batch_matmul_gradients(b in 1usize..3, m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in any::<u64>()) {
        let p = vec![random(&[b, m, k], seed, 1.0), random(&[b, k, n], seed + 1, 1.0), random(&[b, n, k], seed + 2, 1.0)];
        grad_ok!(check(p.clone(), |t, v| { let y = t.batch_matmul(v[0], v[1], false)?; Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p, |t, v| { let y = t.batch_matmul(v[0], v[2], true)?; Ok(weighted_sum(t, y, seed)) }));
    }

    #[test]
    fn elementwise_gradients(r in 1usize..4, c in 1usize..6, seed in any::<u64>()) {
        let p = vec![random(&[r, c], seed, 2.0), random(&[r, c], seed + 1, 2.0), random(&[c], seed + 2, 1.0)];
        grad_ok!(check(p.clone(), |t, v| { let y = t.add(v[0], v[1])?; Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p.clone(), |t, v| { let y = t.mul(v[0], v[1])?; Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p.clone(), |t, v| { let y = t.add_broadcast(v[0], v[2])?; Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p.clone(), |t, v| { let y = t.gelu(v[0]); Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p.clone(), |t, v| { let y = t.sigmoid(v[0]); Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p.clone(), |t, v| { let y = t.softmax(v[0])?; Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p.clone(), |t, v| { let y = t.scale(v[0], -1.5); Ok(weighted_sum(t, y, seed)) }));
        let mask: Vec<f64> = (0..r).map(|i| if i % 2 == 0 { 1.25 } else { 0.0 }).collect();
        grad_ok!(check(p, move |t, v| { let y = t.mul_const(v[0], mask.clone(), c)?; Ok(weighted_sum(t, y, seed)) }));
    }

    #[test]
    fn layer_norm_gradients(r in 1usize..4, c in 2usize..7, seed in any::<u64>()) {
        let p = vec![random(&[r, c], seed, 2.0), random(&[c], seed + 1, 1.0), random(&[c], seed + 2, 1.0)];
        grad_ok!(check(p, |t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?; Ok(weighted_sum(t, y, seed)) }));
    }

    #[test]
    fn loss_gradients(r in 1usize..4, c in 2usize..6, seed in any::<u64>()) {
        let p = vec![random(&[r, c], seed, 3.0)];
        let target = distribution(r, c, seed);
        let t2 = target.clone();
        grad_ok!(check(p.clone(), move |t, v| { let q = t.constant(&[r, c], target.clone())?; t.cross_entropy_soft(v[0], q) }));
        grad_ok!(check(p, move |t, v| { let q = t.constant(&[r, c], t2.clone())?; t.bce_soft(v[0], q) }));
    }

    #[test]
    fn token_op_gradients(n in 1usize..3, tk in 2usize..5, d in 1usize..4, seed in any::<u64>()) {
        let p = vec![random(&[n, tk, d], seed, 1.0), random(&[d], seed + 1, 1.0), random(&[n, tk, 2 * d], seed + 2, 1.0)];
        let keep: Vec<Vec<usize>> = (0..n).map(|s| vec![(s + 1) % tk, s % tk]).collect();
        let masked: Vec<bool> = (0..n * tk).map(|i| i % 3 == 0).collect();
        grad_ok!(check(p.clone(), |t, v| { let y = t.select_token(v[0], 0)?; Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p.clone(), |t, v| { let y = t.mean_tokens(v[0])?; Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p.clone(), move |t, v| { let y = t.gather_tokens(v[0], &keep)?; Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p.clone(), move |t, v| { let y = t.mask_fill(v[0], v[1], masked.clone())?; Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p.clone(), |t, v| { let y = t.prepend_token(v[0], v[1])?; Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p, |t, v| {
            let h = t.heads_split(v[2], d, 1, d)?;
            let y = t.heads_merge(h, 1)?;
            Ok(weighted_sum(t, y, seed))
        }));
    }

    #[test]
    fn patchify_and_reshape_gradients(n in 1usize..3, seed in any::<u64>()) {
        let p = vec![random(&[n, 3, 4, 4], seed, 1.0)];
        grad_ok!(check(p.clone(), |t, v| { let y = t.patchify(v[0], 2)?; Ok(weighted_sum(t, y, seed)) }));
        grad_ok!(check(p, move |t, v| { let y = t.reshape(v[0], &[n * 3, 16])?; Ok(weighted_sum(t, y, seed)) }));
    }
}

#[test]
fn grad_check_examples() {
    let theta = vec![random(&[5], 3, 2.0)];
    let quad = check(theta, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        Ok(t.sum(sq))
    });
    assert!(quad < 1e-9, "{quad}");

    let p = vec![random(&[4, 3], 1, 1.0), random(&[3, 5], 2, 1.0), random(&[5], 3, 1.0)];
    let target = distribution(4, 5, 4);
    let lin = check(p, move |t, v| {
        let z = t.linear(v[0], v[1], Some(v[2]))?;
        let q = t.constant(&[4, 5], target.clone())?;
        t.cross_entropy_soft(z, q)
    });
    assert!(lin < 1e-6, "{lin}");
}

#[test]
fn grad_check_rejects_nondeterminism() {
    let mut calls = 0.0;
    let mut p = vec![random(&[2], 0, 1.0)];
    let err = grad_check(
        |t, v| {
            calls += 1.0;
            let s = t.sum(v[0]);
            Ok(t.scale(s, calls))
        },
        &mut p,
        1e-6,
    )
    .unwrap_err();
    assert!(matches!(err, augsub::Error::Determinism { .. }));
}

#[test]
fn two_layer_net_gradients() {
    let p = vec![
        random(&[3, 6], 1, 1.0),
        random(&[6, 8], 2, 0.5),
        random(&[8], 3, 0.1),
        random(&[8, 4], 4, 0.5),
        random(&[4], 5, 0.1),
    ];
    let target = distribution(3, 4, 6);
    let err = check(p, move |t, v| {
        let h = t.linear(v[0], v[1], Some(v[2]))?;
        let h = t.gelu(h);
        let z = t.linear(h, v[3], Some(v[4]))?;
        let q = t.constant(&[3, 4], target.clone())?;
        t.cross_entropy_soft(z, q)
    });
    assert!(err < 1e-4, "{err}");
}
