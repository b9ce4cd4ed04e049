//! Shared oracles for the gradient-check and acceptance suites: central
//! finite differences, naive loop references for the structured kernels, and
//! bulk invariant checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use specmix::autodiff::nn::{self, Mode};
use specmix::autodiff::{NodeId, Tape, Tensor};
use specmix::error::Result;

pub const FD_H: f64 = 1e-5;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect(),
    )
    .unwrap()
}

/// Evaluate a scalar-building closure at the given parameter values.
fn eval<F>(inits: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inits
        .iter()
        .map(|t| tape.leaf(t.clone(), true).unwrap())
        .collect();
    let out = f(&mut tape, &ids).unwrap();
    tape.value(out).item().unwrap()
}

/// Compare analytic gradients to central finite differences over a sample of
/// elements of every parameter tensor.
pub fn check_grads<F>(inits: Vec<Tensor>, f: F, tol: f64, max_samples: usize)
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inits
        .iter()
        .map(|t| tape.leaf(t.clone(), true).unwrap())
        .collect();
    let out = f(&mut tape, &ids).unwrap();
    let grads = tape.backward(out).unwrap();
    for (ti, init) in inits.iter().enumerate() {
        let analytic = grads
            .get(ids[ti])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(init.shape()));
        let stride = (init.len() / max_samples).max(1);
        for j in (0..init.len()).step_by(stride) {
            let a = analytic.data()[j];
            // Multiple step sizes guard against a sample landing within h of
            // a piecewise-linear kink (LReLU / pooling boundaries).
            let mut best = f64::INFINITY;
            let mut best_numeric = f64::NAN;
            for h in [FD_H, 1e-6, 5e-5] {
                let mut plus = inits.clone();
                plus[ti].data_mut()[j] += h;
                let mut minus = inits.clone();
                minus[ti].data_mut()[j] -= h;
                let numeric = (eval(&plus, &f) - eval(&minus, &f)) / (2.0 * h);
                let denom = 1.0f64.max(a.abs()).max(numeric.abs());
                let rel = ((a - numeric) / denom).abs();
                if rel < best {
                    best = rel;
                    best_numeric = numeric;
                }
                if best < tol {
                    break;
                }
            }
            assert!(
                best < tol,
                "tensor {} element {}: analytic {} vs numeric {}",
                ti,
                j,
                a,
                best_numeric
            );
        }
    }
}

/// Weighted sum so the scalar is sensitive to every output element.
pub fn weighted_sum(tape: &mut Tape, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = tape.constant(randn(&mut rng, &shape, 1.0))?;
    let p = tape.mul(x, w)?;
    tape.sum_all(p)
}

// ---- per-group gradient suites ---------------------------------------------

pub fn elementwise_fd_suite() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [2 + (seed % 3) as usize, 3];
        let a = randn(&mut rng, &shape, 1.0);
        let b = {
            // keep divisors away from zero
            let mut t = randn(&mut rng, &shape, 1.0);
            for v in t.data_mut() {
                *v = v.signum().max(-1.0).min(1.0) * (v.abs() + 0.5);
            }
            t
        };
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>)> = vec![
            ("add", Box::new(move |t, ids| {
                let y = t.add(ids[0], ids[1])?;
                weighted_sum(t, y, seed)
            })),
            ("sub", Box::new(move |t, ids| {
                let y = t.sub(ids[0], ids[1])?;
                weighted_sum(t, y, seed)
            })),
            ("mul", Box::new(move |t, ids| {
                let y = t.mul(ids[0], ids[1])?;
                weighted_sum(t, y, seed)
            })),
            ("div", Box::new(move |t, ids| {
                let y = t.div(ids[0], ids[1])?;
                weighted_sum(t, y, seed)
            })),
            ("neg", Box::new(move |t, ids| {
                let y = t.neg(ids[0])?;
                weighted_sum(t, y, seed)
            })),
            ("exp", Box::new(move |t, ids| {
                let y = t.exp(ids[0])?;
                weighted_sum(t, y, seed)
            })),
            ("sqrt_of_square", Box::new(move |t, ids| {
                let s = t.square(ids[0])?;
                let s = t.add_const(s, 0.3)?;
                let y = t.sqrt(s)?;
                weighted_sum(t, y, seed)
            })),
            ("tanh", Box::new(move |t, ids| {
                let y = t.tanh(ids[0])?;
                weighted_sum(t, y, seed)
            })),
            ("sigmoid", Box::new(move |t, ids| {
                let y = t.sigmoid(ids[0])?;
                weighted_sum(t, y, seed)
            })),
            ("lrelu", Box::new(move |t, ids| {
                let y = t.lrelu(ids[0], 0.01)?;
                weighted_sum(t, y, seed)
            })),
            ("abs", Box::new(move |t, ids| {
                let y = t.abs(ids[1])?; // ids[1] is bounded away from zero
                weighted_sum(t, y, seed)
            })),
            ("scale_addconst", Box::new(move |t, ids| {
                let y = t.scale(ids[0], -2.5)?;
                let y = t.add_const(y, 0.7)?;
                weighted_sum(t, y, seed)
            })),
            ("ln", Box::new(move |t, ids| {
                let s = t.square(ids[0])?;
                let s = t.add_const(s, 0.5)?;
                let y = t.ln(s)?;
                weighted_sum(t, y, seed)
            })),
            ("acos", Box::new(move |t, ids| {
                let y = t.tanh(ids[0])?;
                let y = t.scale(y, 0.9)?;
                let y = t.acos(y)?;
                weighted_sum(t, y, seed)
            })),
            ("clamp_interior", Box::new(move |t, ids| {
                let y = t.clamp(ids[0], -50.0, 50.0)?;
                weighted_sum(t, y, seed)
            })),
        ];
        for (name, f) in cases {
            let inits = vec![a.clone(), b.clone()];
            let f2 = move |t: &mut Tape, ids: &[NodeId]| f(t, ids);
            std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                check_grads(inits, f2, 1e-4, 6)
            }))
            .unwrap_or_else(|_| panic!("gradcheck failed for op {} seed {}", name, seed));
        }
    }
}

pub fn linalg_fd_suite() {
    for seed in 0..15u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = randn(&mut rng, &[3, 4], 1.0);
        let b = randn(&mut rng, &[4, 2], 1.0);
        check_grads(
            vec![a.clone(), b.clone()],
            move |t, ids| {
                let y = t.matmul(ids[0], ids[1])?;
                weighted_sum(t, y, seed)
            },
            1e-4,
            8,
        );
        check_grads(
            vec![a.clone()],
            move |t, ids| {
                let y = t.transpose(ids[0])?;
                weighted_sum(t, y, seed + 1)
            },
            1e-4,
            8,
        );
        check_grads(
            vec![a.clone()],
            move |t, ids| {
                let y = t.reshape(ids[0], vec![2, 6])?;
                let y = t.reduce_sum(y, &[0])?;
                weighted_sum(t, y, seed + 2)
            },
            1e-4,
            8,
        );
        check_grads(
            vec![a.clone(), b.clone()],
            move |t, ids| {
                // broadcasting add: [3,4] + [4]
                let row = t.reduce_sum(ids[1], &[1])?; // [4,1]
                let row = t.reshape(row, vec![4])?;
                let y = t.add(ids[0], row)?;
                weighted_sum(t, y, seed + 3)
            },
            1e-4,
            8,
        );
        let c = randn(&mut rng, &[2, 5, 3], 1.0);
        check_grads(
            vec![c.clone()],
            move |t, ids| {
                let s = t.slice(ids[0], 1, 1, 3)?;
                let p = t.pad_zero(s, 1, 1, 1)?;
                let y = t.concat(&[p, ids[0]], 2)?;
                weighted_sum(t, y, seed + 4)
            },
            1e-4,
            8,
        );
    }
}

pub fn conv_pool_fd_suite() {
    for seed in 0..15u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let t_len = 6 + (seed % 5) as usize;
        let x = randn(&mut rng, &[2, t_len, 3], 1.0);
        let w = randn(&mut rng, &[3, 3, 4], 1.0);
        for stride in [1usize, 2] {
            let xs = x.clone();
            let ws = w.clone();
            check_grads(
                vec![xs, ws],
                move |t, ids| {
                    let y = t.conv1d(ids[0], ids[1], stride)?;
                    weighted_sum(t, y, seed * 10 + stride as u64)
                },
                1e-4,
                10,
            );
        }
        for k in [2usize, 3] {
            let xs = x.clone();
            check_grads(
                vec![xs],
                move |t, ids| {
                    let y = t.avg_pool1d(ids[0], k)?;
                    weighted_sum(t, y, seed * 20 + k as u64)
                },
                1e-4,
                10,
            );
        }
    }
}

pub fn encoder_fd_suite() {
    use specmix::encoder::{self, EncoderParams};
    use specmix::params::ParamGroup;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let params = EncoderParams::init(&mut rng, 25, 4).unwrap();
        let batch = randn(&mut rng, &[3, 25], 1.0);
        let mut inits: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        inits.push(batch);
        let template = params.clone();
        check_grads(
            inits,
            move |t, ids| {
                let mut p = template.clone();
                for (dst, &src) in p.tensors_mut().into_iter().zip(ids.iter()) {
                    *dst = t.value(src).clone();
                }
                let bound = encoder::EncoderBound { ids: ids[..14].to_vec() };
                let (z, _) = encoder::encode(&mut p, &bound, t, ids[14], Mode::Train)?;
                weighted_sum(t, z, seed + 50)
            },
            1e-4,
            3,
        );
    }
}

pub fn mixture_fd_suite() {
    use specmix::mixture::{self, MixtureConfig, MixtureParams};
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let cfg = MixtureConfig { materials: 3, components: 4, latent_dim: 5 };
        let params = MixtureParams::init(&mut rng, cfg).unwrap();
        let z = randn(&mut rng, &[2, 5], 1.0);
        let inits = vec![
            params.w1.clone(),
            params.b1.clone(),
            params.w2.clone(),
            params.b2.clone(),
            z,
        ];
        check_grads(
            inits,
            move |t, ids| {
                let p = MixtureParams {
                    w1: t.value(ids[0]).clone(),
                    b1: t.value(ids[1]).clone(),
                    w2: t.value(ids[2]).clone(),
                    b2: t.value(ids[3]).clone(),
                    cfg,
                };
                let bound = mixture::MixtureBound { ids: ids[..4].to_vec() };
                let y = mixture::abundances(&p, &bound, t, ids[4])?;
                weighted_sum(t, y, seed + 60)
            },
            1e-4,
            6,
        );
    }
}

pub fn decoder_fd_suite() {
    use specmix::decoder::{self, DecoderParams};
    use specmix::params::ParamGroup;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let params = DecoderParams::init(&mut rng, 3, 2, 7);
        let mut y = randn(&mut rng, &[2, 3], 0.3);
        for v in y.data_mut() {
            *v = v.abs() + 0.1;
        }
        let eta = randn(&mut rng, &[2, 2], 1.0);
        let endm = {
            let mut t = randn(&mut rng, &[3, 7], 1.0);
            for v in t.data_mut() {
                *v = v.abs() + 0.05;
            }
            t
        };
        let mut inits: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        inits.push(y);
        let template = params.clone();
        check_grads(
            inits,
            move |t, ids| {
                let mut p = template.clone();
                for (dst, &src) in p.tensors_mut().into_iter().zip(ids.iter()) {
                    *dst = t.value(src).clone();
                }
                let bound = decoder::DecoderBound { ids: ids[..10].to_vec() };
                let en = t.constant(endm.clone())?;
                let et = t.constant(eta.clone())?;
                let xh = decoder::reconstruct(&p, &bound, t, ids[10], en, et)?;
                weighted_sum(t, xh, seed + 70)
            },
            1e-4,
            4,
        );
    }
}

pub fn critic_fd_suite() {
    use specmix::critic::{self, CriticParams};
    use specmix::params::ParamGroup;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let params = CriticParams::init(&mut rng, 25).unwrap();
        let batch = randn(&mut rng, &[3, 25], 1.0);
        let mut inits: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        inits.push(batch);
        let template = params.clone();
        check_grads(
            inits,
            move |t, ids| {
                let mut p = template.clone();
                for (dst, &src) in p.tensors_mut().into_iter().zip(ids.iter()) {
                    *dst = t.value(src).clone();
                }
                let bound = critic::CriticBound { ids: ids[..17].to_vec() };
                let (d, _) = critic::discriminate(&mut p, &bound, t, ids[17], Mode::Train)?;
                weighted_sum(t, d, seed + 80)
            },
            1e-4,
            3,
        );
    }
}

pub fn losses_fd_suite() {
    use specmix::losses::{reconstruction_loss, ReconWeights};
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let mut x = randn(&mut rng, &[3, 6], 1.0);
        for v in x.data_mut() {
            *v = v.abs() + 0.1;
        }
        let xh = randn(&mut rng, &[3, 6], 1.0);
        let mut yh = randn(&mut rng, &[3, 2], 0.3);
        for v in yh.data_mut() {
            *v = v.abs() + 0.05;
        }
        let xc = x.clone();
        check_grads(
            vec![xh, yh],
            move |t, ids| {
                let xn = t.constant(xc.clone())?;
                let w = ReconWeights { lambda0: 0.7, lambda1: 0.4, lambda2: 0.01 };
                reconstruction_loss(t, xn, ids[0], ids[1], &[ids[0]], w)
            },
            1e-4,
            8,
        );
    }
}

pub fn penalty_fd_suite() {
    // d(penalty)/d(params) requires differentiating through the gradient of
    // the critic output with respect to its input.
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let w = randn(&mut rng, &[4, 1], 1.0);
        let b = randn(&mut rng, &[1], 1.0);
        let x = randn(&mut rng, &[3, 4], 1.0);
        let xc = x.clone();
        check_grads(
            vec![w, b],
            move |t, ids| {
                let xn = t.leaf(xc.clone(), false)?;
                // mildly nonlinear per-sample score so the input gradient
                // depends on the parameters nontrivially
                let lin = t.matmul(xn, ids[0])?;
                let lin = t.add(lin, ids[1])?;
                let sq = t.tanh(lin)?;
                let score = t.mul(lin, sq)?;
                let s = t.sum_all(score)?;
                nn::gradient_norm_penalty(t, s, xn)
            },
            1e-3,
            4,
        );
    }
}

pub fn critic_penalty_fd_suite() {
    use specmix::critic::{self, CriticParams};
    use specmix::params::ParamGroup;
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let params = CriticParams::init(&mut rng, 22).unwrap();
    let batch = randn(&mut rng, &[3, 22], 0.5);
    let inits: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let template = params.clone();
    check_grads(
        inits,
        move |t, ids| {
            let mut p = template.clone();
            for (dst, &src) in p.tensors_mut().into_iter().zip(ids.iter()) {
                *dst = t.value(src).clone();
            }
            let bound = critic::CriticBound { ids: ids.to_vec() };
            let xn = t.leaf(batch.clone(), false)?;
            let (d, _) = critic::discriminate(&mut p, &bound, t, xn, Mode::Train)?;
            let s = t.sum_all(d)?;
            nn::gradient_norm_penalty(t, s, xn)
        },
        1e-3,
        2,
    );
}

/// Every finite-difference group in one call (acceptance criterion timing).
pub fn full_gradient_suite() {
    elementwise_fd_suite();
    linalg_fd_suite();
    conv_pool_fd_suite();
    encoder_fd_suite();
    mixture_fd_suite();
    decoder_fd_suite();
    critic_fd_suite();
    losses_fd_suite();
    penalty_fd_suite();
    critic_penalty_fd_suite();
}

// ---- loop oracles -----------------------------------------------------------

pub fn conv_loop_oracle_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..40 {
        let b = rng.gen_range(1..3);
        let t_len = rng.gen_range(1..=16);
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let k = [1usize, 3, 5, 7][rng.gen_range(0..4)];
        let stride = rng.gen_range(1..4);
        let x = randn(&mut rng, &[b, t_len, cin], 1.0);
        let w = randn(&mut rng, &[k, cin, cout], 1.0);
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone(), false).unwrap();
        let wn = tape.leaf(w.clone(), false).unwrap();
        let y = tape.conv1d(xn, wn, stride).unwrap();
        let yv = tape.value(y);
        // naive same-padded cross-correlation
        let out_len = t_len.div_ceil(stride);
        let pad_total = ((out_len - 1) * stride + k).saturating_sub(t_len);
        let pad_left = pad_total / 2;
        assert_eq!(yv.shape(), &[b, out_len, cout]);
        for bi in 0..b {
            for o in 0..out_len {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ki in 0..k {
                        let pos = (o * stride + ki) as isize - pad_left as isize;
                        if pos < 0 || pos >= t_len as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.data()[(bi * t_len + pos as usize) * cin + ci]
                                * w.data()[(ki * cin + ci) * cout + co];
                        }
                    }
                    let got = yv.data()[(bi * out_len + o) * cout + co];
                    assert!(
                        (got - acc).abs() < 1e-12,
                        "conv mismatch at b={} o={} co={}: {} vs {}",
                        bi,
                        o,
                        co,
                        got,
                        acc
                    );
                }
            }
        }
    }
}

pub fn pool_loop_oracle_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..40 {
        let b = rng.gen_range(1..3);
        let t_len = rng.gen_range(1..=16);
        let c = rng.gen_range(1..4);
        let k = rng.gen_range(1..6);
        let x = randn(&mut rng, &[b, t_len, c], 1.0);
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone(), false).unwrap();
        let y = tape.avg_pool1d(xn, k).unwrap();
        let yv = tape.value(y);
        let out_len = t_len.div_ceil(k);
        assert_eq!(yv.shape(), &[b, out_len, c]);
        for bi in 0..b {
            for o in 0..out_len {
                let start = o * k;
                let end = (start + k).min(t_len);
                for ci in 0..c {
                    let mean: f64 = (start..end)
                        .map(|p| x.data()[(bi * t_len + p) * c + ci])
                        .sum::<f64>()
                        / (end - start) as f64;
                    let got = yv.data()[(bi * out_len + o) * c + ci];
                    assert!((got - mean).abs() < 1e-12);
                }
            }
        }
    }
}

/// Scalar-loop reference for the mixture kernel: component responses, weights
/// and normalized abundances computed with plain loops.
pub fn mixture_loop_oracle_suite() {
    use specmix::mixture::{self, MixtureConfig, MixtureParams};
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (k, n, m) = (4usize, 8usize, 10usize);
        let cfg = MixtureConfig { materials: k, components: n, latent_dim: m };
        let params = MixtureParams::init(&mut rng, cfg).unwrap();
        let b = 6usize;
        let z = randn(&mut rng, &[b, m], 1.0);
        // scalar loops
        let mut oy = vec![0.0; b * k];
        for bi in 0..b {
            for ki in 0..k {
                let mut sims = vec![0.0; n];
                let mut logits = vec![0.0; n];
                for ni in 0..n {
                    let row = ki * n + ni;
                    let mut d1 = params.b1.data()[row];
                    let mut d2 = params.b2.data()[row];
                    for mi in 0..m {
                        d1 += params.w1.data()[row * m + mi] * z.data()[bi * m + mi];
                        d2 += params.w2.data()[row * m + mi] * z.data()[bi * m + mi];
                    }
                    sims[ni] = 1.0 / (1.0 + d1.exp());
                    logits[ni] = d2;
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = logits.iter().map(|&v| (v - mx).exp()).sum();
                for ni in 0..n {
                    oy[bi * k + ki] += (logits[ni] - mx).exp() / denom * sims[ni];
                }
            }
            let s: f64 = oy[bi * k..(bi + 1) * k].iter().sum();
            for ki in 0..k {
                oy[bi * k + ki] /= s + 1e-12;
            }
        }
        let mut tape = Tape::new();
        let bound = mixture::bind(&params, &mut tape).unwrap();
        let zn = tape.leaf(z, false).unwrap();
        let y_id = mixture::abundances(&params, &bound, &mut tape, zn).unwrap();
        let y = tape.value(y_id);
        for (a, b) in y.data().iter().zip(&oy) {
            assert!((a - b).abs() < 1e-12, "mixture oracle mismatch: {} vs {}", a, b);
        }
    }
}

// ---- bulk invariants ----------------------------------------------------------

/// 100 random configurations x 1000 pixels = 1e5 simplex checks.
pub fn bulk_simplex_suite() {
    use specmix::mixture::{self, MixtureConfig, MixtureParams};
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(2..6);
        let n = rng.gen_range(k..k + 6);
        let m = rng.gen_range(2..12);
        let cfg = MixtureConfig { materials: k, components: n, latent_dim: m };
        let params = MixtureParams::init(&mut rng, cfg).unwrap();
        let batch = 1000;
        let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let z = randn(&mut rng, &[batch, m], scale);
        let mut tape = Tape::new();
        let bound = mixture::bind(&params, &mut tape).unwrap();
        let zn = tape.leaf(z, false).unwrap();
        let y_id = mixture::abundances(&params, &bound, &mut tape, zn).unwrap();
        let y = tape.value(y_id).clone();
        let pi_id = mixture::mixture_weights(&params, &bound, &mut tape, zn).unwrap();
        let pi = tape.value(pi_id).clone();
        for b in 0..batch {
            let row = &y.data()[b * k..(b + 1) * k];
            assert!(row.iter().all(|&v| v >= 0.0), "negative abundance, seed {}", seed);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "abundance sum {} off, seed {}", s, seed);
            for ki in 0..k {
                let w = &pi.data()[(b * k + ki) * n..(b * k + ki + 1) * n];
                let ws: f64 = w.iter().sum();
                assert!((ws - 1.0).abs() < 1e-9, "weight sum {} off, seed {}", ws, seed);
            }
        }
    }
}

/// Interpolated critic inputs keep unit l1 norm.
pub fn interpolation_l1_suite() {
    use specmix::critic;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let b = rng.gen_range(1..6);
        let d = rng.gen_range(21..40);
        let mut tape = Tape::new();
        let mut mk = |rng: &mut ChaCha8Rng, tape: &mut Tape| {
            let mut t = randn(rng, &[b, d], 1.0);
            for v in t.data_mut() {
                *v = v.abs() + 1e-3;
            }
            let n = tape.leaf(t, false).unwrap();
            let (n, _) = nn::l1_normalize(tape, n, 1).unwrap();
            n
        };
        let real = mk(&mut rng, &mut tape);
        let fake = mk(&mut rng, &mut tape);
        let u = Tensor::new(vec![b, 1], (0..b).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap();
        let mix = critic::interpolate(&mut tape, real, fake, u).unwrap();
        let v = tape.value(mix);
        for bi in 0..b {
            let s: f64 = v.data()[bi * d..(bi + 1) * d].iter().map(|x| x.abs()).sum();
            assert!((s - 1.0).abs() < 1e-9, "interpolated row l1 {} != 1", s);
        }
    }
}

/// Unit-norm linear critic: penalty ~0 and ~zero parameter gradient.
pub fn analytic_penalty_suite() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let b = rng.gen_range(1..5);
        let d = rng.gen_range(2..12);
        let mut w = randn(&mut rng, &[d, 1], 1.0);
        let norm: f64 = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in w.data_mut() {
            *v /= norm;
        }
        let x = randn(&mut rng, &[b, d], 1.0);
        let mut tape = Tape::new();
        let wn = tape.leaf(w, true).unwrap();
        let xn = tape.leaf(x, false).unwrap();
        let score = tape.matmul(xn, wn).unwrap();
        let s = tape.sum_all(score).unwrap();
        let penalty = nn::gradient_norm_penalty(&mut tape, s, xn).unwrap();
        let p = tape.value(penalty).item().unwrap();
        assert!(p.abs() < 1e-10, "penalty {} not ~0", p);
        let grads = tape.backward(penalty).unwrap();
        if let Some(g) = grads.get(wn) {
            for &v in g.data() {
                assert!(v.abs() < 1e-8, "param gradient {} not ~0", v);
            }
        }
    }
}
