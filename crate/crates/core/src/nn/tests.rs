use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{central_difference, relative_error};
use super::*;
use crate::keypoints::FLAT_DIM;

const TOL: f64 = 1e-6;
const H: f64 = 1e-5;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Scalar objective that touches every output entry differently.
fn objective(tape: &mut Tape, out: Var) -> Var {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let target = tape.constant(Tensor::from_vec(
        &shape,
        (0..n).map(|i| (i as f64 * 0.37).sin()).collect(),
    ));
    let diff = tape.sub(out, target);
    let sq = tape.square(diff);
    tape.mean(sq)
}

fn check_op(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = objective(&mut tape, out);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(inputs);
    let grads = tape.backward(loss);
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("gradient reaches input").data().to_vec();
        let numeric = central_difference(
            |x| {
                let mut ins = inputs.to_vec();
                ins[i] = Tensor::from_vec(inputs[i].shape(), x.to_vec());
                let (t, _, l) = eval(&ins);
                t.value(l).item()
            },
            inputs[i].data(),
            H,
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err <= TOL, "input {i}: relative error {err}");
    }
}

#[test]
fn elementwise_ops() {
    let a = random(&[2, 3, 4], 1, -1.0, 1.0);
    let b = random(&[2, 3, 4], 2, -1.0, 1.0);
    check_op(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check_op(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check_op(std::slice::from_ref(&a), |t, v| t.scale(v[0], -2.5));
    check_op(std::slice::from_ref(&a), |t, v| t.add_scalar(v[0], 0.3));
    check_op(std::slice::from_ref(&a), |t, v| t.abs(v[0]));
    check_op(std::slice::from_ref(&a), |t, v| t.square(v[0]));
    check_op(&[random(&[5], 3, 0.2, 2.0)], |t, v| t.sqrt(v[0]));
    check_op(std::slice::from_ref(&a), |t, v| t.relu(v[0]));
    check_op(std::slice::from_ref(&a), |t, v| t.leaky_relu(v[0], LEAKY_SLOPE));
    check_op(std::slice::from_ref(&a), |t, v| {
        let m = t.mean(v[0]);
        t.reshape(m, &[1])
    });
}

#[test]
fn shape_ops() {
    let a = random(&[2, 3, 4], 4, -1.0, 1.0);
    for axis in 0..3 {
        check_op(std::slice::from_ref(&a), |t, v| t.mean_axis(v[0], axis));
    }
    check_op(&[random(&[2, 3], 5, -1.0, 1.0)], |t, v| t.broadcast(v[0], 1, 4));
    check_op(&[random(&[2, 3], 5, -1.0, 1.0)], |t, v| t.broadcast(v[0], 2, 4));
    check_op(std::slice::from_ref(&a), |t, v| t.transpose12(v[0]));
    check_op(&[a.clone(), random(&[2, 1, 4], 6, -1.0, 1.0)], |t, v| {
        t.concat1(&[v[0], v[1]])
    });
    check_op(std::slice::from_ref(&a), |t, v| t.time_diff(v[0]));
    check_op(std::slice::from_ref(&a), |t, v| t.reshape(v[0], &[6, 4]));
    check_op(&[random(&[3, 5], 7, -1.0, 1.0)], |t, v| t.l2_normalize(v[0]));
}

#[test]
fn layer_ops() {
    check_op(
        &[
            random(&[3, 5], 8, -1.0, 1.0),
            random(&[4, 5], 9, -1.0, 1.0),
            random(&[4], 10, -1.0, 1.0),
        ],
        |t, v| t.linear(v[0], v[1], v[2]),
    );
    for (k, stride, pad, len) in [(3, 1, 1, 7), (4, 2, 1, 8), (1, 1, 0, 5), (4, 2, 1, 7)] {
        let geom = Conv1dGeom { stride, pad };
        check_op(
            &[
                random(&[2, 3, len], 11, -1.0, 1.0),
                random(&[4, 3, k], 12, -1.0, 1.0),
                random(&[4], 13, -1.0, 1.0),
            ],
            |t, v| t.conv1d(v[0], v[1], v[2], geom),
        );
        check_op(
            &[
                random(&[2, 3, len], 14, -1.0, 1.0),
                random(&[3, 4, k], 15, -1.0, 1.0),
                random(&[4], 16, -1.0, 1.0),
            ],
            |t, v| t.conv_transpose1d(v[0], v[1], v[2], geom),
        );
    }
    let geom = Conv2dGeom {
        stride: (2, 1),
        pad: (1, 1),
    };
    check_op(
        &[
            random(&[2, 2, 8, 5], 17, -1.0, 1.0),
            random(&[3, 2, 3, 3], 18, -1.0, 1.0),
            random(&[3], 19, -1.0, 1.0),
        ],
        |t, v| t.conv2d(v[0], v[1], v[2], geom),
    );
    check_op(
        &[
            random(&[2, 4, 6], 20, -1.0, 1.0),
            random(&[4], 21, 0.5, 1.5),
            random(&[4], 22, -1.0, 1.0),
        ],
        |t, v| t.channel_norm(v[0], v[1], v[2]),
    );
    check_op(
        &[
            random(&[2, 3, 4, 5], 23, -1.0, 1.0),
            random(&[3], 24, 0.5, 1.5),
            random(&[3], 25, -1.0, 1.0),
        ],
        |t, v| t.channel_norm(v[0], v[1], v[2]),
    );
}

#[test]
fn conv_transpose_doubles_length() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 8]));
    let w = tape.constant(Tensor::zeros(&[2, 3, 4]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv_transpose1d(x, w, b, Conv1dGeom { stride: 2, pad: 1 });
    assert_eq!(tape.shape(y), &[1, 3, 16]);
}

#[test]
fn detach_and_constants_block_gradients() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(&[2], vec![1.0, 2.0]));
    let d = tape.detach(x);
    let s = tape.add(x, d);
    let sq = tape.square(s);
    let loss = tape.mean(sq);
    let grads = tape.backward(loss);
    // d/dx mean((x + c)^2) with c = x held fixed
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    assert!(grads.get(d).is_none());
}

struct Case {
    params: ModelParams,
    spec: Tensor,
    reference: Tensor,
    target: Tensor,
}

fn model_case(seed: u64) -> Case {
    let cfg = ModelConfig::gradcheck();
    let mut params = ModelParams::init(&cfg, seed).unwrap();
    // nonzero biases and gains so every parameter path is exercised
    for net in Network::ALL {
        for (i, t) in params.network_mut(net).tensors_mut().enumerate() {
            let noise = random(t.shape(), seed * 1000 + i as u64, -0.3, 0.3);
            for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += e;
            }
        }
    }
    let frames = cfg.frame_multiple();
    Case {
        spec: random(&[2, 1, cfg.n_mels, 4 * frames], seed + 1, -2.0, 2.0),
        reference: random(&[2, FLAT_DIM], seed + 2, -1.5, 1.5),
        target: random(&[2, frames, FLAT_DIM], seed + 3, -1.0, 1.0),
        params,
    }
}

/// Loss of the full generator plus discriminator on `case`.
fn model_loss(case: &Case, params: &ModelParams, cond: Conditioning) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let g = params.generator.bind(&mut tape, true);
    let e = params.piv.bind(&mut tape, true);
    let d = params.discriminator.bind(&mut tape, true);
    let inputs = GeneratorInputs {
        spectrogram: tape.constant(case.spec.clone()),
        reference: tape.param(case.reference.clone()),
    };
    let y_hat = generator(&mut tape, &g, Some(&e), &params.config, &inputs, cond).unwrap();
    let target = tape.constant(case.target.clone());
    let diff = tape.sub(y_hat, target);
    let sq = tape.square(diff);
    let reg = tape.mean(sq);
    let score = discriminator(&mut tape, &d, y_hat).unwrap();
    let sq = tape.square(score);
    let adv = tape.mean(sq);
    let loss = tape.add(reg, adv);
    let mut vars: Vec<Var> = g.vars().to_vec();
    vars.extend_from_slice(e.vars());
    vars.extend_from_slice(d.vars());
    vars.push(inputs.reference);
    (tape, vars, loss)
}

fn flatten(params: &ModelParams, reference: &Tensor) -> Vec<f64> {
    let mut out = Vec::new();
    for net in Network::ALL {
        for (_, t) in params.network(net).iter() {
            out.extend_from_slice(t.data());
        }
    }
    out.extend_from_slice(reference.data());
    out
}

fn unflatten(template: &Case, flat: &[f64]) -> (ModelParams, Tensor) {
    let mut params = template.params.clone();
    let mut pos = 0;
    for net in Network::ALL {
        for t in params.network_mut(net).tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    }
    let reference = Tensor::from_vec(template.reference.shape(), flat[pos..].to_vec());
    (params, reference)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for cond in [Conditioning::Full, Conditioning::AudioOnly] {
        let case = model_case(7);
        let (tape, vars, loss) = model_loss(&case, &case.params, cond);
        let grads = tape.backward(loss);
        let mut analytic = Vec::new();
        for v in &vars {
            match grads.get(*v) {
                Some(g) => analytic.extend_from_slice(g.data()),
                None => analytic.extend(std::iter::repeat_n(0.0, tape.value(*v).len())),
            }
        }
        let x0 = flatten(&case.params, &case.reference);
        assert_eq!(analytic.len(), x0.len());
        let numeric = central_difference(
            |x| {
                let (params, reference) = unflatten(&case, x);
                let probe = Case {
                    params: params.clone(),
                    spec: case.spec.clone(),
                    reference,
                    target: case.target.clone(),
                };
                let (t, _, l) = model_loss(&probe, &params, cond);
                t.value(l).item()
            },
            &x0,
            H,
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err <= TOL, "{cond:?}: relative error {err}");
        if cond == Conditioning::AudioOnly {
            let n_g = case.params.generator.n_values();
            let n_e = case.params.piv.n_values();
            let pv_and_piv: f64 = case
                .params
                .generator
                .iter()
                .scan(0, |pos, (name, t)| {
                    let start = *pos;
                    *pos += t.len();
                    Some((name.to_string(), start, t.len()))
                })
                .filter(|(name, _, _)| name.starts_with("pv."))
                .map(|(_, s, l)| analytic[s..s + l].iter().map(|v| v.abs()).sum::<f64>())
                .sum::<f64>()
                + analytic[n_g..n_g + n_e].iter().map(|v| v.abs()).sum::<f64>();
            assert_eq!(
                pv_and_piv, 0.0,
                "audio-only output must not depend on the reference encoders"
            );
        }
    }
}

#[test]
fn audio_pyramid_shapes() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let spec = random(&[1, 1, 64, 256], 1, -3.0, 0.0);
    let (skips, bottleneck) = params.audio_features(&spec).unwrap();
    let lens: Vec<usize> = skips.iter().map(|s| s.shape()[2]).collect();
    assert_eq!(lens, [64, 32, 16, 8]);
    assert_eq!(bottleneck.shape()[2], 4);
    assert!(skips.iter().all(|s| s.shape()[0] == 1));
}

#[test]
fn generator_output_tracks_input_length() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let reference = random(&[1, FLAT_DIM], 2, -1.0, 1.0);
    let short = params
        .generate(&random(&[1, 1, 64, 256], 1, -3.0, 0.0), &reference, Conditioning::Full)
        .unwrap();
    assert_eq!(short.shape(), &[1, 64, FLAT_DIM]);
    let long = params
        .generate(&random(&[1, 1, 64, 512], 1, -3.0, 0.0), &reference, Conditioning::Full)
        .unwrap();
    assert_eq!(long.shape(), &[1, 128, FLAT_DIM]);
    assert!(long.is_finite());
}

#[test]
fn generator_rejects_bad_inputs() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let reference = Tensor::zeros(&[1, FLAT_DIM]);
    assert!(params
        .generate(&Tensor::zeros(&[1, 1, 32, 256]), &reference, Conditioning::Full)
        .is_err());
    assert!(params
        .generate(&Tensor::zeros(&[1, 1, 64, 250]), &reference, Conditioning::Full)
        .is_err());
    assert!(params
        .generate(
            &Tensor::zeros(&[1, 1, 64, 256]),
            &Tensor::zeros(&[1, 134]),
            Conditioning::Full
        )
        .is_err());
    let mut nan = Tensor::zeros(&[1, FLAT_DIM]);
    nan.data_mut()[3] = f64::NAN;
    assert!(params
        .generate(&Tensor::zeros(&[1, 1, 64, 256]), &nan, Conditioning::Full)
        .is_err());
}

#[test]
fn silent_input_with_zero_biases_gives_zero_features() {
    let cfg = ModelConfig::toy();
    let mut params = ModelParams::init(&cfg, 3).unwrap();
    params.zero_biases();
    let (skips, bottleneck) = params.audio_features(&Tensor::zeros(&[2, 1, 64, 128])).unwrap();
    for t in skips.iter().chain([&bottleneck]) {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn piv_latent_has_unit_norm() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 5).unwrap();
    let latent = params.piv_latent(&random(&[4, FLAT_DIM], 9, -2.0, 2.0)).unwrap();
    for row in latent.data().chunks(cfg.latent_piv_dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn discriminator_scores_constant_sequences_alike() {
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, 4).unwrap();
    let a = params.discriminate(&Tensor::filled(&[1, 16, FLAT_DIM], 0.0)).unwrap();
    let b = params.discriminate(&Tensor::filled(&[1, 16, FLAT_DIM], 3.5)).unwrap();
    assert_eq!(a, b);
    assert!(params.discriminate(&Tensor::zeros(&[1, 1, FLAT_DIM])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn discriminator_ignores_translation(
        seed in any::<u64>(),
        dx in -50.0f32..50.0,
        dy in -50.0f32..50.0,
        t in 2usize..24,
    ) {
        let cfg = ModelConfig::toy();
        let params = ModelParams::init(&cfg, 8).unwrap();
        // f32-valued coordinates and offsets keep the shifted sums exact
        let base = random(&[1, t, FLAT_DIM], seed, -100.0, 100.0);
        let base = Tensor::from_vec(base.shape(), base.data().iter().map(|&v| v as f32 as f64).collect());
        let mut shifted = base.clone();
        for (i, v) in shifted.data_mut().iter_mut().enumerate() {
            *v += if i % 2 == 0 { dx as f64 } else { dy as f64 };
        }
        prop_assert_eq!(params.discriminate(&base).unwrap(), params.discriminate(&shifted).unwrap());
    }
}
