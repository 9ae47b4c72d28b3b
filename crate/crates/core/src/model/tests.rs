use super::*;
use crate::score::{parse_score, score_to_tokens, PhonemeLexicon};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tokens(text: &str) -> PhonemeTokenSequence {
    let score = parse_score(text).unwrap();
    score_to_tokens(&score, &PhonemeLexicon::builtin(), crate::FRAME_SHIFT_S).unwrap()
}

fn song() -> PhonemeTokenSequence {
    tokens("tempo 120\nla 69 0.5\n- 0 0.25\nma 67 0.5\nma 69 0.25 ~\n")
}

fn tiny_model(seed: u64) -> AcousticModel {
    AcousticModel::new(ModelConfig::tiny(), seed).unwrap()
}

#[test]
fn decoded_durations() {
    assert_eq!(decode_duration(0.0), 1);
    assert_eq!(decode_duration(34f64.ln()), 33);
    for v in [-1e9, -3.0, 0.2, f64::NAN, f64::NEG_INFINITY] {
        assert!(decode_duration(v) >= 1);
    }
}

#[test]
fn full_size_encoder_shape() {
    let model = AcousticModel::new(ModelConfig::default(), 3).unwrap();
    let t = tokens("tempo 120\nla 60 1\n");
    let h = model.encode(&t).unwrap();
    assert_eq!(h.shape(), &[t.len(), 384]);
    assert!(h.all_finite());
}

#[test]
fn zero_parameter_encoder_returns_positions() {
    let mut model = tiny_model(1);
    for p in model.parameters_mut().tensors_mut() {
        p.data_mut().fill(0.0);
    }
    let t = tokens("tempo 120\na 60 1\n");
    assert_eq!(t.len(), 1);
    let h = model.encode(&t).unwrap();
    assert_eq!(h, layers::positional_encoding(1, 16));
}

#[test]
fn residual_identity_on_pitched_frames() {
    let mut model = tiny_model(2);
    let out = model.layout().output;
    let residual = MGC_DIM + BAP_DIM;
    let dim = model.config().output_dim;
    let params = model.parameters_mut().tensors_mut();
    for row in params[out.weight].data_mut().chunks_mut(dim) {
        row[residual] = 0.0;
    }
    params[out.bias].data_mut()[residual] = 0.0;

    let t = song();
    let durations = [3, 5, 4, 2, 6, 3];
    assert_eq!(t.len(), durations.len());
    let synth = model.synthesize_with_durations(&t, &durations).unwrap();
    let index = expand_index(&durations).unwrap();
    for (frame, &i) in index.iter().enumerate() {
        let pitch = t.pitch_ids()[i];
        let got = synth.features.logf0()[frame];
        if pitch == 0 {
            assert_eq!(got, 0.0);
        } else {
            let note = crate::score::midi_to_log_hz(pitch as u8).unwrap();
            assert_eq!(got.to_bits(), note.to_bits());
        }
    }
}

#[test]
fn decode_matches_widths_and_ranges() {
    let model = tiny_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let expanded = Tensor::new(vec![9, 16], (0..144).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let note = vec![5.0; 9];
    let mask: Vec<bool> = (0..9).map(|t| t % 3 != 0).collect();
    let f = model.decode(&expanded, &note, &mask).unwrap();
    assert_eq!((f.frames(), f.mgc().len(), f.bap().len()), (9, 9 * 60, 9 * 5));
    assert!(f.vuv().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(f.logf0()[0], 0.0);
    assert!(model.decode(&expanded, &note[..8], &mask).is_err());
}

#[test]
fn inference_decoder_input_matches_training_path() {
    let model = tiny_model(5);
    let t = song();
    let synth = model.synthesize(&t).unwrap();
    let predicted = synth.durations.frames.clone();
    assert_eq!(synth.features.frames(), predicted.iter().sum::<usize>());

    let with_gt = t.clone().with_durations(predicted.clone()).unwrap();
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let total = predicted.iter().sum();
    let fwd = model
        .forward_train(&mut g, &p, &[&with_gt], &[total], &mut Dropout::disabled())
        .unwrap();
    assert_eq!(g.value(fwd.decoder.decoder_input).data(), synth.decoder_input.data());
    assert_eq!(g.value(fwd.decoder.logf0).data(), synth.features.logf0());
}

#[test]
fn frame_count_mismatch_is_an_error() {
    let model = tiny_model(6);
    let t = song().with_durations(vec![2; 6]).unwrap();
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let err = model.forward_train(&mut g, &p, &[&t], &[13], &mut Dropout::disabled());
    assert!(matches!(err, Err(ModelError::Input(_))));
    assert!(model.forward_train(&mut g, &p, &[&song()], &[12], &mut Dropout::disabled()).is_err());
}

#[test]
fn batching_matches_single_sequence() {
    let model = tiny_model(7);
    let a = song().with_durations(vec![2, 3, 4, 1, 2, 5]).unwrap();
    let b = tokens("tempo 150\nwo 62 1\n").with_durations(vec![2, 7]).unwrap();
    let run = |seqs: &[&PhonemeTokenSequence], frames: &[usize]| {
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let f = model.forward_train(&mut g, &p, seqs, frames, &mut Dropout::disabled()).unwrap();
        (
            g.value(f.encoder.log_durations).data().to_vec(),
            g.value(f.decoder.mgc).data().to_vec(),
        )
    };
    let (dur_b, mgc_b) = run(&[&b], &[9]);
    let (dur_ab, mgc_ab) = run(&[&a, &b], &[17, 9]);
    // b sits at batch index 1 with its rows padded to the longer sequence.
    let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
    assert!(close(&dur_ab[6..8], &dur_b));
    assert!(close(&mgc_ab[17 * 60..17 * 60 + 9 * 60], &mgc_b));
    assert!(mgc_ab[17 * 60 + 9 * 60..].iter().all(|&v| v == 0.0));
}

#[test]
fn every_parameter_receives_gradient() {
    let model = tiny_model(8);
    let t = song().with_durations(vec![2, 3, 4, 1, 2, 5]).unwrap();
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let f = model.forward_train(&mut g, &p, &[&t], &[17], &mut Dropout::disabled()).unwrap();
    let loss = projected_loss(&mut g, &f, 11);
    g.backward(loss).unwrap();
    for (i, name) in model.parameters().names().iter().enumerate() {
        let grad = g.grad(p[i]).unwrap();
        assert!(grad.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
    }
}

/// Random linear functional of every model output.
fn projected_loss(g: &mut Graph, f: &TrainForward, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outputs = [
        f.encoder.log_durations,
        f.decoder.mgc,
        f.decoder.bap,
        f.decoder.logf0,
        f.decoder.vuv,
    ];
    let mut total = None;
    for v in outputs {
        let shape = g.shape(v).to_vec();
        let n = g.value(v).len();
        let w = g.constant(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        let term = g.mul(v, w).unwrap();
        let term = g.sum(term).unwrap();
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term).unwrap(),
        });
    }
    total.unwrap()
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let config = ModelConfig {
        hidden_dim: 8,
        encoder_blocks: 1,
        decoder_blocks: 1,
        attention_heads: 2,
        conv_filter_dim: 8,
        phoneme_vocab_size: 40,
        pitch_vocab_size: 80,
        max_note_frames: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = AcousticModel::new(config, 9).unwrap();
    let t = PhonemeTokenSequence::new(vec![5, 9, 1], vec![64, 64, 0], vec![6, 6, 3], vec![0..2, 2..3], Some(vec![2, 4, 3]))
        .unwrap();
    let eval = |m: &AcousticModel, trainable: bool| {
        let mut g = Graph::new();
        let p = m.bind(&mut g, trainable);
        let f = m.forward_train(&mut g, &p, &[&t], &[9], &mut Dropout::disabled()).unwrap();
        let loss = projected_loss(&mut g, &f, 12);
        (g, p, loss)
    };
    let (mut g, p, loss) = eval(&model, true);
    g.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (i, tensor) in model.parameters().tensors().iter().enumerate() {
        let analytic = g.grad(p[i]).unwrap().data().to_vec();
        for j in 0..tensor.len() {
            let base = tensor.data()[j];
            probe.parameters_mut().tensors_mut()[i].data_mut()[j] = base + h;
            let (gp, _, lp) = eval(&probe, false);
            probe.parameters_mut().tensors_mut()[i].data_mut()[j] = base - h;
            let (gm, _, lm) = eval(&probe, false);
            probe.parameters_mut().tensors_mut()[i].data_mut()[j] = base;
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            let rel = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn same_seed_same_model_and_output() {
    let a = tiny_model(10);
    let b = tiny_model(10);
    assert_eq!(a, b);
    assert_ne!(a, tiny_model(11));
    let (sa, sb) = (a.synthesize(&song()).unwrap(), b.synthesize(&song()).unwrap());
    assert_eq!(sa.features.to_bytes(), sb.features.to_bytes());
}

#[test]
fn parameters_round_trip_through_named_tensors() {
    let model = tiny_model(12);
    let named: Vec<(String, Tensor)> = model
        .parameters()
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let rebuilt = AcousticModel::from_parameters(ModelConfig::tiny(), named.clone()).unwrap();
    assert_eq!(rebuilt, model);
    let mut wrong = named;
    wrong[0].1 = Tensor::zeros(&[3, 16]);
    assert!(AcousticModel::from_parameters(ModelConfig::tiny(), wrong).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn inference_length_equals_predicted_duration_sum(
        score in crate::score::arbitrary_score(),
        seed in 0u64..1000,
    ) {
        let model = tiny_model(seed);
        let t = score_to_tokens(&score, &PhonemeLexicon::builtin(), crate::FRAME_SHIFT_S).unwrap();
        let s = model.synthesize(&t).unwrap();
        prop_assert_eq!(s.features.frames(), s.durations.frames.iter().sum::<usize>());
        prop_assert!(s.durations.frames.iter().all(|&d| d >= 1));
    }
}
