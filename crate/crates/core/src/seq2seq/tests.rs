use std::path::Path;

use super::*;
use crate::tokenfreq::EOS;

fn tiny(attention: bool) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden: 8,
        embed: 6,
        vocab_size: 20,
        max_len: 6,
        use_attention: attention,
        seed: 3,
    }
}

#[test]
fn init_is_deterministic_and_bounded() {
    let cfg = tiny(true);
    let a = init_params(&cfg, 11).unwrap();
    let b = init_params(&cfg, 11).unwrap();
    assert_eq!(a, b);
    let c = init_params(&cfg, 12).unwrap();
    assert_ne!(a, c);

    let h = cfg.hidden;
    for (name, t) in a.iter() {
        let is_lstm_bias = name.ends_with(".b") && t.len() == 4 * h && !name.starts_with("bridge");
        for (i, &v) in t.data().iter().enumerate() {
            if is_lstm_bias && (h..2 * h).contains(&i) {
                assert_eq!(v, FORGET_BIAS, "{name}[{i}]");
            } else {
                assert!(v.abs() <= INIT_RANGE, "{name}[{i}] = {v}");
            }
        }
    }
}

#[test]
fn encoder_shapes_and_determinism() {
    let params = init_params(&tiny(false), 1).unwrap();
    let enc = encode(&params, &[4, 5, 6]).unwrap();
    assert_eq!(enc.steps(), 3);
    assert_eq!(enc.states.shape(), &[3, 8]);
    assert_eq!(enc.finals.len(), 2);
    assert_eq!(enc.finals[0].0.shape(), &[1, 16]);
    assert_eq!(enc.finals[1].0.shape(), &[1, 8]);
    assert_eq!(enc, encode(&params, &[4, 5, 6]).unwrap());

    let single = encode(&params, &[7]).unwrap();
    assert_eq!(single.steps(), 1);

    assert!(matches!(encode(&params, &[]), Err(Error::Input(_))));
}

#[test]
fn single_token_source_is_seen_identically_both_ways() {
    // Give the backward LSTM the forward LSTM's weights: on a length-1 source
    // both directions then produce the same state.
    let mut params = init_params(&tiny(false), 2).unwrap();
    for part in ["w_x", "w_h", "b"] {
        let fwd = params.get(&format!("enc.0.fwd.{part}")).unwrap().clone();
        *params.get_mut(&format!("enc.0.bwd.{part}")).unwrap() = fwd;
    }
    let enc = encode(&params, &[9]).unwrap();
    let (h, _) = &enc.finals[0];
    assert_eq!(h.data()[..8], h.data()[8..]);
}

#[test]
fn decode_step_shapes_and_projection_bias() {
    let mut params = init_params(&tiny(true), 4).unwrap();
    let enc = encode(&params, &[4, 5]).unwrap();
    let state = initial_state(&params, &enc).unwrap();
    let (logits, next) = decode_step(&params, &state, &enc).unwrap();
    assert_eq!(logits.len(), 20);
    assert_eq!(next.step, 1);
    let (again, _) = decode_step(&params, &state, &enc).unwrap();
    assert_eq!(logits, again);

    params.get_mut("out.w").unwrap().data_mut().fill(0.0);
    let bias = params.get("out.b").unwrap().data().to_vec();
    let (logits, _) = decode_step(&params, &state, &enc).unwrap();
    assert_eq!(logits.data(), bias.as_slice());
}

#[test]
fn decode_step_rejects_overflow() {
    let params = init_params(&tiny(false), 4).unwrap();
    let enc = encode(&params, &[4]).unwrap();
    let mut state = initial_state(&params, &enc).unwrap();
    state.step = 6;
    assert!(matches!(decode_step(&params, &state, &enc), Err(Error::Contract(_))));
}

#[test]
fn attention_examples() {
    let q = Tensor::row(vec![1.0, 0.0, 0.0, 0.0]);
    let one = Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
    let (ctx, w) = attention(&q, &one).unwrap();
    assert_eq!(w.data(), &[1.0]);
    assert_eq!(ctx.data(), one.data());

    let keys = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let (_, w) = attention(&q, &keys).unwrap();
    // softmax([1/√4, 0]) evaluated by hand
    let e = 0.5f64.exp();
    let expected = [e / (e + 1.0), 1.0 / (e + 1.0)];
    assert!((w.data()[0] - 0.6225).abs() < 5e-5);
    assert!((w.data()[1] - 0.3775).abs() < 5e-5);
    for (a, b) in w.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(attention_weights(&q, &keys).unwrap().data(), w.data());

    // equal scores average the values
    let zero_q = Tensor::row(vec![0.0; 4]);
    let (ctx, _) = attention(&zero_q, &keys).unwrap();
    assert_eq!(ctx.data(), &[0.5, 0.5, 0.0, 0.0]);
}

#[test]
fn unconditional_step_ignores_the_source() {
    let params = init_params(&tiny(true), 5).unwrap();
    let zero = DecoderState::zeros(params.config());
    let (u0, s1) = unconditional_step(&params, &zero).unwrap();
    assert_eq!(u0.len(), 20);
    let (u1, _) = unconditional_step(&params, &s1.clone().with_token(7)).unwrap();

    // the same prefix always yields the same anti-LM logits, whatever the
    // conditional decoder is doing with its sources
    for src in [&[4usize, 5][..], &[9, 10, 11]] {
        let enc = encode(&params, src).unwrap();
        let _ = decode_step(&params, &initial_state(&params, &enc).unwrap(), &enc).unwrap();
        let (again0, s) = unconditional_step(&params, &zero).unwrap();
        let (again1, _) = unconditional_step(&params, &s.with_token(7)).unwrap();
        assert_eq!(again0, u0);
        assert_eq!(again1, u1);
    }
}

#[test]
fn first_unconditional_step_uses_only_sos_embedding() {
    let mut params = init_params(&tiny(false), 6).unwrap();
    let zero = DecoderState::zeros(params.config());
    let (u, _) = unconditional_step(&params, &zero).unwrap();
    // perturbing any embedding row other than SOS leaves u untouched
    let e = params.config().embed;
    params.get_mut("embedding").unwrap().data_mut()[EOS * e] += 1.0;
    let (u2, _) = unconditional_step(&params, &zero).unwrap();
    assert_eq!(u, u2);
    params.get_mut("embedding").unwrap().data_mut()[SOS * e] += 1.0;
    let (u3, _) = unconditional_step(&params, &zero).unwrap();
    assert_ne!(u, u3);
}

#[test]
fn zeroed_upper_layer_is_an_identity_path() {
    let two = init_params(&tiny(false), 7).unwrap();
    let mut zeroed = two.clone();
    for (name, t) in zeroed.tensors_mut() {
        if name.starts_with("enc.1.") {
            t.data_mut().fill(0.0);
        }
    }
    let one_cfg = ModelConfig {
        num_layers: 1,
        ..tiny(false)
    };
    let mut one = init_params(&one_cfg, 0).unwrap();
    let names: Vec<String> = one.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        if name == "embedding" || name.starts_with("enc.0.") {
            *one.get_mut(&name).unwrap() = two.get(&name).unwrap().clone();
        }
    }
    let src = [4, 8, 15, 16];
    assert_eq!(encode(&zeroed, &src).unwrap().states, encode(&one, &src).unwrap().states);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let params = init_params(&tiny(true), 8).unwrap();
    let bytes = write_checkpoint(&params);
    assert!(bytes.starts_with(b"DIVG1\nnum_layers 2\nhidden 8\n"));
    let back = parse_checkpoint(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back, params);
    assert_eq!(write_checkpoint(&back), bytes);

    assert!(matches!(
        parse_checkpoint(&bytes[..bytes.len() - 3], Path::new("mem")),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        parse_checkpoint(b"DIVG2\n", Path::new("mem")),
        Err(Error::Format { .. })
    ));
}

#[test]
fn config_validation() {
    assert!(init_params(&ModelConfig { max_len: 1, ..tiny(false) }, 0).is_err());
    assert!(init_params(&ModelConfig { hidden: 0, ..tiny(false) }, 0).is_err());
    let full = ModelConfig::full_size(100);
    assert_eq!((full.num_layers, full.hidden, full.embed, full.max_len), (4, 256, 256, 28));
}
