use indexmap::IndexMap;
use proptest::prelude::*;
use rand::Rng;

use whale_kit::ctc::ctc_greedy;
use whale_kit::encoder::{Encoder, EncoderConfig};
use whale_kit::nn::{Initializer, LN_EPS};
use whale_kit::rng::seeded;
use whale_kit::selfcond::{apply_adaptation, build_language_mask, FeedbackLayer, LanguageMask, DEFAULT_EPSILON};
use whale_kit::tensor::gradcheck::{check_inputs, DEFAULT_STEP};
use whale_kit::tensor::{log_softmax_rows, Graph, ParamStore, Precision, Tensor};
use whale_kit::vocab::Vocab;
use whale_kit::Error;

fn vocab(sets: &[(&str, &[&str])]) -> Vocab {
    let mut m = IndexMap::new();
    for (l, cs) in sets {
        m.insert(l.to_string(), cs.iter().map(|c| c.to_string()).collect());
    }
    Vocab::from_charsets(&m).unwrap()
}

#[test]
fn mask_weights_for_a_two_language_vocab() {
    let v = vocab(&[("l1", &["a", "b"]), ("l2", &["c"])]);
    let eps = 1e-3;
    let m = build_language_mask("l1", &v, eps).unwrap();
    assert_eq!(&m.weights()[..4], &[1.0, 1.0, 1.0, eps]);
    // sos, eos and language tokens are never CTC outputs
    assert!(m.weights()[4..].iter().all(|&w| w == eps));
    assert!(m.allows(0) && !m.allows(3));
}

#[test]
fn language_covering_everything_gives_a_neutral_mask() {
    let v = vocab(&[("l1", &["a", "b"]), ("l2", &["a"])]);
    let m = build_language_mask("l1", &v, DEFAULT_EPSILON).unwrap();
    assert!(m.weights()[..3].iter().all(|&w| w == 1.0));
}

#[test]
fn bad_masks_are_rejected() {
    let v = vocab(&[("l1", &["a"]), ("l2", &["b"])]);
    assert!(matches!(build_language_mask("l1", &v, 0.0), Err(Error::Validation(_))));
    assert!(matches!(
        build_language_mask("zz", &v, 1e-4),
        Err(Error::UnknownLanguage(_))
    ));
    assert!(LanguageMask::from_weights("x", vec![0.5, 1.0, 1.0]).is_err());
    assert!(LanguageMask::from_weights("x", vec![1.0, 0.1, 0.1]).is_err());
    assert!(LanguageMask::from_weights("x", vec![1.0, 1.0, 1.5]).is_err());
}

#[test]
fn neutral_mask_returns_the_input() {
    let lp = log_softmax_rows(&[0.2, 1.0, -0.4, 0.0, 0.9, 0.1], 2, 3);
    let out = apply_adaptation(&lp, 2, 3, &LanguageMask::neutral("x", 3)).unwrap();
    assert!(out.iter().zip(&lp).all(|(a, b)| (a - b).abs() < 1e-6));
    assert_eq!(ctc_greedy(&out, 2, 3), ctc_greedy(&lp, 2, 3));
}

#[test]
fn uniform_posterior_approaches_half_and_half() {
    let lp = vec![0.25f64.ln(); 4];
    let eps = 1e-12;
    let m = LanguageMask::from_weights("x", vec![1.0, 1.0, eps, eps]).unwrap();
    let p: Vec<f64> = apply_adaptation(&lp, 1, 4, &m)
        .unwrap()
        .iter()
        .map(|x| x.exp())
        .collect();
    for (a, b) in p.iter().zip([0.5, 0.5, 0.0, 0.0]) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn masking_a_confusion_network_keeps_only_the_target_charset() {
    // tokens: blank a b c d; language A = {a, b}, B = {c, d}
    let v = vocab(&[("A", &["a", "b"]), ("B", &["c", "d"])]);
    let n = v.len();
    let (a, b, c, d) = (1, 2, 3, 4);
    // each emitting frame puts most mass on a B token and a little on its A twin
    let frames = [(c, a), (c, a), (0, 0), (d, b), (0, 0), (c, a)];
    let mut probs = Vec::new();
    for &(top, twin) in &frames {
        let mut row = vec![0.01; n];
        if top == 0 {
            row[0] = 0.9;
        } else {
            row[top] = 0.6;
            row[twin] = 0.2;
            row[0] = 0.1;
        }
        let s: f64 = row.iter().sum();
        probs.extend(row.iter().map(|p| (p / s).ln()));
    }
    let t = frames.len();
    assert_eq!(ctc_greedy(&probs, t, n), vec![c, d, c]);
    let m = build_language_mask("A", &v, DEFAULT_EPSILON).unwrap();
    let adapted = apply_adaptation(&probs, t, n, &m).unwrap();
    assert_eq!(ctc_greedy(&adapted, t, n), vec![a, b, a]);
}

#[test]
fn adapted_encoder_taps_emit_only_the_target_charset() {
    let v = vocab(&[("A", &["a", "b", "c"]), ("B", &["x", "y", "z"])]);
    let cfg = EncoderConfig {
        tap_layers: None,
        ..EncoderConfig::toy(6, v.len())
    };
    let enc = Encoder::new(cfg).unwrap();
    let mut store = ParamStore::new();
    let mut rng = seeded(5);
    enc.init(&mut Initializer::new(&mut store, &mut rng, Precision::F32));
    let m = build_language_mask("A", &v, DEFAULT_EPSILON).unwrap();
    let allowed = v.charset("A").unwrap().to_vec();
    let mut emitted_b_without_mask = false;
    for seed in 0..8 {
        let mut r = seeded(100 + seed);
        let x = Tensor::from_matrix(
            40,
            6,
            (0..240).map(|_| r.gen_range(-2.0..2.0)).collect(),
            Precision::F32,
        )
        .unwrap();
        let plain = enc.encode(&store, &x, None).unwrap();
        emitted_b_without_mask |= plain
            .greedy(Some(2))
            .unwrap()
            .iter()
            .any(|id| v.charset("B").unwrap().contains(id));
        let out = enc.encode(&store, &x, Some(&m)).unwrap();
        for (k, _) in &out.tap_posteriors {
            let ids = out.greedy(Some(*k)).unwrap();
            assert!(ids.iter().all(|id| allowed.contains(id)), "tap {k}: {ids:?}");
        }
    }
    assert!(emitted_b_without_mask, "fixture never confused the languages");
}

fn feedback(v: usize, d: usize, seed: u64) -> (FeedbackLayer, ParamStore) {
    let fb = FeedbackLayer::new(2, v, d);
    let mut store = ParamStore::new();
    let mut rng = seeded(seed);
    fb.init(&mut Initializer::new(&mut store, &mut rng, Precision::F64));
    let b = store.get_mut(&fb.proj.bias()).unwrap();
    b.set_data((0..d).map(|i| 0.1 * i as f64 - 0.05).collect()).unwrap();
    (fb, store)
}

#[test]
fn feedback_by_hand() {
    let (v, d) = (4, 3);
    let (fb, p) = feedback(v, d, 6);
    let hidden = [0.5, -1.0, 0.3, 0.0, 0.2, 0.9, -0.7, 0.4, 0.1];
    let tap = log_softmax_rows(&[0.1, 1.2, -0.3, 0.4, 2.0, 0.0, 0.0, -1.0, 0.3, 0.3, 0.3, 0.3], 3, v);
    let mut g = Graph::new(Precision::F64);
    let h = g.constant(3, d, hidden.to_vec()).unwrap();
    let lp = g.constant(3, v, tap.clone()).unwrap();
    let out = fb.forward(&mut g, &p, h, lp).unwrap();
    let got = g.value(out).to_vec();

    let w = p.get(&fb.proj.weight()).unwrap().data().to_vec();
    let b = p.get(&fb.proj.bias()).unwrap().data().to_vec();
    for r in 0..3 {
        let probs: Vec<f64> = tap[r * v..(r + 1) * v].iter().map(|x| x.exp()).collect();
        let z: Vec<f64> = (0..d)
            .map(|j| hidden[r * d + j] + b[j] + (0..v).map(|k| probs[k] * w[k * d + j]).sum::<f64>())
            .collect();
        let m = z.iter().sum::<f64>() / d as f64;
        let var = z.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64;
        for j in 0..d {
            assert!(((z[j] - m) / (var + LN_EPS).sqrt() - got[r * d + j]).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_projection_feedback_is_layer_norm() {
    let (fb, mut p) = feedback(4, 3, 7);
    for name in [fb.proj.weight(), fb.proj.bias()] {
        let t = p.get_mut(&name).unwrap();
        let n = t.len();
        t.set_data(vec![0.0; n]).unwrap();
    }
    let mut g = Graph::new(Precision::F64);
    let h = g.constant(2, 3, vec![1.0, 2.0, 4.0, -1.0, 0.0, 1.0]).unwrap();
    let lp = g.constant(2, 4, vec![0.25f64.ln(); 8]).unwrap();
    let out = fb.forward(&mut g, &p, h, lp).unwrap();
    let ln = g.layer_norm(h, LN_EPS);
    assert_eq!(g.value(out), g.value(ln));
}

#[test]
fn feedback_gradients_reach_both_inputs() {
    let (fb, p) = feedback(4, 3, 8);
    let hidden: Vec<f64> = vec![0.5, -1.0, 0.3, 0.0, 0.2, 0.9, -0.7, 0.4, 0.1];
    let tap = log_softmax_rows(&[0.1, 1.2, -0.3, 0.4, 2.0, 0.0, 0.0, -1.0, 0.3, -0.3, 0.8, 0.3], 3, 4);
    let weights = [0.3, -1.2, 0.7, 1.1, 0.4, -0.5, 0.9, -0.2, 0.6];
    let build = |g: &mut Graph, v: &[whale_kit::tensor::Var]| {
        let y = fb.forward(g, &p, v[0], v[1])?;
        let w = g.constant(3, 3, weights.to_vec())?;
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    };
    let r = check_inputs(&[(3, 3, hidden.clone()), (3, 4, tap.clone())], DEFAULT_STEP, build).unwrap();
    assert!(r.max_error() < 1e-4, "{}", r.max_error());

    let mut g = Graph::new(Precision::F64);
    let h = g.input(3, 3, hidden).unwrap();
    let lp = g.input(3, 4, tap).unwrap();
    let loss = build(&mut g, &[h, lp]).unwrap();
    let grads = g.backward(loss).unwrap();
    for v in [h, lp] {
        assert!(grads.wrt(v).unwrap().iter().any(|x| x.abs() > 1e-6));
    }
}

#[test]
fn feedback_shape_mismatch_is_rejected() {
    let (fb, p) = feedback(4, 3, 9);
    let mut g = Graph::new(Precision::F64);
    let h = g.constant(3, 3, vec![0.0; 9]).unwrap();
    let lp = g.constant(2, 4, vec![0.0; 8]).unwrap();
    assert!(matches!(fb.forward(&mut g, &p, h, lp), Err(Error::Shape { .. })));
}

proptest! {
    #[test]
    fn adapted_rows_are_distributions_and_disallowed_mass_drops(
        logits in prop::collection::vec(-6.0f64..6.0, 15),
        allowed in prop::collection::vec(any::<bool>(), 4),
        eps in 1e-6f64..0.5,
    ) {
        let (t, v) = (3, 5);
        let lp = log_softmax_rows(&logits, t, v);
        let mut w = vec![1.0];
        w.extend(allowed.iter().map(|&a| if a { 1.0 } else { eps }));
        if !allowed.iter().any(|&a| a) {
            w[1] = 1.0;
        }
        let m = LanguageMask::from_weights("x", w.clone()).unwrap();
        let out = apply_adaptation(&lp, t, v, &m).unwrap();
        for (row_in, row_out) in lp.chunks(v).zip(out.chunks(v)) {
            prop_assert!((row_out.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-6);
            for k in 0..v {
                if w[k] < 1.0 {
                    prop_assert!(row_out[k] < row_in[k]);
                }
            }
        }
    }
}
