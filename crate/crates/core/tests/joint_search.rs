use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use whale_kit::ctc::ctc_collapse;
use whale_kit::rng::seeded;
use whale_kit::search::{greedy_search, joint_beam_search, joint_score, rank, BeamConfig, SearchResult};
use whale_kit::tensor::log_softmax_rows;
use whale_kit::Result;

// CTC side: blank plus labels 1 and 2. Attention side adds eos = 3.
const V: usize = 3;
const EOS: usize = 3;
const LABELS: [usize; 2] = [1, 2];

/// Fixed pseudo-random next-token distribution per prefix.
struct Attention {
    seed: u64,
    sharpness: f64,
}

impl Attention {
    fn dist(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = seeded(h.finish());
        let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0) * self.sharpness).collect();
        log_softmax_rows(&logits, 1, 4)
    }
}

fn instance(seed: u64, t: usize) -> (Vec<f64>, Attention) {
    let mut rng = seeded(seed);
    let logits: Vec<f64> = (0..t * V).map(|_| rng.gen_range(-2.0..2.0)).collect();
    (log_softmax_rows(&logits, t, V), Attention { seed, sharpness: 2.0 })
}

fn search(lp: &[f64], t: usize, att: &Attention, cfg: &BeamConfig) -> SearchResult {
    let mut scorer = |p: &[usize]| -> Result<Vec<f64>> { Ok(att.dist(p)) };
    joint_beam_search(lp, t, V, &LABELS, EOS, &mut scorer, cfg).unwrap()
}

/// log P_ctc(seq) by summing every frame path that collapses to it.
fn ctc_brute(lp: &[f64], t: usize, seq: &[usize]) -> f64 {
    let mut total = 0.0;
    for code in 0..V.pow(t as u32) {
        let mut c = code;
        let path: Vec<usize> = (0..t)
            .map(|_| {
                let k = c % V;
                c /= V;
                k
            })
            .collect();
        if ctc_collapse(&path) == seq {
            total += path.iter().enumerate().map(|(i, &k)| lp[i * V + k]).sum::<f64>().exp();
        }
    }
    total.ln()
}

fn att_brute(att: &Attention, seq: &[usize]) -> f64 {
    let mut s = 0.0;
    for i in 0..seq.len() {
        s += att.dist(&seq[..i])[seq[i]];
    }
    s + att.dist(seq)[EOS]
}

fn all_sequences(max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let next: Vec<Vec<usize>> = frontier
            .iter()
            .flat_map(|s: &Vec<usize>| LABELS.iter().map(move |&c| [s.clone(), vec![c]].concat()))
            .collect();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Best sequence under `score` with the search's tie-break.
fn brute_best(score: impl Fn(&[usize]) -> f64, max_len: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for s in all_sequences(max_len) {
        let j = score(&s);
        let better = match &best {
            None => true,
            Some((b, bj)) => rank(j, &s, *bj, b).is_lt(),
        };
        if better {
            best = Some((s, j));
        }
    }
    best.unwrap()
}

fn full_beam(lambda: f64) -> BeamConfig {
    BeamConfig {
        beam_size: 64,
        lambda_ctc: lambda,
        max_len: 4,
        nbest: 1,
        length_bonus: 0.0,
    }
}

#[test]
fn joint_formula_example() {
    assert!((joint_score(0.3, -2.0, -1.0) - -1.3).abs() < 1e-12);
}

#[test]
fn full_beam_equals_exhaustive_joint_argmax() {
    let t = 4;
    for seed in 0..100 {
        let (lp, att) = instance(seed, t);
        let (best, joint) = brute_best(|s| 0.3 * ctc_brute(&lp, t, s) + 0.7 * att_brute(&att, s), 4);
        let r = search(&lp, t, &att, &full_beam(0.3));
        assert_eq!(r.best().tokens, best, "instance {seed}");
        assert!((r.best().joint - joint).abs() < 1e-9);
    }
}

#[test]
fn zero_lambda_is_attention_only_and_one_is_ctc_only() {
    let t = 4;
    for seed in 0..50 {
        let (lp, att) = instance(1000 + seed, t);
        let (a, _) = brute_best(|s| att_brute(&att, s), 4);
        assert_eq!(search(&lp, t, &att, &full_beam(0.0)).best().tokens, a);
        let (c, _) = brute_best(|s| ctc_brute(&lp, t, s), 4);
        assert_eq!(search(&lp, t, &att, &full_beam(1.0)).best().tokens, c);
    }
}

#[test]
fn reported_joint_is_recomputable_from_parts() {
    let (lp, att) = instance(7, 4);
    let cfg = BeamConfig {
        nbest: 5,
        ..full_beam(0.3)
    };
    let r = search(&lp, 4, &att, &cfg);
    assert_eq!(r.nbest.len(), 5);
    for s in &r.nbest {
        assert_eq!(s.joint, joint_score(0.3, s.ctc, s.att));
    }
    assert!(r.nbest.windows(2).all(|w| w[0].joint >= w[1].joint));
}

#[test]
fn greedy_is_beam_one_and_deterministic() {
    for seed in 0..30 {
        let (lp, att) = instance(2000 + seed, 4);
        let mut s1 = |p: &[usize]| -> Result<Vec<f64>> { Ok(att.dist(p)) };
        let g = greedy_search(&lp, 4, V, &LABELS, EOS, &mut s1, &full_beam(0.3)).unwrap();
        let b = search(
            &lp,
            4,
            &att,
            &BeamConfig {
                beam_size: 1,
                ..full_beam(0.3)
            },
        );
        assert_eq!(g, b);
        let mut s2 = |p: &[usize]| -> Result<Vec<f64>> { Ok(att.dist(p)) };
        assert_eq!(
            g,
            greedy_search(&lp, 4, V, &LABELS, EOS, &mut s2, &full_beam(0.3)).unwrap()
        );
    }
}

#[test]
fn silent_single_frame_gives_an_empty_transcript() {
    let lp = log_softmax_rows(&[6.0, 0.0, 0.0], 1, V);
    let uniform = |_: &[usize]| -> Result<Vec<f64>> { Ok(vec![0.25f64.ln(); 4]) };
    for beam in [1, 4] {
        let mut s = uniform;
        let r = joint_beam_search(
            &lp,
            1,
            V,
            &LABELS,
            EOS,
            &mut s,
            &BeamConfig {
                beam_size: beam,
                ..full_beam(0.3)
            },
        )
        .unwrap();
        assert!(r.best().tokens.is_empty());
        assert!(!r.truncated);
    }
}

#[test]
fn hypotheses_closed_at_max_len_are_flagged() {
    let (lp, _) = instance(3, 4);
    // eos gets less unlikely with length but stays far below the labels
    let mut s = |p: &[usize]| -> Result<Vec<f64>> {
        Ok(vec![-200.0, 0.5f64.ln(), 0.5f64.ln(), -100.0 + 25.0 * p.len() as f64])
    };
    let cfg = BeamConfig {
        max_len: 2,
        ..full_beam(0.0)
    };
    let r = joint_beam_search(&lp, 4, V, &LABELS, EOS, &mut s, &cfg).unwrap();
    assert!(r.truncated);
    assert_eq!(r.best().tokens.len(), 2);
}

#[test]
fn invalid_configs_are_rejected() {
    let (lp, att) = instance(1, 4);
    let mut s = |p: &[usize]| -> Result<Vec<f64>> { Ok(att.dist(p)) };
    for cfg in [
        BeamConfig {
            lambda_ctc: 1.5,
            ..full_beam(0.3)
        },
        BeamConfig {
            beam_size: 0,
            ..full_beam(0.3)
        },
    ] {
        assert!(joint_beam_search(&lp, 4, V, &LABELS, EOS, &mut s, &cfg).is_err());
    }
}

#[test]
fn wider_beams_never_lose_score() {
    for seed in 0..200 {
        let (lp, mut att) = instance(5000 + seed, 4);
        att.sharpness = 1.0;
        let mut prev = f64::NEG_INFINITY;
        for b in 1..=6 {
            let j = search(
                &lp,
                4,
                &att,
                &BeamConfig {
                    beam_size: b,
                    ..full_beam(0.3)
                },
            )
            .best()
            .joint;
            assert!(j >= prev - 1e-12, "instance {seed}: beam {b} scored {j} after {prev}");
            prev = j;
        }
        let full = search(&lp, 4, &att, &full_beam(0.3)).best().joint;
        assert!(full >= prev - 1e-12);
    }
}
