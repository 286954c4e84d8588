use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitprompt::prompts::{compose, init_pool, PromptApplication, PromptLengths, PromptMode, TaskSpec};
use unitprompt::ulm::{
    backward, forward, grad_check, init_backbone, softmax, with_bos, Dropout, GradCheckConfig, Readout, UlmConfig,
    UlmParameters,
};

fn tokens(seed: u64, n: usize, units: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..units)).collect()
}

fn task() -> TaskSpec {
    TaskSpec::new("AD", "zh", &["hc", "ad"])
}

#[test]
fn grad_check_tiny_model() {
    let report = grad_check(&GradCheckConfig::default()).unwrap();
    println!("{report:?}");
    assert_eq!(report.prefix_len, 6);
    assert!(report.pass, "{report:?}");
    assert!(report.max_rel_err <= 1e-4);
}

#[test]
fn grad_check_zero_tolerance_and_determinism() {
    let cfg = GradCheckConfig {
        tolerance: 0.0,
        backbone_samples: 1,
        ..Default::default()
    };
    let a = grad_check(&cfg).unwrap();
    assert!(!a.pass);
    assert_eq!(a, grad_check(&cfg).unwrap());
}

#[test]
fn grad_check_each_mode() {
    for mode in [PromptMode::InputPrefix, PromptMode::DeepPrefix] {
        let cfg = GradCheckConfig {
            mode,
            backbone_samples: 1,
            seed: 3,
            ..Default::default()
        };
        let r = grad_check(&cfg).unwrap();
        assert!(r.pass, "{mode:?}: {r:?}");
    }
}

#[test]
fn empty_prompts_match_plain_backbone() {
    let cfg = UlmConfig::desk(32);
    let model = init_backbone::<f32>(&cfg, 1).unwrap();
    let toks = with_bos(&tokens(2, 40, 32), &cfg);
    let plain = forward(&toks, &model, &PromptApplication::none(), None, Readout::All, false).unwrap();
    for mode in [PromptMode::InputPrefix, PromptMode::DeepPrefix, PromptMode::Both] {
        let pool = init_pool::<f32>(&[task()], PromptLengths::zero(), mode, &cfg, 9).unwrap();
        let prompt = compose(&task(), &pool, mode).unwrap();
        let out = forward(&toks, &model, &prompt, None, Readout::All, false).unwrap();
        assert_eq!(out.next_unit_logits, plain.next_unit_logits, "{mode:?}");
        assert_eq!(out.hidden_states, plain.hidden_states, "{mode:?}");
    }
}

#[test]
fn last_readout_matches_all() {
    let cfg = UlmConfig::desk(20);
    let model = init_backbone::<f64>(&cfg, 1).unwrap();
    let pool = init_pool::<f64>(&[task()], PromptLengths::default(), PromptMode::Both, &cfg, 9).unwrap();
    let prompt = compose(&task(), &pool, PromptMode::Both).unwrap();
    let toks = with_bos(&tokens(5, 30, 20), &cfg);
    let all = forward(&toks, &model, &prompt, None, Readout::All, false).unwrap();
    let last = forward(&toks, &model, &prompt, None, Readout::Last, false).unwrap();
    let diff = (&all.last_logits() - &last.last_logits()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-12, "{diff}");
    assert_eq!(last.first_position, toks.len() - 1);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]
    #[test]
    fn causal_invariance(seed in 0u64..1000, cut in 1usize..20) {
        let cfg = UlmConfig::tiny(12);
        let model = init_backbone::<f64>(&cfg, seed).unwrap();
        let pool = init_pool::<f64>(&[task()], PromptLengths::default(), PromptMode::Both, &cfg, seed + 1).unwrap();
        let prompt = compose(&task(), &pool, PromptMode::Both).unwrap();
        let a = with_bos(&tokens(seed, 20, 12), &cfg);
        let mut b = a.clone();
        for t in b.iter_mut().skip(cut) {
            *t = (*t + 5) % 12;
        }
        let oa = forward(&a, &model, &prompt, None, Readout::All, false).unwrap();
        let ob = forward(&b, &model, &prompt, None, Readout::All, false).unwrap();
        for t in 0..cut {
            prop_assert_eq!(oa.next_unit_logits.row(t), ob.next_unit_logits.row(t));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(row in proptest::collection::vec(-50.0f32..50.0, 1..40)) {
        let p = softmax(ndarray::Array1::from(row).view());
        prop_assert!((p.sum() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn zero_weights_give_output_bias() {
    let cfg = UlmConfig::tiny(6);
    let mut model = UlmParameters::<f64>::zeros(&cfg).unwrap();
    model.b_out.iter_mut().enumerate().for_each(|(i, b)| *b = i as f64 * 0.5 - 1.0);
    let toks = with_bos(&[1, 4, 2, 0], &cfg);
    let out = forward(&toks, &model, &PromptApplication::none(), None, Readout::All, true).unwrap();
    for row in out.next_unit_logits.rows() {
        assert_eq!(row, model.b_out);
    }
    // Loss = sum of all logits: d b_out = number of positions.
    let ones = Array2::ones(out.next_unit_logits.raw_dim());
    let g = backward(&model, &out, ones.view(), true).unwrap();
    let gb = g.backbone.unwrap();
    assert!(gb.b_out.iter().all(|&v| v == toks.len() as f64));
}

#[test]
fn unused_parameters_get_exact_zero_gradient() {
    let cfg = UlmConfig::tiny(8);
    let model = init_backbone::<f64>(&cfg, 4).unwrap();
    let toks = with_bos(&[1, 2, 3], &cfg);
    let out = forward(&toks, &model, &PromptApplication::none(), None, Readout::All, true).unwrap();
    let mut d = Array2::zeros(out.next_unit_logits.raw_dim());
    d[[1, 3]] = 1.0;
    let gb = backward(&model, &out, d.view(), true).unwrap().backbone.unwrap();
    // Token 7 never occurs; positions past the sequence are never read.
    assert!(gb.token_embedding.row(7).iter().all(|&v| v == 0.0));
    assert!(gb.position_embedding.row(10).iter().all(|&v| v == 0.0));
    // Only output column 3 receives gradient.
    assert!(gb.b_out.iter().enumerate().all(|(i, &v)| (i == 3) == (v != 0.0)));
}

#[test]
fn backward_requires_record() {
    let cfg = UlmConfig::tiny(8);
    let model = init_backbone::<f64>(&cfg, 4).unwrap();
    let out = forward(&[8, 1], &model, &PromptApplication::none(), None, Readout::All, false).unwrap();
    let d = Array2::zeros(out.next_unit_logits.raw_dim());
    let err = backward(&model, &out, d.view(), false).unwrap_err();
    assert!(err.to_string().contains("backward without forward record"));
}

#[test]
fn eval_forward_is_deterministic_and_dropout_is_seeded() {
    let cfg = UlmConfig::desk(16);
    let model = init_backbone::<f32>(&cfg, 8).unwrap();
    let toks = with_bos(&tokens(1, 25, 16), &cfg);
    let none = PromptApplication::none();
    let a = forward(&toks, &model, &none, None, Readout::All, false).unwrap();
    let b = forward(&toks, &model, &none, None, Readout::All, false).unwrap();
    assert_eq!(a.next_unit_logits, b.next_unit_logits);
    let d1 = forward(&toks, &model, &none, Some(Dropout { seed: 1 }), Readout::All, false).unwrap();
    let d1b = forward(&toks, &model, &none, Some(Dropout { seed: 1 }), Readout::All, false).unwrap();
    let d2 = forward(&toks, &model, &none, Some(Dropout { seed: 2 }), Readout::All, false).unwrap();
    assert_eq!(d1.next_unit_logits, d1b.next_unit_logits);
    assert_ne!(d1.next_unit_logits, d2.next_unit_logits);
    assert_ne!(d1.next_unit_logits, a.next_unit_logits);
}

#[test]
fn input_errors() {
    let cfg = UlmConfig::tiny(8);
    let model = init_backbone::<f32>(&cfg, 0).unwrap();
    let none = PromptApplication::none();
    assert!(forward(&[9], &model, &none, None, Readout::All, false).is_err());
    assert!(forward(&[], &model, &none, None, Readout::All, false).is_err());
    let long = vec![1; 65];
    assert!(forward(&long, &model, &none, None, Readout::All, false).is_err());
}
