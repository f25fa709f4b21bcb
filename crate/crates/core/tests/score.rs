use fraglm::model::{ModelConfig, ModelParams, SampleConfig};
use fraglm::score::{
    build_population_cache, cliff_threshold, draw_seed, enrichment_factor, is_cliff,
    log_likelihood, mean_stderr, rank_contexts, roc_auc, topk_accuracy, ContextPrior,
    PopulationCache, ScoreError, Scorer, Strategy,
};
use fraglm::synth;
use fraglm::tokenizer::{train_bpe, ContextTriplet, Vocabulary};
use fraglm::train::{finetune_context, StageConfig, TrainSample};
use fraglm_oracle::metrics as brute;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (scores, labels) = brute::random_instance(&mut rng);
        assert_eq!(
            roc_auc(&scores, &labels).unwrap(),
            brute::auc(&scores, &labels)
        );
        for alpha in [0.01, 0.05, 0.1, 0.25, 1.0] {
            let ef = enrichment_factor(&scores, &labels, alpha).unwrap();
            assert_eq!(ef, brute::ef(&scores, &labels, alpha));
            let total = labels.iter().filter(|&&l| l).count() as f64;
            let m = (alpha * scores.len() as f64 - 1e-9).ceil();
            assert!(ef * total * alpha <= m.min(total) + 1e-9);
            assert!(ef <= 1.0 / alpha + 1e-9);
        }
        let (pred, truth) = brute::random_topk_instance(&mut rng);
        for k in [1.0, 10.0, 34.0, 50.0, 100.0] {
            assert_eq!(
                topk_accuracy(&pred, &truth, k).unwrap(),
                brute::topk(&pred, &truth, k)
            );
        }
    }
}

#[test]
fn metric_edge_cases() {
    let perfect = roc_auc(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]).unwrap();
    assert_eq!(perfect, 1.0);
    assert!(matches!(
        enrichment_factor(&[1.0, 2.0], &[false, false], 0.5),
        Err(ScoreError::NoActives)
    ));
    assert!(matches!(
        enrichment_factor(&[1.0], &[true], 0.0),
        Err(ScoreError::InvalidAlpha(_))
    ));
    assert!(matches!(
        topk_accuracy(&[vec![]], &[vec![]], 10.0),
        Err(ScoreError::EmptyLabelUniverse)
    ));
    // Truth always ranked first.
    let pred = vec![vec![3.0, 1.0, 0.0], vec![0.0, 5.0, 1.0]];
    let truth = vec![vec![true, false, false], vec![false, true, false]];
    assert_eq!(topk_accuracy(&pred, &truth, 1.0).unwrap(), 1.0);
    // Hand-built: K=34% of 3 labels gives 2 slots.
    let pred = vec![
        vec![3.0, 2.0, 1.0],
        vec![3.0, 2.0, 1.0],
        vec![1.0, 1.0, 1.0],
    ];
    let truth = vec![
        vec![false, false, true],
        vec![false, true, false],
        vec![false, true, false],
    ];
    assert!((topk_accuracy(&pred, &truth, 34.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(topk_accuracy(&pred, &truth, 100.0).unwrap(), 1.0);
    // Random scores: AUC near one half and EF near one.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores: Vec<f64> = (0..20000).map(|_| rng.gen()).collect();
    let labels: Vec<bool> = (0..20000).map(|_| rng.gen_bool(0.2)).collect();
    assert!((roc_auc(&scores, &labels).unwrap() - 0.5).abs() < 0.02);
    assert!((enrichment_factor(&scores, &labels, 0.1).unwrap() - 1.0).abs() < 0.15);
}

proptest! {
    #[test]
    fn auc_invariant_under_monotone_maps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, labels) = brute::random_instance(&mut rng);
        let mapped: Vec<f64> = scores.iter().map(|s| (s * 1.7 - 3.0).exp() + s.powi(3)).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&mapped, &labels).unwrap());
    }

    #[test]
    fn cliff_detection_monotone_in_delta(scores in prop::collection::vec(0.0f64..10.0, 1..40), d1 in 0.0f64..10.0, d2 in 0.0f64..10.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        for s in scores {
            prop_assert!(!is_cliff(s, hi) || is_cliff(s, lo));
        }
    }

    #[test]
    fn additive_prior_shift_keeps_ranking(lps in prop::collection::vec(-50.0f64..0.0, 2..8), shift in -20.0f64..20.0) {
        let cands: Vec<ContextTriplet> = (0..lps.len())
            .map(|i| ContextTriplet::new(None::<&str>, Some(format!("T{i}").as_str()), None::<&str>))
            .collect();
        let shifted: Vec<f64> = lps.iter().map(|l| l + shift).collect();
        let a = rank_contexts(&cands, &lps, None).unwrap();
        let prior = ContextPrior::uniform(&cands).unwrap();
        let b = rank_contexts(&cands, &shifted, Some(&prior)).unwrap();
        let ia: Vec<_> = a.iter().map(|s| s.ctx.clone()).collect();
        let ib: Vec<_> = b.iter().map(|s| s.ctx.clone()).collect();
        prop_assert_eq!(ia, ib);
    }
}

fn setup() -> (Vocabulary, ModelParams) {
    let texts: Vec<String> = synth::random_molecules(300, 0)
        .iter()
        .map(|m| m.serialize())
        .collect();
    let vocab = train_bpe(&texts, 24)
        .unwrap()
        .with_contexts(&synth::contexts())
        .unwrap();
    let cfg = ModelConfig {
        n_heads: 2,
        n_layers: 1,
        d_model: 16,
        d_ff: 32,
        max_len: 32,
        ..ModelConfig::tiny(vocab.len())
    };
    let (train, _) = synth::conditioning_split(96, 0, 1);
    let sc = StageConfig {
        lr: 1e-2,
        epochs: 8,
        batch_size: 16,
        ..StageConfig::default()
    };
    let (params, _) =
        finetune_context(ModelParams::init(&cfg, 0).unwrap(), &vocab, &train, &sc).unwrap();
    (vocab, params)
}

#[test]
fn model_backed_scores() {
    let (vocab, params) = setup();
    let scorer = Scorer::new(&params, &vocab);
    let null = ContextTriplet::null();
    let mols = synth::random_molecules(12, 4);
    let a = synth::Class::N.context();
    for m in &mols {
        let s = scorer
            .score(m, &null, &[Strategy::L, Strategy::LNull])
            .unwrap();
        assert_eq!(s.normalized[&Strategy::LNull], 0.0);
        let s = scorer.score(m, &a, &[Strategy::L]).unwrap();
        assert_eq!(s.normalized[&Strategy::L], s.raw_logp);
        assert_eq!(s.normalized.len(), 1);
    }
    // Cliffs: identity and symmetry.
    for w in mols.windows(2) {
        assert_eq!(scorer.cliff_score(&w[0], &w[0], &a).unwrap(), 0.0);
        assert!(!scorer.detect_cliff(&w[0], &w[0], &a, 1e-9).unwrap());
        assert_eq!(
            scorer.cliff_score(&w[0], &w[1], &a).unwrap(),
            scorer.cliff_score(&w[1], &w[0], &a).unwrap()
        );
    }
    let calib: Vec<f64> = mols
        .windows(2)
        .map(|w| scorer.cliff_score(&w[0], &w[1], &a).unwrap())
        .collect();
    let delta = cliff_threshold(&calib).unwrap();
    assert!(calib.iter().filter(|&&c| is_cliff(c, delta)).count() <= 1);
    // Thresholding against a brute-force filter.
    let all = scorer
        .threshold_library(&mols, &a, f64::NEG_INFINITY, Strategy::L)
        .unwrap();
    assert_eq!(all.len(), mols.len());
    assert!(scorer
        .threshold_library(&mols, &a, f64::INFINITY, Strategy::L)
        .unwrap()
        .is_empty());
    let tau = calib.iter().sum::<f64>() / calib.len() as f64 - 12.0;
    let got: Vec<_> = scorer
        .threshold_library(&mols, &a, tau, Strategy::L)
        .unwrap()
        .into_iter()
        .map(|c| c.mol)
        .collect();
    let want: Vec<_> = mols
        .iter()
        .filter(|m| scorer.logp(m, &a).unwrap() > tau)
        .cloned()
        .collect();
    assert_eq!(got, want);
    // Classification against a uniform prior and known-slot consistency.
    let cands = synth::contexts();
    let known = ContextTriplet::new(Some(synth::FAMILY), None::<&str>, None::<&str>);
    let r = scorer.classify_context(&mols[0], &cands, &known).unwrap();
    assert!((r.iter().map(|s| s.posterior).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(r[0].logp >= r[1].logp);
    let wrong = ContextTriplet::new(Some("other"), None::<&str>, None::<&str>);
    assert!(scorer.classify_context(&mols[0], &cands, &wrong).is_err());
}

#[test]
fn population_cache_consistency() {
    let (vocab, params) = setup();
    let ctx = synth::Class::N.context();
    let sc = SampleConfig::default();
    let prefix = vocab.encode_prefix(&ctx).unwrap();
    let seed = (0..100)
        .find(|&s| {
            fraglm::model::sample(&params, &vocab, &prefix, None, &sc, draw_seed(s, 0)).is_ok()
        })
        .unwrap();
    let one = build_population_cache(&params, &vocab, &ctx, 1, seed, &sc, false).unwrap();
    let m = fraglm::model::sample(&params, &vocab, &prefix, None, &sc, draw_seed(seed, 0)).unwrap();
    assert_eq!((one.count, one.invalid), (1, 0));
    assert_eq!(
        one.mean,
        log_likelihood(&params, &vocab, &m, &ctx, false).unwrap()
    );
    let again = build_population_cache(&params, &vocab, &ctx, 64, 9, &sc, false).unwrap();
    assert_eq!(
        again,
        build_population_cache(&params, &vocab, &ctx, 64, 9, &sc, false).unwrap()
    );

    let a = build_population_cache(&params, &vocab, &ctx, 512, 1, &sc, false).unwrap();
    let b = build_population_cache(&params, &vocab, &ctx, 512, 2, &sc, false).unwrap();
    let tol = 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    assert!(
        (a.mean - b.mean).abs() <= tol,
        "{} vs {} (tol {tol})",
        a.mean,
        b.mean
    );

    // l_pop of fresh background draws centres on zero.
    let mut cache = PopulationCache::default();
    cache.insert(a.clone());
    let scorer = Scorer {
        cache: Some(&cache),
        ..Scorer::new(&params, &vocab)
    };
    let mut lpop = Vec::new();
    for i in 0..1000u64 {
        if let Ok(m) = fraglm::model::sample(&params, &vocab, &prefix, None, &sc, 10_000 + i) {
            lpop.push(
                scorer
                    .score(&m, &ctx, &[Strategy::LPop])
                    .unwrap()
                    .normalized[&Strategy::LPop],
            );
        }
    }
    let (mean, se) = mean_stderr(&lpop);
    let tol = 3.0 * (se.powi(2) + a.stderr.powi(2)).sqrt();
    assert!(mean.abs() <= tol, "mean l_pop {mean} (tol {tol})");
}

#[test]
fn laplace_prior_from_training_contexts() {
    let (train, _): (Vec<TrainSample>, _) = synth::conditioning_split(50, 0, 2);
    let observed: Vec<ContextTriplet> = train.iter().map(|s| s.ctx.clone()).collect();
    let prior = ContextPrior::laplace(&synth::contexts(), &observed).unwrap();
    let n_a = observed
        .iter()
        .filter(|c| **c == synth::Class::N.context())
        .count() as f64;
    let p = prior.prob(&synth::Class::N.context()).unwrap();
    assert!((p - (n_a + 1.0) / 52.0).abs() < 1e-12);
    assert!((prior.total() - 1.0).abs() < 1e-9);
}
