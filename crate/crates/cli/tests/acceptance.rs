//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use fraglm::attribute::{
    attribute_fragment, attribute_molecule, exhaustive_psi, AttributionConfig, ReplacementSource,
};
use fraglm::model::{
    sample, sequence_logprob, ModelConfig, ModelParams, SampleConfig, SampleError,
};
use fraglm::safe::{contains_constraint, parse_safe, Fragment, SafeMolecule};
use fraglm::score::{enrichment_factor, enrichment_from_counts, roc_auc, topk_accuracy, Scorer};
use fraglm::synth::{self, Class};
use fraglm::tokenizer::{train_bpe, ContextTriplet, TokenSequence, Vocabulary};
use fraglm::train::{
    dpo, dpo_loss, finetune_context, mean_nll, preference_margin, pretrain, Stage, StageConfig,
    TrainSample,
};
use fraglm_oracle::gradcheck::{full_model, small_model, spread_params, OP_SUITES};
use fraglm_oracle::metrics as brute;
use fraglm_oracle::safe_gen::{mutate, random_safe};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Criterion = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn main() {
    let criteria: [(&str, f64, Criterion); 10] = [
        ("gradient correctness", 120.0, gradients),
        ("likelihood normalization", 10.0, normalization),
        ("stage-1 learning", 600.0, stage1),
        ("stage-2 conditioning", 600.0, stage2),
        ("stage-3 preference calibration", 600.0, stage3),
        ("metric oracles", 60.0, metrics),
        ("attribution soundness", 600.0, attribution),
        ("constrained generation", 300.0, generation),
        ("parser robustness", 60.0, parser),
        ("throughput harness", f64::INFINITY, throughput),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let result = result.and_then(|d| {
            if secs < *limit {
                Ok(d)
            } else {
                Err(format!("{d}; runtime {secs:.1}s over the {limit}s limit"))
            }
        });
        match result {
            Ok(d) => println!("criterion {} {name}: PASS ({d}; {secs:.1}s)", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({e}; {secs:.1}s)", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn gradients() -> Result<String, String> {
    for (name, suite, seed) in OP_SUITES {
        suite(100, seed).map_err(|e| format!("{name}: {e}"))?;
    }
    full_model(10, 99).map_err(|e| format!("2-layer model: {e}"))?;
    Ok(format!(
        "{} op suites x 100 instances, 2-layer model x 10",
        OP_SUITES.len()
    ))
}

fn normalization() -> Result<String, String> {
    let cfg = small_model(5);
    let p = spread_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let mut worst: f64 = 0.0;
    for prefix in 0..5 {
        let mut total = 0.0;
        for a in 0..5 {
            for b in 0..5 {
                let seq = TokenSequence {
                    ids: vec![prefix, a, b],
                    boundary: 1,
                };
                total += sequence_logprob(&p, &seq).map_err(|e| e.to_string())?.exp();
            }
        }
        worst = worst.max((total - 1.0).abs());
    }
    ensure(worst <= 1e-4, format!("max |sum - 1| = {worst:.2e}"))?;
    Ok(format!("max |sum - 1| = {worst:.2e} over 5 prefixes"))
}

fn null_samples(mols: &[SafeMolecule]) -> Vec<TrainSample> {
    mols.iter()
        .map(|m| TrainSample {
            ctx: ContextTriplet::null(),
            mol: m.clone(),
        })
        .collect()
}

fn per_token(params: &ModelParams, vocab: &Vocabulary, data: &[TrainSample]) -> f64 {
    let (nll, n) = mean_nll(params, vocab, data, true).expect("nll");
    nll / n as f64
}

fn toy_model(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        max_len: 64,
        ..ModelConfig::tiny(vocab.len())
    }
}

/// Five molecules of three long random heteroatom chains each.
fn memorization_corpus() -> Vec<SafeMolecule> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut chain = |n: usize| -> String {
        (0..n)
            .map(|_| ["C", "N", "O", "S"][rng.gen_range(0..4)])
            .collect()
    };
    (0..5)
        .map(|_| {
            let text = format!("{}1.{}12.{}2", chain(9), chain(9), chain(9));
            parse_safe(&text).expect("chain molecule parses")
        })
        .collect()
}

fn stage1() -> Result<String, String> {
    let vocab = synth::vocabulary(32);
    let (train, test) = synth::molecule_split(50, 50, 3);
    let (train, test) = (null_samples(&train), null_samples(&test));
    let init = ModelParams::init(&toy_model(&vocab), 1).map_err(|e| e.to_string())?;
    let before = per_token(&init, &vocab, &test);
    let cfg = StageConfig {
        epochs: 200,
        lr: 3e-3,
        seed: 1,
        ..StageConfig::for_stage(Stage::Pretrain)
    };
    let mols: Vec<SafeMolecule> = train.iter().map(|s| s.mol.clone()).collect();
    let (trained, _) = pretrain(init, &vocab, &mols, &cfg).map_err(|e| e.to_string())?;
    let after = per_token(&trained, &vocab, &test);
    ensure(
        after < 0.5 * before,
        format!("held-out NLL {before:.3} -> {after:.3}"),
    )?;

    let five = memorization_corpus();
    let texts: Vec<String> = five.iter().map(SafeMolecule::serialize).collect();
    let small_vocab = train_bpe(&texts, 8).map_err(|e| e.to_string())?;
    let init = ModelParams::init(&toy_model(&small_vocab), 2).map_err(|e| e.to_string())?;
    let cfg = StageConfig {
        epochs: 300,
        lr: 3e-3,
        batch_size: 5,
        shuffle_fragments: false,
        seed: 2,
        ..StageConfig::for_stage(Stage::Pretrain)
    };
    let (memorized, _) = pretrain(init, &small_vocab, &five, &cfg).map_err(|e| e.to_string())?;
    let mem = per_token(&memorized, &small_vocab, &null_samples(&five));
    ensure(mem < 0.1, format!("5-molecule per-token NLL {mem:.4}"))?;
    Ok(format!(
        "held-out per-token NLL {before:.3} -> {after:.3} (ratio {:.3}); 5-molecule per-token NLL {mem:.4}",
        after / before
    ))
}

/// Toy models shared by the conditioning, preference, attribution and
/// generation criteria.
struct Toy {
    vocab: Vocabulary,
    pretrained: ModelParams,
    finetuned: ModelParams,
    heldout: Vec<TrainSample>,
}

const SEED: u64 = 7;

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let vocab = synth::vocabulary(32);
        let all: Vec<SafeMolecule> = [Class::N, Class::O]
            .iter()
            .flat_map(|&c| synth::all_molecules(c))
            .collect();
        let init = ModelParams::init(&toy_model(&vocab), SEED).expect("init");
        let pre = StageConfig {
            epochs: 20,
            lr: 3e-3,
            seed: SEED,
            ..StageConfig::for_stage(Stage::Pretrain)
        };
        let (pretrained, _) = pretrain(init, &vocab, &all, &pre).expect("pretrain");
        let (train, heldout) = synth::conditioning_split(300, all.len() - 300, SEED);
        let (finetuned, _) = finetune_context(pretrained.clone(), &vocab, &train, &finetune_cfg())
            .expect("finetune");
        Toy {
            vocab,
            pretrained,
            finetuned,
            heldout,
        }
    })
}

fn finetune_cfg() -> StageConfig {
    StageConfig {
        epochs: 20,
        lr: 3e-3,
        seed: SEED,
        ..StageConfig::for_stage(Stage::Finetune)
    }
}

fn other_context(ctx: &ContextTriplet) -> ContextTriplet {
    if *ctx == Class::N.context() {
        Class::O.context()
    } else {
        Class::N.context()
    }
}

/// Mean of `log p(x|c) - log p(x|c')` with `c'` the other target.
fn mean_gap(params: &ModelParams, vocab: &Vocabulary, data: &[TrainSample]) -> Result<f64, String> {
    let s = Scorer::new(params, vocab);
    let mut total = 0.0;
    for x in data {
        let own = s.logp(&x.mol, &x.ctx).map_err(|e| e.to_string())?;
        let other = s
            .logp(&x.mol, &other_context(&x.ctx))
            .map_err(|e| e.to_string())?;
        total += own - other;
    }
    Ok(total / data.len() as f64)
}

fn stage2() -> Result<String, String> {
    let t = toy();
    let s = Scorer::new(&t.finetuned, &t.vocab);
    let candidates = synth::contexts();
    let mut correct = 0;
    for x in &t.heldout {
        let ranked = s
            .classify_context(&x.mol, &candidates, &ContextTriplet::null())
            .map_err(|e| e.to_string())?;
        if ranked[0].ctx == x.ctx {
            correct += 1;
        }
    }
    let acc = correct as f64 / t.heldout.len() as f64;
    let gap = mean_gap(&t.finetuned, &t.vocab, &t.heldout)?;

    // Both contexts fully masked collapse to the null context.
    let null_gap = {
        let null = ContextTriplet::null();
        let mut total = 0.0;
        for x in &t.heldout {
            total += s
                .logp(&x.mol, &x.ctx.masked([true; 3]))
                .map_err(|e| e.to_string())?
                - s.logp(&x.mol, &null).map_err(|e| e.to_string())?;
        }
        total / t.heldout.len() as f64
    };
    // Ablation: stage 2 with every slot always masked never sees a context
    // token, so its gap only reflects the untrained context embeddings.
    let (train, _) = synth::conditioning_split(300, t.heldout.len(), SEED);
    let masked_cfg = StageConfig {
        mask_anneal: (1.0, 1.0),
        ..finetune_cfg()
    };
    let (masked, _) = finetune_context(t.pretrained.clone(), &t.vocab, &train, &masked_cfg)
        .map_err(|e| e.to_string())?;
    let ablation_gap = mean_gap(&masked, &t.vocab, &t.heldout)?;
    let detail = format!(
        "accuracy {acc:.3} on {} held-out, gap {gap:.2} nat, fully masked gap {null_gap:.4} nat, \
         all-masked-training ablation gap {ablation_gap:.3} nat (informational)",
        t.heldout.len()
    );
    ensure(
        acc > 0.9 && gap > 1.0 && null_gap.abs() < 0.1,
        detail.clone(),
    )?;
    Ok(detail)
}

fn stage3() -> Result<String, String> {
    let t = toy();
    let pairs = synth::preference_pairs(20, SEED);
    let l0 =
        dpo_loss(&t.finetuned, &t.finetuned, &t.vocab, &pairs, 0.1).map_err(|e| e.to_string())?;
    ensure(
        (l0 - std::f64::consts::LN_2).abs() <= 1e-6,
        format!("initial loss {l0} differs from ln 2"),
    )?;
    let cfg = StageConfig {
        epochs: 20,
        batch_size: 4,
        lr: 5e-4,
        seed: SEED,
        ..StageConfig::for_stage(Stage::Dpo)
    };
    let steps = cfg.epochs * pairs.len().div_ceil(cfg.batch_size);
    let (policy, _) = dpo(t.finetuned.clone(), &t.finetuned, &t.vocab, &pairs, &cfg)
        .map_err(|e| e.to_string())?;
    let margin = |p: &ModelParams| -> Result<f64, String> {
        let mut total = 0.0;
        for x in &pairs {
            total += preference_margin(p, &t.vocab, x).map_err(|e| e.to_string())?;
        }
        Ok(total / pairs.len() as f64)
    };
    let (m0, m1) = (margin(&t.finetuned)?, margin(&policy)?);

    let held = synth::heldout_cliff_pairs(40, SEED + 1);
    let ctx = Class::N.context();
    let deltas = |p: &ModelParams| -> Result<(f64, f64), String> {
        let s = Scorer::new(p, &t.vocab);
        let (mut c, mut nc, mut nc_n) = (0.0, 0.0, 0);
        for x in &held {
            let d = s.cliff_score(&x.a, &x.b, &ctx).map_err(|e| e.to_string())?;
            if x.cliff {
                c += d;
            } else {
                nc += d;
                nc_n += 1;
            }
        }
        Ok((c / (held.len() - nc_n) as f64, nc / nc_n as f64))
    };
    let (c0, n0) = deltas(&t.finetuned)?;
    let (c1, n1) = deltas(&policy)?;
    let detail = format!(
        "initial loss {l0:.9}, {steps} steps, margin {m0:.3} -> {m1:.3}, held-out delta cliff/non-cliff \
         {c0:.3}/{n0:.3} -> {c1:.3}/{n1:.3}"
    );
    ensure(steps == 100 && m1 > m0 && c1 > n1, detail.clone())?;
    Ok(detail)
}

fn metrics() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let alphas = [0.01, 0.02, 0.05, 0.1, 0.2, 0.25, 0.5, 1.0];
    for i in 0..1000 {
        let (scores, labels) = brute::random_instance(&mut rng);
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        ensure(
            auc == brute::auc(&scores, &labels),
            format!("roc_auc differs on instance {i}"),
        )?;
        let alpha = alphas[rng.gen_range(0..alphas.len())];
        let ef = enrichment_factor(&scores, &labels, alpha).map_err(|e| e.to_string())?;
        ensure(
            ef == brute::ef(&scores, &labels, alpha),
            format!("enrichment_factor differs on instance {i}"),
        )?;
        let (pred, truth) = brute::random_topk_instance(&mut rng);
        let k = [1.0, 5.0, 10.0, 25.0, 50.0, 100.0][rng.gen_range(0..6)];
        let acc = topk_accuracy(&pred, &truth, k).map_err(|e| e.to_string())?;
        ensure(
            acc == brute::topk(&pred, &truth, k),
            format!("topk_accuracy differs on instance {i}"),
        )?;
    }
    ensure(
        enrichment_from_counts(5, 10, 0.01) == 50.0,
        "EF(5, 10, 0.01) != 50",
    )?;
    ensure(
        enrichment_from_counts(2, 4, 0.5) == 1.0,
        "EF(2, 4, 0.5) != 1",
    )?;
    // 1000 molecules, 10 actives, 5 of them among the top 10.
    let scores: Vec<f64> = (0..1000).map(|i| -(i as f64)).collect();
    let labels: Vec<bool> = (0..1000)
        .map(|i| i % 2 == 0 && i < 10 || (500..505).contains(&i))
        .collect();
    let ef = enrichment_factor(&scores, &labels, 0.01).map_err(|e| e.to_string())?;
    ensure(ef == 50.0, format!("ranked hand case gives EF {ef}"))?;
    Ok("1000 instances per metric match brute force exactly; EF hand cases hold".into())
}

const UNIVERSE: &[&str] = &[
    "N1", "NC1", "CN1", "CCN1", "O1", "OC1", "CO1", "CCO1", "C1", "CC1", "CCC1", "S1", "SC1",
    "CS1", "F1", "Cl1", "CCl1", "CC(C)C1", "CSC1", "CCCC1",
];

fn attribution() -> Result<String, String> {
    let t = toy();
    let err = |e: fraglm::attribute::AttributeError| e.to_string();
    let cfg = |n: usize, seed: u64| AttributionConfig {
        n,
        seed,
        ..AttributionConfig::default()
    };

    for x in t.heldout.iter().take(10) {
        for i in 0..x.mol.len() {
            let own = [x.mol.fragments()[i].clone()];
            let a = attribute_fragment(
                &t.finetuned,
                &t.vocab,
                &x.mol,
                &x.ctx,
                i,
                ReplacementSource::Universe(&own),
                &cfg(8, 1),
            )
            .map_err(err)?;
            ensure(
                a.psi == 0.0,
                format!("identity psi {} on {}", a.psi, x.mol.serialize()),
            )?;
        }
    }

    let universe: Vec<Fragment> = UNIVERSE
        .iter()
        .map(|f| Fragment::parse(f).expect("fragment"))
        .collect();
    let mut worst_z: f64 = 0.0;
    for (k, (text, class)) in [
        ("C1CCC.NC1", Class::N),
        ("C1CSC.OC1", Class::O),
        ("C1CCCC.CN1", Class::O),
    ]
    .iter()
    .enumerate()
    {
        let mol = parse_safe(text).map_err(|e| e.to_string())?;
        let ctx = class.context();
        let exact =
            exhaustive_psi(&t.finetuned, &t.vocab, &mol, &ctx, 1, &universe).map_err(err)?;
        let mc = attribute_fragment(
            &t.finetuned,
            &t.vocab,
            &mol,
            &ctx,
            1,
            ReplacementSource::Universe(&universe),
            &cfg(10_000, 10 + k as u64),
        )
        .map_err(err)?;
        let z = (mc.psi - exact).abs() / mc.stderr;
        worst_z = worst_z.max(z);
        ensure(
            z <= 3.0,
            format!(
                "{text}: MC psi {} vs exact {exact}, stderr {}",
                mc.psi, mc.stderr
            ),
        )?;
    }

    let mols: Vec<&TrainSample> = t.heldout.iter().take(40).collect();
    let mut top = 0;
    for (k, x) in mols.iter().enumerate() {
        let a = attribute_molecule(
            &t.finetuned,
            &t.vocab,
            &x.mol,
            &x.ctx,
            ReplacementSource::Pretrained(&t.pretrained),
            &cfg(32, 100 + k as u64),
        )
        .map_err(err)?;
        let best = a
            .iter()
            .max_by(|p, q| p.psi.total_cmp(&q.psi))
            .expect("fragments");
        if best.index == synth::CLASS_INDEX {
            top += 1;
        }
    }
    let frac = top as f64 / mols.len() as f64;
    let detail = format!(
        "identity psi 0 on 10 molecules, worst MC z-score {worst_z:.2} over 3 two-fragment molecules, causal fragment top in \
         {top}/{} ({frac:.3})",
        mols.len()
    );
    ensure(frac > 0.8, detail.clone())?;
    Ok(detail)
}

/// Samples `n` molecules; returns (parsed, failures).
fn draw(
    params: &ModelParams,
    vocab: &Vocabulary,
    ctx: &ContextTriplet,
    scaffold: Option<&SafeMolecule>,
    n: usize,
    seed: u64,
) -> Result<(Vec<SafeMolecule>, usize), String> {
    let prefix = vocab.encode_prefix(ctx).map_err(|e| e.to_string())?;
    let sc = SampleConfig {
        max_new: 48,
        ..SampleConfig::default()
    };
    let mut ok = Vec::new();
    let mut bad = 0;
    for i in 0..n {
        match sample(params, vocab, &prefix, scaffold, &sc, seed + i as u64) {
            Ok(m) => ok.push(m),
            Err(SampleError::ParseFailed { .. } | SampleError::LengthExceeded { .. }) => bad += 1,
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok((ok, bad))
}

fn generation() -> Result<String, String> {
    let t = toy();
    let mut parsed = 0;
    for (k, text) in ["C1CCC2", "C1CSC2.NC1", "C1CCCC2.S2"].iter().enumerate() {
        let scaffold = parse_safe(text).map_err(|e| e.to_string())?;
        let (ok, _) = draw(
            &t.finetuned,
            &t.vocab,
            &Class::N.context(),
            Some(&scaffold),
            100,
            1000 * k as u64,
        )?;
        if let Some(m) = ok.iter().find(|m| !contains_constraint(m, &scaffold)) {
            return Err(format!("{} lost scaffold {text}", m.serialize()));
        }
        parsed += ok.len();
    }
    let (ok, bad) = draw(
        &t.pretrained,
        &t.vocab,
        &ContextTriplet::null(),
        None,
        500,
        5000,
    )?;
    let validity = ok.len() as f64 / (ok.len() + bad) as f64;
    let detail = format!("constraint preserved in {parsed}/{parsed} parsed scaffold generations, validity {validity:.3}");
    ensure(validity > 0.9, detail.clone())?;
    Ok(detail)
}

fn parser() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut parsed, mut rejected) = (0, 0);
    for case in 0..10_000u64 {
        let valid = random_safe(case);
        let text = if case % 2 == 0 {
            valid.clone()
        } else {
            mutate(&valid, &mut rng)
        };
        let outcome = catch_unwind(|| parse_safe(&text).map(|m| (parse_safe(&m.serialize()), m)))
            .map_err(|_| format!("parser panicked on {text:?}"))?;
        match outcome {
            Ok((again, m)) => {
                parsed += 1;
                let again = again.map_err(|e| format!("{text:?} re-parse failed: {e}"))?;
                ensure(
                    again == m && again.serialize() == m.serialize(),
                    format!("{text:?} does not round-trip"),
                )?;
            }
            Err(_) if case % 2 == 0 => return Err(format!("valid string {text:?} rejected")),
            Err(_) => rejected += 1,
        }
    }
    let linker = parse_safe("[2*]C#C.[14*]OCCOC").map_err(|e| e.to_string())?;
    ensure(
        linker.len() == 2 && linker.is_partial(),
        "linker scaffold counts",
    )?;
    let core =
        parse_safe("[1*]c1cccc(Nc2ncnc3cc([2*])c([3*])cc23)c1").map_err(|e| e.to_string())?;
    ensure(
        core.len() == 1 && core.fragments()[0].open_sites().len() == 3,
        "core scaffold counts",
    )?;
    Ok(format!(
        "10000 cases, 0 panics, {parsed} parsed and round-tripped, {rejected} rejected; both scaffolds match"
    ))
}

fn fraglm(dir: &Path, args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fraglm"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "fraglm {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn throughput() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    fraglm(d, &["synth", "--out", "."])?;
    fraglm(d, &["--config", "config.json", "vocab"])?;
    fraglm(
        d,
        &["--config", "config.json", "train", "--stage", "pretrain"],
    )?;
    let report = fraglm(
        d,
        &[
            "--config",
            "config.json",
            "bench",
            "--ckpt",
            "checkpoints/pretrain.ckpt",
        ],
    )?;
    ensure(
        report["version"] == "report-v1" && report["command"] == "bench",
        "report header",
    )?;
    let rows = report["result"]["rows"].as_array().ok_or("no rows")?;
    let sizes: Vec<u64> = rows
        .iter()
        .filter_map(|r| r["batch_size"].as_u64())
        .collect();
    ensure(sizes == [128, 256, 512], format!("batch sizes {sizes:?}"))?;
    let mut worst: f64 = 0.0;
    let mut summary = Vec::new();
    for r in rows {
        let b = r["batch_size"].as_f64().ok_or("batch_size")?;
        let secs: Vec<f64> = r["run_seconds"]
            .as_array()
            .ok_or("run_seconds")?
            .iter()
            .filter_map(Value::as_f64)
            .collect();
        let toks: Vec<f64> = r["run_tokens"]
            .as_array()
            .ok_or("run_tokens")?
            .iter()
            .filter_map(Value::as_f64)
            .collect();
        ensure(
            r["runs"] == 10 && secs.len() == 10 && toks.len() == 10,
            "10 runs per batch size",
        )?;
        let tps = toks.iter().zip(&secs).map(|(t, s)| t / s).sum::<f64>() / 10.0;
        let mps = secs.iter().map(|s| b / s).sum::<f64>() / 10.0;
        let tpm = toks.iter().sum::<f64>() / (10.0 * b);
        let rep = |k: &str| r[k].as_f64().unwrap_or(f64::NAN);
        ensure(
            (rep("tokens_per_s") - tps).abs() <= 1e-9 * tps
                && (rep("molecules_per_s") - mps).abs() <= 1e-9 * mps
                && (rep("mean_tokens_per_molecule") - tpm).abs() <= 1e-12 * tpm,
            "reported means disagree with the per-run values",
        )?;
        let err = (mps - tps / tpm).abs() / mps;
        worst = worst.max(err);
        summary.push(format!("{b}: {tps:.0} tok/s {mps:.1} mol/s"));
    }
    ensure(
        worst <= 0.01 && report["result"]["consistent"] == true,
        format!("consistency error {worst:.4}"),
    )?;
    Ok(format!(
        "{}; worst consistency error {worst:.2e}",
        summary.join(", ")
    ))
}
