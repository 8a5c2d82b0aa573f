//! Acceptance gate: one PASS/FAIL line per criterion. The process exits
//! nonzero on any failure outside [`KNOWN_DEVIATIONS`]. Every oracle here is
//! written independently of the library code it checks.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use protoseq::corpus::{Dataset, Sentence, Tag, Token, TokenRef};
use protoseq::dynamics::{
    compute_events, detect_noise, detection_metrics, f1_from_reported, forgetting_ratio, histogram_first_learning,
    EventLedger,
};
use protoseq::encoder::{Encoder, WindowEncoder, WindowEncoderConfig};
use protoseq::metrics::entity_prf1;
use protoseq::perturb::{inject_noise, reduce_few_shot};
use protoseq::proto::{
    class_probabilities, compute_centroids, predict, proto_loss, Centroids, DistanceVector, LabelledTokens, Metric,
    PrototypeState, RunningCentroids,
};
use protoseq::synth::{word_corpus, GaussianLayout, GaussianMixture, WordCorpusSpec};
use protoseq::train::{
    baseline_loss, predict_tags, run_training, BaselineHead, EncoderSetup, HeadKind, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and budgets.
const CENTROID_TOL: f64 = 1e-12;
const SOFTMAX_SUM_TOL: f64 = 1e-9;
const SOFTMAX_DIRECT_TOL: f64 = 1e-12;
const GRAD_REL_TOL: f64 = 1e-4;
const DETECTOR_REL_TOL: f64 = 1e-9;
const ARITH_TOL_PCT: f64 = 0.01;
const RATIO_TOL_PCT: f64 = 0.0001;
const FEW_SHOT_MARGIN: f64 = 0.10;
const DETECTION_F1_MIN: f64 = 0.90;
const RUNNING_TOL: f64 = 1e-3;

/// Criteria that fail because the published reference value is not
/// reproducible from its own inputs. They still print FAIL.
const KNOWN_DEVIATIONS: &[&str] = &["detection-table-arithmetic"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn check(name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> (&str, bool) {
    let start = Instant::now();
    let r = f();
    let took = start.elapsed();
    let in_budget = took <= budget;
    let pass = r.pass && in_budget;
    println!(
        "{} {name}: {} [{:.2}s / budget {}s]",
        if pass { "PASS" } else { "FAIL" },
        r.detail,
        took.as_secs_f64(),
        budget.as_secs()
    );
    (name, pass)
}

fn centroid_mean_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(1..6);
        let dim = rng.random_range(1..12);
        let n = rng.random_range(1..40);
        let vecs: Vec<(Vec<f64>, usize)> = (0..n)
            .map(|_| {
                let v = (0..dim).map(|_| rng.random_range(-50.0..50.0)).collect();
                (v, rng.random_range(0..k))
            })
            .collect();
        let support: Vec<(&[f64], usize)> = vecs.iter().map(|(v, c)| (v.as_slice(), *c)).collect();
        let got = compute_centroids(&support, k, dim).unwrap();
        for class in 0..k {
            let members: Vec<&Vec<f64>> = vecs.iter().filter(|(_, c)| *c == class).map(|(v, _)| v).collect();
            match got.get(class) {
                None => {
                    if !members.is_empty() {
                        return outcome(false, format!("class {class} missing"));
                    }
                }
                Some(c) => {
                    for j in 0..dim {
                        let mut s = 0.0;
                        for m in &members {
                            s += m[j];
                        }
                        worst = worst.max((c[j] - s / members.len() as f64).abs());
                    }
                }
            }
        }
    }
    outcome(worst <= CENTROID_TOL, format!("100 support sets, max abs err {worst:.2e}"))
}

fn softmax_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut worst_direct): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let len = rng.random_range(1..12);
        let values: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..30.0)).collect();
        let p = class_probabilities(&DistanceVector {
            values: values.clone(),
            metric: Metric::Euclidean,
        })
        .unwrap();
        let z: f64 = values.iter().map(|v| (-v).exp()).sum();
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        for (pi, v) in p.iter().zip(&values) {
            worst_direct = worst_direct.max((pi - (-v).exp() / z).abs());
        }
    }
    outcome(
        worst_sum <= SOFTMAX_SUM_TOL && worst_direct <= SOFTMAX_DIRECT_TOL,
        format!("1000 vectors, sum err {worst_sum:.2e}, direct err {worst_direct:.2e}"),
    )
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn toy_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let words = ["paris", "rome", "anna", "bob", "the", "in", "met", "city"];
    let tags = [
        Tag::Begin("LOC".into()),
        Tag::Begin("LOC".into()),
        Tag::Begin("PER".into()),
        Tag::Begin("PER".into()),
        Tag::Outside,
        Tag::Outside,
        Tag::Outside,
        Tag::Outside,
    ];
    let sentences = (0..4)
        .map(|_| {
            Sentence::new(
                (0..5)
                    .map(|_| {
                        let i = rng.random_range(0..words.len());
                        Token::clean(words[i], tags[i].clone())
                    })
                    .collect(),
            )
        })
        .collect();
    Dataset::from_sentences(sentences).unwrap()
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Central differences: roundoff ~ 1e-16 / h, truncation ~ h².
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for trial in 0..4 {
        let ds = toy_dataset(&mut rng);
        let mut enc = WindowEncoder::new(
            WindowEncoderConfig {
                dim: 4,
                lookup_dim: 3,
                buckets: 16,
            },
            trial,
        );
        let metric = if trial % 2 == 0 { Metric::Euclidean } else { Metric::SquaredEuclidean };
        let mut state =
            PrototypeState::new(vec!["LOC".into(), "PER".into()], 4, 0.3 + 0.2 * trial as f64, 400.0, metric, 0.1)
                .unwrap();
        let refs: Vec<TokenRef> = ds.token_refs().collect();
        let label = |r: &TokenRef| state_label(&ds, r);
        let mut episode = LabelledTokens::default();
        for (i, r) in refs.iter().enumerate() {
            if i % 3 == 0 && label(r) > 0 {
                episode.support.push((*r, label(r)));
            } else if i % 2 == 0 {
                episode.query.push((*r, label(r)));
            }
        }
        let g = proto_loss(&ds, &episode, &state, &enc).unwrap();
        let loss = |s: &PrototypeState, e: &WindowEncoder| proto_loss(&ds, &episode, s, e).unwrap().loss_value;

        let d0 = state.d_o;
        state.d_o = d0 + h;
        let lp = loss(&state, &enc);
        state.d_o = d0 - h;
        let lm = loss(&state, &enc);
        state.d_o = d0;
        worst = worst.max(rel_err(g.d_o_gradient, (lp - lm) / (2.0 * h)));
        checked += 1;

        for i in 0..enc.params().len() {
            let p0 = enc.params()[i];
            enc.params_mut()[i] = p0 + h;
            let lp = loss(&state, &enc);
            enc.params_mut()[i] = p0 - h;
            let lm = loss(&state, &enc);
            enc.params_mut()[i] = p0;
            worst = worst.max(rel_err(g.parameter_gradients[i], (lp - lm) / (2.0 * h)));
            checked += 1;
        }

        let mut head = BaselineHead::init(
            vec![Tag::Outside, Tag::Begin("LOC".into()), Tag::Begin("PER".into())],
            4,
            &mut rng,
        );
        for b in &mut head.bias {
            *b = rng.random_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = trial as usize % 3;
        let bg = baseline_loss(&x, target, &head).unwrap();
        for i in 0..head.weights.len() {
            let w0 = head.weights[i];
            head.weights[i] = w0 + h;
            let lp = baseline_loss(&x, target, &head).unwrap().loss;
            head.weights[i] = w0 - h;
            let lm = baseline_loss(&x, target, &head).unwrap().loss;
            head.weights[i] = w0;
            worst = worst.max(rel_err(bg.weights[i], (lp - lm) / (2.0 * h)));
            checked += 1;
        }
        for i in 0..head.bias.len() {
            let b0 = head.bias[i];
            head.bias[i] = b0 + h;
            let lp = baseline_loss(&x, target, &head).unwrap().loss;
            head.bias[i] = b0 - h;
            let lm = baseline_loss(&x, target, &head).unwrap().loss;
            head.bias[i] = b0;
            worst = worst.max(rel_err(bg.bias[i], (lp - lm) / (2.0 * h)));
            checked += 1;
        }
    }
    outcome(worst < GRAD_REL_TOL, format!("{checked} partials, max rel err {worst:.2e}"))
}

fn state_label(ds: &Dataset, r: &TokenRef) -> usize {
    match ds.token(*r).unwrap().observed_tag.entity_type() {
        None => 0,
        Some("LOC") => 1,
        Some(_) => 2,
    }
}

fn quadratic_oracle(losses: &[f64]) -> f64 {
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = f64::INFINITY;
    for i in 1..sorted.len() {
        if sorted[i - 1] == sorted[i] {
            continue;
        }
        let t = 0.5 * (sorted[i - 1] + sorted[i]);
        let part = |keep: &dyn Fn(f64) -> bool| {
            let xs: Vec<f64> = losses.iter().copied().filter(|&x| keep(x)).collect();
            let mu = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>()
        };
        best = best.min(part(&|x| x < t) + part(&|x| x >= t));
    }
    best
}

fn detector_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let n = if i == 0 { 2 } else if i == 1 { 500 } else { rng.random_range(2..=500) };
        let noisy_share = rng.random_range(0.0..0.6);
        let losses: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(noisy_share) {
                    rng.random_range(1.0..8.0)
                } else {
                    rng.random_range(0.0..2.0)
                }
            })
            .collect();
        let r = detect_noise(&losses).unwrap();
        let best = quadratic_oracle(&losses);
        let err = (r.objective - best).abs() / best.max(1.0);
        worst = worst.max(err);
        if r.objective > best * (1.0 + DETECTOR_REL_TOL) + 1e-12 {
            return outcome(false, format!("instance {i}: {} vs oracle {best}", r.objective));
        }
    }
    outcome(worst <= DETECTOR_REL_TOL, format!("200 instances, max rel gap {worst:.2e}"))
}

fn detection_table_arithmetic() -> Outcome {
    let a = 100.0 * f1_from_reported(0.9218, 0.9590);
    let b = 100.0 * f1_from_reported(0.9864, 0.9727);
    let (da, db) = ((a - 94.00).abs(), (b - 97.94).abs());
    outcome(
        da <= ARITH_TOL_PCT && db <= ARITH_TOL_PCT,
        format!("F1 {a:.4} vs 94.00 (off {da:.4}), {b:.4} vs 97.94 (off {db:.4}), tolerance {ARITH_TOL_PCT}"),
    )
}

fn forgetting_ratio_arithmetic() -> Outcome {
    let a = 100.0 * forgetting_ratio(2669.0, 230716.0);
    let b = 100.0 * forgetting_ratio(2.97, 99.80);
    let pass = (a - 1.1568).abs() <= RATIO_TOL_PCT && (b - 2.98).abs() <= ARITH_TOL_PCT;
    outcome(pass, format!("ratios {a:.5}% (1.1568%), {b:.4}% (2.98%)"))
}

fn event_engine_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let epochs = rng.random_range(1..=20);
        let n = rng.random_range(1..=200);
        let p = rng.random_range(0.05..0.95);
        let m: Vec<Vec<bool>> = (0..epochs).map(|_| (0..n).map(|_| rng.random_bool(p)).collect()).collect();
        let summary = compute_events(&EventLedger::from_correctness(n, &m).unwrap());
        let hist = histogram_first_learning(&summary, epochs);

        let (mut nf, mut nl) = (0, 0);
        let mut buckets = vec![0usize; epochs];
        let mut never = 0;
        for i in 0..n {
            let (mut learn, mut forget, mut first) = (0, 0, None);
            for t in 0..epochs {
                let prev = t > 0 && m[t - 1][i];
                if m[t][i] && !prev {
                    learn += 1;
                    if first.is_none() {
                        first = Some(t + 1);
                    }
                }
                if !m[t][i] && prev {
                    forget += 1;
                }
            }
            let e = &summary.per_example[i];
            if (e.learning_events, e.forgetting_events, e.first_learning_epoch) != (learn, forget, first) {
                return outcome(false, format!("trial {trial}, example {i} differs"));
            }
            nf += usize::from(forget > 0);
            nl += usize::from(learn > 0);
            match first {
                Some(t) => buckets[t - 1] += 1,
                None => never += 1,
            }
        }
        if (summary.forgettable, summary.learned, summary.unforgettable) != (nf, nl, n - nf)
            || hist.counts != buckets
            || hist.never_learned != never
            || hist.counts.iter().sum::<usize>() + hist.never_learned != n
        {
            return outcome(false, format!("trial {trial}: aggregates or histogram differ"));
        }
    }
    outcome(true, "1000 matrices match recount; histogram conserved")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn few_shot_property() -> Outcome {
    let classes = ["LOC", "ORG", "PER"];
    let mut details = Vec::new();
    let mut pass = true;
    for k in [5usize, 10] {
        let (mut proto_f1, mut base_f1) = (Vec::new(), Vec::new());
        for seed in 0..5u64 {
            let mix = GaussianMixture::new(&classes, 16, 4.0, 1.0, 100 + seed);
            let layout = |n: usize, outside: usize| GaussianLayout {
                per_class: classes.iter().map(|c| (c.to_string(), n)).collect(),
                outside_sentences: outside,
                sentence_len: 4,
            };
            let full = mix.sample(&layout(150, 100), "tr", 200 + seed);
            let train = reduce_few_shot(&full.dataset, "LOC", k, 300 + seed).unwrap();
            let eval = mix.sample(&layout(100, 50), "ev", 400 + seed);
            let gold: Vec<Vec<Tag>> = eval.dataset.sentences().iter().map(|s| s.gold_tags()).collect();
            for (head, out) in [(HeadKind::Proto, &mut proto_f1), (HeadKind::Baseline, &mut base_f1)] {
                // Default optimizer settings; only the sizes are adapted.
                let cfg = TrainConfig {
                    head,
                    epochs: 10,
                    seed,
                    dim: 16,
                    s1: k,
                    minority_classes: vec!["LOC".into()],
                    ..TrainConfig::default()
                };
                let setup =
                    EncoderSetup::precomputed(&cfg, full.embeddings_for(&train).unwrap(), eval.embeddings()).unwrap();
                let res = run_training(&cfg, &train, &eval.dataset, setup).unwrap();
                let enc = res.checkpoint.restore_precomputed(eval.embeddings()).unwrap();
                let tags = predict_tags(&res.checkpoint.head, &enc, &eval.dataset, false).unwrap();
                let report = entity_prf1(&tags, &gold).unwrap();
                out.push(report.per_class.get("LOC").map_or(0.0, |c| c.f1));
            }
        }
        let (mp, mb) = (median(proto_f1), median(base_f1));
        pass &= mp - mb >= FEW_SHOT_MARGIN;
        details.push(format!("k={k}: proto {:.1} vs baseline {:.1}", 100.0 * mp, 100.0 * mb));
    }
    outcome(pass, format!("median minority F1, {}", details.join("; ")))
}

fn detector_property() -> Outcome {
    let mut scores = Vec::new();
    // Sparse entities keep the corpus separable for the window encoder:
    // an O word between two entities pools like an entity word.
    let spec = WordCorpusSpec {
        words_per_class: 10,
        outside_words: 30,
        sentences: 400,
        entity_rate: 0.15,
        ..WordCorpusSpec::default()
    };
    for seed in 0..5u64 {
        let clean = word_corpus(&spec, 500 + seed);
        let noisy = inject_noise(&clean, 0.2, 600 + seed).unwrap();
        let cfg = TrainConfig {
            head: HeadKind::Baseline,
            learning_rate: 0.02,
            epochs: 4,
            seed,
            dim: 16,
            lookup_dim: 8,
            buckets: 4096,
            ..TrainConfig::default()
        };
        let res = run_training(&cfg, &noisy, &noisy, EncoderSetup::window(&cfg)).unwrap();
        let losses = res.ledger.losses_at(4).unwrap();
        let det = detect_noise(losses).unwrap();
        scores.push(detection_metrics(&det.predicted_noisy, &noisy.noise_mask()).unwrap().f1);
    }
    let good = scores.iter().filter(|f| **f >= DETECTION_F1_MIN).count();
    let shown: Vec<String> = scores.iter().map(|f| format!("{:.1}", 100.0 * f)).collect();
    outcome(good >= 4, format!("detection F1 per seed [{}], {good}/5 >= 90", shown.join(", ")))
}

fn running_centroid_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (k, dim) = (3, 5);
    let mut batch = Centroids::empty(k, dim);
    for c in 0..k {
        batch.set(c, (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    }

    let mut once = RunningCentroids::new(k, dim, 1.0).unwrap();
    let mut shifted = Centroids::empty(k, dim);
    for c in 0..k {
        shifted.set(c, batch.get(c).unwrap().iter().map(|v| v + 5.0).collect()).unwrap();
    }
    once.update(&shifted).unwrap();
    once.update(&batch).unwrap();
    let alpha_one_exact = once.centroids() == &batch;

    let mut running = RunningCentroids::new(k, dim, 0.9).unwrap();
    running.update(&shifted).unwrap();
    for _ in 0..200 {
        running.update(&batch).unwrap();
    }
    let mut gap: f64 = 0.0;
    for c in 0..k {
        for (a, b) in running.centroids().get(c).unwrap().iter().zip(batch.get(c).unwrap()) {
            gap = gap.max((a - b).abs());
        }
    }

    let classes: Vec<String> = (0..k).map(|i| format!("C{i}")).collect();
    let mut state = PrototypeState::new(classes, dim, 2.0, 400.0, Metric::Euclidean, 0.9).unwrap();
    state.centroids = batch.clone();
    state.running = running;
    let mut agree = 0;
    for _ in 0..100 {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect();
        agree += usize::from(predict(&x, &state, true).unwrap() == predict(&x, &state, false).unwrap());
    }
    outcome(
        alpha_one_exact && gap <= RUNNING_TOL && agree == 100,
        format!("alpha=1 exact: {alpha_one_exact}; alpha=0.9 gap {gap:.2e}; {agree}/100 probes agree"),
    )
}

fn train_via_cli(dir: &Path, corpus: &Path, config: &Path, tag: &str) -> Result<Vec<u8>, String> {
    let out = dir.join(tag);
    let status = Command::new(env!("CARGO_BIN_EXE_protoseq"))
        .args(["train", "--head", "proto", "--train"])
        .arg(corpus)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(&out)
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("train exited with {status}"));
    }
    std::fs::read(out.join("history.csv")).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("train.conll");
    let ds = word_corpus(&WordCorpusSpec::default(), 9);
    protoseq::corpus::write_conll(&ds, std::fs::File::create(&corpus).unwrap()).unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        "epochs = 3\nseed = 17\nlearning_rate = 0.01\ndim = 16\nlookup_dim = 8\nbuckets = 4096\n",
    )
    .unwrap();
    match (
        train_via_cli(dir.path(), &corpus, &config, "a"),
        train_via_cli(dir.path(), &corpus, &config, "b"),
    ) {
        (Ok(a), Ok(b)) => {
            let rows = String::from_utf8_lossy(&a).lines().count().saturating_sub(1);
            outcome(a == b && rows == 3, format!("history identical: {}, {rows} rows", a == b))
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn main() {
    let s = Duration::from_secs;
    let results = [
        check("centroid-mean-oracle", s(1), centroid_mean_oracle),
        check("softmax-contract", s(1), softmax_contract),
        check("gradient-suite", s(30), gradient_suite),
        check("detector-exactness", s(30), detector_exactness),
        check("detection-table-arithmetic", s(1), detection_table_arithmetic),
        check("forgetting-ratio-arithmetic", s(1), forgetting_ratio_arithmetic),
        check("event-engine-oracle", s(10), event_engine_oracle),
        check("synthetic-few-shot", s(120), few_shot_property),
        check("synthetic-noise-detector", s(120), detector_property),
        check("running-centroid-contract", s(10), running_centroid_contract),
        check("train-determinism", s(60), determinism),
    ];
    let failed: Vec<&str> = results.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    let unexpected = failed.iter().filter(|n| !KNOWN_DEVIATIONS.contains(n)).count();
    println!(
        "acceptance: {} passed, {} failed ({} known deviations)",
        results.len() - failed.len(),
        failed.len(),
        failed.len() - unexpected
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}
