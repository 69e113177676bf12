//! Acceptance checks. Each check prints one `PASS`/`FAIL` line; the process
//! exits non-zero if any check fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recreason::cli::{BackendKind, RunConfig};
use recreason::corpus::{DatasetKind, Interaction, ItemRecord, Label, Rating, Review, UserRecord};
use recreason::gateway::{default_params, TaskKind, TokenEmbeddings};
use recreason::generation::compute_profile_window;
use recreason::harness::{parse_prediction, ParseStatus};
use recreason::metrics::{binary_auc, greedy_match_score};
use recreason::prompting::{leaks_label, Registry, CONDITIONING_PHRASE};
use recreason::sampler::select_reviews;
use recreason::splitter::{split_corpus, Split};

type Outcome = Result<String, String>;
type Check<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn label(b: bool) -> Label {
    if b {
        Label::Like
    } else {
        Label::Dislike
    }
}

/// Random labelled scores on a small integer grid so ties are common.
/// Both classes are always present.
fn scored_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Label>) {
    let n = rng.random_range(2..=200);
    let grid = rng.random_range(1..=20);
    let mut scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..grid))).collect();
    let mut labels: Vec<Label> = (0..n).map(|_| label(rng.random_bool(0.5))).collect();
    labels[0] = Label::Like;
    labels[1] = Label::Dislike;
    // the first two also get a random spot on the grid
    scores.swap(0, rng.random_range(0..n));
    (scores, labels)
}

/// Fraction of positive/negative pairs ranked correctly, ties counted half.
fn brute_force_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if li.is_like() && !lj.is_like() {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances: Vec<_> = (0..1000).map(|_| scored_instance(&mut rng)).collect();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut with_ties = 0;
    for (i, (s, l)) in instances.iter().enumerate() {
        let got = binary_auc(s, l).map_err(|e| format!("instance {i}: {e}"))?;
        worst = worst.max((got.auc - brute_force_auc(s, l)).abs());
        with_ties += usize::from(got.tied_pairs > 0);
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-12, || format!("max |diff| {worst:e} > 1e-12"))?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    ensure(with_ties > 0, || "no instance had ties".into())?;
    Ok(format!("1000 instances, {with_ties} with ties, max |diff| {worst:e}, {elapsed:.2?}"))
}

fn monotone_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for t in 0..200 {
        let (scores, labels) = scored_instance(&mut rng);
        let a = rng.random_range(0.1..10.0);
        let b = rng.random_range(-50.0..50.0);
        let family = t % 4;
        let f = |x: f64| match family {
            0 => a * x + b,
            1 => (x / 20.0 * a).exp() + b,
            2 => x * x * x + a * x,
            _ => (x / 25.0).atan() * a + b,
        };
        let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
        // the transform must be strictly increasing on the values used
        let mut pairs: Vec<(f64, f64)> = scores.iter().copied().zip(mapped.iter().copied()).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        for w in pairs.windows(2) {
            if w[0].0 < w[1].0 && w[0].1 >= w[1].1 {
                return Err(format!("transform {t} not strictly increasing at {}", w[0].0));
            }
        }
        let before = binary_auc(&scores, &labels).map_err(|e| e.to_string())?.auc;
        let after = binary_auc(&mapped, &labels).map_err(|e| e.to_string())?.auc;
        worst = worst.max((before - after).abs());
    }
    ensure(worst <= 1e-12, || format!("max |diff| {worst:e}"))?;
    Ok(format!("200 transforms, max |diff| {worst:e}"))
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> TokenEmbeddings {
    let vectors = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    TokenEmbeddings {
        tokens: (0..n).map(|i| format!("t{i}")).collect(),
        vectors,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean over `from` of the best cosine against any token of `to`.
fn max_scan(from: &TokenEmbeddings, to: &TokenEmbeddings) -> f64 {
    let mut total = 0.0;
    for a in &from.vectors {
        let mut best = f64::NEG_INFINITY;
        for b in &to.vectors {
            let c = cosine(a, b);
            if c > best {
                best = c;
            }
        }
        total += best;
    }
    total / from.vectors.len() as f64
}

fn similarity_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut worst_self: f64 = 0.0;
    for _ in 0..500 {
        let nc = rng.random_range(1..=20);
        let nr = rng.random_range(1..=20);
        let cand = random_tokens(&mut rng, nc, 8);
        let reference = random_tokens(&mut rng, nr, 8);
        let got = greedy_match_score(&cand, &reference).map_err(|e| e.to_string())?;
        let p = max_scan(&cand, &reference);
        let r = max_scan(&reference, &cand);
        let f = 2.0 * p * r / (p + r);
        worst = worst.max((got.precision - p).abs()).max((got.recall - r).abs()).max((got.f1 - f).abs());
        let own = greedy_match_score(&cand, &cand).map_err(|e| e.to_string())?;
        worst_self = worst_self.max((own.f1 - 1.0).abs());
    }
    ensure(worst <= 1e-9, || format!("max |diff| {worst:e}"))?;
    ensure(worst_self <= 1e-9, || format!("self F1 off by {worst_self:e}"))?;
    Ok(format!("500 cases, max |diff| {worst:e}, self F1 within {worst_self:e}"))
}

fn review_text(rng: &mut ChaCha8Rng) -> String {
    let words = rng.random_range(0..=90);
    (0..words).map(|i| format!("w{i}")).collect::<Vec<_>>().join(if rng.random_bool(0.2) { "  " } else { " " })
}

fn sampler_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = 10;
    for case in 0..1000 {
        let mut item = ItemRecord::bare(&format!("I{case}"));
        let mut counts = [0usize; 5];
        for (r, c) in counts.iter_mut().enumerate() {
            *c = if rng.random_bool(0.3) { 0 } else { rng.random_range(0..25) };
            for _ in 0..*c {
                item.reviews.push(Review {
                    rating: Rating::new(r as i64 + 1).unwrap(),
                    text: review_text(&mut rng),
                    user_id: "u".into(),
                });
            }
        }
        // shuffle so strata are interleaved as in a real dump
        for i in (1..item.reviews.len()).rev() {
            let j = rng.random_range(0..=i);
            item.reviews.swap(i, j);
        }
        let total = item.reviews.len();
        let seed = rng.random();
        let sample = select_reviews(&item, p, seed);
        let want = p.min(total);
        ensure(sample.selected.len() == want, || {
            format!("case {case}: selected {} of {total}, want {want}", sample.selected.len())
        })?;
        for (r, &n_r) in counts.iter().enumerate() {
            let got = sample.allocation.get(&(r as u8 + 1)).copied().unwrap_or(0);
            let exact = want as f64 * n_r as f64 / total.max(1) as f64;
            let picked = sample.selected.iter().filter(|(rt, _)| rt.value() as usize == r + 1).count();
            ensure((got as f64 - exact).abs() <= 1.0, || {
                format!("case {case}: rating {} got {got}, exact share {exact:.3}", r + 1)
            })?;
            ensure(picked == got, || format!("case {case}: allocation/selection disagree"))?;
        }
        for (_, text) in &sample.selected {
            let words = text.split_whitespace().count();
            ensure(words <= 50, || format!("case {case}: trimmed review has {words} words"))?;
            let source_ok = item
                .reviews
                .iter()
                .any(|rv| rv.text.split_whitespace().take(50).collect::<Vec<_>>() == text.split_whitespace().collect::<Vec<_>>());
            ensure(source_ok, || format!("case {case}: selected text is not a prefix of any review"))?;
        }
        ensure(select_reviews(&item, p, seed) == sample, || format!("case {case}: not deterministic"))?;
    }
    Ok("1000 distributions: counts, shares, trims and determinism hold".into())
}

fn interaction(user: &str, i: usize, t: i64) -> Interaction {
    Interaction {
        user_id: user.into(),
        item_id: format!("{user}-i{i}"),
        raw_rating: Rating::new(4).unwrap(),
        label: Label::Like,
        timestamp: t,
        review_text: None,
    }
}

fn split_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut corpus = recreason::corpus::Corpus::empty(DatasetKind::Products, 3);
    for u in 0..500 {
        let id = format!("u{u:03}");
        let n = rng.random_range(0..=40);
        let mut t = 0;
        let seq = (0..n)
            .map(|i| {
                t += rng.random_range(0..3);
                interaction(&id, i, t)
            })
            .collect();
        corpus.users.insert(
            id.clone(),
            UserRecord {
                user_id: id,
                interactions: seq,
                profile: None,
            },
        );
    }
    let mut checked = 0;
    for k in [1, 3, 5, 20] {
        let (examples, report) = split_corpus(&corpus, k);
        let eligible: Vec<&UserRecord> = corpus.users.values().filter(|u| u.interactions.len() >= 3).collect();
        ensure(report.users == eligible.len(), || format!("k={k}: {} users split", report.users))?;
        ensure(examples.len() == 3 * eligible.len(), || format!("k={k}: {} examples", examples.len()))?;
        let mut by_user: BTreeMap<&str, Vec<_>> = BTreeMap::new();
        for ex in &examples {
            by_user.entry(ex.user_id.as_str()).or_default().push(ex);
        }
        for user in eligible {
            let seq = &user.interactions;
            let n = seq.len();
            let exs = by_user.get(user.user_id.as_str()).ok_or("user missing")?;
            for (split, pos) in [(Split::Train, n - 3), (Split::Valid, n - 2), (Split::Test, n - 1)] {
                let ex = exs.iter().find(|e| e.split == split).ok_or("split missing")?;
                let lo = pos.saturating_sub(k);
                ensure(ex.position == pos && ex.target == seq[pos], || format!("{} {split}: wrong target", user.user_id))?;
                ensure(ex.history == seq[lo..pos], || format!("{} {split}: wrong history", user.user_id))?;
                ensure(!ex.history.iter().any(|h| h.item_id == ex.target.item_id), || {
                    format!("{} {split}: target inside its history", user.user_id)
                })?;
                ensure(ex.history.windows(2).all(|w| w[0].timestamp <= w[1].timestamp), || {
                    format!("{} {split}: history out of order", user.user_id)
                })?;
                ensure(ex.history.iter().all(|h| h.timestamp <= ex.target.timestamp), || {
                    format!("{} {split}: history after target", user.user_id)
                })?;
                checked += 1;
            }
            let targets: Vec<_> = exs.iter().map(|e| e.position).collect();
            ensure(targets.iter().collect::<std::collections::BTreeSet<_>>().len() == 3, || {
                format!("{}: targets overlap", user.user_id)
            })?;
        }
    }
    Ok(format!("500 sequences x 4 window sizes, {checked} windows match the slicing oracle"))
}

fn profile_window() -> Outcome {
    let m = 15;
    let mut checked = 0;
    for k in [5, 20] {
        for n in 1..=60 {
            let user = UserRecord {
                user_id: "u".into(),
                interactions: (0..n).map(|i| interaction("u", i, i as i64)).collect(),
                profile: None,
            };
            let w = compute_profile_window(&user, m, k);
            let want = m.min(n.saturating_sub(k));
            ensure(w.prefix.len() == want && w.m_used == want, || {
                format!("n={n} k={k}: got {}, closed form {want}", w.prefix.len())
            })?;
            let recent = &user.interactions[n.saturating_sub(k)..];
            ensure(w.prefix.iter().all(|p| !recent.contains(p)), || format!("n={n} k={k}: overlaps recent window"))?;
            ensure(w.prefix == user.interactions[..want], || format!("n={n} k={k}: not the earliest items"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (n, k) cases match min(m, max(0, n - k))"))
}

fn end_to_end(root: &Path) -> Outcome {
    let start = Instant::now();
    let first = common::full_pipeline(root, &common::fixture_dir(), 64);
    let elapsed = start.elapsed();
    let mut problems = Vec::new();
    let mut notes = vec![format!("first run {elapsed:.2?}, {} mock backend calls", first.backend_calls())];
    if elapsed >= Duration::from_secs(60) {
        problems.push(format!("first run took {elapsed:?}"));
    }
    for f in first.failures() {
        problems.push(f);
    }

    let corpus = common::load_corpus(root);
    notes.push(format!("{} users, {} items", corpus.users.len(), corpus.items.len()));

    match common::export_dirs(root).iter().find(|d| d.ends_with("k64-s7")) {
        Some(dir) => {
            let (meta, train) = common::read_export(dir, "train");
            let lines = std::fs::read_to_string(dir.join("train.jsonl")).unwrap().lines().count();
            if train.len() != 64 || meta.k_shot != Some(64) || lines != 65 {
                problems.push(format!("export has {} records and {lines} lines", train.len()));
            } else {
                notes.push("export 64 records + meta".into());
            }
        }
        None => problems.push("no K=64 export written".into()),
    }

    match std::fs::read_to_string(root.join("report/report.json")) {
        Ok(text) => {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            let aucs: Vec<f64> = v["runs"].as_array().into_iter().flatten().filter_map(|r| r["auc"].as_f64()).collect();
            if aucs.is_empty() || !v["overall"]["auc"].is_number() {
                problems.push("report has no defined AUC".into());
            } else {
                notes.push(format!("report AUC {:.3}", v["overall"]["auc"].as_f64().unwrap()));
            }
        }
        Err(e) => problems.push(format!("report missing: {e}")),
    }

    let before = common::snapshot(root);
    let second = common::full_pipeline(root, &common::fixture_dir(), 64);
    let after = common::snapshot(root);
    if second.backend_calls() != 0 {
        problems.push(format!("warm rerun made {} backend calls", second.backend_calls()));
    }
    if before != after {
        let changed: Vec<_> = before
            .keys()
            .chain(after.keys())
            .filter(|k| before.get(*k) != after.get(*k))
            .map(|k| k.display().to_string())
            .collect();
        problems.push(format!("rerun changed {} files, e.g. {:?}", changed.len(), changed.first()));
    } else {
        notes.push(format!("warm rerun: 0 backend calls, {} files byte-identical", after.len()));
    }

    if problems.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(format!("{} | {}", problems.join("; "), notes.join("; ")))
    }
}

fn leak_scan(root: &Path) -> Outcome {
    let registry = Registry::builtin();
    let prompts = common::prediction_prompts(root, &registry);
    ensure(!prompts.is_empty(), || "no prompts rendered".into())?;
    let leaks: Vec<&str> = prompts.iter().filter(|(_, p)| leaks_label(p)).map(|(id, _)| id.as_str()).collect();
    ensure(leaks.is_empty(), || format!("{} prompts leak, first {}", leaks.len(), leaks[0]))?;
    let exported: usize = common::export_dirs(root)
        .iter()
        .flat_map(|d| ["train", "valid", "test"].map(|s| d.join(format!("{s}.jsonl"))))
        .filter(|p| p.is_file())
        .map(|p| {
            let text = std::fs::read_to_string(p).unwrap();
            text.to_lowercase().matches(CONDITIONING_PHRASE).count()
        })
        .sum();
    ensure(exported == 0, || format!("{exported} exported lines carry the phrase"))?;
    // the scan has teeth: reasoning prompts do carry the phrase
    let reasoning = common::reasoning_prompts(root, &registry);
    ensure(reasoning.iter().all(|p| leaks_label(p)), || "a reasoning prompt lacks the phrase".into())?;
    Ok(format!("{} prediction prompts clean; {} reasoning prompts carry the phrase", prompts.len(), reasoning.len()))
}

fn parser_round_trip(root: &Path) -> Outcome {
    let registry = Registry::builtin();
    let mut pairs = common::all_pairs(root, &registry);
    for dir in common::export_dirs(root) {
        for split in ["train", "valid", "test"] {
            if dir.join(format!("{split}.jsonl")).is_file() {
                pairs.extend(common::read_export(&dir, split).1);
            }
        }
    }
    ensure(!pairs.is_empty(), || "no instruction pairs".into())?;
    for p in &pairs {
        let parsed = parse_prediction(&p.completion);
        ensure(parsed.status == ParseStatus::Ok && parsed.label == Some(p.label), || {
            format!("{} ({}): parsed {:?} {:?}", p.id, p.template_variant, parsed.status, parsed.label)
        })?;
    }
    Ok(format!("{} completions parse back to their label", pairs.len()))
}

fn reference_constants() -> Outcome {
    let rows = [
        (TaskKind::UserProfile, 0.01, 0.9, 256),
        (TaskKind::ItemDescription, 0.01, 0.9, 64),
        (TaskKind::ReasoningGt, 0.01, 0.75, 256),
        (TaskKind::ZeroShotPredict, 0.01, 0.9, 300),
    ];
    for (task, t, p, max) in rows {
        let d = default_params(task);
        ensure(d.temperature == t && d.top_p == p && d.max_new_tokens == max, || format!("{task}: {d:?}"))?;
    }
    let cfg = RunConfig::default();
    let got = (cfg.dataset.threshold, cfg.pipeline.p, cfg.pipeline.n_words, cfg.pipeline.m, cfg.pipeline.q_words);
    ensure(got == (3, 10, 25, 15, 100), || format!("defaults (threshold, p, n, m, q) = {got:?}"))?;
    ensure(cfg.llm.backend == BackendKind::Mock, || "default backend is not mock".into())?;
    Ok("decoding rows and (threshold 3, p 10, n 25, m 15, q 100)".into())
}

fn main() {
    let _ = env_logger::builder().is_test(true).filter_level(log::LevelFilter::Error).try_init();
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path().join("run");
    let checks: Vec<Check> = vec![
        ("auc_matches_pair_counting", Box::new(auc_oracle)),
        ("auc_monotone_invariance", Box::new(monotone_invariance)),
        ("greedy_match_matches_max_scan", Box::new(similarity_oracle)),
        ("review_sampler_fidelity", Box::new(sampler_fidelity)),
        ("split_windows_and_invariants", Box::new(split_correctness)),
        ("profile_window_closed_form", Box::new(profile_window)),
        ("end_to_end_mock_run", Box::new(|| end_to_end(&root))),
        ("prediction_prompts_do_not_leak", Box::new(|| leak_scan(&root))),
        ("completion_parser_round_trip", Box::new(|| parser_round_trip(&root))),
        ("reference_constants", Box::new(reference_constants)),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown".into())
}
