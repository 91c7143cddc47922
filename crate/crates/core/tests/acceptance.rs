//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `cargo test -p docground --test acceptance`

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use docground::answer_parser::parse_prediction;
use docground::geometry::{from_prompt_box, iou, union_box, NormBox, PromptBox};
use docground::harness::{render_report, run_eval, write_run, Localizer, ReportFormat, RunConfig};
use docground::ocr_locator::{locate, MatchMode};
use docground::regressor::io::write_checkpoint;
use docground::regressor::{backward, train, Dims, RegressorParams, TrainConfig};
use docground::synth::{affine_records, planted_corpus};
use docground::text_metrics::{anls_corpus, levenshtein, AnlsConfig};
use docground::vlm_client::sha256_hex;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const ALPHABET: &[char] = &['a', 'b', 'c', 'd', 'A', 'B', ' ', ' ', 'é', 'ß', '漢', '1', '-'];

fn random_string(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

fn mutate(rng: &mut ChaCha8Rng, s: &str) -> String {
    let mut chars: Vec<char> = s.chars().collect();
    for _ in 0..rng.random_range(0..4) {
        let c = ALPHABET[rng.random_range(0..ALPHABET.len())];
        match rng.random_range(0..3) {
            0 if !chars.is_empty() => {
                let i = rng.random_range(0..chars.len());
                chars[i] = c;
            }
            1 if !chars.is_empty() => {
                chars.remove(rng.random_range(0..chars.len()));
            }
            _ => chars.insert(rng.random_range(0..=chars.len()), c),
        }
    }
    chars.into_iter().collect()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pairs: Vec<(Option<String>, String)> = Vec::with_capacity(10_000);
    for i in 0..10_000 {
        let a = random_string(&mut rng, 64);
        let b = if i % 2 == 0 { mutate(&mut rng, &a) } else { random_string(&mut rng, 64) };
        let (fast, slow) = (levenshtein(&a, &b), common::naive_levenshtein(&a, &b));
        ensure(fast == slow, || format!("levenshtein({a:?}, {b:?}) = {fast}, oracle {slow}"))?;
        pairs.push(((i % 7 != 0).then_some(a), b));
    }
    let cfg = AnlsConfig::default();
    let fast = anls_corpus(pairs.iter().map(|(p, g)| (p.as_deref(), g.as_str())), &cfg);
    let slow = common::naive_anls(&pairs, cfg.threshold);
    ensure((fast - slow).abs() <= 1e-12, || format!("anls_corpus {fast} vs oracle {slow}"))?;
    Ok(format!("10000 pairs exact, anls {fast:.6}"))
}

fn random_box(rng: &mut ChaCha8Rng) -> NormBox {
    let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
    NormBox::from_unordered(c[0], c[1], c[2], c[3])
}

fn iou_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut disjoint = 0;
    for _ in 0..10_000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        ensure(ab == ba, || format!("asymmetric: {a:?} {b:?} {ab} {ba}"))?;
        ensure((0.0..=1.0).contains(&ab), || format!("out of bounds: {ab}"))?;
        if a.area() > 0.0 {
            ensure(iou(&a, &a) == 1.0, || format!("identity fails for {a:?}"))?;
        }
        if a.x2() <= b.x1() || b.x2() <= a.x1() || a.y2() <= b.y1() || b.y2() <= a.y1() {
            disjoint += 1;
            ensure(ab == 0.0, || format!("disjoint boxes score {ab}"))?;
        }
    }
    let a = NormBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
    let b = NormBox::new(0.25, 0.0, 0.75, 0.5).unwrap();
    let third = iou(&a, &b);
    ensure((third - 1.0 / 3.0).abs() <= 1e-12, || format!("hand case gives {third}"))?;
    Ok(format!("10000 pairs ({disjoint} disjoint), 1/3 case exact"))
}

fn coordinate_round_trip() -> Outcome {
    let grid: Vec<i64> = (0..=1000).step_by(7).collect();
    let mut checked = 0u64;
    for &x in &grid {
        for &w in grid.iter().take_while(|&&w| x + w <= 1000) {
            for &y in &grid {
                for &h in grid.iter().take_while(|&&h| y + h <= 1000) {
                    let pb = PromptBox::new(x, y, w, h);
                    let c = from_prompt_box(pb);
                    let back = docground::geometry::to_prompt_box(&c.bbox);
                    if back != pb || c.clamped {
                        return Err(format!("{pb} -> {back}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} in-range boxes, 0 failures"))
}

fn gradient_check() -> Outcome {
    let dims = Dims {
        visual: 8,
        text: 8,
        latent: 4,
        hidden: 4,
    };
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut components = 0usize;
    for net in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + net);
        let mut params = RegressorParams::init(dims, &mut rng);
        // nonzero biases so the check also covers them
        for l in params.layers_mut() {
            for b in &mut l.b {
                *b = rng.random_range(-0.1..0.1);
            }
        }
        let visual: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let text: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = random_box(&mut rng);
        let t = target.to_array();
        let (_, grad) = backward(&params, &visual, &text, &target).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = grad.values().copied().collect();
        for (k, &a) in analytic.iter().enumerate() {
            let mut probe = params.clone();
            let v = probe.values_mut().nth(k).unwrap();
            let orig = *v;
            *v = orig + eps;
            let up = common::naive_loss(&common::naive_forward(&probe, &visual, &text), &t);
            *probe.values_mut().nth(k).unwrap() = orig - eps;
            let down = common::naive_loss(&common::naive_forward(&probe, &visual, &text), &t);
            let numeric = (up - down) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
            components += 1;
            ensure(rel < 1e-4, || format!("net {net} param {k}: analytic {a:e} numeric {numeric:e} rel {rel:e}"))?;
        }
    }
    Ok(format!("{components} components, worst relative error {worst:.2e}"))
}

fn overfit() -> Outcome {
    let records = affine_records(32, 16, 16, 0.01, 3);
    let cfg = TrainConfig {
        latent: 64,
        hidden: 64,
        learning_rate: 1e-3,
        batch_size: 16,
        epochs: 200,
        seed: 11,
        ..TrainConfig::default()
    };
    let out = train(&records, &[], &cfg).map_err(|e| e.to_string())?;
    let h = &out.history;
    let violations = h.windows(2).filter(|w| w[1].train_loss > w[0].train_loss).count();
    let best = h.iter().map(|e| e.train_mean_iou).fold(0.0, f64::max);
    let first_hit = h.iter().find(|e| e.train_mean_iou > 0.8).map(|e| e.epoch);
    ensure(first_hit.is_some(), || format!("best train MeanIoU {best:.4} after {} epochs", h.len()))?;
    ensure(violations <= 5, || format!("{violations} loss increases"))?;
    Ok(format!(
        "MeanIoU > 0.8 at epoch {}, best {best:.4}, {violations} loss increases",
        first_hit.unwrap()
    ))
}

fn ocr_exactness() -> Outcome {
    let (corpus, planted) = planted_corpus(200, 4);
    let (mut first_word, mut none) = (0, 0);
    for p in &planted {
        let doc = &corpus.documents[&p.qa.doc_id];
        let expected = union_box(&p.run.iter().map(|&i| doc.tokens[i].bbox).collect::<Vec<_>>()).unwrap();
        let m = locate(&p.qa.answer_value, &doc.tokens);
        ensure(m.mode == MatchMode::Full, || format!("{}: mode {:?}", p.qa.qa_id, m.mode))?;
        let score = m.bbox.map_or(0.0, |b| iou(&b, &expected));
        ensure(score == 1.0, || format!("{}: IoU {score}", p.qa.qa_id))?;

        // first word present, rest absent
        let words: Vec<&str> = p.qa.answer_value.split(' ').collect();
        let perturbed = format!("{} notonpage", words[0]);
        let m = locate(&perturbed, &doc.tokens);
        let first_box = doc.tokens[p.run[0]].bbox;
        ensure(m.mode == MatchMode::FirstWord && m.bbox == Some(first_box), || {
            format!("{}: {perturbed:?} gave {:?}", p.qa.qa_id, m.mode)
        })?;
        first_word += 1;

        // first word absent
        let absent = std::iter::once("notonpage").chain(words[1..].iter().copied()).collect::<Vec<_>>().join(" ");
        let m = locate(&absent, &doc.tokens);
        ensure(m.mode == MatchMode::None && m.bbox.is_none(), || {
            format!("{}: {absent:?} gave {:?}", p.qa.qa_id, m.mode)
        })?;
        none += 1;
    }
    Ok(format!("200/200 full with IoU 1.0; perturbed: {first_word} first_word, {none} none"))
}

fn parser_robustness() -> Outcome {
    let text = fs::read_to_string(common::repo_root().join("fixtures/noisy_outputs.jsonl")).map_err(|e| e.to_string())?;
    let raws: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["raw"].as_str().unwrap().to_string())
        .collect();
    ensure(raws.len() == 50, || format!("fixture has {} cases", raws.len()))?;
    let mut structured = 0;
    for (i, raw) in raws.iter().enumerate() {
        let p = catch_unwind(|| parse_prediction(raw)).map_err(|_| format!("case {i} panicked"))?;
        if p.status.is_structured() {
            structured += 1;
        }
    }
    ensure(structured >= 45, || format!("{structured}/50 clean or recovered"))?;
    Ok(format!("{structured}/50 clean or recovered, 50/50 total"))
}

fn load_run(dir: &Path) -> RunConfig {
    let mut cfg: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
    cfg.resolve_paths(dir);
    cfg
}

fn compare_dirs(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for n in names {
        let (x, y) = (fs::read(a.join(n)), fs::read(b.join(n)));
        ensure(matches!((&x, &y), (Ok(x), Ok(y)) if x == y), || {
            format!("{} differs from {}", a.join(n).display(), b.join(n).display())
        })?;
    }
    Ok(())
}

fn golden_replay() -> Outcome {
    let golden = common::golden_dir();
    let expected = golden.join("expected");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = ["artifacts.jsonl", "report.csv", "report.json", "report.md"];
    let mut rows = Vec::new();
    for attempt in 0..2 {
        rows.clear();
        for (loc, name) in [
            (Localizer::ModelBox, "model_box"),
            (Localizer::Docexplainer, "docexplainer"),
            (Localizer::OcrBaseline, "ocr_baseline"),
        ] {
            let mut cfg = load_run(&golden);
            cfg.localizer = loc;
            let out = run_eval(&cfg).map_err(|e| format!("{name}: {e}"))?;
            let dir = tmp.path().join(format!("{attempt}/{name}"));
            write_run(&dir, &out).map_err(|e| e.to_string())?;
            compare_dirs(&dir, &expected.join(name), &files)?;
            rows.push(out.row);
        }
        if attempt == 1 {
            compare_dirs(&tmp.path().join("0/ocr_baseline"), &tmp.path().join("1/ocr_baseline"), &files)?;
        }
    }
    for (name, fmt) in [
        ("report.csv", ReportFormat::Csv),
        ("report.json", ReportFormat::Json),
        ("report.md", ReportFormat::Markdown),
    ] {
        let want = fs::read_to_string(expected.join(name)).map_err(|e| e.to_string())?;
        ensure(render_report(&rows, fmt) == want, || format!("combined {name} differs"))?;
    }
    let (model, ocr) = (rows[0].mean_iou, rows[2].mean_iou);
    ensure(ocr > model, || format!("ocr_baseline MeanIoU {ocr:.3} does not exceed model_box {model:.3}"))?;
    Ok(format!(
        "3 localizers x 2 runs byte-identical to golden; MeanIoU ocr_baseline {ocr:.3} > model_box {model:.3}"
    ))
}

fn train_determinism() -> Outcome {
    let records = affine_records(48, 12, 12, 0.02, 8);
    let cfg = TrainConfig {
        latent: 32,
        hidden: 32,
        learning_rate: 1e-3,
        batch_size: 16,
        epochs: 15,
        seed: 21,
        ..TrainConfig::default()
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut digests = Vec::new();
    for i in 0..2 {
        let out = train(&records, &records[..8], &cfg).map_err(|e| e.to_string())?;
        let path = tmp.path().join(format!("run{i}.dxv"));
        write_checkpoint(&path, &out.checkpoint).map_err(|e| e.to_string())?;
        digests.push(sha256_hex(&fs::read(&path).map_err(|e| e.to_string())?));
    }
    ensure(digests[0] == digests[1], || format!("digests differ: {} vs {}", digests[0], digests[1]))?;
    Ok(format!("sha256 {}...", &digests[0][..16]))
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("metric oracle equivalence", Duration::from_secs(10), metric_oracle),
        ("IoU property suite", Duration::from_secs(5), iou_properties),
        ("coordinate round-trip", Duration::from_secs(60), coordinate_round_trip),
        ("gradient check", Duration::from_secs(60), gradient_check),
        ("overfit", Duration::from_secs(60), overfit),
        ("OCR-locator exactness", Duration::from_secs(5), ocr_exactness),
        ("parser robustness", Duration::from_secs(60), parser_robustness),
        ("golden replay run", Duration::from_secs(10), golden_replay),
        ("train determinism", Duration::from_secs(60), train_determinism),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = result.and_then(|detail| {
            if took > limit {
                Err(format!("took {took:.2?}, limit {limit:?}"))
            } else {
                Ok(detail)
            }
        });
        match result {
            Ok(detail) => println!("PASS  {name:<28} {took:>9.2?}  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<28} {took:>9.2?}  {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
