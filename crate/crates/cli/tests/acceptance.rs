//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails.
//!
//!     cargo test -p narrator-cli --test acceptance

mod common;

use std::collections::BTreeMap;
use std::panic;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use narrator_cli::{cmd_ingest, run_pairs, RunConfig};
use narrator_core::annotation::AnnotationStore;
use narrator_core::backend::MockTransport;
use narrator_core::imaging::{concat_side_by_side, decode_transport, Raster};
use narrator_core::metrics::{
    coverage, extract_nouns, pearson, singularize, GroupKey, LexiconTagger, MetricGroup,
    MetricReport, NounSource, Stopwords,
};
use narrator_core::prompting::{verify_template_checksums, PromptTemplate, TemplateId};
use narrator_core::report::{emit, results_table, GroupRatings, TableFormat};
use narrator_core::{Backend, BackendSpec, DatasetStore, GenerationRecord, ResponseCache, Strategy};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($arg)+));
        }
    };
}

fn main() {
    let criteria: &[Criterion] = &[
        ("coverage matches brute-force oracle", coverage_oracle),
        ("noun extraction: plural rule and idempotence", noun_extraction),
        ("pearson fixture and affine invariance", pearson_checks),
        ("prompt templates byte-match golden text", prompt_fidelity),
        ("strategy call and attachment matrix", strategy_matrix),
        ("concatenation pixel contract and PNG round-trip", concat_contract),
        ("end-to-end determinism through the binary", end_to_end_determinism),
        ("results table fixture rendering", table_fixture),
        ("annotation API: validation, last write, aggregates", annotation_api),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .map_or("panicked".into(), |m| format!("panicked: {m}")))
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS  {name} — {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} — {why} [{took:.2?}]");
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Coverage oracle

/// (surface form, lemma, is a noun). Independent of the tagger's lexicon.
const WORDS: &[(&str, &str, bool)] = &[
    ("house", "house", true),
    ("houses", "house", true),
    ("road", "road", true),
    ("roads", "road", true),
    ("tree", "tree", true),
    ("trees", "tree", true),
    ("building", "building", true),
    ("buildings", "building", true),
    ("villa", "villa", true),
    ("villas", "villa", true),
    ("street", "street", true),
    ("streets", "street", true),
    ("field", "field", true),
    ("fields", "field", true),
    ("pool", "pool", true),
    ("pools", "pool", true),
    ("garage", "garage", true),
    ("garages", "garage", true),
    ("lawn", "lawn", true),
    ("lawns", "lawn", true),
    ("bridge", "bridge", true),
    ("bridges", "bridge", true),
    ("river", "river", true),
    ("warehouse", "warehouse", true),
    ("warehouses", "warehouse", true),
    ("path", "path", true),
    ("paths", "path", true),
    ("playground", "playground", true),
    ("factory", "factory", true),
    ("factories", "factory", true),
    ("bush", "bush", true),
    ("bushes", "bush", true),
    ("grass", "grass", true),
    ("side", "side", true),
    ("sides", "side", true),
    ("change", "change", true),
    ("changes", "change", true),
    ("scene", "scene", true),
    ("area", "area", true),
    ("areas", "area", true),
    ("construction", "construction", true),
    ("the", "the", false),
    ("a", "a", false),
    ("of", "of", false),
    ("on", "on", false),
    ("in", "in", false),
    ("and", "and", false),
    ("are", "are", false),
    ("is", "is", false),
    ("built", "built", false),
    ("removed", "removed", false),
    ("appear", "appear", false),
    ("constructed", "constructed", false),
    ("demolished", "demolished", false),
    ("near", "near", false),
    ("beside", "beside", false),
    ("along", "along", false),
    ("both", "both", false),
    ("some", "some", false),
    ("several", "several", false),
    ("new", "new", false),
    ("large", "large", false),
    ("small", "small", false),
    ("green", "green", false),
    ("dense", "dense", false),
    ("replaced", "replaced", false),
];

const STOP_LEMMAS: &[&str] = &["change", "scene", "area"];

/// Nested-loop coverage over word indices into `WORDS`.
fn oracle_coverage(refs: &[Vec<usize>], expl: &[usize], stop: bool) -> (usize, usize) {
    let mut nouns: Vec<&str> = Vec::new();
    for r in refs {
        for &w in r {
            let (_, lemma, is_noun) = WORDS[w];
            if !is_noun || (stop && STOP_LEMMAS.contains(&lemma)) {
                continue;
            }
            let mut seen = false;
            for n in &nouns {
                if *n == lemma {
                    seen = true;
                }
            }
            if !seen {
                nouns.push(lemma);
            }
        }
    }
    let mut covered = 0;
    for n in &nouns {
        for &w in expl {
            if WORDS[w].1 == *n {
                covered += 1;
                break;
            }
        }
    }
    (covered, nouns.len())
}

fn render(words: &[usize], rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    for (i, &w) in words.iter().enumerate() {
        if i > 0 {
            out.push_str([" ", ", ", " - ", " (", "; "][rng.gen_range(0..5)]);
        }
        let s = WORDS[w].0;
        match rng.gen_range(0..4) {
            0 => out.push_str(&s.to_uppercase()),
            1 => {
                let mut c = s.chars();
                let first = c.next().unwrap().to_uppercase().to_string();
                out.push_str(&(first + c.as_str()));
            }
            _ => out.push_str(s),
        }
    }
    out.push('.');
    out
}

fn coverage_oracle() -> Outcome {
    let start = Instant::now();
    let tagger = LexiconTagger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    let all: Vec<usize> = (0..WORDS.len()).collect();
    let function_only: Vec<usize> = all.iter().copied().filter(|&w| !WORDS[w].2).collect();
    let mut degenerate = 0;
    for case in 0..200 {
        let size = rng.gen_range(5..=50);
        let vocab: Vec<usize> = if case % 20 == 19 {
            function_only.clone()
        } else {
            all.choose_multiple(&mut rng, size).copied().collect()
        };
        let pick = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> {
            (0..n).map(|_| *vocab.choose(rng).unwrap()).collect()
        };
        let n_refs = rng.gen_range(1..=5);
        let refs: Vec<Vec<usize>> = (0..n_refs)
            .map(|_| {
                let len = rng.gen_range(3..=10);
                pick(&mut rng, len)
            })
            .collect();
        let expl_len = rng.gen_range(0..=20);
        let expl = pick(&mut rng, expl_len);
        ensure!(vocab.len() <= 50, "case {case}: vocabulary of {}", vocab.len());
        let stop = case % 2 == 1;

        let ref_texts: Vec<String> = refs.iter().map(|r| render(r, &mut rng)).collect();
        let expl_text = render(&expl, &mut rng);
        let stopwords = if stop { Stopwords::default_list() } else { Stopwords::none() };
        let got = coverage("p", &expl_text, &ref_texts, &tagger, &stopwords)
            .map_err(|e| format!("case {case}: {e}"))?;
        let (covered, total) = oracle_coverage(&refs, &expl, stop);
        let percent = if total == 0 { 0.0 } else { 100.0 * covered as f64 / total as f64 };
        ensure!(
            got.covered == covered && got.total == total && got.percent == percent
                && got.degenerate == (total == 0),
            "case {case}: got {}/{} ({}%), oracle {covered}/{total} ({percent}%)\n refs {ref_texts:?}\n expl {expl_text:?}",
            got.covered,
            got.total,
            got.percent
        );
        degenerate += usize::from(total == 0);
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(5), "took {took:.2?}, limit 5s");
    Ok(format!("200 cases exact, {degenerate} degenerate"))
}

// ---------------------------------------------------------------------------
// Noun extraction

fn noun_extraction() -> Outcome {
    let golden = [
        ("houses", "house"),
        ("branches", "branch"),
        ("bushes", "bush"),
        ("boxes", "box"),
        ("factories", "factory"),
        ("villas", "villa"),
        ("grass", "grass"),
        ("men", "man"),
        ("women", "woman"),
        ("children", "child"),
        ("leaves", "leaf"),
        ("buses", "bus"),
        ("species", "species"),
    ];
    for (w, want) in golden {
        let got = singularize(w);
        ensure!(got == want, "{w} -> {got}, want {want}");
    }
    let tagger = LexiconTagger::new();
    let none = Stopwords::none();
    let fig = extract_nouns(
        "Five villas are built on both sides of the road.",
        &tagger,
        &none,
        NounSource::References,
    );
    let fig: Vec<&str> = fig.nouns.iter().map(String::as_str).collect();
    ensure!(fig == ["road", "side", "villa"], "figure caption nouns {fig:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100 {
        let sentence = if i % 4 == 0 {
            common::REFERENCES[i / 4 % common::REFERENCES.len()].to_string()
        } else {
            let len = rng.gen_range(4..=14);
            let words: Vec<usize> = (0..len).map(|_| rng.gen_range(0..WORDS.len())).collect();
            render(&words, &mut rng)
        };
        let once = extract_nouns(&sentence, &tagger, &none, NounSource::Explanation);
        let again = extract_nouns(&sentence, &tagger, &none, NounSource::Explanation);
        ensure!(once == again, "non-deterministic on {sentence:?}");
        let joined: Vec<&str> = once.nouns.iter().map(String::as_str).collect();
        let twice = extract_nouns(&joined.join(" "), &tagger, &none, NounSource::Explanation);
        ensure!(twice.nouns == once.nouns, "not idempotent on {sentence:?}: {:?} vs {:?}", once.nouns, twice.nouns);
    }
    Ok(format!("{} golden plurals, 100 sentences idempotent", golden.len()))
}

// ---------------------------------------------------------------------------
// Pearson

fn pearson_checks() -> Outcome {
    let r: f64 = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).map_err(|e| e.to_string())?;
    ensure!((r - 0.6).abs() <= 1e-12, "fixture gave {r}");
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = rng.gen_range(3..=50);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let scale = |rng: &mut ChaCha8Rng| {
            let m: f64 = rng.gen_range(0.1..10.0);
            if rng.gen_bool(0.5) { m } else { -m }
        };
        let (a, c) = (scale(&mut rng), scale(&mut rng));
        let (b, d): (f64, f64) = (rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3));
        let base = pearson(&xs, &ys).map_err(|e| format!("case {case}: {e}"))?;
        let tx: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let ty: Vec<f64> = ys.iter().map(|y| c * y + d).collect();
        let moved = pearson(&tx, &ty).map_err(|e| format!("case {case}: {e}"))?;
        let want = (a * c).signum() * base;
        let err = (moved - want).abs();
        worst = worst.max(err);
        ensure!(err <= 1e-9, "case {case}: {moved} vs {want}");
    }
    Ok(format!("fixture 0.6, worst affine error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Prompt fidelity

const GOLDEN_AAO: &str = "This image is a concatenation of two satellite images placed side by side.\n\
- Both images show the same area.\n\
- The left image shows the area before the change over time, while the right image shows it after.\n\
Please describe where and what kind of changes in a clause, don't use bullet-points.";

const GOLDEN_CAPTION: &str = "Please provide a detailed description of the image.\n\
The description should includes the following spatial concepts\n\
- Places: toponyms, geographic and geopolitical regions, locations.\n\
- Spatial Entities: entities participating in spatial relations.\n\
- Paths: routes, lines, turns, arcs.\n\
- Topological relations: in, connected, disconnected.\n\
- Orientational relations: North, left, down, behind.\n\
- Object properties: intrinsic orientation, dimensionality.\n\
- Frames of reference: absolute, intrinsic, relative.\n\
- Motion: tracking objects through space over time.";

const GOLDEN_COMPOSE: &str = "description of the area before the change: <DESCRIPTION_BEFORE>\n\
description of the area after the change: <DESCRIPTION_AFTER>\n\
Please describe where and what kind of changes occurred in the area, in a clause.";

fn prompt_fidelity() -> Outcome {
    let assets = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets/templates");
    let expected = [
        (TemplateId::AaoMain, GOLDEN_AAO),
        (TemplateId::SbsCaption, GOLDEN_CAPTION),
        (TemplateId::HybCaption, GOLDEN_CAPTION),
        (TemplateId::SbsCompose, GOLDEN_COMPOSE),
        (TemplateId::HybCompose, GOLDEN_COMPOSE),
    ];
    for (id, golden) in expected {
        let t = PromptTemplate::get(id);
        ensure!(t.text == golden, "{id:?} differs from golden text");
        let on_disk = std::fs::read(assets.join(id.asset_file())).map_err(|e| e.to_string())?;
        ensure!(on_disk == golden.as_bytes(), "{} differs from golden text", id.asset_file());
    }
    ensure!(
        GOLDEN_AAO.starts_with("This image is a concatenation of two satellite images placed side by side."),
        "AAO opening"
    );
    ensure!(
        GOLDEN_CAPTION.starts_with("Please provide a detailed description of the image."),
        "caption opening"
    );
    verify_template_checksums().map_err(|bad| format!("checksum drift: {bad:?}"))?;
    Ok("5 templates byte-equal, checksum manifest verified".into())
}

// ---------------------------------------------------------------------------
// Strategy matrix

fn ingest(dir: &Path, n: usize) -> Result<DatasetStore, String> {
    let (manifest, images) = common::corpus(dir, n);
    cmd_ingest(&manifest, &images, &dir.join("store"), false).map_err(|e| e.to_string())?;
    DatasetStore::open(&dir.join("store")).map_err(|e| e.to_string())
}

fn attachment_dims(req: &narrator_core::ChatRequest) -> Vec<(u32, u32)> {
    req.messages
        .iter()
        .flat_map(|m| &m.attachments)
        .map(|a| {
            let r = decode_transport(&a.0).expect("attachment decodes");
            (r.width(), r.height())
        })
        .collect()
}

fn strategy_matrix() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = ingest(dir.path(), 10)?;
    let (single, concat) = ((8, 6), (16, 6));
    let mut summary = Vec::new();
    for (strategy, want_calls) in [
        (Strategy::AllAtOnce, 10),
        (Strategy::StepByStep, 30),
        (Strategy::Hybrid, 30),
    ] {
        let mut cfg = RunConfig::parse(&common::mock_config(
            &dir.path().join("store"),
            &dir.path().join("cache"),
            &dir.path().join("out.jsonl"),
            strategy.slug(),
            10,
        ))
        .map_err(|e| e.to_string())?;
        cfg.strategy = strategy;
        let cap = Arc::new(MockTransport::new());
        let comp = Arc::new(MockTransport::new());
        let captioner = Backend::new(BackendSpec::mock("cap", true), cap.clone());
        let composer = Backend::new(
            BackendSpec::mock("comp", strategy != Strategy::StepByStep),
            comp.clone(),
        );
        let cache = ResponseCache::open(dir.path().join(format!("cache-{}", strategy.slug())))
            .map_err(|e| e.to_string())?;

        let cold = run_pairs(&cfg, &store, &captioner, &composer, &cache).map_err(|e| e.to_string())?;
        ensure!(cold.failures == 0 && cold.lines.len() == 10, "{strategy:?}: {} failures", cold.failures);
        let cold_calls = cap.calls() + comp.calls();
        ensure!(cold_calls == want_calls, "{strategy:?}: {cold_calls} cold calls, want {want_calls}");
        let warm = run_pairs(&cfg, &store, &captioner, &composer, &cache).map_err(|e| e.to_string())?;
        let warm_calls = cap.calls() + comp.calls() - cold_calls;
        ensure!(warm_calls == 0, "{strategy:?}: {warm_calls} warm calls");
        ensure!(
            warm.to_jsonl().lines().count() == 10,
            "{strategy:?}: warm run lost records"
        );

        for req in cap.requests() {
            let dims = attachment_dims(&req);
            ensure!(dims == [single], "{strategy:?} caption stage attachments {dims:?}");
        }
        let compose_want: Vec<(u32, u32)> = match strategy {
            Strategy::AllAtOnce | Strategy::Hybrid => vec![concat],
            Strategy::StepByStep => vec![],
        };
        for req in comp.requests() {
            let dims = attachment_dims(&req);
            ensure!(dims == compose_want, "{strategy:?} compose attachments {dims:?}");
        }
        ensure!(
            strategy.uses_captioner() || cap.calls() == 0,
            "All-at-Once called the captioner"
        );
        summary.push(format!("{}={cold_calls}/0", strategy.slug()));
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:.2?}, limit 10s");
    Ok(format!("cold/warm calls {}", summary.join(" ")))
}

// ---------------------------------------------------------------------------
// Concatenation

fn random_raster(rng: &mut ChaCha8Rng) -> Raster {
    let (w, h) = (rng.gen_range(1..=20), rng.gen_range(1..=20));
    let px: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
    Raster::new(w, h, px).unwrap()
}

fn concat_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let (a, b) = (random_raster(&mut rng), random_raster(&mut rng));
        let fill: [u8; 3] = rng.gen();
        let c = concat_side_by_side(&a, &b, fill);
        ensure!(
            (c.width(), c.height()) == (a.width() + b.width(), a.height().max(b.height())),
            "case {case}: size {}x{}",
            c.width(),
            c.height()
        );
        for y in 0..c.height() {
            for x in 0..c.width() {
                let want = if x < a.width() {
                    if y < a.height() { a.pixel(x, y) } else { fill }
                } else if y < b.height() {
                    b.pixel(x - a.width(), y)
                } else {
                    fill
                };
                ensure!(c.pixel(x, y) == want, "case {case}: pixel ({x},{y})");
            }
        }
        for r in [&a, &b, &c] {
            let back = Raster::decode(&r.to_png().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            ensure!(back == *r, "case {case}: PNG round-trip changed pixels");
        }
    }
    Ok("100 random pairs".into())
}

// ---------------------------------------------------------------------------
// End-to-end determinism

fn narrator(args: &[&std::ffi::OsStr]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_narrator"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "narrator {:?} exited {:?}: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

/// ingest → run → score → report in a fresh directory; returns the outputs
/// with record timestamps removed.
fn pipeline(root: &Path) -> Result<BTreeMap<&'static str, String>, String> {
    let (manifest, images) = common::corpus(root, 12);
    let p = |name: &str| root.join(name);
    let config = p("run.toml");
    std::fs::write(
        &config,
        common::mock_config(&p("store"), &p("cache"), &p("run.jsonl"), "step-by-step", 8),
    )
    .map_err(|e| e.to_string())?;
    let os = |s: &'static str| std::ffi::OsStr::new(s);
    narrator(&[os("ingest"), os("--manifest"), manifest.as_os_str(), os("--images"), images.as_os_str(), os("--store"), p("store").as_os_str()])?;
    narrator(&[os("run"), os("--config"), config.as_os_str()])?;
    narrator(&[os("score"), os("--config"), config.as_os_str(), os("--out"), p("coverage.csv").as_os_str(), os("--report"), p("metrics.json").as_os_str()])?;
    narrator(&[os("report"), os("--metrics"), p("metrics.json").as_os_str(), os("--format"), os("csv"), os("--out"), p("table.csv").as_os_str()])?;

    let read = |name: &str| std::fs::read_to_string(p(name)).map_err(|e| format!("{name}: {e}"));
    let mut jsonl = String::new();
    for line in read("run.jsonl")?.lines() {
        let mut v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        v.as_object_mut().map(|o| o.remove("created_at"));
        jsonl.push_str(&v.to_string());
        jsonl.push('\n');
    }
    Ok(BTreeMap::from([
        ("run.jsonl", jsonl),
        ("coverage.csv", read("coverage.csv")?),
        ("metrics.json", read("metrics.json")?),
        ("table.csv", read("table.csv")?),
    ]))
}

fn end_to_end_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    for (name, text) in &first {
        ensure!(!text.is_empty(), "{name} is empty");
        ensure!(second[name] == *text, "{name} differs between runs");
    }
    let records = first["run.jsonl"].lines().count();
    ensure!(records == 8, "{records} records, want 8");
    Ok(format!("{} outputs byte-identical, {records} records", first.len()))
}

// ---------------------------------------------------------------------------
// Table fixture

fn table_fixture() -> Outcome {
    let llava = "LLaVA-1.5";
    let chain = |a: &str, b: &str| format!("{a} → {b}");
    let fixture: Vec<(Strategy, String, f64, f64, f64, f64)> = vec![
        (Strategy::AllAtOnce, llava.into(), 22.53, 2.82, 2.34, 53.52),
        (Strategy::StepByStep, chain(llava, llava), 25.66, 3.12, 2.62, 54.13),
        (Strategy::Hybrid, chain(llava, llava), 28.13, 2.85, 3.09, 75.48),
        (Strategy::AllAtOnce, "GPT-4V".into(), 16.95, 3.56, 3.24, 62.78),
        (Strategy::StepByStep, chain(llava, "GPT-3.5-turbo"), 22.22, 3.01, 1.58, 58.46),
        (Strategy::StepByStep, chain(llava, "GPT-4-turbo"), 25.84, 2.92, 1.63, 130.46),
        (Strategy::Hybrid, chain("GPT-4V", "GPT-4V"), 10.13, 3.37, 2.18, 39.53),
    ];
    let mut groups = Vec::new();
    let mut ratings = BTreeMap::new();
    for (strategy, model_chain, cov, t, i, words) in &fixture {
        let key = GroupKey { strategy: *strategy, model_chain: model_chain.clone() };
        groups.push(MetricGroup {
            key: key.clone(),
            n_items: 100,
            mean_coverage: *cov,
            mean_word_count: *words,
        });
        ratings.insert(key, GroupRatings { truthfulness: *t, informativeness: *i });
    }
    let report = MetricReport { groups, items: Vec::new() };
    let rows = results_table(&report, Some(&ratings)).map_err(|e| e.to_string())?;
    ensure!(rows.len() == 7, "{} rows", rows.len());
    let plain = emit(&rows, TableFormat::Plain);
    let csv = emit(&rows, TableFormat::Csv);

    let expected = [
        ("All-at-Once", llava.to_string(), ["22.53", "2.82", "2.34", "53.52"]),
        ("Step-by-Step", chain(llava, llava), ["25.66", "3.12", "2.62", "54.13"]),
        ("Hybrid", chain(llava, llava), ["28.13", "2.85", "3.09", "75.48"]),
    ];
    for (label, model, cells) in &expected {
        let plain_row = plain
            .lines()
            .map(|l| l.split('|').map(str::trim).collect::<Vec<_>>())
            .find(|c| c.len() == 6 && c[0] == *label && c[1] == model)
            .ok_or_else(|| format!("no plain row for {label} / {model}"))?;
        ensure!(plain_row[2..] == cells[..], "plain row {plain_row:?}");
        let csv_line = format!("{label},{model},{}", cells.join(","));
        ensure!(csv.lines().any(|l| l == csv_line), "CSV lacks {csv_line:?}");
    }
    Ok("LLaVA rows 22.53/2.82/2.34/53.52, 25.66/3.12/2.62/54.13, 28.13/2.85/3.09/75.48".into())
}

// ---------------------------------------------------------------------------
// Annotation API

fn generation(pair_id: &str) -> GenerationRecord {
    serde_json::from_value(json!({
        "pair_id": pair_id,
        "strategy": "hybrid",
        "captioner_backend": "cap",
        "composer_backend": "comp",
        "caption_before": "a field",
        "caption_after": "houses on a field",
        "explanation": "houses were built on the field",
        "stage_digests": [],
        "created_at": "2024-01-01T00:00:00Z",
        "word_count": 6
    }))
    .expect("record fixture")
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

/// (truthfulness, informativeness) that annotator `a` (0 or 1) gives item `k`.
fn scripted(a: usize, k: usize) -> (i64, i64) {
    if a == 0 {
        ((k % 5 + 1) as i64, ((k * 2) % 5 + 1) as i64)
    } else {
        (((k + 2) % 5 + 1) as i64, ((k * 3 + 1) % 5 + 1) as i64)
    }
}

fn annotation_api() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Arc::new(AnnotationStore::open(dir.path()).map_err(|e| e.to_string())?);
    let records: Vec<_> = (0..10).map(|k| generation(&format!("pair_{k:03}"))).collect();
    store.enqueue_run("acc", &records).map_err(|e| e.to_string())?;
    let app = narrator_server::router(narrator_server::AppState { annotations: store, dataset: None });
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;

    rt.block_on(async move {
        let post = |item: &str, who: &str, t: Value, i: Value| {
            json!({"item_id": item, "annotator_id": who, "truthfulness": t, "informativeness": i})
        };
        for (t, i) in [(json!(0), json!(3)), (json!(6), json!(3)), (json!(3), json!(9)), (json!(3.5), json!(2))] {
            let (s, _) = call(&app, "POST", "/runs/acc/ratings", Some(post("acc:pair_000", "ann-0", t.clone(), i.clone()))).await;
            ensure!(s == StatusCode::UNPROCESSABLE_ENTITY, "({t}, {i}) gave {s}");
        }
        let (_, stored) = call(&app, "GET", "/runs/acc/ratings", None).await;
        ensure!(stored.as_array().is_some_and(|a| a.is_empty()), "rejected ratings were stored");

        // Annotator 0 first rates everything 1/1, then corrects every item.
        for k in 0..10 {
            let item = format!("acc:pair_{k:03}");
            let (s, _) = call(&app, "POST", "/runs/acc/ratings", Some(post(&item, "ann-0", json!(1), json!(1)))).await;
            ensure!(s == StatusCode::OK, "first pass {item}: {s}");
        }
        for k in 0..10 {
            let (t, i) = scripted(0, k);
            let item = format!("acc:pair_{k:03}");
            let (s, _) = call(&app, "POST", "/runs/acc/ratings", Some(post(&item, "ann-0", json!(t), json!(i)))).await;
            ensure!(s == StatusCode::OK, "resubmission {item}: {s}");
        }
        // Annotator 1 walks the queue the way the console does.
        let mut seen = 0;
        loop {
            let (s, next) = call(&app, "GET", "/runs/acc/next?annotator=ann-1", None).await;
            if s == StatusCode::NO_CONTENT {
                break;
            }
            ensure!(s == StatusCode::OK, "next gave {s}");
            ensure!(next["progress"]["done"] == seen && next["progress"]["total"] == 10, "progress {}", next["progress"]);
            let item = next["item_id"].as_str().unwrap_or_default().to_string();
            let k: usize = item.trim_start_matches("acc:pair_").parse().map_err(|_| format!("item {item}"))?;
            let (t, i) = scripted(1, k);
            let (s, _) = call(&app, "POST", "/runs/acc/ratings", Some(post(&item, "ann-1", json!(t), json!(i)))).await;
            ensure!(s == StatusCode::OK, "ann-1 {item}: {s}");
            seen += 1;
        }
        ensure!(seen == 10, "annotator 1 saw {seen} items");

        let (_, stored) = call(&app, "GET", "/runs/acc/ratings", None).await;
        let stored = stored.as_array().cloned().unwrap_or_default();
        ensure!(stored.len() == 20, "{} resolved ratings, want 20", stored.len());
        for r in &stored {
            let who = if r["annotator_id"] == "ann-0" { 0 } else { 1 };
            let k: usize = r["item_id"].as_str().unwrap()[9..].parse().unwrap();
            let (t, i) = scripted(who, k);
            ensure!(r["truthfulness"] == t && r["informativeness"] == i, "stale rating {r}");
        }

        let (s, agg) = call(&app, "GET", "/runs/acc/aggregate", None).await;
        ensure!(s == StatusCode::OK, "aggregate gave {s}");
        let mut item_t = Vec::new();
        let mut item_i = Vec::new();
        for k in 0..10 {
            let ((t0, i0), (t1, i1)) = (scripted(0, k), scripted(1, k));
            item_t.push((t0 + t1) as f64 / 2.0);
            item_i.push((i0 + i1) as f64 / 2.0);
            let row = &agg["items"][k];
            ensure!(
                row["mean_truthfulness"] == item_t[k] && row["mean_informativeness"] == item_i[k],
                "item {k}: {row}"
            );
        }
        let mean_t = item_t.iter().sum::<f64>() / 10.0;
        let mean_i = item_i.iter().sum::<f64>() / 10.0;
        ensure!(agg["mean_truthfulness"] == mean_t, "run T {} vs {mean_t}", agg["mean_truthfulness"]);
        ensure!(agg["mean_informativeness"] == mean_i, "run I {} vs {mean_i}", agg["mean_informativeness"]);
        let r = pearson(&item_t, &item_i).map_err(|e| e.to_string())?;
        ensure!(agg["pearson"].as_f64() == Some(r), "pearson {} vs {r}", agg["pearson"]);
        Ok(format!("T {mean_t}, I {mean_i}, r {r:.4}; 422 on 4 bad inputs"))
    })
}
