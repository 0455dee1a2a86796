use std::fs;
use std::path::Path;
use std::sync::Arc;

use realism::pipeline::{load_manifest, run_eval, EvalOptions};
use realism::plan::{plan_attribute_eval, plan_relation_eval};
use realism::schema::{load_query, load_schema};
use realism::scoring::{read_scorecards, write_scorecards, ScoreCard, Task};
use realism::style::StyleTable;
use realism::vqa::{prompt_hash, AnswerCache, FixtureBackend, ImageRef, VqaGateway};

const PARTS: [&str; 4] = ["tail", "wing", "eye", "beak"];

fn visible(i: usize, j: usize) -> bool {
    !(i + j).is_multiple_of(3)
}

fn matches(i: usize, j: usize) -> bool {
    (i * j).is_multiple_of(2)
}

fn exists(i: usize) -> bool {
    !i.is_multiple_of(7)
}

/// S_att for image `i` counted straight from the answer rules.
fn expected_s_att(i: usize) -> f64 {
    if !exists(i) {
        return 0.0;
    }
    let c = (0..4).filter(|&j| visible(i, j)).count();
    let r = (0..4).filter(|&j| visible(i, j) && matches(i, j)).count();
    if c == 0 {
        0.0
    } else {
        r as f64 / c as f64
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "Yes."
    } else {
        "No, it is not."
    }
}

/// Writes schemas, images, manifest and fixture answers for `n` images.
fn world(dir: &Path, n: usize) {
    let schemas = dir.join("schemas");
    fs::create_dir_all(&schemas).unwrap();
    fs::create_dir_all(dir.join("images")).unwrap();
    let mut doc = String::from("class_id: bird\nclass_name: Northern Cardinal\ncategory: animal\n");
    for p in PARTS {
        doc.push_str(&format!("part: {p} | desc: bright red\n"));
    }
    fs::write(schemas.join("bird.schema"), doc).unwrap();
    fs::write(
        schemas.join("park.query"),
        "entities: dog, frisbee\ntriplet: 0 | catching | 1\n",
    )
    .unwrap();

    let schema = load_schema(&schemas, "bird").unwrap();
    let plan = plan_attribute_eval(&schema);
    let rel = plan_relation_eval(&load_query(&schemas, "park").unwrap());
    let mut manifest = String::new();
    let mut entries = Vec::new();
    for i in 0..n {
        let bytes = format!("synthetic image {i}").into_bytes();
        fs::write(dir.join(format!("images/{i}.png")), &bytes).unwrap();
        manifest.push_str(&format!("img{i:02}\timages/{i}.png\tbird\tmodel-{}\n", i % 2));
        let image = ImageRef::of_bytes(&bytes).to_string();
        for q in plan.questions() {
            let raw = match q.id.split('/').collect::<Vec<_>>()[..] {
                [_, "existence"] => yes_no(exists(i)),
                [_, "visibility", j] => yes_no(visible(i, j.parse().unwrap())),
                [_, "match", j] => {
                    let j: usize = j.parse().unwrap();
                    if i == 5 && j == 2 {
                        "I cannot tell."
                    } else {
                        yes_no(matches(i, j))
                    }
                }
                _ => unreachable!(),
            };
            entries.push((image.clone(), prompt_hash(&q.prompt), raw.to_string()));
        }
        for q in rel.questions() {
            // the frisbee is missing from odd images
            let raw = yes_no(!(q.prompt.contains("frisbee") && q.prompt.starts_with("Can you see a") && i % 2 == 1));
            entries.push((image.clone(), prompt_hash(&q.prompt), raw.to_string()));
        }
    }
    manifest.push_str("ghost\timages/missing.png\tbird\tmodel-0\n");
    fs::write(dir.join("manifest.tsv"), manifest).unwrap();
    fs::write(dir.join("answers.tsv"), FixtureBackend::from_entries("x", entries).to_text()).unwrap();
}

fn gateway(dir: &Path, cache: Option<&Path>) -> VqaGateway {
    let backend = FixtureBackend::load(&dir.join("answers.tsv")).unwrap();
    let gw = VqaGateway::new(Arc::new(backend));
    match cache {
        Some(p) => gw.with_cache(Arc::new(AnswerCache::open(p).unwrap())),
        None => gw,
    }
}

fn opts(task: Task, workers: usize) -> EvalOptions {
    EvalOptions {
        task,
        parallelism: 4,
        workers,
    }
}

fn csv(cards: &[ScoreCard]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_scorecards(&mut buf, cards).unwrap();
    buf
}

#[test]
fn attribute_scores_follow_answer_rules() {
    let dir = tempfile::tempdir().unwrap();
    world(dir.path(), 14);
    let entries = load_manifest(&dir.path().join("manifest.tsv")).unwrap();
    let report = run_eval(&entries, &dir.path().join("schemas"), &gateway(dir.path(), None), None, &opts(Task::Attribute, 1));

    assert_eq!(report.results.len(), 15);
    for (i, r) in report.results[..14].iter().enumerate() {
        assert!(!r.failed, "img{i} failed: {:?}", r.card.flags);
        let want = if i == 5 {
            // the unparseable match answer counts as no
            let c = (0..4).filter(|&j| visible(5, j)).count();
            let r = (0..4).filter(|&j| j != 2 && visible(5, j) && matches(5, j)).count();
            r as f64 / c as f64
        } else {
            expected_s_att(i)
        };
        assert_eq!(r.card.s_att, Some(want), "img{i}");
    }
    // existence = no: one question asked, score zero
    let t0 = report.results[0].transcript.as_ref().unwrap();
    assert_eq!(t0.entries.len(), 1);
    assert_eq!(report.results[0].card.s_att, Some(0.0));
    assert_eq!(report.results[0].card.confidence, Some(0));
    // unparseable answer flagged on the card
    assert!(report.results[5].card.flags.iter().any(|f| f == "unparseable:bird/match/2"));
    // missing file isolated
    let ghost = &report.results[14];
    assert!(ghost.failed);
    assert!(ghost.card.flags[0].starts_with("error:image:"));
    assert_eq!(report.failures(), 1);
    assert!(report.exceeds(0.05));
    assert!(!report.exceeds(0.1));
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    world(dir.path(), 20);
    let entries = load_manifest(&dir.path().join("manifest.tsv")).unwrap();
    let schemas = dir.path().join("schemas");
    let one = run_eval(&entries, &schemas, &gateway(dir.path(), None), None, &opts(Task::Attribute, 1));
    let many = run_eval(&entries, &schemas, &gateway(dir.path(), None), None, &opts(Task::Attribute, 6));
    assert_eq!(csv(&one.cards()), csv(&many.cards()));
    let back = read_scorecards(&csv(&one.cards())[..]).unwrap();
    assert_eq!(back.len(), 21);
}

#[test]
fn cached_rerun_makes_no_backend_calls() {
    let dir = tempfile::tempdir().unwrap();
    world(dir.path(), 10);
    let entries = load_manifest(&dir.path().join("manifest.tsv")).unwrap();
    let schemas = dir.path().join("schemas");
    let cache = dir.path().join("cache.jsonl");
    let gw1 = gateway(dir.path(), Some(&cache));
    let first = run_eval(&entries, &schemas, &gw1, None, &opts(Task::Attribute, 3));
    assert!(gw1.backend_calls() > 0);
    let gw2 = gateway(dir.path(), Some(&cache));
    let second = run_eval(&entries, &schemas, &gw2, None, &opts(Task::Attribute, 1));
    assert_eq!(gw2.backend_calls(), 0);
    assert_eq!(csv(&first.cards()), csv(&second.cards()));
}

#[test]
fn relation_scores_and_entity_gate() {
    let dir = tempfile::tempdir().unwrap();
    world(dir.path(), 4);
    let text = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    fs::write(dir.path().join("rel.tsv"), text.replace("\tbird\t", "\tpark\t")).unwrap();
    let entries = load_manifest(&dir.path().join("rel.tsv")).unwrap();
    let report = run_eval(&entries, &dir.path().join("schemas"), &gateway(dir.path(), None), None, &opts(Task::Relation, 2));
    for (i, r) in report.results[..4].iter().enumerate() {
        // 2 entities and 1 triplet: all yes gives 2*2 + 1 = 5 of 2N+T = 5
        let want = if i % 2 == 1 { (0, 0.0) } else { (5, 1.0) };
        assert_eq!((r.card.s_rel_raw, r.card.s_rel_norm), (Some(want.0), Some(want.1)), "img{i}");
    }
}

#[test]
fn style_and_unknown_targets() {
    let dir = tempfile::tempdir().unwrap();
    world(dir.path(), 3);
    let mut text = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    text.push_str("stray\timages/0.png\tplatypus\tmodel-0\n");
    fs::write(dir.path().join("m.tsv"), text).unwrap();
    let entries = load_manifest(&dir.path().join("m.tsv")).unwrap();
    let style = StyleTable::parse("image_ref,p_photo\nimg00,0.5\nimg01,0.25\n".as_bytes()).unwrap();
    let report = run_eval(
        &entries,
        &dir.path().join("schemas"),
        &gateway(dir.path(), None),
        Some(&style),
        &opts(Task::Attribute, 1),
    );
    let c1 = &report.results[1].card;
    assert_eq!(c1.combined, Some(expected_s_att(1) * 0.25));
    // no style row: scored, flagged, not combined
    let c2 = &report.results[2].card;
    assert!(c2.s_att.is_some() && c2.combined.is_none());
    assert!(c2.flags.iter().any(|f| f.starts_with("error:style:")));
    assert!(!report.results[2].failed);
    let stray = report.results.last().unwrap();
    assert!(stray.failed && stray.card.flags[0].starts_with("error:target:"));
}

#[test]
fn transcripts_serialize_in_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    world(dir.path(), 3);
    let entries = load_manifest(&dir.path().join("manifest.tsv")).unwrap();
    let report = run_eval(&entries, &dir.path().join("schemas"), &gateway(dir.path(), None), None, &opts(Task::Attribute, 2));
    let mut buf = Vec::new();
    report.write_transcripts(&mut buf).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1]["image_ref"], "img01");
    assert_eq!(lines[0]["transcript"]["entries"][0]["verdict"], "no");
}
