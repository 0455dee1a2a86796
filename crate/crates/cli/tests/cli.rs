mod common;

use std::fs;

use common::{run, stderr, world};
use realism::scoring::read_scorecards;

fn cards(path: &std::path::Path) -> Vec<realism::scoring::ScoreCard> {
    read_scorecards(fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn three_image_eval_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 3, 1);
    let cfg = w.config();
    let cfg = cfg.to_str().unwrap();
    let a = run(&w.dir, &["--config", cfg, "eval", "--task", "attributes", "--out", "a.csv"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run(&w.dir, &["--config", cfg, "eval", "--task", "attributes", "--workers", "1", "--out", "b.csv"]);
    assert!(b.status.success());
    let (x, y) = (fs::read(w.dir.join("a.csv")).unwrap(), fs::read(w.dir.join("b.csv")).unwrap());
    assert_eq!(x, y);
    let c = cards(&w.dir.join("a.csv"));
    assert_eq!(c.len(), 3);
    assert!(c.iter().all(|c| c.s_att.is_some() && c.s_sty.is_some()));
}

#[test]
fn existence_no_stops_after_one_question() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 30, 5);
    let cfg = w.config();
    let o = run(
        &w.dir,
        &["--config", cfg.to_str().unwrap(), "eval", "--task", "attributes", "--out", "s.csv", "--transcripts", "t.jsonl"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let scored = cards(&w.dir.join("s.csv"));
    let text = fs::read_to_string(w.dir.join("t.jsonl")).unwrap();
    let mut seen = 0;
    for (line, card) in text.lines().zip(&scored) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["image_ref"], card.image_ref.as_str());
        let entries = v["transcript"]["entries"].as_array().unwrap();
        if entries[0]["verdict"] == "no" {
            seen += 1;
            assert_eq!(entries.len(), 1, "{}", card.image_ref);
            assert_eq!(card.s_att, Some(0.0));
        }
    }
    assert!(seen > 0, "fixture should contain existence failures");
}

#[test]
fn missing_image_is_isolated_and_counted() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 4, 2);
    let mut m = fs::read_to_string(w.dir.join("manifest.tsv")).unwrap();
    m.push_str("lost\timages/nowhere.png\tcardinal\tmodel-0\n");
    fs::write(w.dir.join("manifest.tsv"), m).unwrap();
    let cfg = w.config();
    let cfg = cfg.to_str().unwrap();

    let strict = run(&w.dir, &["--config", cfg, "eval", "--task", "attributes", "--out", "s.csv"]);
    assert_eq!(strict.status.code(), Some(2), "{}", stderr(&strict));
    let c = cards(&w.dir.join("s.csv"));
    assert_eq!(c.len(), 5);
    assert!(c[..4].iter().all(|c| c.s_att.is_some()));
    assert!(c[4].s_att.is_none() && c[4].flags[0].starts_with("error:image:"));

    let lenient = run(
        &w.dir,
        &["--config", cfg, "eval", "--task", "attributes", "--failure-fraction", "0.25", "--out", "s.csv"],
    );
    assert!(lenient.status.success(), "{}", stderr(&lenient));
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 2, 3);
    let cfg = w.config();
    let cfg = cfg.to_str().unwrap();
    let bad = run(&w.dir, &["--config", cfg, "--set", "parallelism=0", "eval", "--task", "attributes"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("parallelism"));
    // a style endpoint flag replaces the file's style csv, so a dead
    // endpoint flags every card instead of combining scores
    let o = run(
        &w.dir,
        &["--config", cfg, "eval", "--task", "attributes", "--style-endpoint", "http://127.0.0.1:9", "--out", "s.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(cards(&w.dir.join("s.csv")).iter().all(|c| c.combined.is_none()));
    let missing = run(&w.dir, &["eval", "--task", "attributes"]);
    assert!(stderr(&missing).contains("manifest"));
}

#[test]
fn rank_export_and_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 40, 4);
    let cfg = w.config();
    let cfg = cfg.to_str().unwrap();
    assert!(run(&w.dir, &["--config", cfg, "eval", "--task", "attributes", "--out", "s.csv"]).status.success());

    let o = run(&w.dir, &["--config", cfg, "rank", "--scores", "s.csv", "--seed", "1", "--out", "r.splits"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(w.dir.join("r.splits")).unwrap();
    assert!(text.contains("# k: 5"));
    assert!(text.contains("# mode: combined"));
    assert!(text.contains("# dataset_id: synth"));
    let high = text.lines().filter(|l| l.starts_with("cardinal\thigh\t")).count();
    assert_eq!(high, 5);

    let ablation = run(&w.dir, &["rank", "--scores", "s.csv", "--mode", "attribute-only"]);
    assert!(ablation.status.success(), "{}", stderr(&ablation));
    assert!(String::from_utf8_lossy(&ablation.stdout).contains("# mode: attribute_only"));

    let e = run(&w.dir, &["--config", cfg, "export", "--splits", "r.splits", "--out", "out", "--copy"]);
    assert!(e.status.success(), "{}", stderr(&e));
    let captions = fs::read_to_string(w.dir.join("out/high/captions.tsv")).unwrap();
    assert_eq!(captions.lines().count(), 10);
    assert!(captions.contains("\ta photo of a Blue Jay"));
}

#[test]
fn correlate_self_and_disjoint() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 12, 6);
    let cfg = w.config();
    assert!(run(&w.dir, &["--config", cfg.to_str().unwrap(), "eval", "--task", "attributes", "--out", "s.csv"])
        .status
        .success());
    // annotations whose majority ratio reproduces each image's score ordering:
    // image i gets i positive questions out of 12
    let mut ann = String::from("image_ref,question_id,worker1,worker2,worker3\n");
    let mut scored: Vec<_> = cards(&w.dir.join("s.csv"))
        .into_iter()
        .map(|c| (c.s_att.unwrap(), c.image_ref))
        .collect();
    scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut level = 0;
    for (i, (s, r)) in scored.iter().enumerate() {
        if i > 0 && *s > scored[i - 1].0 {
            level += 1;
        }
        for q in 0..12 {
            let y = if q < level { "yes" } else { "no" };
            ann.push_str(&format!("{r},q{q},{y},{y},no\n"));
        }
    }
    fs::write(w.dir.join("ann.csv"), ann).unwrap();
    let o = run(&w.dir, &["correlate", "--input", "Birds=s.csv,ann.csv", "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("REAL,Birds,12,1.0000,1.0000"), "{out}");

    fs::write(w.dir.join("other.csv"), "image_ref,question_id,worker1,worker2,worker3\nzzz,q,yes,yes,yes\n").unwrap();
    let d = run(&w.dir, &["correlate", "--input", "Birds=s.csv,other.csv"]);
    assert_eq!(d.status.code(), Some(1));
    assert!(stderr(&d).contains("disjoint"));
}

#[test]
fn benchmark_orders_by_average() {
    let tmp = tempfile::tempdir().unwrap();
    let header = "image_ref,task,C,R,s_att,s_rel_raw,s_rel_norm,s_sty,combined,flags,group_id,model_id\n";
    let rows = "a,attribute,2,1,0.500000,,,0.400000,0.200000,,c,weak\nb,attribute,2,2,1.000000,,,0.900000,0.900000,,c,strong\n";
    fs::write(tmp.path().join("s.csv"), format!("{header}{rows}")).unwrap();
    let o = run(tmp.path(), &["benchmark", "--scores", "s.csv", "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "model_id,attribute,relationship,style,average,flags");
    assert!(lines[1].starts_with("strong,1.0000,-,0.9000,0.9500,absent:relationship"));
    assert!(lines[2].starts_with("weak,"));

    fs::write(tmp.path().join("e.csv"), format!("{header}x,attribute,,,,,,,,error:image: gone,c,broken\n")).unwrap();
    let e = run(tmp.path(), &["benchmark", "--scores", "e.csv"]);
    assert_eq!(e.status.code(), Some(1));
    assert!(stderr(&e).contains("broken"));
}

#[test]
fn style_attaches_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let w = world(tmp.path(), 3, 8);
    let cfg = w.config();
    let cfg = cfg.to_str().unwrap();
    // eval without style, then attach it separately
    let o = run(&w.dir, &["--config", cfg, "--set", "style_csv=", "eval", "--task", "attributes", "--out", "s.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let style = run(&w.dir, &["style", "--csv", "style.csv", "--scores", "s.csv", "--out", "styled.csv"]);
    assert!(style.status.success(), "{}", stderr(&style));
    for c in cards(&w.dir.join("styled.csv")) {
        let (d, s) = (c.s_att.unwrap(), c.s_sty.unwrap());
        assert!((c.combined.unwrap() - d * s).abs() < 2e-6);
    }
    let both = run(&w.dir, &["style", "--csv", "style.csv", "--endpoint", "http://x", "--scores", "s.csv"]);
    assert!(!both.status.success());
}

#[test]
fn schema_and_plan_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let table = "image_id,has_bill_shape::cone,has_wing_color::red,has_wing_color::black,has_eye_color::black\na,1,1,1,0\nb,1,1,1,1\n";
    fs::write(tmp.path().join("t.csv"), table).unwrap();
    let o = run(
        tmp.path(),
        &[
            "schema", "from-annotations", "--table", "t.csv", "--class-id", "cardinal", "--class-name", "Cardinal",
            "--category", "animal", "--out-dir", "schemas",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = fs::read_to_string(tmp.path().join("schemas/cardinal.schema")).unwrap();
    assert!(doc.contains("part: wing color | desc: red and black"));
    assert!(!doc.contains("eye color"));

    let p = run(tmp.path(), &["plan", "--task", "attributes", "--schema-dir", "schemas", "--target", "cardinal"]);
    assert!(p.status.success(), "{}", stderr(&p));
    let plan = String::from_utf8_lossy(&p.stdout);
    assert!(plan.contains("Is there a realistic animal in the image?"));
    assert!(plan.contains("Is the wing color red and black?"));
    assert_eq!(plan.lines().filter(|l| !l.starts_with('#')).count(), 5);

    let d = run(
        tmp.path(),
        &["--backend", "kind=fixture", "--backend", "fixture=x.tsv", "schema", "from-description", "--class-name", "X", "--text", "t.csv", "--out-dir", "s"],
    );
    assert_eq!(d.status.code(), Some(1));
    assert!(stderr(&d).contains("image questions only"));
}
