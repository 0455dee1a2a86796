#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use realism::plan::plan_attribute_eval;
use realism::ranking::SplitMix64;
use realism::schema::{parse_schema, store_schema};
use realism::vqa::{prompt_hash, FixtureBackend, ImageRef};

pub const CLASSES: [(&str, &str); 2] = [("cardinal", "Northern Cardinal"), ("jay", "Blue Jay")];

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_realism"))
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn realism")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A self-contained evaluation set: schemas, image files, manifest, fixture
/// answers, style scores and a config file, all under one directory.
pub struct World {
    pub dir: PathBuf,
    pub images: usize,
}

impl World {
    pub fn config(&self) -> PathBuf {
        self.dir.join("run.conf")
    }
}

/// Builds `n` images over two classes. Answers are drawn from a seeded
/// generator: roughly one image in eight fails the existence check and a
/// few answers are unparseable.
pub fn world(dir: &Path, n: usize, seed: u64) -> World {
    let schemas = dir.join("schemas");
    fs::create_dir_all(dir.join("images")).unwrap();
    let parts = ["crest", "bill", "wing", "tail", "eye", "breast"];
    let mut plans = Vec::new();
    for (id, name) in CLASSES {
        let mut doc = format!("class_id: {id}\nclass_name: {name}\ncategory: animal\n");
        for p in parts {
            doc.push_str(&format!("part: {p} | desc: typical for a {name}\n"));
        }
        let schema = parse_schema(&doc).unwrap();
        store_schema(&schemas, &schema).unwrap();
        plans.push(plan_attribute_eval(&schema));
    }

    let mut rng = SplitMix64::new(seed);
    let mut manifest = String::from("# image_ref\tpath\tclass\tmodel\n");
    let mut style = String::from("image_ref,p_photo\n");
    let mut answers = Vec::new();
    for i in 0..n {
        let class = i % CLASSES.len();
        let bytes = format!("synthetic image {seed}/{i}").into_bytes();
        fs::write(dir.join(format!("images/{i:03}.png")), &bytes).unwrap();
        let image_ref = format!("img{i:03}");
        manifest.push_str(&format!("{image_ref}\timages/{i:03}.png\t{}\tmodel-{}\n", CLASSES[class].0, i % 3));
        style.push_str(&format!("{image_ref},{}\n", rng.below(1001) as f64 / 1000.0));
        let key = ImageRef::of_bytes(&bytes).to_string();
        let quality = rng.below(101);
        for q in plans[class].questions() {
            let roll = rng.below(100);
            let raw = if q.id.ends_with("/existence") {
                if roll < 12 { "No." } else { "Yes." }
            } else if roll < 3 {
                "It is hard to say."
            } else if q.id.contains("/visibility/") {
                if roll < 80 { "Yes" } else { "No" }
            } else if roll < quality {
                "yes, it matches"
            } else {
                "no"
            };
            answers.push((key.clone(), prompt_hash(&q.prompt), raw.to_string()));
        }
    }
    fs::write(dir.join("manifest.tsv"), manifest).unwrap();
    fs::write(dir.join("style.csv"), style).unwrap();
    fs::write(dir.join("answers.tsv"), FixtureBackend::from_entries("w", answers).to_text()).unwrap();
    fs::write(
        dir.join("run.conf"),
        "# synthetic run\ndataset_id = synth\nschema_dir = schemas\nmanifest = manifest.tsv\nstyle_csv = style.csv\nparallelism = 4\nworkers = 3\nbackend.kind = fixture\nbackend.fixture = answers.tsv\n",
    )
    .unwrap();
    World {
        dir: dir.to_path_buf(),
        images: n,
    }
}
