use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mec_core::pipeline::{load_dataset, merge_config, run_variant, Dataset, RunConfig, Variant};
use mec_core::quantizer::Codebook;
use mec_core::Error;

fn write_csv(path: &Path, rows: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut text = String::from("click,site,tags,price\n");
    for _ in 0..rows {
        let site = rng.random_range(0..40u32);
        let tags: Vec<String> = (0..rng.random_range(1..3)).map(|_| format!("t{}", rng.random_range(0..15))).collect();
        let price: f64 = rng.random_range(0.0..100.0);
        let p = if site % 3 == 0 { 0.8 } else { 0.2 };
        let label = u8::from(rng.random_bool(p));
        writeln!(text, "{label},s{site},{},{price:.2}", tags.join("|")).unwrap();
    }
    fs::write(path, text).unwrap();
}

fn csv_config(path: &Path) -> RunConfig {
    let toml = format!(
        r#"
seed = 3
[data]
source = "csv"
[data.csv]
path = "{}"
[data.csv.schema]
label_column = 0
has_header = true
fields = [
  {{ name = "site", kind = "categorical" }},
  {{ name = "tags", kind = "categorical" }},
  {{ name = "price", kind = "numeric" }},
]
[model]
dim = 8
hidden = [16]
[stage1.train]
epochs = 3
[stage2.train]
epochs = 3
[quantizer]
m = 2
k = 8
epochs = 4
"#,
        path.display()
    );
    merge_config(Some(&toml), &[]).unwrap()
}

#[test]
fn csv_source_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("clicks.csv");
    write_csv(&csv, 2000);
    let config = csv_config(&csv);

    let run = run_variant(&config).unwrap();
    run.report.validate().unwrap();
    assert_eq!(run.report.variant, Variant::Mec);
    assert_eq!(run.report.dataset.n_train + run.report.dataset.n_val + run.report.dataset.n_test, 2000);
    assert!(run.report.stage2.test.auc > 0.6, "{}", run.report.stage2.test.auc);
    assert!(run.report.memory.compression_ratio > 1.0);

    let cb = run.codebook.unwrap();
    let path = dir.path().join("codebook.bin");
    cb.save(&path).unwrap();
    assert_eq!(Codebook::load(&path).unwrap(), cb);
    assert_eq!(cb.fields.iter().map(|f| f.name.as_str()).collect::<Vec<_>>(), ["site", "tags"]);
}

#[test]
fn prepared_dataset_survives_the_disk() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("clicks.csv");
    write_csv(&csv, 300);
    let data = load_dataset(&csv_config(&csv)).unwrap();
    data.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), data);
    assert_eq!(data.n_numeric, 1);
}

#[test]
fn bad_label_is_reported_with_its_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("clicks.csv");
    fs::write(&csv, "click,site,tags,price\n1,a,x,1.0\nyes,b,y,2.0\n").unwrap();
    match load_dataset(&csv_config(&csv)) {
        Err(Error::InvalidLabel { value, .. }) => assert_eq!(value, "yes"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_csv_path_is_a_config_error() {
    let err = merge_config(Some("[data]\nsource = \"csv\"\n"), &[]).and_then(|c| c.validate().map(|_| c));
    assert!(err.is_err());
}
