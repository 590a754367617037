use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
classes = 4
samples_per_class = 5
test_per_class = 2
occlusions = sunglasses:rectangle:0.25, scarf:lower-band:0.5
collect_subjects = 2
collect_per_subject = 2
corpus = corpus
samples = samples
atoms = 2
";

fn soc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soc"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.conf"), SMALL).unwrap();
    let o = soc(dir.path(), &["synth", "--config", "run.conf", "--out", "corpus"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&soc(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&soc(dir.path(), &["synth", "--set", "colour=red"])), 1);
    assert_eq!(code(&soc(dir.path(), &["synth", "--set", "classes"])), 1);
    assert_eq!(code(&soc(dir.path(), &["synth", "--config", "missing.conf"])), 1);
    // classify needs a corpus key
    assert_eq!(code(&soc(dir.path(), &["classify"])), 1);
    assert_eq!(code(&soc(dir.path(), &["--help"])), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&soc(dir.path(), &["classify", "--set", "corpus=nowhere"])), 2);
    fs::create_dir(dir.path().join("bad")).unwrap();
    fs::write(dir.path().join("bad/manifest.csv"), "path,face,occlusion,mask,split\nimages/x.pgm,s000,,,test\n").unwrap();
    let o = soc(dir.path(), &["classify", "--set", "corpus=bad"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_writes_manifest_and_images() {
    let dir = setup();
    let manifest = fs::read_to_string(dir.path().join("corpus/manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("path,face,occlusion,mask,split"));
    let rows: Vec<&str> = lines.collect();
    // 4 x 5 gallery, 2 x 2 x 2 collect, 4 x 2 test
    assert_eq!(rows.len(), 20 + 8 + 8);
    for r in &rows {
        let path = r.split(',').next().unwrap();
        assert!(dir.path().join("corpus").join(path).exists(), "{path}");
    }
}

#[test]
fn classify_without_occlusion_dictionary_uses_the_gallery() {
    let dir = setup();
    let o = soc(dir.path(), &["classify", "--config", "run.conf", "--out", "plain", "--timing"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).trim().ends_with("results.csv"));
    let results = fs::read_to_string(dir.path().join("plain/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 8);
    assert!(results.starts_with("id,path,true_face,true_occlusion,pred_face,pred_occlusion"));
    let acc = fs::read_to_string(dir.path().join("plain/accuracy.csv")).unwrap();
    assert!(acc.lines().last().unwrap().starts_with("all,8,"));
    assert!(dir.path().join("plain/stats.csv").exists());
}

#[test]
fn collect_train_classify_chain() {
    let dir = setup();
    let o = soc(dir.path(), &["collect", "--config", "run.conf", "--out", "samples", "--debug"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("samples/debug/collect_00000").is_dir());
    assert!(dir.path().join("samples/rejected.csv").exists());
    let o = soc(dir.path(), &["train", "--config", "run.conf", "--out", "occlusion"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(dir.path().join("occlusion/train_trace.csv")).unwrap();
    // two categories, initial error plus 20 iterations each
    assert_eq!(trace.lines().count(), 1 + 2 * 21);
    let o = soc(
        dir.path(),
        &["classify", "--config", "run.conf", "--set", "occlusion_dictionary=occlusion", "--out", "soc"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = soc(dir.path(), &["roc", "--set", "results=soc/results.csv", "--out", "roc"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let roc = fs::read_to_string(dir.path().join("roc/roc.csv")).unwrap();
    assert_eq!(roc.lines().count(), 1 + 101);
}

#[test]
fn roc_of_header_only_results_is_empty_but_valid() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("results.csv"),
        "id,path,true_face,true_occlusion,pred_face,pred_occlusion,face_argmin,occlusion_argmin,rdi_face,rdi_occlusion,face_valid,occlusion_valid,error\n",
    )
    .unwrap();
    let o = soc(dir.path(), &["roc", "--set", "results=results.csv", "--out", "roc"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let auc = fs::read_to_string(dir.path().join("roc/auc.csv")).unwrap();
    assert_eq!(auc, "curve,auc,valid,invalid\nface,,0,0\nocclusion,,0,0\n");
}

#[test]
fn seed_flag_changes_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.conf"), SMALL).unwrap();
    for (seed, out) in [("1", "a"), ("1", "b"), ("2", "c")] {
        let o = soc(dir.path(), &["synth", "--config", "run.conf", "--seed", seed, "--out", out]);
        assert!(o.status.success());
    }
    let img = |d: &str| fs::read(dir.path().join(d).join("images/test_00000.pgm")).unwrap();
    assert_eq!(img("a"), img("b"));
    assert_ne!(img("a"), img("c"));
}

#[test]
fn esrc_collection_matches_the_library() {
    use soc_core::learning::collect_esrc;
    let dir = setup();
    let o = soc(
        dir.path(),
        &["collect", "--config", "run.conf", "--set", "strategy=esrc", "--out", "samples"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let samples = soc_core::io::load_dictionary(dir.path().join("samples/samples")).unwrap();
    let (corpus, _) = soc_cli::corpus::read_corpus(&dir.path().join("corpus")).unwrap();
    // blocks follow the first appearance of each category
    let mut expected: Vec<(String, nalgebra::DVector<f64>)> = Vec::new();
    for it in &corpus.collect {
        let sub = corpus.gallery.sub_dictionary(&it.face).unwrap();
        let p = collect_esrc(&it.image, &sub).unwrap().downsample(12, 10).unwrap();
        expected.push((it.occlusion.clone().unwrap(), p.data().normalize()));
    }
    let mut col = 0;
    for b in samples.blocks() {
        for (cat, v) in expected.iter().filter(|(c, _)| *c == b.label) {
            assert_eq!(cat, &b.label);
            assert!((samples.column(col) - v).amax() < 1e-12);
            col += 1;
        }
    }
    assert_eq!(col, samples.n());
}

#[test]
fn verbose_classify_writes_residuals() {
    let dir = setup();
    let o = soc(
        dir.path(),
        &["classify", "--config", "run.conf", "--set", "verbose=true", "--out", "v"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let res = fs::read_to_string(dir.path().join("v/residuals.csv")).unwrap();
    // 8 tests x 4 face classes, no occlusion blocks
    assert_eq!(res.lines().count(), 1 + 8 * 4);
}
