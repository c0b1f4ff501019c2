//! End-to-end runs of the compiled binary: pipeline determinism, exit-code
//! contract, and the stdout summary lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prunekit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

const ARCH: &str = "\
schema = \"prunekit-arch-v1\"
input = [1, 10, 10]
class_count = 3

[[layer]]
id = \"c1\"
kind = \"conv\"
filters = 4
kernel = 3
stride = 1
padding = 0

[[layer]]
id = \"r1\"
kind = \"relu\"

[[layer]]
id = \"p1\"
kind = \"maxpool\"
window = 2
stride = 2

[[layer]]
id = \"fl\"
kind = \"flatten\"

[[layer]]
id = \"out\"
kind = \"affine\"
units = 3
";

fn pipeline_config(root: &Path) -> String {
    let p = |s: &str| root.join(s).display().to_string();
    format!(
        "schema = \"prunekit-run-v1\"
seed = 11
eval_split = \"validation\"

[dataset]
kind = \"synth\"
n = 150
class_count = 3
image_shape = [1, 10, 10]

[train]
arch = \"{arch}\"
learning_rate = 0.05
momentum = 0.9
batch_size = 16
epochs = 2

[prune]
model = \"{model}\"
layer_id = \"c1\"
target_ratio = 2.0
index = \"car\"
fine_tune = \"each-iter\"

[compress]
model = \"{pruned}\"
sparsity = 0.5
code_bits = 4
retrain = true

[report]
model_a = \"{model}\"
model_b = \"{pruned}\"
trace = \"{trace}\"
manifest = \"{manifest}\"
patches_layer = \"c1\"
patches_k = 4
baseline_layer = \"c1\"
baseline_ratios = [1.0, 2.0]
baseline_repeats = 2

[eval]
model = \"{model}\"
",
        arch = p("arch.toml"),
        model = p("train/model.pkm"),
        pruned = p("prune/pruned.pkm"),
        trace = p("prune/trace.json"),
        manifest = p("compress/manifest.json"),
    )
}

/// file name (relative to root) → bytes, for every file under the dirs.
fn snapshot(root: &Path, dirs: &[&str]) -> BTreeMap<String, Vec<u8>> {
    let mut map = BTreeMap::new();
    for dir in dirs {
        let base = root.join(dir);
        for entry in fs::read_dir(&base).unwrap() {
            let path = entry.unwrap().path();
            assert!(path.is_file(), "unexpected subdirectory {}", path.display());
            let key = format!("{dir}/{}", path.file_name().unwrap().to_string_lossy());
            map.insert(key, fs::read(&path).unwrap());
        }
    }
    map
}

fn run_pipeline(root: &Path, config: &str) {
    let out = |s: &str| root.join(s).display().to_string();
    assert_ok(&run(&["train", "--config", config, "--out", &out("train")]));
    assert_ok(&run(&["prune", "--config", config, "--out", &out("prune")]));
    assert_ok(&run(&["compress", "--config", config, "--out", &out("compress")]));
    assert_ok(&run(&["report", "--config", config, "--out", &out("report")]));
}

#[test]
fn full_pipeline_reruns_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    fs::write(root.join("arch.toml"), ARCH).unwrap();
    let config = root.join("run.toml");
    fs::write(&config, pipeline_config(root)).unwrap();
    let config = config.display().to_string();

    run_pipeline(root, &config);
    let dirs = ["train", "prune", "compress", "report"];
    let first = snapshot(root, &dirs);
    assert!(first.contains_key("train/model.pkm"));
    assert!(first.contains_key("prune/trace.csv"));
    assert!(first.contains_key("compress/model.pkc"));
    assert!(first.contains_key("report/report.json"));
    assert!(first.contains_key("report/curve.csv"));
    assert!(first.contains_key("report/baseline.csv"));
    assert!(first.contains_key("report/patches.json"));
    assert!(first.contains_key("report/per_class.csv"));
    for dir in &dirs {
        assert!(first.contains_key(&format!("{dir}/provenance.json")), "{dir} provenance");
    }

    run_pipeline(root, &config);
    let second = snapshot(root, &dirs);
    assert_eq!(first.len(), second.len());
    for (name, bytes) in &first {
        assert_eq!(Some(bytes), second.get(name), "{name} changed between identical runs");
    }
}

#[test]
fn prune_ratio_one_copies_model_bytes() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    fs::write(root.join("arch.toml"), ARCH).unwrap();
    let base = pipeline_config(root);
    // train first
    let config = root.join("run.toml");
    fs::write(&config, &base).unwrap();
    let cfg_str = config.display().to_string();
    assert_ok(&run(&["train", "--config", &cfg_str, "--out", &root.join("train").display().to_string()]));

    // a no-op prune: ratio 1, no fine-tuning
    let noop = base
        .replace("target_ratio = 2.0", "target_ratio = 1.0")
        .replace("fine_tune = \"each-iter\"", "fine_tune = \"off\"");
    let noop_path = root.join("noop.toml");
    fs::write(&noop_path, noop).unwrap();
    let out = run(&[
        "prune",
        "--config",
        &noop_path.display().to_string(),
        "--out",
        &root.join("noop").display().to_string(),
    ]);
    assert_ok(&out);
    assert!(stdout(&out).contains("kept=4 ratio=1.00"), "stdout: {}", stdout(&out));

    let original = fs::read(root.join("train/model.pkm")).unwrap();
    let pruned = fs::read(root.join("noop/pruned.pkm")).unwrap();
    assert_eq!(original, pruned, "ratio-1 prune must be byte-identical to its input");
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

#[test]
fn untrained_model_evaluates_at_chance() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    // untrained preset, saved through the library
    let arch = prunekit_core::arch::ArchConfig::preset("lenet-desk").unwrap();
    let net = prunekit_core::network::Network::<f32>::from_arch(&arch, 5).unwrap();
    let model = root.join("untrained.pkm");
    prunekit_core::io::model::save_model(&net, &model).unwrap();

    let mnist = mnist_dir();
    let config = format!(
        "schema = \"prunekit-run-v1\"
seed = 5
eval_split = \"test\"

[dataset]
kind = \"idx\"
test_images = \"{images}\"
test_labels = \"{labels}\"
eval_limit = 2000

[eval]
model = \"{model}\"
",
        images = mnist.join("t10k-images-idx3-ubyte").display(),
        labels = mnist.join("t10k-labels-idx1-ubyte").display(),
        model = model.display()
    );
    let path = root.join("eval.toml");
    fs::write(&path, config).unwrap();
    let out = run(&["eval", "--config", &path.display().to_string()]);
    assert_ok(&out);
    let line = stdout(&out);
    let acc: f64 = line
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("accuracy="))
        .expect("accuracy token")
        .parse()
        .unwrap();
    assert!(
        (acc - 0.1).abs() <= 0.05,
        "untrained accuracy {acc} should sit near chance (0.1)"
    );
    assert!(line.contains("split=test"));
    assert!(line.contains("n=2000"));
}

fn one_line(err: &str) -> &str {
    let trimmed = err.trim_end_matches('\n');
    assert!(!trimmed.contains('\n'), "expected a single error line, got: {err}");
    trimmed
}

#[test]
fn exit_codes_follow_error_categories() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();

    // config violation: unknown key → 2
    let bad = root.join("bad.toml");
    fs::write(&bad, "schema = \"prunekit-run-v1\"\nseed = 1\nnot_a_key = true\n").unwrap();
    let out = run(&["eval", "--config", &bad.display().to_string()]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(one_line(&stderr(&out)).starts_with("error: config:"));

    // config violation: wrong schema string → 2
    let schema = root.join("schema.toml");
    fs::write(&schema, "schema = \"prunekit-run-v9\"\nseed = 1\n").unwrap();
    let out = run(&["eval", "--config", &schema.display().to_string()]);
    assert_eq!(out.status.code(), Some(2));

    // I/O: missing model file → 3
    let io = root.join("io.toml");
    fs::write(
        &io,
        format!(
            "schema = \"prunekit-run-v1\"\nseed = 1\n\n[dataset]\nkind = \"synth\"\nn = 40\nclass_count = 2\nimage_shape = [1, 6, 6]\n\n[eval]\nmodel = \"{}\"\n",
            root.join("missing.pkm").display()
        ),
    )
    .unwrap();
    let out = run(&["eval", "--config", &io.display().to_string()]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(one_line(&stderr(&out)).starts_with("error: io:"));

    // numerical divergence → 4: two stacked affine layers blow up
    // multiplicatively under an absurd learning rate until f32 overflows
    let deep_affine = "\
schema = \"prunekit-arch-v1\"
input = [1, 4, 4]
class_count = 3

[[layer]]
id = \"fl\"
kind = \"flatten\"

[[layer]]
id = \"h\"
kind = \"affine\"
units = 8

[[layer]]
id = \"out\"
kind = \"affine\"
units = 3
";
    fs::write(root.join("deep_affine.toml"), deep_affine).unwrap();
    let diverge = root.join("diverge.toml");
    fs::write(
        &diverge,
        format!(
            "schema = \"prunekit-run-v1\"\nseed = 1\n\n[dataset]\nkind = \"synth\"\nn = 80\nclass_count = 3\nimage_shape = [1, 4, 4]\n\n[train]\narch = \"{}\"\nlearning_rate = 1e6\nbatch_size = 8\nepochs = 1\n",
            root.join("deep_affine.toml").display()
        ),
    )
    .unwrap();
    let out = run(&[
        "train",
        "--config",
        &diverge.display().to_string(),
        "--out",
        &root.join("dv").display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
    assert!(one_line(&stderr(&out)).starts_with("error: numeric:"));

    // locked output directory → 3
    let locked = root.join("locked");
    fs::create_dir_all(&locked).unwrap();
    fs::write(locked.join(".prunekit-lock"), b"").unwrap();
    let out = run(&[
        "train",
        "--config",
        &diverge.display().to_string(),
        "--out",
        &locked.display().to_string(),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(one_line(&stderr(&out)).starts_with("error: io:"));
}

#[test]
fn flag_overrides_reach_the_run() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    fs::write(root.join("arch.toml"), ARCH).unwrap();
    let config_path = root.join("run.toml");
    fs::write(&config_path, pipeline_config(root)).unwrap();
    let cfg = config_path.display().to_string();
    assert_ok(&run(&["train", "--config", &cfg, "--out", &root.join("train").display().to_string()]));

    // --index and --fine-tune override the [prune] keys; random index with
    // fine-tune off runs without SGD hyperparameters
    let out = run(&[
        "prune",
        "--config",
        &cfg,
        "--out",
        &root.join("p_rand").display().to_string(),
        "--index",
        "random",
        "--fine-tune",
        "off",
    ]);
    assert_ok(&out);
    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("p_rand/trace.json")).unwrap()).unwrap();
    assert_eq!(trace["index"], "random");
    assert!(trace["records"][0]["accuracy_after_fine_tune"].is_null());

    // --seed flows into the trace
    let out = run(&[
        "prune",
        "--config",
        &cfg,
        "--out",
        &root.join("p_seed").display().to_string(),
        "--index",
        "random",
        "--fine-tune",
        "off",
        "--seed",
        "99",
    ]);
    assert_ok(&out);
    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("p_seed/trace.json")).unwrap()).unwrap();
    assert_eq!(trace["seed"], 99);
}

#[test]
fn compress_artifacts_reload_and_account() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    fs::write(root.join("arch.toml"), ARCH).unwrap();
    let config_path = root.join("run.toml");
    fs::write(&config_path, pipeline_config(root)).unwrap();
    let cfg = config_path.display().to_string();
    let out_of = |s: &str| root.join(s).display().to_string();
    assert_ok(&run(&["train", "--config", &cfg, "--out", &out_of("train")]));
    assert_ok(&run(&["prune", "--config", &cfg, "--out", &out_of("prune")]));
    let out = run(&["compress", "--config", &cfg, "--out", &out_of("compress")]);
    assert_ok(&out);
    assert!(stdout(&out).contains("total_ratio="));

    // the container loads back with stores for both weight layers
    let (net, stores, manifest) =
        prunekit_core::io::compressed::load_compressed::<f32>(root.join("compress/model.pkc"))
            .unwrap();
    assert_eq!(stores.len(), 2);
    assert!(stores.contains_key("c1") && stores.contains_key("out"));
    assert_eq!(manifest.entries.len(), 2);
    net.validate().unwrap();

    // manifest byte counts match independent recomputation from the stores
    for entry in &manifest.entries {
        let store = &stores[&entry.layer_id];
        assert_eq!(entry.stored_bytes, prunekit_core::compress::storage_bytes(store));
        // half the weights were magnitude-pruned away
        let dense = entry.original_dense_bytes / 4;
        assert_eq!(store.nonzero_count(), dense - dense / 2);
    }
}

#[test]
fn shipped_configs_are_loadable() {
    let repo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    // a config error would exit 2 before any file I/O; the missing model
    // (exit 3) proves both configs parse and validate
    for name in ["configs/synth-demo.toml", "configs/mnist-lenet.toml"] {
        let out = bin().current_dir(&repo).args(["eval", "--config", name]).output().unwrap();
        assert_eq!(out.status.code(), Some(3), "{name}: {}", stderr(&out));
        assert!(stderr(&out).starts_with("error: io:"), "{name}: {}", stderr(&out));
    }

    // the demo config trains end to end, which also exercises the shipped
    // arch file it references
    let tmp = TempDir::new().unwrap();
    let out = bin()
        .current_dir(&repo)
        .args([
            "train",
            "--config",
            "configs/synth-demo.toml",
            "--out",
            &tmp.path().join("train").display().to_string(),
        ])
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(stdout(&out).contains("epochs=3"));
}
