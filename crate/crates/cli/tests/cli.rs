use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
hr_size = 16
scale = 2
num_ellipses = 3
train_samples = 2
test_samples = 2

[model]
channels = 8
latent_channels = 2
window = 4
blocks = [1]
heads = [2]
fusion_heads = 2
head_channels = 4
encoder_blocks = 3
denoiser_hidden = 16
denoiser_layers = 2
time_embed_dim = 4

[train]
batch_size = 2
total_steps = 4
lr_milestones = [2]
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("run.toml");
        Command::new(env!("CARGO_BIN_EXE_priorsr"))
            .current_dir(self.dir.path())
            .env_remove("PRIORSR_OUTPUT_ROOT")
            .arg("--config")
            .arg(&cfg)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> (i32, String) {
        let out = self.run(args);
        (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
    }

    /// Dataset plus both stages.
    fn trained(&self) -> PathBuf {
        self.ok(&["synth", "--out", "data", "--n", "4"]);
        self.ok(&["train-stage1", "--data", "data", "--out", "s1"]);
        self.ok(&["train-stage2", "--data", "data", "--stage1", "s1/checkpoint.safetensors", "--out", "s2"]);
        self.path("s2/checkpoint.safetensors")
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn synth_writes_n_samples_and_is_idempotent() {
    let sb = Sandbox::new(TINY);
    sb.ok(&["synth", "--out", "a", "--n", "8"]);
    let files = std::fs::read_dir(sb.path("a")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "safetensors")
    });
    assert_eq!(files.count(), 8);
    let manifest = std::fs::read_to_string(sb.path("a/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("sample_")).count(), 8);
    let first = read(&sb.path("a/sample_0003.safetensors"));
    sb.ok(&["synth", "--out", "a", "--n", "8"]);
    assert_eq!(first, read(&sb.path("a/sample_0003.safetensors")));
    sb.ok(&["synth", "--out", "empty", "--n", "0"]);
    let empty = std::fs::read_to_string(sb.path("empty/manifest.txt")).unwrap();
    assert!(!empty.contains("sample_"));
}

#[test]
fn output_root_applies_to_relative_paths() {
    let sb = Sandbox::new(TINY);
    let root = sb.path("root");
    let out = Command::new(env!("CARGO_BIN_EXE_priorsr"))
        .current_dir(sb.dir.path())
        .env("PRIORSR_OUTPUT_ROOT", &root)
        .args(["--config", "run.toml", "synth", "--out", "d", "--n", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("d/manifest.txt").exists());
}

#[test]
fn invalid_configs_exit_with_code_two() {
    let sb = Sandbox::new(&format!("{TINY}\n[kspace]\nacceleration = 0.5\n"));
    let (code, err) = sb.code(&["flops"]);
    assert_eq!(code, 2);
    assert!(err.contains("kspace.acceleration"), "{err}");
    let sb = Sandbox::new(&TINY.replace("window = 4", "window = 6"));
    let (code, err) = sb.code(&["synth", "--out", "x", "--n", "1"]);
    assert_eq!(code, 2);
    assert!(err.contains("window"), "{err}");
    assert!(!sb.path("x").exists());
    let sb = Sandbox::new(&format!("{TINY}\n[eval]\nbogus = 1\n"));
    assert_eq!(sb.code(&["flops"]).0, 2);
    let sb = Sandbox::new(TINY);
    assert_eq!(sb.code(&["no-such-command"]).0, 2);
}

#[test]
fn stage_two_requires_a_stage_one_checkpoint() {
    let sb = Sandbox::new(TINY);
    let (code, err) = sb.code(&["train-stage2", "--out", "s2"]);
    assert_eq!(code, 2);
    assert!(err.contains("--stage1"), "{err}");
    let (code, _) = sb.code(&["train-stage2", "--out", "s2", "--stage1", "missing.safetensors"]);
    assert_eq!(code, 3);
}

#[test]
fn resume_continues_the_step_counter() {
    let sb = Sandbox::new(&format!("{TINY}checkpoint_every = 2\n"));
    sb.ok(&["train-stage1", "--out", "straight"]);
    let full = std::fs::read_to_string(sb.path("straight/metrics.jsonl")).unwrap();
    // Interrupted after step 2: the log holds two lines and the periodic checkpoint exists.
    let head: String = full.lines().take(2).map(|l| format!("{l}\n")).collect();
    std::fs::create_dir_all(sb.path("r")).unwrap();
    std::fs::write(sb.path("r/metrics.jsonl"), head).unwrap();
    sb.ok(&["train-stage1", "--out", "r", "--resume", "straight/checkpoint-2.safetensors"]);
    let resumed = std::fs::read_to_string(sb.path("r/metrics.jsonl")).unwrap();
    let steps: Vec<u64> = resumed
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
    assert_eq!(resumed, full);
    let (code, _) = sb.code(&["train-stage2", "--out", "x", "--resume", "straight/checkpoint.safetensors"]);
    assert_eq!(code, 2);
}

#[test]
fn infer_is_deterministic_and_checks_shapes() {
    let sb = Sandbox::new(TINY);
    let ck = sb.trained();
    let ck = ck.to_str().unwrap();
    let input = "data/inputs/sample_0002.safetensors";
    sb.ok(&["--seed", "3", "infer", "--checkpoint", ck, "--input", input, "--out", "a"]);
    sb.ok(&["--seed", "3", "infer", "--checkpoint", ck, "--input", input, "--out", "b"]);
    assert_eq!(read(&sb.path("a/sr.safetensors")), read(&sb.path("b/sr.safetensors")));
    assert_eq!(read(&sb.path("a/sr.png")), read(&sb.path("b/sr.png")));
    let png = image::open(sb.path("a/sr.png")).unwrap();
    assert_eq!((png.width(), png.height()), (16, 16));
    // An LR image whose reference is not `scale` times larger is refused.
    let bad = "data/inputs/bad.safetensors";
    let hr_only = "data/sample_0002.safetensors";
    let a = read(&sb.path(hr_only));
    std::fs::write(sb.path(bad), a).unwrap();
    assert_eq!(sb.code(&["infer", "--checkpoint", ck, "--input", bad, "--out", "c"]).0, 3);
    write_pair(&sb.path("mismatch.safetensors"), 8, 12);
    assert_eq!(sb.code(&["infer", "--checkpoint", ck, "--input", "mismatch.safetensors", "--out", "c"]).0, 2);
}

/// Hand-built input archive with an `lr` of side `lr` and a `ref` of side `r`.
fn write_pair(path: &Path, lr: usize, r: usize) {
    let mut views = Vec::new();
    let bytes = |n: usize| vec![0u8; n * n * 2 * 4];
    let (lb, rb) = (bytes(lr), bytes(r));
    views.push(("lr", safetensors_view(&lb, lr)));
    views.push(("ref", safetensors_view(&rb, r)));
    let data = safetensors::serialize(views, None).unwrap();
    std::fs::write(path, data).unwrap();
}

fn safetensors_view(buf: &[u8], n: usize) -> safetensors::tensor::TensorView<'_> {
    safetensors::tensor::TensorView::new(safetensors::Dtype::F32, vec![n, n, 2], buf).unwrap()
}

#[test]
fn single_contrast_checkpoints_need_no_reference() {
    let sb = Sandbox::new(&format!("{TINY}\n").replace("[model]\n", "[model]\nuse_reference = false\n"));
    let ck = sb.trained();
    let mut a = safetensors_only_lr(&sb.path("data/inputs/sample_0000.safetensors"));
    let p = sb.path("lr_only.safetensors");
    std::fs::write(&p, std::mem::take(&mut a)).unwrap();
    sb.ok(&["infer", "--checkpoint", ck.to_str().unwrap(), "--input", "lr_only.safetensors", "--out", "o"]);
    assert!(sb.path("o/sr.png").exists());
}

fn safetensors_only_lr(path: &Path) -> Vec<u8> {
    let buf = read(path);
    let st = safetensors::SafeTensors::deserialize(&buf).unwrap();
    let lr = st.tensor("lr").unwrap();
    let view = safetensors::tensor::TensorView::new(lr.dtype(), lr.shape().to_vec(), lr.data()).unwrap();
    safetensors::serialize(vec![("lr", view)], None).unwrap()
}

#[test]
fn eval_writes_a_valid_report() {
    let sb = Sandbox::new(TINY);
    let ck = sb.trained();
    let ck = ck.to_str().unwrap();
    sb.ok(&["eval", "--checkpoint", ck, "--data", "data", "--out", "report.json"]);
    let text = std::fs::read_to_string(sb.path("report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["schema"], "priorsr-eval/v1");
    let rows = v["samples"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let mean = rows.iter().map(|r| r["psnr_db"].as_f64().unwrap()).sum::<f64>() / 2.0;
    assert!((mean - v["mean_psnr_db"].as_f64().unwrap()).abs() < 1e-12);
    assert!(v["macs_per_sample"].as_u64().unwrap() > 0);
    assert!(v["param_count"].as_u64().unwrap() > 0);
    sb.ok(&["eval", "--checkpoint", ck, "--data", "data", "--out", "again.json"]);
    assert_eq!(text, std::fs::read_to_string(sb.path("again.json")).unwrap());
    let (code, err) = sb.code(&["eval", "--checkpoint", ck, "--data", "data", "--split", "val", "--out", "r.json"]);
    assert_eq!(code, 2);
    assert!(err.contains("empty"), "{err}");
}

#[test]
fn flops_table_is_structured() {
    let sb = Sandbox::new("");
    let text = sb.ok(&["flops", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let total = v["model"]["total"].as_u64().unwrap();
    let rows = v["model"]["rows"].as_array().unwrap();
    assert_eq!(rows.iter().map(|r| r["macs"].as_u64().unwrap()).sum::<u64>(), total);
    let sweeps = v["sweeps"].as_array().unwrap();
    let find = |l: u64, k: u64| {
        sweeps
            .iter()
            .find(|s| s["window"] == l && s["reduction"] == k)
            .unwrap()
            .clone()
    };
    let (k1, k2, k4) = (find(8, 1), find(8, 2), find(8, 4));
    assert_eq!(
        k1["attention_core_per_layer"].as_u64().unwrap(),
        4 * k2["attention_core_per_layer"].as_u64().unwrap()
    );
    let t = |s: &serde_json::Value| s["total"].as_u64().unwrap();
    assert!(t(&k1) > t(&k2) && t(&k2) > t(&k4));
    let plain = sb.ok(&["flops"]);
    let total_line = plain.lines().find(|l| l.starts_with("total")).unwrap();
    assert_eq!(total_line.split_whitespace().nth(1).unwrap().parse::<u64>().unwrap(), total);
}
