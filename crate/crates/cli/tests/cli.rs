use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
profile = desk
n_users = 60
n_items = 40
stage1_steps = 20
stage2_steps = 20
batch_size = 16
min_count = 1
";

fn gemirec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gemirec"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let cfg = ["--config", "tiny.cfg", "--seed", "5"];

    let gen = gemirec(d, &[&cfg[..], &["gen", "--out", "data"]].concat());
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(d.join("data/events.tsv").exists());

    let train = gemirec(d, &[&cfg[..], &["train", "--data", "data", "--out", "m.ckpt", "--report", "r.json"]].concat());
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    for s in ["m.ckpt", "m.ckpt.stage1", "m.ckpt.stage2", "m.ckpt.stage3"] {
        assert!(d.join(s).exists(), "{s}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["stages"].as_array().unwrap().len(), 3);

    let eval = gemirec(d, &[&cfg[..], &["eval", "--checkpoint", "m.ckpt", "--data", "data", "--out", "e.json"]].concat());
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("e.json")).unwrap()).unwrap();
    assert!(metrics["recall_at"]["20"].is_number());

    let verify = gemirec(d, &["verify", "--checkpoint", "m.ckpt", "--samples", "200"]);
    let text = String::from_utf8_lossy(&verify.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with('(')).count(), 4);
    assert_eq!(code(&verify), if text.contains("FAIL") { 3 } else { 0 });

    std::fs::write(d.join("req.txt"), "0\n3\n# comment\n0\n").unwrap();
    let serve = gemirec(d, &["serve-batch", "--checkpoint", "m.ckpt", "--requests", "req.txt", "--topn", "5", "--out", "out.csv"]);
    assert_eq!(code(&serve), 0, "{}", String::from_utf8_lossy(&serve.stderr));
    let csv = std::fs::read_to_string(d.join("out.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "user_id,rank,item_id,score");
    assert_eq!(lines.len(), 1 + 3 * 5);
    assert!(lines[1].starts_with("0,1,"));
    assert_eq!(lines[1..6], lines[11..16], "repeated request answers identically");

    let inspect = gemirec(
        d,
        &["inspect", "--checkpoint", "m.ckpt", "--dump-dictionary", "dict.csv", "--dump-embeddings", "emb.csv"],
    );
    assert_eq!(code(&inspect), 0, "{}", String::from_utf8_lossy(&inspect.stderr));
    let dict = std::fs::read_to_string(d.join("dict.csv")).unwrap();
    assert!(dict.starts_with("level,index,dim_0,"));
    assert_eq!(dict.lines().count(), 1 + 8 + 4);
    let emb = std::fs::read_to_string(d.join("emb.csv")).unwrap();
    assert_eq!(emb.lines().filter(|l| l.starts_with("interest,")).count(), 32);

    // A different configuration is refused unless forced.
    std::fs::write(d.join("other.cfg"), format!("{TINY}lr = 0.5\n")).unwrap();
    let strict = gemirec(d, &["--config", "other.cfg", "--seed", "5", "eval", "--checkpoint", "m.ckpt", "--data", "data"]);
    assert_eq!(code(&strict), 1);
    let forced = gemirec(
        d,
        &["--config", "other.cfg", "--seed", "5", "eval", "--checkpoint", "m.ckpt", "--data", "data", "--force"],
    );
    assert_eq!(code(&forced), 0, "{}", String::from_utf8_lossy(&forced.stderr));
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&gemirec(d, &["train"])), 1);
    assert_eq!(code(&gemirec(d, &["no-such-command"])), 1);

    std::fs::write(d.join("bad.cfg"), "n_users = many\n").unwrap();
    assert_eq!(code(&gemirec(d, &["--config", "bad.cfg", "gen", "--out", "x"])), 2);
    std::fs::write(d.join("infeasible.cfg"), "n_categories = 3\n").unwrap();
    assert_eq!(code(&gemirec(d, &["--config", "infeasible.cfg", "gen", "--out", "x"])), 1);

    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&gemirec(d, &["verify", "--checkpoint", "junk.ckpt"])), 2);

    std::fs::create_dir(d.join("data")).unwrap();
    std::fs::write(d.join("data/events.tsv"), "1\t2\tnot-a-time\t0\n").unwrap();
    let out = gemirec(d, &["train", "--data", "data", "--out", "m.ckpt"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}
