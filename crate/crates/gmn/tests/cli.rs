//! End-to-end checks of the command-line binary: the synth → train → eval →
//! retrieve → export pipeline over temp directories, hand-written log
//! ingestion, table emitters, and the exit-code contract for bad input.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gmn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmn"))
        .args(args)
        .output()
        .expect("spawn gmn")
}

/// Run expecting success; returns stdout.
fn ok(args: &[&str]) -> String {
    let out = gmn(args);
    assert!(
        out.status.success(),
        "gmn {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Run expecting a specific failure exit code; returns stderr.
fn fails(args: &[&str], code: i32) -> String {
    let out = gmn(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "gmn {:?}\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

const TINY_CONFIG: &str = "\
# tiny but complete
fields = id:8
k1 = 2
k2 = 2
levels = 1
temperature = 1.0
hidden = 8
lr = 0.05
lambda = 0.000001
dropout = 1.0
dropout_is_keep = true
cap_videos = 8
cap_items = 8
negatives = 1
batch_users = 64
epochs = 2
patience = 0
seed = 3
threads = 1
";

/// Generate a small planted dataset into `dir` and return (graph, val) paths.
fn synth_into(dir: &Path) -> (String, String) {
    let out = dir.to_str().unwrap();
    let stdout = ok(&[
        "synth",
        "--users", "120",
        "--videos", "60",
        "--items", "80",
        "--topics", "4",
        "--subtopics", "2",
        "--active-min", "1",
        "--active-max", "2",
        "--signal", "0.8",
        "--noise", "0.2",
        "--sub-noise", "0.1",
        "--videos-per-user", "6",
        "--items-per-user", "8",
        "--seed", "11",
        "--out", out,
    ]);
    assert!(stdout.contains("graph: 120 users"), "{stdout}");
    assert!(stdout.contains("held out:"), "{stdout}");
    (
        format!("{out}/graph.bin"),
        format!("{out}/val.tsv"),
    )
}

#[test]
fn pipeline_trains_deterministically_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let (graph, val) = synth_into(dir.path());
    let config = dir.path().join("model.cfg");
    write(&config, TINY_CONFIG);
    let config = config.to_str().unwrap();

    // Held-out samples are `user TAB video TAB 0|1` lines.
    let first_val_line = fs::read_to_string(&val).unwrap().lines().next().unwrap().to_string();
    let cols: Vec<&str> = first_val_line.split('\t').collect();
    assert_eq!(cols.len(), 3, "{first_val_line:?}");
    assert!(cols[0].starts_with('u') && cols[1].starts_with('v'));
    assert!(cols[2] == "0" || cols[2] == "1");

    // Train twice: same config, same bytes.
    let ck_a = dir.path().join("a.ckpt");
    let ck_b = dir.path().join("b.ckpt");
    for ck in [&ck_a, &ck_b] {
        let stdout = ok(&[
            "train",
            "--config", config,
            "--graph", &graph,
            "--val", &val,
            "--out", ck.to_str().unwrap(),
        ]);
        assert!(stdout.contains("epoch   0"), "{stdout}");
        assert!(stdout.contains("epoch   1"), "{stdout}");
        assert!(stdout.contains("best epoch"), "{stdout}");
    }
    assert_eq!(
        fs::read(&ck_a).unwrap(),
        fs::read(&ck_b).unwrap(),
        "identical training runs wrote different checkpoints"
    );
    let ck = ck_a.to_str().unwrap();

    // Eval prints the report and the per-user dumps on request.
    let stdout = ok(&[
        "eval",
        "--checkpoint", ck,
        "--graph", &graph,
        "--val", &val,
        "--dump-relevance", "u0",
        "--dump-preference", "u0",
    ]);
    assert!(stdout.contains("auc "), "{stdout}");
    assert!(stdout.contains("hit@1 "), "{stdout}");
    assert!(stdout.contains("# relevance user=u0"), "{stdout}");
    assert!(stdout.contains("# preference user=u0"), "{stdout}");

    // Retrieval: k ranked lines, scores non-increasing, ranks 1..=k.
    let stdout = ok(&[
        "retrieve",
        "--checkpoint", ck,
        "--graph", &graph,
        "--user", "u0",
        "--k", "5",
    ]);
    let rows: Vec<Vec<String>> = stdout
        .lines()
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect();
    assert_eq!(rows.len(), 5, "{stdout}");
    let mut prev = f64::INFINITY;
    for (n, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), 3);
        assert_eq!(row[0], (n + 1).to_string());
        assert!(row[1].starts_with('v'));
        let s: f64 = row[2].parse().unwrap();
        assert!(s <= prev, "scores out of order: {stdout}");
        prev = s;
    }

    // Export: one vector per node, key first, all entries parseable.
    let emb = dir.path().join("emb");
    ok(&[
        "export",
        "--checkpoint", ck,
        "--graph", &graph,
        "--out-dir", emb.to_str().unwrap(),
    ]);
    for (file, prefix) in [("users.tsv", 'u'), ("videos.tsv", 'v')] {
        let text = fs::read_to_string(emb.join(file)).unwrap();
        assert!(!text.is_empty());
        let mut width = None;
        for line in text.lines() {
            let mut parts = line.split('\t');
            assert!(parts.next().unwrap().starts_with(prefix));
            let values: Vec<f64> = parts.map(|p| p.parse().unwrap()).collect();
            let n = values.len();
            assert!(n > 0);
            if let Some(w) = width {
                assert_eq!(w, n, "ragged rows in {file}");
            }
            width = Some(n);
        }
    }
}

#[test]
fn build_graph_reports_what_it_ingested() {
    let dir = tempfile::tempdir().unwrap();
    let feat = dir.path().join("feat.tsv");
    let uv = dir.path().join("uv.tsv");
    let ui = dir.path().join("ui.tsv");
    write(
        &feat,
        "u1\tid:0\nu2\tid:1\nv1\tid:2\nv2\tid:3\ni1\tid:4\n",
    );
    // One duplicate watch and one edge with an unregistered user.
    write(
        &uv,
        "u1\tv1\t100\nu1\tv2\t200\nu2\tv1\t150\nu1\tv1\t300\nghost\tv1\t10\n",
    );
    write(&ui, "u1\ti1\t50\nu2\ti1\t60\n");
    let out = dir.path().join("graph.bin");
    let stdout = ok(&[
        "build-graph",
        "--uv-log", uv.to_str().unwrap(),
        "--ui-log", ui.to_str().unwrap(),
        "--features", feat.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("graph: 2 users, 2 videos, 1 items"), "{stdout}");
    assert!(stdout.contains("edges: 3 watch, 2 purchase (1 duplicates collapsed)"), "{stdout}");
    assert!(stdout.contains("skipped 1 edges with unknown keys"), "{stdout}");
    assert!(out.exists());
    // The dense-id-to-key sidecar lands next to the binary.
    let sidecar = fs::read_to_string(dir.path().join("graph.bin.keys.tsv")).unwrap();
    assert!(sidecar.lines().count() >= 5, "{sidecar}");
}

#[test]
fn ablate_and_sweep_emit_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (graph, val) = synth_into(dir.path());
    let config = dir.path().join("model.cfg");
    write(&config, &TINY_CONFIG.replace("epochs = 2", "epochs = 1"));
    let config = config.to_str().unwrap();

    let table = dir.path().join("cells.tsv");
    let stdout = ok(&[
        "ablate",
        "--config", config,
        "--graph", &graph,
        "--val", &val,
        "--variants", "full,dual-concat-baseline",
        "--seeds", "1,2",
        "--out", table.to_str().unwrap(),
    ]);
    assert!(stdout.contains("variant full"), "{stdout}");
    assert!(stdout.contains("variant dual-concat-baseline"), "{stdout}");
    assert!(stdout.contains("mean-auc"), "{stdout}");
    let text = fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant\tseed\tauc\thit1\tbest_epoch");
    assert_eq!(lines.len(), 1 + 2 * 2, "{text}");
    for row in &lines[1..] {
        assert_eq!(row.split('\t').count(), 5, "{row:?}");
    }

    let stdout = ok(&[
        "sweep",
        "--config", config,
        "--graph", &graph,
        "--val", &val,
        "--knob", "preference-count",
        "--values", "1,2",
        "--seeds", "1",
    ]);
    // Two cell rows plus two summary rows.
    assert_eq!(stdout.matches("preference-count").count(), 4, "{stdout}");
    assert!(stdout.contains("mean-auc"), "{stdout}");
}

#[test]
fn gradcheck_passes_from_the_command_line() {
    let stdout = ok(&["gradcheck", "--d", "4", "--seed", "3"]);
    assert!(stdout.contains("PASS"), "{stdout}");
    assert!(stdout.contains("worst"), "{stdout}");
}

#[test]
fn bad_inputs_exit_with_the_validation_code() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown config key: rejected before anything else is touched.
    let cfg = dir.path().join("bad.cfg");
    write(&cfg, "fields = id:8\nunknown_knob = 5\n");
    let stderr = fails(
        &[
            "train",
            "--config", cfg.to_str().unwrap(),
            "--graph", "/nonexistent",
            "--val", "/nonexistent",
            "--out", "/nonexistent",
        ],
        2,
    );
    assert!(stderr.contains("unknown config key"), "{stderr}");

    // Unknown ablation variant name.
    let stderr = fails(&["gradcheck", "--variant", "bogus"], 2);
    assert!(stderr.contains("unknown variant"), "{stderr}");

    // Malformed log line: missing the timestamp column.
    let feat = dir.path().join("feat.tsv");
    let uv = dir.path().join("uv.tsv");
    let ui = dir.path().join("ui.tsv");
    write(&feat, "u1\tid:0\nv1\tid:1\ni1\tid:2\n");
    write(&uv, "u1\tv1\n");
    write(&ui, "u1\ti1\t5\n");
    let stderr = fails(
        &[
            "build-graph",
            "--uv-log", uv.to_str().unwrap(),
            "--ui-log", ui.to_str().unwrap(),
            "--features", feat.to_str().unwrap(),
            "--out", dir.path().join("g.bin").to_str().unwrap(),
        ],
        2,
    );
    assert!(stderr.contains("malformed"), "{stderr}");

    // A missing input file is an I/O failure, not a validation failure.
    fails(
        &[
            "build-graph",
            "--uv-log", dir.path().join("absent.tsv").to_str().unwrap(),
            "--ui-log", ui.to_str().unwrap(),
            "--features", feat.to_str().unwrap(),
            "--out", dir.path().join("g.bin").to_str().unwrap(),
        ],
        1,
    );
}
