use std::path::Path;
use std::process::{Command, Output};

fn patchvote(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchvote"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = patchvote(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    patchvote(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn render_train_build_detect_evaluate_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let views = dir.path().join("views");
    let test = dir.path().join("test");
    let model = dir.path().join("model.bin");
    let book = dir.path().join("book.bin");

    ok(&[
        "render",
        "--mesh",
        "cube",
        "--subdivisions",
        "0",
        "--inplane",
        "2",
        "--out",
        s(&views),
    ]);
    ok(&[
        "render",
        "--mesh",
        "cube",
        "--subdivisions",
        "0",
        "--inplane",
        "1",
        "--radius",
        "0.6",
        "--out",
        s(&test),
    ]);
    assert!(views.join("intrinsics.txt").exists());
    assert!(views.join("view0023_depth.png").exists());
    assert!(test.join("view0000_gt.txt").exists());

    let trained = ok(&[
        "train",
        "--data",
        s(&views),
        "--dim",
        "16",
        "--samples",
        "400",
        "--out",
        s(&model),
    ]);
    assert!(trained.contains("16 dimensions"), "{trained}");
    ok(&[
        "build-codebook",
        "--model",
        s(&model),
        "--object",
        "0=cube",
        "--subdivisions",
        "0",
        "--inplane",
        "4",
        "--out",
        s(&book),
    ]);

    let common = [
        "--model",
        s(&model),
        "--codebook",
        s(&book),
        "--object",
        "0=cube",
        "--data",
        s(&test),
    ];
    let det = dir.path().join("det");
    ok(&[&["detect"][..], &common, &["--out", s(&det)]].concat());
    let csv = std::fs::read_to_string(det.join("detections.csv")).unwrap();
    assert!(csv.starts_with("frame,object_id,score,"));
    let timings = std::fs::read_to_string(det.join("timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), 7);

    let eval = dir.path().join("eval");
    let printed = ok(&[&["evaluate"][..], &common, &["--out", s(&eval)]].concat());
    assert!(printed.contains("frames 12"), "{printed}");
    let summary = std::fs::read_to_string(eval.join("summary.csv")).unwrap();
    assert!(summary.starts_with("tp,fp,fn,precision,recall,f1\n"));

    let sw = dir.path().join("sweep");
    let table = ok(&[
        &["sweep"][..],
        &common,
        &["--param", "tau", "--values", "0,20", "--out", s(&sw)],
    ]
    .concat());
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    // No votes are cast at tau = 0, so nothing is detected.
    assert!(rows[1].starts_with("tau,0,0,0,12,"), "{table}");
    assert!(sw.join("sweep.png").exists());

    // An out-of-range sweep value is a configuration error.
    assert_eq!(
        code(
            &[
                &["sweep"][..],
                &common,
                &["--param", "k", "--values", "0", "--out", s(&sw)]
            ]
            .concat()
        ),
        2
    );
    assert_eq!(
        code(
            &[
                &["sweep"][..],
                &common,
                &["--param", "alpha", "--values", "1", "--out", s(&sw)]
            ]
            .concat()
        ),
        2
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    // Usage errors and invalid settings.
    assert_eq!(code(&["bogus"]), 2);
    assert_eq!(code(&["--protocol", "fast", "selftest"]), 2);
    assert_eq!(code(&["--knn", "0", "selftest"]), 2);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[vote]\nkk = 3\n").unwrap();
    assert_eq!(code(&["--config", s(&bad), "selftest"]), 2);
    // Missing files.
    assert_eq!(code(&["--config", s(&missing), "selftest"]), 3);
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&missing),
            "--out",
            s(&dir.path().join("m.bin"))
        ]),
        3
    );
    assert_eq!(
        code(&[
            "build-codebook",
            "--model",
            s(&missing),
            "--object",
            "0=cube",
            "--out",
            s(&missing)
        ]),
        3
    );
}

#[test]
fn selftest_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "selftest",
            "--scenes",
            "1",
            "--subdivisions",
            "0",
            "--inplane",
            "4",
            "--codebook-step",
            "12",
            "--out",
            s(&out),
        ]);
        std::fs::read(out.join("detections.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert!(String::from_utf8(a).unwrap().starts_with("frame,object_id"));
}
