use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn chordfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chordfuse")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn demo_run_evaluate_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("out");
    let demo = chordfuse(&["demo", "--output-dir", s(&corpus), "--songs", "2", "--seed", "5"]);
    assert!(demo.status.success(), "{}", String::from_utf8_lossy(&demo.stderr));
    let manifest = corpus.join("manifest.json");

    let run = chordfuse(&["run", "--manifest", s(&manifest), "--output-dir", s(&out), "--workers", "2"]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = stdout(&run);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "song_id,csr,overseg,underseg,seg,duration");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("corpus,"));
    let fused = fs::read(out.join("song01/fused.lab")).unwrap();

    let rerun = chordfuse(&["run", "--manifest", s(&manifest), "--output-dir", s(&out)]);
    assert_eq!(rerun.status.code(), Some(0));
    assert_eq!(stdout(&rerun), csv);
    assert_eq!(fs::read(out.join("song01/fused.lab")).unwrap(), fused);

    let eval = chordfuse(&["evaluate", "--manifest", s(&manifest), "--run-dir", s(&out)]);
    assert_eq!(eval.status.code(), Some(0));
    assert_eq!(stdout(&eval), csv);

    // Re-fusing the written intermediates reproduces the pipeline's output.
    let refused = dir.path().join("refused.lab");
    let fuse = chordfuse(&[
        "fuse",
        "--audio-lab",
        s(&corpus.join("song01.ace.lab")),
        "--midi",
        s(&out.join("song01/midi/song01")),
        "--tab",
        s(&out.join("song01/tab/song01.tab.lab")),
        "-o",
        s(&refused),
    ]);
    assert!(fuse.status.success(), "{}", String::from_utf8_lossy(&fuse.stderr));
    assert_eq!(fs::read(&refused).unwrap(), fused);
}

#[test]
fn corrupt_midi_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert!(chordfuse(&["demo", "--output-dir", s(&corpus), "--songs", "1"]).status.success());
    fs::write(corpus.join("song01.mid"), b"not midi").unwrap();
    let run = chordfuse(&[
        "run",
        "--manifest",
        s(&corpus.join("manifest.json")),
        "--output-dir",
        s(&dir.path().join("out")),
        "--no-cache",
        "--strategy",
        "all",
    ]);
    assert_eq!(run.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&run.stderr).contains("song01.mid"));
    assert!(dir.path().join("out/song01/fused.lab").is_file());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let missing = chordfuse(&["run", "--manifest", "/nonexistent/manifest.json", "--output-dir", out]);
    assert_eq!(missing.status.code(), Some(2));

    let manifest = dir.path().join("m.json");
    fs::write(dir.path().join("a.wav"), b"").unwrap();
    fs::write(&manifest, r#"{"songs":[{"id":"x","audio":"a.wav","tabs":["gone.txt"]}]}"#).unwrap();
    let bad_ref = chordfuse(&["run", "--manifest", s(&manifest), "--output-dir", out]);
    assert_eq!(bad_ref.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_ref.stderr).contains("/songs/0/tabs/0"));

    let bad_method = chordfuse(&["fuse", "--audio-lab", "a.lab", "--method", "vote", "-o", "x.lab"]);
    assert_eq!(bad_method.status.code(), Some(2));

    let bad_jump = chordfuse(&["run", "--manifest", s(&manifest), "--output-dir", out, "--p-f", "-1"]);
    assert_eq!(bad_jump.status.code(), Some(2));
}

#[test]
fn single_file_commands() {
    let dir = tempfile::tempdir().unwrap();
    let tab = dir.path().join("song.txt");
    fs::write(&tab, "[Intro]\nAm   F   C   G\n\nAm       F\nsome words here\n").unwrap();
    let parsed = chordfuse(&["parse-tab", s(&tab)]);
    assert!(parsed.status.success());
    let text = stdout(&parsed);
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().next().unwrap().contains("\"label\":\"A:min\""));

    let a = dir.path().join("a.lab");
    let b = dir.path().join("b.lab");
    fs::write(&a, "0.000000 2.000000 C:maj\n2.000000 4.000000 G:maj\n").unwrap();
    fs::write(&b, "0.0 2.0 C:maj\n2.0 4.0 A:min\n").unwrap();
    let pair = format!("{}:{}", s(&b), s(&a));
    let eval = chordfuse(&["evaluate", "--pair", &pair]);
    assert!(eval.status.success());
    assert_eq!(stdout(&eval).lines().nth(1).unwrap(), "b,0.500000,1.000000,1.000000,1.000000,4.000000");

    let fused = dir.path().join("fused.lab");
    let fuse = chordfuse(&["fuse", "--audio-lab", s(&a), "-o", s(&fused)]);
    assert!(fuse.status.success(), "{}", String::from_utf8_lossy(&fuse.stderr));
    assert_eq!(fs::read_to_string(&fused).unwrap(), fs::read_to_string(&a).unwrap());

    let empty = chordfuse(&["plot-data"]);
    assert_eq!(stdout(&empty), "source_id,start,end,label\n");
    let lanes = chordfuse(&["plot-data", "--lane", &format!("x={}", s(&a)), "--fused", s(&b)]);
    assert_eq!(stdout(&lanes).lines().filter(|l| l.starts_with("fused,")).count(), 2);

    let hmm = dir.path().join("hmm.json");
    assert!(chordfuse(&["train-hmm", "--synthetic", "3", "-o", s(&hmm)]).status.success());
    let none = chordfuse(&["train-hmm", "-o", s(&hmm)]);
    assert_eq!(none.status.code(), Some(2));
}
