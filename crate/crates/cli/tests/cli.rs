use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_slq");

fn slq(args: &[&str]) -> Output {
    let out = Command::new(BIN).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "slq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Starts a server on an ephemeral port and returns it with its address.
fn serve(args: &[&str]) -> (Child, String) {
    let mut child = Command::new(BIN)
        .args(args)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();
    (child, addr)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn rows(out: &Output) -> Vec<Vec<f64>> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn sorted(mut v: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

#[test]
fn keygen_build_serve_query_update() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (pts, idx) = (d.join("pts.csv"), d.join("idx.slq"));
    slq(&["keygen", "--bits", "512", "--out-dir", p(d)]);
    assert!(d.join("public.slqk").exists() && d.join("secret.slqk").exists());
    slq(&["gen-data", "--dist", "nor", "--n", "150", "--seed", "4", "--out", p(&pts)]);
    slq(&[
        "build", "--data", p(&pts), "--pk", p(&d.join("public.slqk")), "--m", "80", "--epochs", "200", "--out",
        p(&idx),
    ]);
    for ext in ["owner", "ranks"] {
        assert!(idx.with_extension(ext).exists());
    }
    let data: Vec<Vec<f64>> = std::fs::read_to_string(&pts)
        .unwrap()
        .lines()
        .filter(|l| l.chars().next().is_some_and(|c| c == '-' || c.is_ascii_digit()))
        .map(|l| l.split(',').map(|v| v.trim().parse().unwrap()).collect())
        .collect();
    assert_eq!(data.len(), 150);

    let (lo, hi) = ([-0.4, -0.6], [0.7, 0.5]);
    let inside = |q: &[f64]| (0..2).all(|j| lo[j] <= q[j] && q[j] <= hi[j]);
    let range = format!("{},{},{},{}", lo[0], lo[1], hi[0], hi[1]);
    let secret = d.join("secret.slqk");

    let (mut dap, dap_addr) = serve(&["serve-dap", "--keys", p(&secret), "--listen", "127.0.0.1:0", "--limit", "4"]);
    let (mut dsp, dsp_addr) = serve(&[
        "serve-dsp", "--index", p(&idx), "--pk", p(&d.join("public.slqk")), "--dap", &dap_addr, "--listen",
        "127.0.0.1:0", "--limit", "2",
    ]);
    let transcript = d.join("t.txt");
    let out = slq(&[
        "query", "--index", p(&idx), "--dsp", &dsp_addr, "--dap", &dap_addr, "--range", &range,
        "--record-transcript", p(&transcript),
    ]);
    let want = sorted(data.iter().filter(|q| inside(q)).cloned().collect());
    assert!(!want.is_empty());
    assert_eq!(sorted(rows(&out)), want);
    assert!(std::fs::read_to_string(&transcript).unwrap().lines().count() > 4);

    let empty = slq(&[
        "query", "--index", p(&idx), "--dsp", &dsp_addr, "--dap", &dap_addr, "--range", "50,50,60,60",
    ]);
    assert!(rows(&empty).is_empty());
    assert!(dsp.wait().unwrap().success());
    assert!(dap.wait().unwrap().success());

    // insert a point, then serve the old image plus the delta
    let original = std::fs::read(&idx).unwrap();
    let old = d.join("old.slq");
    std::fs::write(&old, &original).unwrap();
    slq(&["update", "--index", p(&idx), "--insert", "0.1,0.2"]);
    let delta = idx.with_extension("delta");
    assert!(delta.exists());
    let (mut dap, dap_addr) = serve(&["serve-dap", "--keys", p(&secret), "--listen", "127.0.0.1:0", "--limit", "2"]);
    let (mut dsp, dsp_addr) = serve(&[
        "serve-dsp", "--index", p(&old), "--pk", p(&d.join("public.slqk")), "--dap", &dap_addr, "--listen",
        "127.0.0.1:0", "--delta", p(&delta), "--limit", "1",
    ]);
    let out = slq(&[
        "query", "--index", p(&idx), "--dsp", &dsp_addr, "--dap", &dap_addr, "--range", &range,
    ]);
    let mut want = want;
    want.push(vec![0.1, 0.2]);
    assert_eq!(sorted(rows(&out)), sorted(want));
    assert!(dsp.wait().unwrap().success());
    assert!(dap.wait().unwrap().success());
}

#[test]
fn bench_writes_csv_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out, per) = (dir.path().join("b.kv"), dir.path().join("s.csv"), dir.path().join("r.csv"));
    std::fs::write(&cfg, "# small run\nn = 120\nqueries = 3\nm = 60\nepochs = 100\nquery_size = 2\n").unwrap();
    slq(&[
        "bench", "--config", p(&cfg), "--sweep", "b=4,8", "--out", p(&out), "--rows", p(&per),
    ]);
    let summary = std::fs::read_to_string(&out).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().next().unwrap().contains("recall"));
    assert_eq!(std::fs::read_to_string(&per).unwrap().lines().count(), 4);
}

#[test]
fn bad_input_is_reported() {
    let out = Command::new(BIN).args(["bench", "--set", "n=-3"]).output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(BIN)
        .args(["build", "--data", "/nonexistent", "--pk", "/nonexistent", "--out", "/tmp/x.slq"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
}
