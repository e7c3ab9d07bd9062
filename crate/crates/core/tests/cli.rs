use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use latent_stego::codec::BitMessage;
use latent_stego::formats::{read_message, write_message, StegoSidecar};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latent-stego"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn message(dir: &Path, bits: usize, seed: u64) -> std::path::PathBuf {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let m = BitMessage::random(bits, &mut rng).unwrap();
    let p = dir.join(format!("msg{bits}.bin"));
    write_message(&p, &m).unwrap();
    p
}

#[test]
fn midpoint_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let msg = message(dir.path(), 1024, 1);
    let out = dir.path().join("emb");
    let o = run(&["embed", "--message", s(&msg), "--key", "9", "--mode", "midpoint", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let side: StegoSidecar =
        serde_json::from_str(&fs::read_to_string(out.join("stego.tensor.json")).unwrap()).unwrap();
    assert_eq!(side.bit_length, 1024);
    assert_eq!(side.generator_seed, 42);

    let ex = dir.path().join("ex");
    let o = run(&[
        "extract",
        "--image",
        s(&out.join("stego.tensor")),
        "--steps",
        "0",
        "--reference",
        s(&msg),
        "--out",
        s(&ex),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_message(&ex.join("recovered.bin")).unwrap(), read_message(&msg).unwrap());
    assert!(ex.join("report.json").exists());
    assert!(ex.join("traces").join("extract.csv").exists());
}

#[test]
fn embedding_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let msg = message(dir.path(), 1024, 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(run(&["embed", "--message", s(&msg), "--key", "5", "--out", s(out)]).status.success());
    }
    assert_eq!(fs::read(a.join("stego.tensor")).unwrap(), fs::read(b.join("stego.tensor")).unwrap());
    assert_eq!(
        fs::read(a.join("stego.tensor.json")).unwrap(),
        fs::read(b.join("stego.tensor.json")).unwrap()
    );
}

#[test]
fn message_length_contract() {
    let dir = tempfile::tempdir().unwrap();
    let ok = message(dir.path(), 1024, 3);
    let long = message(dir.path(), 1025, 3);
    let out = dir.path().join("o");
    assert!(run(&["embed", "--message", s(&ok), "--out", s(&out)]).status.success());
    let o = run(&["embed", "--message", s(&long), "--out", s(&dir.path().join("o2"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("o2").join("stego.tensor").exists());
}

#[test]
fn truncated_image_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let msg = message(dir.path(), 1024, 4);
    let out = dir.path().join("o");
    assert!(run(&["embed", "--message", s(&msg), "--out", s(&out), "--name", "stego.ppm"]).status.success());
    let bytes = fs::read(out.join("stego.ppm")).unwrap();
    let bad = dir.path().join("bad.ppm");
    fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    let ex = dir.path().join("ex");
    let o = run(&["extract", "--image", s(&bad), "--out", s(&ex)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!ex.exists());
}

#[test]
fn invalid_flags_exit_with_2() {
    for args in [
        vec!["bench", "--trials", "0", "--out", "x"],
        vec!["bench", "--channel", "jpeg_like:0", "--out", "x"],
        vec!["bench", "--eta", "fixed:-1", "--out", "x"],
        vec!["bench", "--mode", "sideways", "--out", "x"],
        vec!["bench", "--latent-shape", "4,16", "--out", "x"],
        vec!["frobnicate"],
    ] {
        assert_eq!(run(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn divergent_step_size_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let msg = message(dir.path(), 1024, 5);
    let out = dir.path().join("o");
    assert!(run(&["embed", "--message", s(&msg), "--out", s(&out)]).status.success());
    let ex = dir.path().join("ex");
    let o = run(&[
        "extract",
        "--image",
        s(&out.join("stego.tensor")),
        "--eta",
        "fixed:1e308",
        "--steps",
        "5",
        "--out",
        s(&ex),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!ex.exists());
}

#[test]
fn attack_then_small_bench() {
    let dir = tempfile::tempdir().unwrap();
    let msg = message(dir.path(), 1024, 6);
    let out = dir.path().join("o");
    assert!(run(&["embed", "--message", s(&msg), "--out", s(&out)]).status.success());
    let att = dir.path().join("att");
    let o = run(&["attack", "--image", s(&out.join("stego.tensor")), "--channel", "bitdepth:4", "--out", s(&att)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(att.join("stego.tensor").exists());

    let bench = dir.path().join("bench");
    let o = run(&[
        "bench",
        "--trials",
        "2",
        "--channel",
        "identity,jpeg_like:50",
        "--steps",
        "0,10",
        "--out",
        s(&bench),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(bench.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("schema_version,"));
    assert!(bench.join("results.json").exists());
    assert_eq!(fs::read_dir(bench.join("traces")).unwrap().count(), 2);
}
