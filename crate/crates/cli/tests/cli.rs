use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
queries_per_block = 4

[train]
epochs = 3
places_per_batch = 3
images_per_place = 3

[synth]
places = 6
images_per_place = 3
dim = 8
tokens = 4
seed = 5
"#;

fn vlaq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlaq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vlaq(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("run.toml"), config).unwrap();
        let ws = Self {
            config: s(&root.join("run.toml")),
            _dir: dir,
            root,
        };
        ok(&["--config", &ws.config, "--out", &ws.path("data"), "synth"]);
        ws
    }

    fn path(&self, rel: &str) -> String {
        s(&self.root.join(rel))
    }

    fn manifest(&self) -> String {
        self.path("data/manifest.toml")
    }

    /// train, encode and eval into `out`; returns the eval stdout.
    fn full_run(&self, out: &str) -> String {
        let out = self.path(out);
        let manifest = self.manifest();
        let ck = format!("{out}/checkpoint.vprc");
        let desc = format!("{out}/descriptors.vprd");
        ok(&[
            "--config",
            &self.config,
            "--out",
            &out,
            "train",
            "--manifest",
            &manifest,
        ]);
        ok(&[
            "--config",
            &self.config,
            "--out",
            &out,
            "encode",
            "--manifest",
            &manifest,
            "--checkpoint",
            &ck,
        ]);
        let e = ok(&["--out", &out, "eval", "--manifest", &manifest, "--descriptors", &desc]);
        String::from_utf8(e.stdout).unwrap()
    }
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn read(p: &str) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{p}: {e}"))
}

#[test]
fn seeded_pipeline_is_byte_identical() {
    let ws = Workspace::new(SMALL);
    let a = ws.full_run("a");
    let b = ws.full_run("b");
    assert_eq!(a, b);
    for f in [
        "descriptors.vprd",
        "checkpoint.vprc",
        "report.json",
        "report.txt",
        "train.log",
    ] {
        assert_eq!(
            read(&ws.path(&format!("a/{f}"))),
            read(&ws.path(&format!("b/{f}"))),
            "{f}"
        );
    }
    assert!(a.contains("dataset K recall"), "{a}");
}

#[test]
fn train_log_has_one_line_per_step() {
    let ws = Workspace::new(SMALL);
    ws.full_run("run");
    let log = String::from_utf8(read(&ws.path("run/train.log"))).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step loss lr"));
    let steps: Vec<u64> = lines.map(|l| l.split(' ').next().unwrap().parse().unwrap()).collect();
    // 6 places in batches of 3 give 2 steps per epoch
    assert_eq!(steps, (0..6).collect::<Vec<_>>());
}

#[test]
fn zero_steps_writes_initial_checkpoint() {
    let ws = Workspace::new(&SMALL.replacen("[train]\n", "[train]\nmax_steps = 0\n", 1));
    let out = ws.path("zero");
    ok(&[
        "--config",
        &ws.config,
        "--out",
        &out,
        "train",
        "--manifest",
        &ws.manifest(),
    ]);
    let ck = format!("{out}/checkpoint.vprc");
    ok(&[
        "--config",
        &ws.config,
        "--out",
        &ws.path("fresh"),
        "encode",
        "--manifest",
        &ws.manifest(),
    ]);
    ok(&[
        "--config",
        &ws.config,
        "--out",
        &out,
        "encode",
        "--manifest",
        &ws.manifest(),
        "--checkpoint",
        &ck,
    ]);
    assert_eq!(
        read(&format!("{out}/descriptors.vprd")),
        read(&ws.path("fresh/descriptors.vprd"))
    );
    let log = String::from_utf8(read(&format!("{out}/train.log"))).unwrap();
    assert_eq!(log, "step loss lr\n");
}

#[test]
fn resume_continues_the_step_counter() {
    let ws = Workspace::new(&SMALL.replacen("[train]\n", "[train]\nmax_steps = 4\n", 1));
    let out = ws.path("r");
    ok(&[
        "--config",
        &ws.config,
        "--out",
        &out,
        "train",
        "--manifest",
        &ws.manifest(),
    ]);
    let more = ws.path("more.toml");
    fs::write(&more, SMALL).unwrap();
    let ck = format!("{out}/checkpoint.vprc");
    ok(&[
        "--config",
        &more,
        "--out",
        &out,
        "train",
        "--manifest",
        &ws.manifest(),
        "--checkpoint",
        &ck,
    ]);
    let log = String::from_utf8(read(&format!("{out}/train.log"))).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(' ').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2", "3", "4", "5"]);

    // the resumed run ends where an uninterrupted one does
    let full = ws.path("full");
    ok(&["--config", &more, "--out", &full, "train", "--manifest", &ws.manifest()]);
    assert_eq!(read(&ck), read(&format!("{full}/checkpoint.vprc")));
}

#[test]
fn missing_token_file_names_the_image() {
    let ws = Workspace::new(SMALL);
    fs::remove_file(ws.path("data/tokens/db_p002_01.dino.vprt")).unwrap();
    let out = vlaq(&[
        "--config",
        &ws.config,
        "--out",
        &ws.path("x"),
        "encode",
        "--manifest",
        &ws.manifest(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("db_p002_01"), "{err}");
}

#[test]
fn validation_errors_exit_with_one() {
    let ws = Workspace::new(SMALL);
    let bad = ws.path("bad.toml");
    fs::write(&bad, "seed = 1\nunknown_key = 2\n").unwrap();
    assert_eq!(vlaq(&["--config", &bad, "synth"]).status.code(), Some(1));
    assert_eq!(
        vlaq(&["encode", "--manifest", &ws.path("nope.toml")]).status.code(),
        Some(1)
    );
    assert_eq!(vlaq(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(vlaq(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_passes_and_perturbation_exits_with_two() {
    let ws = Workspace::new(SMALL);
    let out = ok(&["--out", &ws.path("g"), "gradcheck"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("loss.ms"), "{table}");
    assert!(fs::metadata(ws.path("g/gradcheck.txt")).is_ok());

    let bad = vlaq(&["gradcheck", "--perturb", "fusion.film"]);
    assert_eq!(bad.status.code(), Some(2));
    let text = String::from_utf8_lossy(&bad.stdout);
    let film = text.lines().find(|l| l.starts_with("fusion.film")).unwrap();
    assert!(film.contains("FAIL"), "{film}");
    assert_eq!(vlaq(&["gradcheck", "--perturb", "nonsense"]).status.code(), Some(1));
}

#[test]
fn fusion_variant_changes_descriptors() {
    let ws = Workspace::new(SMALL);
    let film = ws.path("film.toml");
    fs::write(&film, format!("fusion = \"film\"\n{SMALL}")).unwrap();
    ok(&[
        "--config",
        &ws.config,
        "--out",
        &ws.path("res"),
        "encode",
        "--manifest",
        &ws.manifest(),
    ]);
    ok(&[
        "--config",
        &film,
        "--out",
        &ws.path("film"),
        "encode",
        "--manifest",
        &ws.manifest(),
    ]);
    assert_ne!(
        read(&ws.path("res/descriptors.vprd")),
        read(&ws.path("film/descriptors.vprd"))
    );
}

#[test]
fn index_and_query_rank_the_same_place_first() {
    let ws = Workspace::new(SMALL);
    ws.full_run("run");
    let desc = ws.path("run/descriptors.vprd");
    ok(&["--out", &ws.path("run"), "index", "--descriptors", &desc]);
    let out = ok(&[
        "query",
        "--index",
        &ws.path("run/index.vprd"),
        "--descriptors",
        &desc,
        "--id",
        "q_p001_00",
        "--k",
        "3",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{text}");
    assert!(
        rows[0].split_whitespace().nth(1).unwrap().starts_with("db_p001_"),
        "{text}"
    );
}
