use muse_core::config::{RunConfig, KEYS};
use muse_core::MuseError;

#[test]
fn defaults_round_trip_through_text() {
    let c = RunConfig::default();
    for (k, d, _) in KEYS {
        let got = c.get(k).unwrap_or_else(|| panic!("no getter for {k}"));
        let mut again = RunConfig::default();
        again.set(k, &got).unwrap();
        assert_eq!(again, c, "{k}: default {d} read back as {got}");
    }
    let mut back = RunConfig::default();
    back.seed = 7;
    back.apply_text(&c.to_text(), None).unwrap();
    assert_eq!(back, c);
}

#[test]
fn overrides_and_comments() {
    let mut c = RunConfig::default();
    c.apply_text("# comment\n\nseed = 9  # trailing\nlocal.head_hidden = 32, 8\ntrain.global_lr=0.5\n", None).unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.local.head_hidden, [32, 8]);
    assert_eq!(c.global_train().lr_base, 0.5);
    assert_eq!(c.local_train().seed, 9);
    assert_ne!(c.global_train().seed, 9);
}

#[test]
fn errors_name_the_line() {
    let mut c = RunConfig::default();
    let e = c.apply_text("seed = 1\nlocal.d_modle = 3\n", None).unwrap_err();
    assert!(matches!(e, MuseError::Config { line: Some(2), .. }), "{e}");
    let msg = e.to_string();
    assert!(msg.contains("local.d_modle") && msg.contains('2'), "{msg}");

    let e = c.apply_text("seed = x\n", None).unwrap_err();
    assert!(matches!(e, MuseError::Config { line: Some(1), .. }));
    assert!(e.to_string().contains("seed"));

    let e = c.apply_text("\n\njust words\n", None).unwrap_err();
    assert!(matches!(e, MuseError::Config { line: Some(3), .. }));
}

#[test]
fn file_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.conf");
    std::fs::write(&p, "seed = 1\nbogus = 2\n").unwrap();
    let msg = RunConfig::from_file(&p).unwrap_err().to_string();
    assert!(msg.contains("run.conf") && msg.contains("bogus"), "{msg}");
    assert!(RunConfig::from_file(&dir.path().join("absent.conf")).is_err());
}

#[test]
fn every_key_is_documented() {
    let help = RunConfig::help_text();
    for (k, d, doc) in KEYS {
        assert!(!doc.is_empty(), "{k}");
        assert!(help.contains(k) && help.contains(&format!("[default: {d}]")), "{k}");
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "conf") {
            RunConfig::from_file(&p).unwrap();
            n += 1;
        }
    }
    assert!(n > 0);
}
