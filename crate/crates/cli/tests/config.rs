use std::fs;

use flashar_cli::config::{RunConfig, Source, KEYS};

/// A value different from `current` that still parses for `key`.
fn other(key: &str, current: &str, nth: u32) -> String {
    if key == "sample.mode" {
        return if (current == "raster") ^ (nth == 1) { "diagonal" } else { "raster" }.into();
    }
    if let Ok(b) = current.parse::<bool>() {
        // Only two values: the flag layer restores the default.
        return (b ^ (nth == 0)).to_string();
    }
    if current == "auto" {
        return (3 + nth).to_string();
    }
    if let Ok(n) = current.parse::<u64>() {
        return (n + 1 + nth as u64).to_string();
    }
    if current.parse::<f64>().is_ok() {
        // Dyadic values survive both f32 and f64 fields unchanged.
        let picks = ["0.25", "0.375", "0.625"];
        return picks.iter().filter(|p| **p != current).nth(nth as usize).unwrap().to_string();
    }
    format!("{current}-{nth}")
}

#[test]
fn every_key_has_a_default_and_round_trips() {
    let cfg = RunConfig::default();
    for key in KEYS {
        let v = cfg.get(key).unwrap_or_else(|| panic!("{key} has no value"));
        let mut back = RunConfig::default();
        back.set(key, &v, Source::File).unwrap();
        assert_eq!(back.get(key), Some(v), "{key}");
    }
}

#[test]
fn precedence_holds_for_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let defaults = RunConfig::default();
    for key in KEYS {
        let base = defaults.get(key).unwrap();
        let (from_file, from_flag) = (other(key, &base, 0), other(key, &base, 1));
        assert_ne!(from_file, from_flag, "{key}");
        let path = dir.path().join("run.conf");
        fs::write(&path, format!("# one key\n{key} = {from_file}\n")).unwrap();

        let plain = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(plain.get(key).unwrap(), base, "{key}: default");
        assert_eq!(plain.source(key), Source::Default);

        let filed = RunConfig::resolve(Some(&path), &[]).unwrap();
        assert_eq!(filed.get(key).unwrap(), from_file, "{key}: file over default");
        assert_eq!(filed.source(key), Source::File);

        let flag = vec![(key.to_string(), from_flag.clone())];
        let flagged = RunConfig::resolve(Some(&path), &flag).unwrap();
        assert_eq!(flagged.get(key).unwrap(), from_flag, "{key}: flag over file");
        assert_eq!(flagged.source(key), Source::Flag);

        let flag_only = RunConfig::resolve(None, &flag).unwrap();
        assert_eq!(flag_only.get(key).unwrap(), from_flag, "{key}: flag over default");

        for other_key in KEYS.iter().filter(|k| *k != key) {
            assert_eq!(flagged.get(other_key), defaults.get(other_key), "{key} leaked into {other_key}");
        }
    }
}

#[test]
fn later_flags_win() {
    let flags = vec![("seed".to_string(), "3".to_string()), ("seed".to_string(), "4".to_string())];
    assert_eq!(RunConfig::resolve(None, &flags).unwrap().seed, 4);
}

#[test]
fn resolved_text_reproduces_the_config() {
    let flags = vec![
        ("model.d_model".to_string(), "32".to_string()),
        ("adapt.lr".to_string(), "0.0003".to_string()),
        ("checkpoint.path".to_string(), "x/y.ckpt".to_string()),
    ];
    let cfg = RunConfig::resolve(None, &flags).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.resolved");
    fs::write(&path, cfg.to_text()).unwrap();
    let back = RunConfig::resolve(Some(&path), &[]).unwrap();
    assert_eq!(back.to_text(), cfg.to_text());
    assert_eq!(back.adapt_schedule(), cfg.adapt_schedule());
    assert_eq!(back.model_config(), cfg.model_config());
}

#[test]
fn paper_defaults() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.loss.lambda_aux, 0.05);
    assert_eq!(cfg.adapt.stage1_fraction, 0.2);
    assert_eq!(cfg.adapt.base_lr, 2e-5);
    assert_eq!(cfg.cfg.scale, 2.0);
    assert!(cfg.cfg.enabled);
}
