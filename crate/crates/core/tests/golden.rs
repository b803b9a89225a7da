mod common;

use std::path::PathBuf;

use common::{golden_dir, golden_name, GOLDEN};
use dbft_sim::scenario::{builtin, BUILTINS};
use dbft_sim::{run_scenario, Protocol, Scenario};

fn render(name: &str, protocol: &str) -> String {
    let mut s = builtin(name).unwrap();
    s.config.protocol = protocol.parse::<Protocol>().unwrap();
    run_scenario(&s).unwrap().0.render()
}

#[test]
fn traces_match_golden_files() {
    let update = std::env::var_os("DBFT_UPDATE_GOLDEN").is_some();
    for (name, protocol) in GOLDEN {
        let path = golden_dir().join(format!("{}.trace", golden_name(name, protocol)));
        let text = render(name, protocol);
        if update {
            std::fs::create_dir_all(golden_dir()).unwrap();
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(text == want, "{name} {protocol} differs from {}", path.display());
    }
}

#[test]
fn repeated_runs_are_identical() {
    for name in BUILTINS {
        for protocol in ["two-phase", "three-phase"] {
            assert_eq!(render(name, protocol), render(name, protocol), "{name} {protocol}");
        }
    }
}

#[test]
fn builtin_files_are_stable() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for (name, file) in [
        ("honest", "honest.dbft"),
        ("attack-f2", "attack_f2.dbft"),
        ("attack-f1", "attack_f1.dbft"),
    ] {
        let text = builtin(name).unwrap().to_text();
        assert_eq!(text, builtin(name).unwrap().to_text());
        let on_disk = std::fs::read_to_string(dir.join(file)).unwrap();
        assert_eq!(on_disk, text, "{file}");
        assert_eq!(Scenario::parse(&on_disk).unwrap(), builtin(name).unwrap());
    }
}

#[test]
fn honest_builtin_has_no_adversary() {
    let s = builtin("honest").unwrap();
    assert!(s.plan.controlled.is_empty() && s.plan.directives.is_empty());
    assert!(s.to_text().contains("adversary.controlled = \n"));
}
