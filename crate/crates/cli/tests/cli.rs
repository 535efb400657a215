use std::path::Path;
use std::process::Command;

use htm_cli::render::render_plan;
use htm_cli::{run, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use htm_core::world::{generate_context, observe, AgentState, ObsMode, WorldConfig};

fn htm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_htm"))
        .args(args)
        .env_remove("HTM_SEED")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "data": {"contexts": 4, "trajectories": 4, "horizon": 12, "held_out": 2},
        "cvae": {"epochs": 2},
        "cpc": {"epochs": 2, "steps_per_epoch": 5, "validation_batches": 1, "pool_per_context": 10},
        "sptm": {"epochs": 2, "steps_per_epoch": 5, "validation_batches": 1},
        "inverse": {"epochs": 2},
        "planning": {"samples": 12},
        "execution": {"n": 30, "r": 10},
        "eval": {"tasks": 2, "ablation_tasks": 1},
        "paths": {
            "data": dir.join("data"),
            "models": dir.join("models"),
            "reports": dir.join("reports"),
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    assert_eq!(run(["htm"]), EXIT_USAGE);
    let out = htm(&[]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    assert_eq!(run(["htm", "teleport"]), EXIT_USAGE);
    assert_eq!(run(["htm", "selftest", "--bogus"]), EXIT_USAGE);
}

#[test]
fn help_exits_0() {
    assert_eq!(run(["htm", "--help"]), EXIT_OK);
}

#[test]
fn invalid_config_value_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"world":{"a_max":-1}}"#).unwrap();
    let out = htm(&["collect", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("world.a_max"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"execution":{"n":500,"warp":1}}"#).unwrap();
    let out = htm(&["collect", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("execution"));
}

#[test]
fn missing_config_file_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent.json");
    assert_eq!(run(["htm", "collect", "--config", path.to_str().unwrap()]), EXIT_FAILURE);
}

#[test]
fn bad_seed_override_exits_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_htm"))
        .args(["collect"])
        .env("HTM_SEED", "minus one")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("HTM_SEED"));
}

#[test]
fn selftest_passes() {
    let out = htm(&["selftest"]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.matches(": ok").count(), 6, "{text}");
}

#[test]
fn full_pipeline_writes_deterministic_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for cmd in ["collect", "train-cvae", "train-cpc", "train-sptm", "train-inverse"] {
        let out = htm(&[cmd, "--config", cfg]);
        assert_eq!(out.status.code(), Some(EXIT_OK), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let models = dir.path().join("models");
    for f in ["cvae.htmc", "cpc.htmc", "sptm.htmc", "inverse.htmc"] {
        assert!(models.join(f).exists(), "{f}");
        assert!(models.join(format!("{f}.provenance.json")).exists(), "{f}");
    }
    assert!(dir.path().join("data/manifest.json").exists());

    let report = dir.path().join("report.csv");
    let out = htm(&["evaluate", "--config", cfg, "--out", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "task_id,method,scheme,success,steps,final_distance,feasibility,completeness,fidelity,seed"
    );
    // 2 tasks × 3 methods.
    assert_eq!(lines.count(), 6);
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.csv.provenance.json")).unwrap())
            .unwrap();
    assert_eq!(prov["config"]["execution"]["n"], 30);
    assert_eq!(prov["config_hash"].as_str().unwrap().len(), 64);

    let again = dir.path().join("again.csv");
    assert_eq!(run(["htm", "evaluate", "--config", cfg, "--out", again.to_str().unwrap()]), EXIT_OK);
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&again).unwrap());

    let grid = dir.path().join("ablation.csv");
    assert_eq!(run(["htm", "ablate", "--config", cfg, "--out", grid.to_str().unwrap()]), EXIT_OK);
    assert!(dir.path().join("ablation.txt").exists());
    assert!(dir.path().join("ablation.json").exists());

    let plan = dir.path().join("plan.json");
    assert_eq!(run(["htm", "plan", "--config", cfg, "--task", "1", "--out", plan.to_str().unwrap()]), EXIT_OK);
    let record: htm_cli::PlanRecord = serde_json::from_str(&std::fs::read_to_string(&plan).unwrap()).unwrap();
    assert_eq!(record.task_id, 1);
    assert_eq!(record.samples, 12);
    assert_eq!(record.plan.nodes.first(), Some(&12));
    assert_eq!(record.plan.nodes.last(), Some(&13));

    let image = dir.path().join("plan.ppm");
    assert_eq!(
        run(["htm", "render", "--plan", plan.to_str().unwrap(), "--out", image.to_str().unwrap(), "--panel", "8"]),
        EXIT_OK
    );
    let bytes = std::fs::read(&image).unwrap();
    let header = format!("P6\n{} 8\n255\n", 8 * record.plan.nodes.len());
    assert!(bytes.starts_with(header.as_bytes()));
    assert_eq!(bytes.len(), header.len() + 8 * 8 * record.plan.nodes.len() * 3);

    let trace = dir.path().join("trace.json");
    assert_eq!(
        run(["htm", "execute", "--config", cfg, "--method", "inverse", "--out", trace.to_str().unwrap()]),
        EXIT_OK
    );
    let trace: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(trace["method"], "inverse_model");
    assert!(trace["result"]["steps"].as_u64().unwrap() <= 30);

    assert_eq!(
        run(["htm", "plan", "--config", cfg, "--method", "inverse", "--out", plan.to_str().unwrap()]),
        EXIT_USAGE
    );
}

fn fixture_strip(panel: usize) -> Vec<u8> {
    let world = WorldConfig::default();
    let ctx = generate_context(7, 3, &world).unwrap();
    let states = [AgentState::new(0.6, 0.6), AgentState::new(1.4, 2.2), AgentState::new(2.3, 0.5)];
    let nodes: Vec<_> = states.iter().map(|s| observe(&ctx, &world, s, ObsMode::State)).collect();
    render_plan(&nodes, &ctx, &world, Some(states[2]), panel).unwrap()
}

#[test]
fn render_matches_golden_bytes() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/strip.ppm");
    // Regenerate with HTM_BLESS=1 after an intentional rendering change.
    if std::env::var_os("HTM_BLESS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, fixture_strip(24)).unwrap();
    }
    assert_eq!(fixture_strip(24), std::fs::read(golden).unwrap());
}

#[test]
fn render_shape_follows_plan_length() {
    let bytes = fixture_strip(10);
    let header = b"P6\n30 10\n255\n";
    assert!(bytes.starts_with(header));
    assert_eq!(bytes.len(), header.len() + 30 * 10 * 3);
    let world = WorldConfig::default();
    let ctx = generate_context(7, 3, &world).unwrap();
    let one = observe(&ctx, &world, &AgentState::new(1.4, 1.4), ObsMode::State);
    let single = render_plan(&[one], &ctx, &world, None, 5).unwrap();
    assert!(single.starts_with(b"P6\n5 5\n255\n"));
    assert!(render_plan(&[], &ctx, &world, None, 5).is_err());
}
