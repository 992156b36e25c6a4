//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use catsim::control::{compute_command, ControllerParams};
use catsim::msgbus::{Bus, Twist};
use catsim::recorder::{analyze_bag, read_bag, write_bag, AnalyzeOptions, Bag};
use catsim::scenario::{
    build_simulation, load_trajectories, parse_scenario, run_config, InjectorSpec, LoadedScenario, ScenarioConfig,
    ScenarioError, VehicleSpec,
};
use catsim::vehicle::{DynamicsParams, Fleet, VehicleConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn shipped_scenario() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/two_car.toml")
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn hash_dir(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let bytes = std::fs::read(&path).unwrap();
        out.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            hex::encode(Sha256::digest(&bytes)),
        );
    }
    out
}

fn run_shipped() -> Result<(Bag, Duration), String> {
    let start = Instant::now();
    let loaded = LoadedScenario::from_file(&shipped_scenario(), &[]).map_err(|e| e.to_string())?;
    let bag = loaded.run().map_err(|e| e.to_string())?;
    Ok((bag, start.elapsed()))
}

fn a1_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    let mut slowest = Duration::ZERO;
    for i in 0..2 {
        let (bag, took) = run_shipped()?;
        slowest = slowest.max(took);
        let dir = tmp.path().join(format!("run{i}"));
        write_bag(&bag, &dir).map_err(|e| e.to_string())?;
        hashes.push(hash_dir(&dir));
    }
    check(hashes[0].len() == 7, format!("expected 6 topic files + manifest, got {}", hashes[0].len()))?;
    check(hashes[0] == hashes[1], "bag directories differ between runs")?;
    check(slowest < Duration::from_secs(5), format!("120 s run took {slowest:?}"))?;
    Ok(format!("{} files hash-identical; 120 s run in {:.3} s", hashes[0].len(), slowest.as_secs_f64()))
}

fn a2_plant_fidelity() -> Outcome {
    let mut bus = Bus::new();
    let mut fleet = Fleet::new();
    let id = fleet
        .spawn(&mut bus, VehicleConfig::at("ego", 0.0), DynamicsParams { tau: 0.5, ..Default::default() })
        .map_err(|e| e.to_string())?;
    fleet.get_mut(id).apply_command(&Twist::speed(5.0)).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    // Analytic 5(1 - e^{-t/0.5}) at t = 0.5 and 1.0.
    let frozen = [(10u32, 3.161), (20u32, 4.323)];
    for k in 1..=20u32 {
        let v = fleet.get_mut(id).step_dynamics(0.05).v;
        if let Some(&(_, rounded)) = frozen.iter().find(|(kk, _)| *kk == k) {
            let t = k as f64 * 0.05;
            let exact = 5.0 * (1.0 - (-t / 0.5f64).exp());
            check((exact - rounded).abs() < 5e-4, format!("oracle {exact} vs frozen {rounded}"))?;
            let rel = ((v - exact) / exact).abs();
            check(rel <= 0.02, format!("t={t}: v={v} vs {exact} (rel {rel:.4})"))?;
            detail.push(format!("v({t})={v:.4} vs {exact:.4} rel {rel:.2e}"));
        }
    }
    Ok(detail.join("; "))
}

fn pinned_pair(duration: f64) -> ScenarioConfig {
    ScenarioConfig {
        duration,
        vehicles: vec![
            VehicleSpec {
                v0: 4.0,
                ..VehicleSpec::new("leader", 30.0)
            },
            VehicleSpec {
                v0: 1.0,
                laser_sensor: true,
                ..VehicleSpec::new("ego", 0.0)
            },
        ],
        injectors: vec![
            InjectorSpec::inline("leader", &[(0.0, 4.0)]),
            InjectorSpec::inline("ego", &[(0.0, 1.0)]),
        ],
        ..Default::default()
    }
}

fn a3_estimator_exactness() -> Outcome {
    let bag = run_config(&pinned_pair(15.0)).map_err(|e| e.to_string())?;
    let rel = &bag.series("/ego/rel_vel").ok_or("no rel_vel series")?.records;
    let vel = &bag.series("/ego/vel").ok_or("no ego vel series")?.records;
    let lead = &bag.series("/ego/lead_dist").ok_or("no lead_dist series")?.records;
    check(rel.len() == 300 && vel.len() == 300, "expected 300 samples")?;
    check(lead.iter().all(|r| r.fields[0] < 80.0), "leader left lidar range")?;
    check(rel[0].fields[2] == 0.0, "first sample must read zero")?;
    let mut worst_rel: f64 = 0.0;
    let mut worst_lead: f64 = 0.0;
    for (r, v) in rel.iter().zip(vel).skip(1) {
        check(r.t == v.t, "rel_vel and vel stamps disagree")?;
        let rel_vel = r.fields[2];
        worst_rel = worst_rel.max((rel_vel - 3.0).abs());
        worst_lead = worst_lead.max((rel_vel + v.fields[0] - 4.0).abs());
    }
    check(worst_rel <= 1e-9, format!("rel_vel error {worst_rel:e}"))?;
    check(worst_lead <= 1e-9, format!("v_lead error {worst_lead:e}"))?;
    Ok(format!("max |rel_vel-3| = {worst_rel:.1e}, max |v_lead-4| = {worst_lead:.1e}"))
}

fn a4_closed_loop() -> Outcome {
    let loaded = LoadedScenario::from_file(&shipped_scenario(), &[]).map_err(|e| e.to_string())?;
    let cfg = &loaded.config;
    check(cfg.vehicles.iter().any(|v| v.name == "leader" && v.x == 30.0), "leader not at X=30")?;
    check(cfg.vehicles.iter().any(|v| v.name == "ego" && v.x == 0.0 && v.laser_sensor), "ego not at X=0 with lidar")?;
    check(cfg.controllers[0].r == Some(2.5) && cfg.execute_at == 0.0 && cfg.duration == 120.0, "controller/gate settings")?;
    let traj = &loaded.trajectories["leader"];
    check(*traj.speeds().last().unwrap() == 2.0, "leader profile must settle at 2.0 m/s")?;

    let bag = loaded.run().map_err(|e| e.to_string())?;
    let lead = &bag.series("/ego/lead_dist").ok_or("no lead_dist")?.records;
    check(lead.last().map(|r| r.t) == Some(120.0), "run did not cover 120 s")?;
    let min_gap = lead.iter().map(|r| r.fields[0]).fold(f64::INFINITY, f64::min);
    check(min_gap > 0.0, format!("collision: min gap {min_gap}"))?;

    let metrics = analyze_bag(&bag, &AnalyzeOptions { window_fraction: 0.5, ..Default::default() });
    check(!metrics.collision, "analyze reports a collision")?;
    let (lo, hi) = metrics.headway["ego"].band.ok_or("no headway after 60 s")?;
    // Smallest band that contains 30 m and every post-transient sample.
    let (lo30, hi30) = (lo.min(30.0), hi.max(30.0));
    let half_width = (hi30 - lo30) / 2.0;
    check(half_width <= 5.0, format!("band [{lo30}, {hi30}] half-width {half_width}"))?;
    Ok(format!(
        "min gap {min_gap:.3} m; h(t>=60) in [{lo:.3}, {hi:.3}], band incl. 30 m half-width {half_width:.3} m"
    ))
}

fn a5_controller() -> Outcome {
    let p = ControllerParams { r: 2.5, ..Default::default() };
    let cases = [(35.0, 0.0, 2.0, 3.5), (30.0, 0.0, 2.0, 2.5), (20.0, 0.0, 2.0, 1.5), (20.0, 0.0, 10.0, 0.0)];
    for (h, rv, ve, want) in cases {
        let got = compute_command(h, rv, ve, &p).map_err(|e| e.to_string())?;
        check(got == want, format!("h={h} v_ego={ve}: got {got}, want {want}"))?;
    }
    let literal = ControllerParams { deadband: 0.0, ..p };
    let v_lead = 2.0;
    let law = |h: f64| {
        if h > 30.0 {
            2.5 + 0.5 * v_lead
        } else if h == 30.0 {
            2.5
        } else {
            2.5 - 0.5 * v_lead
        }
    };
    for h in [0.0, 29.0, 30.0_f64.next_down_compat(), 30.0, 30.0_f64.next_up_compat(), 31.0, 80.0] {
        let got = compute_command(h, 0.0, v_lead, &literal).map_err(|e| e.to_string())?;
        check(got == law(h), format!("deadband=0, h={h}: got {got}, want {}", law(h)))?;
    }
    Ok("4 examples exact; deadband=0 matches the three-case law on 7 probes".into())
}

trait NextCompat {
    fn next_up_compat(self) -> f64;
    fn next_down_compat(self) -> f64;
}

impl NextCompat for f64 {
    fn next_up_compat(self) -> f64 {
        f64::from_bits(self.to_bits() + 1)
    }
    fn next_down_compat(self) -> f64 {
        f64::from_bits(self.to_bits() - 1)
    }
}

fn a6_injector_gate() -> Outcome {
    let cfg = ScenarioConfig {
        duration: 12.0,
        execute_at: 10.0,
        vehicles: vec![VehicleSpec::new("leader", 30.0)],
        injectors: vec![InjectorSpec::inline("leader", &[(0.0, 1.0), (5.0, 2.0)])],
        ..Default::default()
    };
    let traj = load_trajectories(&cfg, Path::new(".")).map_err(|e| e.to_string())?;
    let mut sim = build_simulation(&cfg, &traj).map_err(|e| e.to_string())?;
    let gate_tick = (1u64..).find(|k| *k as f64 * cfg.step >= cfg.execute_at).unwrap();
    sim.advance(gate_tick).map_err(|e| e.to_string())?;
    check(sim.clock() == 10.0, format!("clock {}", sim.clock()))?;
    let s = sim.vehicle_state("leader").unwrap();
    check(s.x == 30.0 && s.y == 0.0, format!("leader moved before the gate: {s:?}"))?;
    sim.run_for(cfg.duration - sim.clock()).map_err(|e| e.to_string())?;
    check(sim.vehicle_state("leader").unwrap().x > 30.0, "leader never moved after the gate")?;

    let cmds = &sim.bag().series("/leader/cmd_vel").ok_or("no cmd series")?.records;
    let first = cmds.iter().find(|r| r.fields[0] != 0.0).ok_or("no nonzero command")?;
    let expected_t = gate_tick as f64 * cfg.step;
    check(first.t == expected_t, format!("first nonzero command at {} (want {expected_t})", first.t))?;
    Ok(format!("leader x(10 s) = 30 exactly; first nonzero command at t = {}", first.t))
}

fn a7_bag_roundtrip() -> Outcome {
    let (bag, _) = run_shipped()?;
    let tmp = tempfile::tempdir().unwrap();
    write_bag(&bag, tmp.path()).map_err(|e| e.to_string())?;
    let back = read_bag(tmp.path()).map_err(|e| e.to_string())?;
    check(back == bag, "reloaded bag differs")?;
    let fields: usize = bag.topics().map(|(_, s)| s.records.iter().map(|r| r.fields.len() + 1).sum::<usize>()).sum();

    // Independent pass over the raw CSV text.
    let text = std::fs::read_to_string(tmp.path().join("ego-lead_dist.csv")).unwrap();
    let brute = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .filter(|h| *h < 80.0)
        .fold(f64::INFINITY, f64::min);
    let metrics = catsim::recorder::analyze(tmp.path(), &AnalyzeOptions::default()).map_err(|e| e.to_string())?;
    check(metrics.min_gap == Some(brute), format!("analyze {:?} vs brute force {brute}", metrics.min_gap))?;
    Ok(format!("{fields} numbers reproduced exactly; min_gap {brute} matches"))
}

fn a8_config_contract() -> Outcome {
    let dup = "[[vehicles]]\nname = \"ego\"\n[[vehicles]]\nname = \"ego\"\nx = 30.0\n";
    check(
        matches!(parse_scenario(dup), Err(ScenarioError::DuplicateRobot(ref n)) if n == "ego"),
        "duplicate names accepted",
    )?;
    let cfg = parse_scenario("[[vehicles]]\nname = \"ego\"\nlaser_sensor = true\n[[controllers]]\nrobot = \"ego\"\n")
        .map_err(|e| e.to_string())?;
    check(cfg.controllers[0].r == Some(20.0), format!("default r {:?}", cfg.controllers[0].r))?;
    check(cfg.step == 0.05, format!("default step {}", cfg.step))?;
    let sim = build_simulation(&cfg, &BTreeMap::new()).map_err(|e| e.to_string())?;
    let r_param = sim.bus().get_param("/ego/r").and_then(|p| p.as_f64());
    check(r_param == Some(20.0), format!("/ego/r param {r_param:?}"))?;
    Ok("duplicate rejected; r defaults to 20.0; step defaults to 0.05".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("A1 determinism", a1_determinism),
        ("A2 plant fidelity", a2_plant_fidelity),
        ("A3 estimator exactness", a3_estimator_exactness),
        ("A4 closed-loop two-car following", a4_closed_loop),
        ("A5 controller unit suite", a5_controller),
        ("A6 injector gate", a6_injector_gate),
        ("A7 bag round-trip", a7_bag_roundtrip),
        ("A8 config contract", a8_config_contract),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
