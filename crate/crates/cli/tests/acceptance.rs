//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion. Exits
//! non-zero on a failure only with `SHELFPICK_ACCEPTANCE_STRICT=1`, so the rest
//! of the workspace suite still runs.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shelfpick::commands::trial_config;
use shelfpick::Config;
use shelfpick_core::dataset::{generate_records, read_dataset, split, DatasetConfig, SplitSpec};
use shelfpick_core::eval::{closed_loop_eval, EvalMode, Policy, SuccessStats};
use shelfpick_core::image::{Class, Grid, LabelImage};
use shelfpick_core::math::{Quat, Vec3};
use shelfpick_core::perception::{mask_iou, match_clusters_to_objects, segment_region_growing, SegmentationParams};
use shelfpick_core::planner::{rank_and_select, risk_index, ActionCandidate, PlannerError, RegionAreas, ScoredCandidate};
use shelfpick_core::render::{id_mask, render, visible_ids, CameraSpec};
use shelfpick_core::sim::{
    generate_scene, settle, BoxShape, MaterialParams, ObjectId, ObjectSet, RigidState, Scene, SceneObject, ShelfSpec,
    SimConfig, World,
};
use shelfpick_neural::gradcheck::check_all;
use shelfpick_neural::{train, LearnedPredictor, ModelSpec, TrainConfig};

const FRICTION_TOL: f64 = 0.02;
const APEX_TOL: f64 = 0.10;
const DRIFT_MAX_M: f64 = 1e-3;
const GEN_RECORDS: usize = 100;
const RISK_CASES: usize = 1000;
const SEG_SCENES: usize = 50;
const SEG_COUNT_RATE: f64 = 0.90;
const SEG_IOU: f64 = 0.90;
const GRAD_TOL: f64 = 1e-3;
const TRAIN_RECORDS: usize = 2000;
const TRAIN_EPOCHS: usize = 10;
const TRAIN_MAX_SECS: f64 = 2.0 * 3600.0;
const LOSS_RATIO_MAX: f64 = 0.5;
const C_IOU_MIN: f64 = 0.25;
const RANDOM_TRIALS: usize = 200;
const RANDOM_RANGE: (f64, f64) = (0.35, 0.65);
const ORACLE_TRIALS: usize = 100;
const ORACLE_MIN: f64 = 0.80;
const LEARNED_MARGIN: f64 = 0.10;
const CLOSED_LOOP_MAX_SECS: f64 = 30.0 * 60.0;
const TRIAL_SEED: u64 = 1;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.failures += usize::from(!pass);
    }
}

fn object(id: ObjectId, hwd: (f64, f64, f64), pos: Vec3<f64>) -> SceneObject {
    let shape = BoxShape::from_hwd(hwd.0, hwd.1, hwd.2);
    SceneObject { id, shape, state: RigidState::at_rest(&shape, &MaterialParams::default(), pos, Quat::identity()) }
}

fn floor_world(material: MaterialParams) -> World<f64> {
    let mut world = World::new(SimConfig { material, ..SimConfig::default() });
    world.add_static(Vec3::new(0.0, -0.05, 0.0), Vec3::new(2.0, 0.05, 2.0), (&material).into());
    world
}

fn mechanics(report: &mut Report) {
    let cfg = SimConfig::default();

    let mut world = World::<f64>::new(cfg);
    world.add_object(&object(0, (0.02, 0.1, 0.1), Vec3::new(0.0, 1.0, 0.0)), (&cfg.material).into());
    world.step(cfg.dt);
    let b = &world.bodies[0];
    let ballistic = b.linear_velocity.y == -cfg.gravity * cfg.dt && b.position.y == 1.0 + b.linear_velocity.y * cfg.dt;

    let material = MaterialParams::default();
    let mut world = floor_world(material);
    let idx = world.add_object(&object(0, (0.02, 0.1, 0.1), Vec3::new(0.0, 0.01, 0.0)), (&material).into());
    settle(&mut world);
    world.bodies[idx].linear_velocity = Vec3::new(0.5, 0.0, 0.0);
    let dt = world.config.dt;
    for _ in 0..2 {
        world.step(dt);
    }
    let v0 = world.bodies[idx].linear_velocity.x;
    let steps = 12;
    for _ in 0..steps {
        world.step(dt);
    }
    let decel = (v0 - world.bodies[idx].linear_velocity.x) / (steps as f64 * dt);
    let friction_err = (decel / (material.dynamic_friction * world.config.gravity) - 1.0).abs();

    let material = MaterialParams { restitution: 0.5, ..MaterialParams::default() };
    let mut world = floor_world(material);
    let h0 = 0.2;
    let idx = world.add_object(&object(0, (0.02, 0.1, 0.1), Vec3::new(0.0, 0.01 + h0, 0.0)), (&material).into());
    let (mut bounced, mut apex) = (false, 0.0f64);
    for _ in 0..400 {
        world.step(dt);
        let b = &world.bodies[idx];
        bounced |= b.linear_velocity.y > 0.0;
        if bounced {
            apex = apex.max(b.position.y - 0.01);
            if b.linear_velocity.y < 0.0 {
                break;
            }
        }
    }
    let apex_err = (apex / (material.restitution.powi(2) * h0) - 1.0).abs();

    let mut drift = 0.0f64;
    for seed in [1, 2, 3] {
        let s = generate_scene(&ShelfSpec::default(), ObjectSet::Varied, 6, seed, &cfg).expect("pile");
        let mut world = World::<f64>::from_scene(&s, cfg);
        for _ in 0..1000 {
            world.step(cfg.dt);
        }
        for o in &s.objects {
            let b = &world.bodies[world.body_index(o.id).expect("body")];
            drift = drift.max((b.position - o.state.position).norm());
        }
    }
    report.line(
        "mechanics",
        ballistic && friction_err < FRICTION_TOL && apex_err < APEX_TOL && drift < DRIFT_MAX_M,
        format!(
            "ballistic exact {ballistic}; friction error {:.2}% (< {:.0}%); apex error {:.2}% (< {:.0}%); \
             max pile drift {:.3} mm over 1000 steps (< {} mm)",
            100.0 * friction_err,
            100.0 * FRICTION_TOL,
            100.0 * apex_err,
            100.0 * APEX_TOL,
            drift * 1e3,
            DRIFT_MAX_M * 1e3
        ),
    );
}

fn gen_determinism(report: &mut Report, dir: &Path) {
    let bin = env!("CARGO_BIN_EXE_shelfpick");
    let run = |name: &str| {
        let out = dir.join(name);
        let status = Command::new(bin)
            .args(["gen", "--quiet", "--scenes", &GEN_RECORDS.to_string(), "--seed", "7", "--out"])
            .arg(&out)
            .env_remove("SHELFPICK_CONFIG")
            .stdout(std::process::Stdio::null())
            .status()
            .expect("run shelfpick gen");
        assert!(status.success(), "shelfpick gen failed");
        out
    };
    let t = Instant::now();
    let (a, b) = (run("a.shpk"), run("b.shpk"));
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let records = read_dataset(&a).map(|r| r.len()).unwrap_or(0);
    report.line(
        "gen determinism",
        ba == bb && records >= GEN_RECORDS,
        format!("{records} records, {} bytes, identical {} ({:.0} s)", ba.len(), ba == bb, t.elapsed().as_secs_f64()),
    );
}

fn risk_and_selection(report: &mut Report) {
    let mut label: LabelImage = Grid::new(64, 64, Class::Background);
    for i in 0..1000 {
        label.data[i * 4 % 4096] = Class::Collapse;
    }
    let hand = risk_index(&label);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    for _ in 0..RISK_CASES {
        // Random labels: r_c against a direct count.
        let w = rng.random_range(1..20usize);
        let h = rng.random_range(1..20usize);
        let lab: LabelImage = Grid::from_vec(w, h, (0..w * h).map(|_| Class::from_code(rng.random_range(0..4)).unwrap()).collect());
        let c = lab.data.iter().filter(|&&c| c == Class::Collapse).count();
        let risk_ok = risk_index(&lab) == c as f64 / (w * h) as f64;

        // Random scored sets with coarse risks so ties are common.
        let n = rng.random_range(1..6usize);
        let mut scored = Vec::new();
        for e in 0..n {
            for s in (0..n).filter(|&s| s != e) {
                scored.push(ScoredCandidate {
                    candidate: ActionCandidate {
                        extract: e,
                        support: Some(s),
                        extract_id: None,
                        support_id: None,
                        extract_point: (0.0, 0.0),
                        support_point: None,
                    },
                    risk: rng.random_range(0..4) as f64 / 8.0,
                    areas: RegionAreas::default(),
                    reachable: rng.random_bool(0.6),
                });
            }
        }
        scored.retain(|_| rng.random_bool(0.8));
        let mut best: Option<&ScoredCandidate> = None;
        for s in scored.iter().filter(|s| s.reachable) {
            let key = |x: &ScoredCandidate| (x.risk, x.candidate.extract, x.candidate.support);
            if best.is_none_or(|b| key(s) < key(b)) {
                best = Some(s);
            }
        }
        let got = rank_and_select(scored.clone());
        let select_ok = match (best, &got) {
            (Some(b), Ok(r)) => r.selected == *b && r.ranked.windows(2).all(|w| w[0].risk <= w[1].risk),
            (None, Err(PlannerError::AllUnreachable)) => true,
            _ => false,
        };
        mismatches += usize::from(!(risk_ok && select_ok));
    }
    report.line(
        "risk index and selection",
        hand == 0.244140625 && mismatches == 0,
        format!("1000 C px at 64x64 -> {hand}; {mismatches} mismatches over {RISK_CASES} randomized cases"),
    );
}

fn segmentation(report: &mut Report) {
    let cam = CameraSpec::default();
    let params = SegmentationParams::for_camera(&cam);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut counts_ok, mut ious) = (0, Vec::new());
    for _ in 0..SEG_SCENES {
        let n = rng.random_range(1..=6usize);
        let mut cells: Vec<usize> = (0..6).collect();
        for i in (1..6).rev() {
            cells.swap(i, rng.random_range(0..=i));
        }
        // One box per cell of a 3x2 grid: gaps of at least 4 cm.
        let objects = cells[..n]
            .iter()
            .enumerate()
            .map(|(id, &cell)| {
                let (cx, cy) = (-0.15 + 0.15 * (cell % 3) as f64, 0.075 + 0.15 * (cell / 3) as f64);
                let hwd = (rng.random_range(0.02..0.1), rng.random_range(0.05..0.11), 0.08);
                object(id as u8, hwd, Vec3::new(cx, cy, rng.random_range(-0.25..-0.1)))
            })
            .collect();
        let scene = Scene { shelf: ShelfSpec::default(), objects, seed: 0, object_set: ObjectSet::Varied };
        let (depth, inst) = render(&scene, &cam);
        let seg = segment_region_growing(&depth, &params);
        let visible = visible_ids(&inst);
        counts_ok += usize::from(seg.count() == visible.len());
        let matches = match_clusters_to_objects(&seg, &inst);
        for id in visible {
            let truth = id_mask(&inst, id);
            let best = seg
                .clusters
                .iter()
                .zip(&matches)
                .filter(|(_, m)| **m == Some(id))
                .map(|(c, _)| mask_iou(c, &truth))
                .fold(0.0, f64::max);
            ious.push(best);
        }
    }
    let rate = counts_ok as f64 / SEG_SCENES as f64;
    let mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
    report.line(
        "segmentation",
        rate >= SEG_COUNT_RATE && mean_iou >= SEG_IOU,
        format!(
            "cluster count correct {counts_ok}/{SEG_SCENES} (>= {:.0}%); mean per-object IoU {mean_iou:.4} over {} objects, min {:.4}",
            100.0 * SEG_COUNT_RATE,
            ious.len(),
            ious.iter().copied().fold(1.0, f64::min)
        ),
    );
}

fn gradients(report: &mut Report) {
    let results = check_all(5);
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report.line("gradient checks", worst < GRAD_TOL, format!("max relative error {worst:.2e} (< {GRAD_TOL:e}); {}", detail.join(", ")));
}

fn training(report: &mut Report) -> Option<LearnedPredictor> {
    let config = Config::default();
    let dc = DatasetConfig { scenes: TRAIN_RECORDS, ..DatasetConfig::default() };
    let t = Instant::now();
    let records = generate_records(&dc, &config.sim, |_| {}).expect("dataset");
    let gen_secs = t.elapsed().as_secs_f64();
    let (train_set, val_set) = split(&records, &SplitSpec { train_fraction: 0.9, seed: 0 });
    let tc = TrainConfig { epochs: TRAIN_EPOCHS, ..TrainConfig::default() };
    let t = Instant::now();
    let ckpt = train::<f32>(&train_set, &val_set, ModelSpec::default(), &tc, |e| {
        eprintln!("  epoch {} loss {:.4} val C-IoU {:.4}", e.epoch, e.mean_loss, e.val_c_iou.unwrap_or(f64::NAN));
    });
    let secs = t.elapsed().as_secs_f64();
    let ckpt = match ckpt {
        Ok(c) => c,
        Err(e) => {
            report.line("training", false, format!("training failed: {e}"));
            return None;
        }
    };
    let initial = ckpt.log.initial_loss;
    let last = ckpt.log.epochs.last().expect("epochs ran");
    let ratio = last.mean_loss / initial;
    let c_iou = last.val_c_iou.unwrap_or(0.0);
    report.line(
        "training",
        ratio <= LOSS_RATIO_MAX && c_iou >= C_IOU_MIN && secs <= TRAIN_MAX_SECS && TRAIN_EPOCHS <= 50,
        format!(
            "{} records ({} train incl. flips, {} held out) at 64x64, {TRAIN_EPOCHS} epochs in {:.0} s (+{:.0} s generation); \
             loss {:.4} -> {:.4} (ratio {:.3} <= {LOSS_RATIO_MAX}); held-out pooled C-IoU {c_iou:.4} at 0.4 (>= {C_IOU_MIN})",
            records.len(),
            train_set.len(),
            val_set.len(),
            secs,
            gen_secs,
            initial,
            last.mean_loss,
            ratio
        ),
    );
    LearnedPredictor::from_checkpoint(&ckpt).ok()
}

fn run(trials: usize, mode: EvalMode, policy: &Policy) -> SuccessStats {
    closed_loop_eval(trials, &trial_config(&Config::default()), mode, policy, TRIAL_SEED, |_, _| {})
}

fn closed_loop(report: &mut Report, learned: Option<&LearnedPredictor>) {
    let t = Instant::now();
    let random = run(RANDOM_TRIALS, EvalMode::Safest, &Policy::Random);
    let oracle = run(ORACLE_TRIALS, EvalMode::Safest, &Policy::Oracle);
    let learned = learned.map(|p| run(RANDOM_TRIALS, EvalMode::Safest, &Policy::Learned(p)));
    let secs = t.elapsed().as_secs_f64();
    let (r, o) = (random.success_rate, oracle.success_rate);
    let l = learned.as_ref().map_or(f64::NAN, |s| s.success_rate);
    // Same scenes as the oracle run: the first ORACLE_TRIALS seeds.
    let l_head = learned.as_ref().map_or(0, |s| s.records[..ORACLE_TRIALS].iter().filter(|r| r.success).count());
    report.line(
        "closed loop",
        (RANDOM_RANGE.0..=RANDOM_RANGE.1).contains(&r)
            && o >= ORACLE_MIN
            && l >= r + LEARNED_MARGIN
            && secs < CLOSED_LOOP_MAX_SECS,
        format!(
            "random {r:.3} over {RANDOM_TRIALS} (in [{}, {}]); oracle safest {o:.3} over {ORACLE_TRIALS} (>= {ORACLE_MIN}); \
             learned {l:.3} over the same {RANDOM_TRIALS} scenes (>= random + {LEARNED_MARGIN}); \
             on the oracle's {ORACLE_TRIALS} scenes oracle {} vs learned {l_head}; {secs:.0} s",
            RANDOM_RANGE.0, RANDOM_RANGE.1, oracle.successes
        ),
    );
}

fn fixed_target(report: &mut Report) {
    let t = Instant::now();
    let s = run(ORACLE_TRIALS, EvalMode::FixedTarget, &Policy::Oracle);
    report.line(
        "fixed target",
        s.success_rate >= ORACLE_MIN,
        format!(
            "oracle success {:.3} over {ORACLE_TRIALS} scenes (>= {ORACLE_MIN}); {:.0} s",
            s.success_rate,
            t.elapsed().as_secs_f64()
        ),
    );
}

fn main() {
    // `cargo test -- --list` and filters should not trigger the full run.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let mut report = Report { failures: 0 };
    let t = Instant::now();
    mechanics(&mut report);
    gen_determinism(&mut report, dir.path());
    risk_and_selection(&mut report);
    segmentation(&mut report);
    gradients(&mut report);
    let learned = training(&mut report);
    closed_loop(&mut report, learned.as_ref());
    fixed_target(&mut report);
    println!(
        "acceptance: {} failed, {:.0} s total",
        report.failures,
        t.elapsed().as_secs_f64()
    );
    if report.failures > 0 && std::env::var("SHELFPICK_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
