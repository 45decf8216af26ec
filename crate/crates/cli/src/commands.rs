//! Command bodies. Each returns `Failure` carrying its exit code.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use gapflight::imitation::{
    gen_controller_dataset, gen_planner_dataset, read_controller_csv, read_planner_csv, train_controller,
    train_planner, write_controller_csv, write_planner_csv, ControllerRanges, EpochLoss, ImitationError,
    PlannerDataset, PlannerDatasetMeta, TrainError,
};
use gapflight::mission::{run_mission, MissionError, MissionMetrics, Mode};
use gapflight::nn::{Mlp, MlpSpec};
use gapflight::policy::PolicyNet;
use gapflight::rl::{eval_metrics, finetune as es_finetune};
use gapflight::seeding::{derive_seed, indexed_rng};
use gapflight::sim::{Scenario, Trace, TraceSample};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::provenance::{ensure_parent, num, sidecar_path, write_csv, write_json, Stamp, TOOL, VERSION};
use crate::svg::{self, Panel, Series};
use crate::{
    AssembleArgs, EvalCompareArgs, Failure, FinetuneArgs, FlyArgs, GenDataArgs, Kind, PlotLossArgs, RangeKind,
    TrainArgs,
};

pub struct Ctx {
    pub cfg: RunConfig,
    pub seed: u64,
}

impl Ctx {
    fn out(&self, given: Option<PathBuf>, default_name: &str) -> PathBuf {
        given.unwrap_or_else(|| self.cfg.paths.out_dir.join(default_name))
    }

    fn stamp(&self, command: &'static str) -> Stamp {
        Stamp::new(command, self.seed, &self.cfg)
    }
}

type CmdResult = Result<(), Failure>;

fn io_fault(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Fault(format!("{}: {e}", path.display()))
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn fault(e: impl std::fmt::Display) -> Failure {
    Failure::Fault(e.to_string())
}

fn data_error(e: ImitationError) -> Failure {
    match e {
        ImitationError::Range(_) | ImitationError::InvalidArgument(_) => usage(e),
        _ => fault(e),
    }
}

fn open(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    ensure_parent(path).map_err(io_fault(path))?;
    File::create(path).map(BufWriter::new).map_err(io_fault(path))
}

fn read_sidecar(artifact: &Path) -> Result<Value, Failure> {
    let path = sidecar_path(artifact);
    let text = fs::read_to_string(&path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------

pub fn gen_data(ctx: &Ctx, a: GenDataArgs) -> CmdResult {
    let stamp = ctx.stamp("gen-data");
    match a.kind {
        Kind::Planner => {
            let points = a.points.unwrap_or(ctx.cfg.data.points_per_traj);
            let seed = derive_seed(ctx.seed, "planner-data");
            let ds = gen_planner_dataset(a.n, points, &ctx.cfg.data.planner, seed).map_err(data_error)?;
            let out = ctx.out(a.out, "planner.csv");
            write_planner_csv(&ds.samples, create(&out)?).map_err(fault)?;
            let details = serde_json::to_value(&ds.meta).map_err(fault)?;
            stamp.write_sidecar(&out, json!({ "kind": "planner", "meta": details })).map_err(io_fault(&out))?;
            println!(
                "wrote {} planner samples ({} trajectories) to {}; retention {:.4} ({} of {} candidates kept)",
                ds.samples.len(),
                ds.meta.n_traj,
                out.display(),
                ds.meta.retention(),
                ds.meta.n_traj,
                ds.meta.candidates
            );
        }
        Kind::Controller => {
            if a.points.is_some() {
                return Err(usage("--points applies to planner data only"));
            }
            let ranges = match a.range {
                RangeKind::Large => ControllerRanges::large(),
                RangeKind::Short => ControllerRanges::short(),
            };
            let seed = derive_seed(ctx.seed, "controller-data");
            let ds = gen_controller_dataset(&ranges, a.n, &ctx.cfg.controller, seed).map_err(data_error)?;
            let out = ctx.out(a.out, "controller.csv");
            write_controller_csv(&ds.samples, create(&out)?).map_err(fault)?;
            let details = serde_json::to_value(&ds.meta).map_err(fault)?;
            stamp.write_sidecar(&out, json!({ "kind": "controller", "meta": details })).map_err(io_fault(&out))?;
            let retention = ds.meta.n as f64 / (ds.meta.n + ds.meta.resampled).max(1) as f64;
            println!(
                "wrote {} controller samples to {}; retention {:.4} ({} singular draws redrawn)",
                ds.samples.len(),
                out.display(),
                retention,
                ds.meta.resampled
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn write_loss_curve(path: &Path, curve: &[EpochLoss]) -> Result<(), Failure> {
    let rows = curve.iter().map(|e| vec![e.epoch.to_string(), num(e.train_loss), num(e.test_loss)]);
    write_csv(path, &["epoch", "train_loss", "test_loss"], rows).map_err(io_fault(path))
}

fn planner_dataset(path: &Path) -> Result<PlannerDataset, Failure> {
    let side = read_sidecar(path)?;
    if side["details"]["kind"] != "planner" {
        return Err(usage(format!("{} is not a planner dataset", path.display())));
    }
    let meta: PlannerDatasetMeta = serde_json::from_value(side["details"]["meta"].clone()).map_err(usage)?;
    let samples = read_planner_csv(open(path)?).map_err(usage)?;
    if samples.len() != meta.n_traj * meta.points_per_traj {
        return Err(usage(format!(
            "{} holds {} rows, its sidecar promises {} × {}",
            path.display(),
            samples.len(),
            meta.n_traj,
            meta.points_per_traj
        )));
    }
    Ok(PlannerDataset { meta, samples })
}

pub fn train(ctx: &Ctx, a: TrainArgs) -> CmdResult {
    let t = &ctx.cfg.train;
    let mut cfg = ctx.cfg.train_config(derive_seed(ctx.seed, "train"));
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch.unwrap_or(cfg.batch_size);
    let init_seed = derive_seed(ctx.seed, "init");
    let (name, result) = match a.net {
        Kind::Planner => {
            let ds = planner_dataset(&a.data)?;
            let (train, test) = ds.split_trajectories(t.test_trajectories).map_err(usage)?;
            let init = Mlp::init(MlpSpec::planner(), init_seed).map_err(fault)?;
            ("planner", train_planner(init, &train, &test, a.setting, &t.planner_loss, &cfg))
        }
        Kind::Controller => {
            let samples = read_controller_csv(open(&a.data)?).map_err(usage)?;
            let n_test = ((samples.len() as f64 * t.controller_test_fraction).round() as usize).max(1);
            if n_test >= samples.len() {
                return Err(usage(format!("{} has too few samples to hold out {n_test}", a.data.display())));
            }
            let (train, test) = samples.split_at(samples.len() - n_test);
            let init = Mlp::init(MlpSpec::controller(), init_seed).map_err(fault)?;
            ("controller", train_controller(init, train, test, &t.controller_loss, &cfg))
        }
    };
    let out = ctx.out(a.out, &format!("{name}.ckpt"));
    let curve_path = a.curve.unwrap_or_else(|| out.with_file_name("loss_curve.csv"));
    let stamp = ctx.stamp("train");
    let mut details = json!({
        "net": name,
        "data": a.data.file_name().map(|n| n.to_string_lossy().into_owned()),
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "lr_final": cfg.lr_final,
        "batch_size": cfg.batch_size,
        "standardize": cfg.standardize,
        "init_seed": init_seed,
    });
    if a.net == Kind::Planner {
        details["setting"] = json!(a.setting.to_string());
        details["normalize"] = json!(a.setting.normalized());
    }
    let (net, curve) = match result {
        Ok(r) => r,
        Err(TrainError::Diverged { epoch, curve }) => {
            write_loss_curve(&curve_path, &curve)?;
            details["diverged_at_epoch"] = json!(epoch);
            stamp.write_sidecar(&curve_path, details).map_err(io_fault(&curve_path))?;
            return Err(Failure::Fault(format!(
                "training diverged in epoch {epoch}; curve so far in {}",
                curve_path.display()
            )));
        }
        Err(e @ (TrainError::EmptyDataset | TrainError::InvalidArgument(_))) => return Err(usage(e)),
        Err(e) => return Err(fault(e)),
    };
    ensure_parent(&out).map_err(io_fault(&out))?;
    net.save(&out).map_err(fault)?;
    write_loss_curve(&curve_path, &curve)?;
    if let Some(last) = curve.last() {
        details["final_train_loss"] = json!(last.train_loss);
        details["final_test_loss"] = json!(last.test_loss);
    }
    stamp.write_sidecar(&out, details.clone()).map_err(io_fault(&out))?;
    stamp.write_sidecar(&curve_path, details).map_err(io_fault(&curve_path))?;
    match curve.last() {
        Some(l) => println!(
            "{name} trained {} epochs: train {:.6e}, test {:.6e}; checkpoint {}",
            l.epoch,
            l.train_loss,
            l.test_loss,
            out.display()
        ),
        None => println!("{name} checkpoint {} holds the initialization", out.display()),
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn assemble(ctx: &Ctx, a: AssembleArgs) -> CmdResult {
    let planner = Mlp::load_expecting(&a.planner, &MlpSpec::planner()).map_err(usage)?;
    let controller = Mlp::load_expecting(&a.controller, &MlpSpec::controller()).map_err(usage)?;
    let normalize = match a.normalize {
        Some(n) => n,
        None => read_sidecar(&a.planner)?["details"]["normalize"]
            .as_bool()
            .ok_or_else(|| usage("planner sidecar does not record normalization; pass --normalize"))?,
    };
    let policy = PolicyNet::assemble(planner, controller, normalize, ctx.cfg.sim.thrust_max).map_err(usage)?;
    let out = ctx.out(a.out, "policy.json");
    ensure_parent(&out).map_err(io_fault(&out))?;
    policy.save(&out).map_err(fault)?;
    ctx.stamp("assemble")
        .write_sidecar(&out, json!({ "normalize": normalize }))
        .map_err(io_fault(&out))?;
    println!("policy manifest {}", out.display());
    Ok(())
}

fn load_policy(ctx: &Ctx, path: &Path) -> Result<PolicyNet, Failure> {
    PolicyNet::load(path, ctx.cfg.sim.thrust_max).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------

fn flight_plot(trace: &Trace, sc: &Scenario, title: &str) -> Vec<Panel> {
    let pts = |f: &dyn Fn(&TraceSample) -> (f64, f64)| trace.samples.iter().map(f).collect();
    let gap = &sc.gap;
    let (l, s) = (gap.long_axis() * gap.width / 2.0, gap.short_axis() * gap.height / 2.0);
    let corners = [gap.center + l + s, gap.center - l + s, gap.center - l - s, gap.center + l - s];
    let wall_z = (sc.lab.min.z, sc.lab.max.z);

    let mut side = Panel::new(&format!("{title}: side view"), "x [m]", "z [m]");
    side.series.push(Series { label: "path".into(), points: pts(&|s| (s.state.p.x, s.state.p.z)) });
    let (zlo, zhi) = corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), c| (a.min(c.z), b.max(c.z)));
    side.marks.push(((gap.center.x, wall_z.0), (gap.center.x, zlo)));
    side.marks.push(((gap.center.x, zhi), (gap.center.x, wall_z.1)));

    let mut front = Panel::new("front view", "y [m]", "z [m]");
    front.series.push(Series { label: "path".into(), points: pts(&|s| (s.state.p.y, s.state.p.z)) });
    for i in 0..4 {
        let (a, b) = (corners[i], corners[(i + 1) % 4]);
        front.marks.push(((a.y, a.z), (b.y, b.z)));
    }

    let mut att = Panel::new("attitude", "t [s]", "angle [deg]");
    att.series.push(Series { label: "roll".into(), points: pts(&|s| (s.state.t, s.state.att.x.to_degrees())) });
    att.series.push(Series { label: "pitch".into(), points: pts(&|s| (s.state.t, s.state.att.y.to_degrees())) });
    att.series.push(Series { label: "cmd roll".into(), points: pts(&|s| (s.state.t, s.cmd.roll.to_degrees())) });
    vec![side, front, att]
}

fn provenance_comment(stamp: &Stamp) -> String {
    format!("{TOOL} {VERSION} {} seed={} config={}", stamp.command, stamp.seed, stamp.config_hash)
}

pub fn fly(ctx: &Ctx, a: FlyArgs) -> CmdResult {
    let mut sc = ctx.cfg.scenario().map_err(usage)?;
    if let Some(tilt) = a.tilt {
        sc.gap.tilt = tilt.to_radians();
        sc.validate().map_err(usage)?;
    }
    let mut settings = ctx.cfg.run_settings().map_err(usage)?;
    if let Some(v) = a.v_cross {
        settings.mission.v_cross = v;
        settings.mission.validate().map_err(usage)?;
    }
    let policy = match (&a.policy, a.mode) {
        (Some(p), _) => Some(load_policy(ctx, p)?),
        (None, Mode::Tr) => None,
        (None, m) => return Err(Failure::Usage(format!("mode {m} needs --policy <manifest>"))),
    };
    let stamp = ctx.stamp("fly");
    let trace_path = ctx.out(a.trace, "trace.csv");
    let details = json!({
        "mode": a.mode.as_str(),
        "tilt_deg": sc.gap.tilt.to_degrees(),
        "v_cross": settings.mission.v_cross,
        "policy": a.policy.as_ref().map(|p| p.display().to_string()),
    });
    let write_trace = |trace: &Trace| -> Result<(), Failure> {
        trace.write_csv(create(&trace_path)?).map_err(io_fault(&trace_path))?;
        stamp.write_sidecar(&trace_path, details.clone()).map_err(io_fault(&trace_path))?;
        Ok(())
    };
    let outcome = match run_mission(a.mode, &sc, policy.as_ref(), &settings) {
        Ok(o) => o,
        Err(MissionError::Sim(f)) => {
            write_trace(&f.trace)?;
            return Err(Failure::Fault(format!(
                "{}; partial trace in {}",
                f.error,
                trace_path.display()
            )));
        }
        Err(e @ (MissionError::MissingPolicy(_) | MissionError::InvalidArgument(_))) => return Err(usage(e)),
        Err(e) => return Err(fault(e)),
    };
    write_trace(&outcome.trace)?;
    let metrics_path = ctx.out(a.metrics, "metrics.json");
    let mut doc = stamp.header();
    doc["details"] = details;
    doc["metrics"] = serde_json::to_value(&outcome.metrics).map_err(fault)?;
    write_json(&metrics_path, &doc).map_err(io_fault(&metrics_path))?;
    let plot_path = ctx.out(a.plot, "flight.svg");
    let panels = flight_plot(&outcome.trace, &sc, a.mode.as_str());
    let svg_text = svg::render(&panels, &provenance_comment(&stamp));
    ensure_parent(&plot_path).map_err(io_fault(&plot_path))?;
    fs::write(&plot_path, svg_text).map_err(io_fault(&plot_path))?;
    print_metrics(&outcome.metrics);
    Ok(())
}

fn print_metrics(m: &MissionMetrics) {
    let opt = |x: Option<f64>, unit: &str| x.map_or("n/a".to_string(), |v| format!("{v:.4} {unit}"));
    println!(
        "{}: crossed {}, miss {}, attitude error {}, collided {}, avg |ω| {:.4} rad/s, avg thrust {:.4} m/s²",
        m.mode,
        m.crossed,
        opt(m.miss_distance, "m"),
        opt(m.crossing_attitude_error_deg, "deg"),
        m.collided,
        m.avg_omega,
        m.avg_thrust
    );
    if let Some(l) = &m.ff_latency_ms {
        println!("feed-forward latency: mean {:.4} ms, p99 {:.4} ms over {} calls", l.mean, l.p99, l.count);
    }
}

// ---------------------------------------------------------------------------

pub fn finetune(ctx: &Ctx, a: FinetuneArgs) -> CmdResult {
    let policy = load_policy(ctx, &a.policy)?;
    let sc = ctx.cfg.scenario().map_err(usage)?;
    let settings = ctx.cfg.run_settings().map_err(usage)?;
    let mut ft = ctx.cfg.finetune_config(derive_seed(ctx.seed, "finetune"));
    ft.es.iters = a.iters.unwrap_or(ft.es.iters);
    let (tuned, curve) = es_finetune(&policy, &sc, &ft, &settings, &ctx.cfg.reward).map_err(fault)?;
    let out = ctx.out(a.out, "policy_rl.json");
    ensure_parent(&out).map_err(io_fault(&out))?;
    tuned.save(&out).map_err(fault)?;
    let curve_path = a.curve.unwrap_or_else(|| out.with_file_name("reward_curve.csv"));
    let rows = curve.iter().map(|r| vec![r.iter.to_string(), num(r.mean_return), num(r.best_return)]);
    write_csv(&curve_path, &["iter", "mean_return", "best_return"], rows).map_err(io_fault(&curve_path))?;
    let stamp = ctx.stamp("finetune");
    let details = json!({
        "source_policy": a.policy.display().to_string(),
        "iters": ft.es.iters,
        "normalize": tuned.normalize(),
    });
    stamp.write_sidecar(&out, details.clone()).map_err(io_fault(&out))?;
    stamp.write_sidecar(&curve_path, details).map_err(io_fault(&curve_path))?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!(
            "fine-tuned {} iterations: mean return {:.4} → {:.4}, best {:.4}; policy {}",
            ft.es.iters,
            first.mean_return,
            last.mean_return,
            last.best_return,
            out.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn eval_compare(ctx: &Ctx, a: EvalCompareArgs) -> CmdResult {
    let e2e = load_policy(ctx, &a.policy)?;
    let rl = load_policy(ctx, &a.rl_policy)?;
    let base = ctx.cfg.scenario().map_err(usage)?;
    let settings = ctx.cfg.run_settings().map_err(usage)?;
    let scenario_seed = derive_seed(ctx.seed, "eval-scenarios");
    let scenarios: Vec<Scenario> = (0..a.scenarios as u64)
        .map(|i| ctx.cfg.finetune.ranges.sample(&base, &mut indexed_rng(scenario_seed, i)))
        .collect();
    let mut rows = Vec::with_capacity(3 * scenarios.len());
    for mode in Mode::ALL {
        let policy = match mode {
            Mode::Tr => None,
            Mode::E2e => Some(&e2e),
            Mode::Rl => Some(&rl),
        };
        for (i, sc) in scenarios.iter().enumerate() {
            let (omega, thrust, miss, collided) = match run_mission(mode, sc, policy, &settings) {
                Ok(o) => (o.metrics.avg_omega, o.metrics.avg_thrust, o.metrics.miss_distance, o.metrics.collided),
                Err(MissionError::Sim(f)) => {
                    let (w, t) = eval_metrics(&f.trace).unwrap_or((f64::NAN, f64::NAN));
                    (w, t, None, true)
                }
                Err(e) => return Err(fault(format!("{mode} on scenario {i}: {e}"))),
            };
            rows.push(vec![
                mode.as_str().to_string(),
                i.to_string(),
                num(omega),
                num(thrust),
                miss.map_or(String::new(), num),
                collided.to_string(),
            ]);
        }
    }
    let out = ctx.out(a.out, "compare.csv");
    write_csv(&out, &["mode", "seed", "avg_omega", "avg_thrust", "miss", "collided"], rows.clone())
        .map_err(io_fault(&out))?;
    let details = json!({
        "scenarios": a.scenarios,
        "scenario_seed": scenario_seed,
        "policy": a.policy.display().to_string(),
        "rl_policy": a.rl_policy.display().to_string(),
    });
    ctx.stamp("eval-compare").write_sidecar(&out, details).map_err(io_fault(&out))?;
    for mode in Mode::ALL {
        let mine: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == mode.as_str()).collect();
        let mean = |k: usize| mine.iter().map(|r| r[k].parse::<f64>().unwrap_or(f64::NAN)).sum::<f64>() / mine.len().max(1) as f64;
        let collisions = mine.iter().filter(|r| r[5] == "true").count();
        println!(
            "{mode}: mean avg |ω| {:.4} rad/s, mean avg thrust {:.4} m/s², collisions {collisions}/{}",
            mean(2),
            mean(3),
            mine.len()
        );
    }
    println!("comparison table {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn plot_loss(ctx: &Ctx, a: PlotLossArgs) -> CmdResult {
    let column = if a.train { "train_loss" } else { "test_loss" };
    let mut panel = Panel::new(&format!("{column} per epoch"), "epoch", column);
    panel.log_y = true;
    for spec in &a.curves {
        let (label, path) = spec
            .split_once('=')
            .map_or_else(|| (spec.as_str(), Path::new(spec.as_str())), |(l, p)| (l, Path::new(p)));
        let mut r = csv::Reader::from_reader(open(path)?);
        let headers = r.headers().map_err(usage)?.clone();
        let (ie, iv) = match (headers.iter().position(|h| h == "epoch"), headers.iter().position(|h| h == column)) {
            (Some(e), Some(v)) => (e, v),
            _ => return Err(usage(format!("{} lacks epoch/{column} columns", path.display()))),
        };
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(usage)?;
            let parse = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok());
            if let (Some(e), Some(v)) = (parse(ie), parse(iv)) {
                points.push((e, v));
            }
        }
        panel.series.push(Series { label: label.to_string(), points });
    }
    let text = svg::render(&[panel], &provenance_comment(&ctx.stamp("plot-loss")));
    ensure_parent(&a.out).map_err(io_fault(&a.out))?;
    fs::write(&a.out, text).map_err(io_fault(&a.out))?;
    println!("loss plot {}", a.out.display());
    Ok(())
}
