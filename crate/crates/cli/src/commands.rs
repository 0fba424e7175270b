//! Subcommand implementations. Each writes into `<out-dir>/<command>/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;
use wisp_core::channel::{self, CsiStream, NoiseLevel, PathKind, PathSpec, Scene};
use wisp_core::dpolicy::{self, DiffusionPolicy};
use wisp_core::dump::{self, Record};
use wisp_core::incentive::{self, EnvState};
use wisp_core::rng::derive_seed;
use wisp_core::scenario::Scenario;
use wisp_core::skeleton::{self, PoseAdjacency, SampleSimConfig};
use wisp_core::smsp;
use wisp_core::spectral::{self, MusicResult};

use crate::report::Report;
use crate::CliError;

pub struct Context {
    pub scenario: Scenario,
    pub out_dir: PathBuf,
}

impl Context {
    fn report(&self, command: &str) -> Result<Report, CliError> {
        Report::new(command, &self.scenario, &self.out_dir.join(command))
    }

    fn nested(&self, sub: &str) -> Context {
        Context {
            scenario: self.scenario.clone(),
            out_dir: self.out_dir.join(sub),
        }
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Ground-truth paths (with seeded phases) and synthesized streams.
fn simulate(scene: &Scene, sc: &Scenario, noise: NoiseLevel, seed: u64) -> wisp_core::Result<(Vec<Vec<PathSpec>>, Vec<CsiStream>)> {
    let mut truth = channel::ground_truth_paths(scene)?;
    channel::randomize_phases(&mut truth, seed);
    let streams = channel::synthesize_csi(scene, &truth, noise, sc.channel.phase_errors, sc.channel.frames, seed)?;
    Ok((truth, streams))
}

fn kind_name(k: PathKind) -> &'static str {
    match k {
        PathKind::Direct => "direct",
        PathKind::UserReflection => "user_reflection",
        PathKind::StaticReflection => "static_reflection",
    }
}

fn paths_json(scene: &Scene, truth: &[Vec<PathSpec>]) -> serde_json::Value {
    json!(scene
        .rx
        .iter()
        .zip(truth)
        .map(|(rx, paths)| json!({
            "receiver_id": rx.id,
            "paths": paths.iter().map(|p| json!({
                "kind": kind_name(p.kind),
                "aoa_deg": p.aoa_rad.to_degrees(),
                "tof_ns": p.tof_s * 1e9,
                "amplitude_linear": p.attenuation.norm(),
                "phase_rad": p.attenuation.arg(),
            })).collect::<Vec<_>>(),
        }))
        .collect::<Vec<_>>())
}

fn estimate_json(id: usize, res: &MusicResult) -> serde_json::Value {
    json!({
        "receiver_id": id,
        "estimated_paths_count": res.decomposition.order,
        "observations_count": res.observations,
        "shortfall": res.estimate.shortfall,
        "peaks": res.estimate.peaks.iter().map(|p| json!({
            "aoa_deg": p.aoa_rad.to_degrees(),
            "tof_ns": p.tof_s * 1e9,
            "pseudo_spectrum_linear": p.value,
        })).collect::<Vec<_>>(),
    })
}

pub fn simulate_csi(ctx: &Context) -> Result<Report, CliError> {
    let sc = &ctx.scenario;
    let mut rep = ctx.report("simulate-csi")?;
    let (truth, streams) = simulate(&sc.scene, sc, sc.channel.noise, sc.seed)?;
    if sc.output.dump {
        let mut buf = Vec::new();
        dump::write_streams(&mut buf, &streams)?;
        rep.write("csi.bin", buf)?;
    }
    rep.write_json("paths.json", &paths_json(&sc.scene, &truth))?;
    if sc.output.csv {
        let mut csv = String::from("receiver_id,antenna,subcarrier,re,im\n");
        for s in &streams {
            let f = &s.frames[0];
            for m in 0..f.rows() {
                for n in 0..f.cols() {
                    let z = f[(m, n)];
                    writeln!(csv, "{},{m},{n},{},{}", s.receiver_id, z.re, z.im).expect("string write");
                }
            }
        }
        rep.write("csi_frame0.csv", csv)?;
    }
    let (m, n) = streams[0].dims();
    rep.metric("receivers_count", streams.len())?;
    rep.metric("frames_count", streams[0].len())?;
    rep.metric("antennas_count", m)?;
    rep.metric("subcarriers_count", n)?;
    rep.metric("noise_variance_linear", streams.iter().map(|s| s.noise_var).collect::<Vec<_>>())?;
    rep.finish()
}

pub fn estimate(ctx: &Context, csi: Option<&Path>) -> Result<Report, CliError> {
    let sc = &ctx.scenario;
    let mut rep = ctx.report("estimate")?;
    let music = &sc.estimation.music;
    if let Some(path) = csi {
        let mut file = std::fs::File::open(path)
            .map_err(|e| CliError::Validation(format!("cannot open `{}`: {e}", path.display())))?;
        let streams = dump::read_streams(&mut file)?;
        let mut out = Vec::new();
        for s in &streams {
            let res = spectral::estimate_paths(s, &sc.scene, music)?;
            if sc.output.csv {
                rep.write(&format!("spectrum_rx{}.csv", s.receiver_id), dump::spectrum_csv(&res.spectrum))?;
            }
            out.push(estimate_json(s.receiver_id, &res));
        }
        rep.write_json("estimates.json", &out)?;
        rep.metric("streams_count", streams.len())?;
        return rep.finish();
    }

    let mut csv = String::from(
        "snr_db,trial,receiver_id,true_paths_count,estimated_paths_count,aoa_error_deg,tof_error_ns,within_tolerance\n",
    );
    let mut per_snr = Vec::new();
    for (si, &snr) in sc.channel.snr_sweep_db.iter().enumerate() {
        let (mut good, mut total, mut order_ok) = (0usize, 0usize, 0usize);
        let (mut aoa_errs, mut tof_errs) = (Vec::new(), Vec::new());
        for trial in 0..sc.channel.trials {
            let seed = derive_seed(sc.seed, "estimate-trial", trial as u64);
            let (truth, streams) = simulate(&sc.scene, sc, NoiseLevel::SnrDb(snr), seed)?;
            let mut first = Vec::new();
            for (q, s) in streams.iter().enumerate() {
                let res = spectral::estimate_paths(s, &sc.scene, music)?;
                let user = truth[q].iter().find(|p| p.kind == PathKind::UserReflection);
                let m = user.and_then(|u| spectral::match_path(&res.estimate.peaks, u.aoa_rad, u.tof_s));
                let ok = m.is_some_and(|m| m.within(2.0, 10.0));
                total += 1;
                good += ok as usize;
                order_ok += (res.decomposition.order == truth[q].len()) as usize;
                if let Some(m) = m {
                    aoa_errs.push(m.aoa_error_deg);
                    tof_errs.push(m.tof_error_ns);
                }
                writeln!(
                    csv,
                    "{snr},{trial},{},{},{},{},{},{ok}",
                    s.receiver_id,
                    truth[q].len(),
                    res.decomposition.order,
                    m.map_or(f64::NAN, |m| m.aoa_error_deg),
                    m.map_or(f64::NAN, |m| m.tof_error_ns),
                )
                .expect("string write");
                if si == 0 && trial == 0 {
                    if sc.output.csv {
                        rep.write(&format!("spectrum_rx{}.csv", s.receiver_id), dump::spectrum_csv(&res.spectrum))?;
                    }
                    first.push(estimate_json(s.receiver_id, &res));
                }
            }
            if si == 0 && trial == 0 {
                rep.write_json("estimates.json", &first)?;
            }
        }
        per_snr.push(json!({
            "snr_db": snr,
            "estimates_count": total,
            "user_path_success_ratio": good as f64 / total as f64,
            "mdl_correct_ratio": order_ok as f64 / total as f64,
            "median_aoa_error_deg": median(aoa_errs),
            "median_tof_error_ns": median(tof_errs),
        }));
    }
    rep.write("sweep.csv", csv)?;
    rep.metric("trials_count", sc.channel.trials)?;
    rep.metric("sweep", per_snr)?;
    rep.finish()
}

pub fn smsp(ctx: &Context) -> Result<Report, CliError> {
    let sc = &ctx.scenario;
    let mut rep = ctx.report("smsp")?;
    let (truth, streams) = simulate(&sc.scene, sc, sc.channel.noise, sc.seed)?;
    let out = smsp::run_smsp(&sc.scene, &streams, &sc.estimation, Some(&truth))?;
    let coherence = smsp::user_coherence(&sc.scene, &streams, &out.receivers, &truth, sc.estimation.rotation, 0)?;
    let distances = smsp::link_distances(&out.location.pos, &sc.scene);
    let weights = out.scores.weights();

    let mut scores = String::from("receiver_id,link_distance_m,s1_score,s2_score,weight_score\n");
    for (q, rx) in sc.scene.rx.iter().enumerate() {
        writeln!(scores, "{},{},{},{},{}", rx.id, distances[q], out.scores.s1[q], out.scores.s2[q], weights[q])
            .expect("string write");
    }
    rep.write("scores.csv", scores)?;
    rep.write_json(
        "receivers.json",
        &out.receivers
            .iter()
            .map(|r| {
                json!({
                    "receiver_id": r.receiver_id,
                    "estimated_paths_count": r.estimated_paths,
                    "user_aoa_deg": r.user_peak.as_ref().map(|p| p.aoa_rad.to_degrees()),
                    "user_tof_ns": r.user_peak.as_ref().map(|p| p.tof_s * 1e9),
                    "beam_bearing_deg": r.beam_bearing_rad.to_degrees(),
                    "beam_power_linear": r.beam_powers,
                })
            })
            .collect::<Vec<_>>(),
    )?;
    if sc.output.csv {
        rep.write("features_frame0.csv", dump::feature_csv(&out.features[0]))?;
    }
    if sc.output.dump {
        let mut buf = Vec::new();
        dump::write_dump(&mut buf, &[Record::Features(out.features.clone())])?;
        rep.write("features.bin", buf)?;
    }
    rep.metric("location_m", [out.location.pos.x, out.location.pos.y])?;
    rep.metric("location_error_m", out.location.pos.distance(&sc.scene.user_pos))?;
    rep.metric("location_residual_m", out.location.residual_m)?;
    rep.metric("s1_score", &out.scores.s1)?;
    rep.metric("s2_score", &out.scores.s2)?;
    rep.metric("user_coherence_ratio", coherence)?;
    rep.metric("feature_frames_count", out.features.len())?;
    rep.finish()
}

fn sample_config(sc: &Scenario) -> SampleSimConfig {
    SampleSimConfig {
        noise: sc.channel.noise,
        phase_errors: sc.channel.phase_errors,
        smsp: sc.estimation.clone(),
    }
}

fn target_for(scene: &Scene) -> PoseAdjacency {
    let (lo, hi) = skeleton::room_bounds(scene);
    PoseAdjacency::from_points(&skeleton::template_skeleton(scene.user_pos, lo, hi))
}

pub fn skeleton_fit(ctx: &Context) -> Result<Report, CliError> {
    let sc = &ctx.scenario;
    let mut rep = ctx.report("skeleton-fit")?;
    let cfg = sample_config(sc);
    let mut samples = Vec::new();
    let mut records = Vec::new();
    for (i, pos) in sc.skeleton.positions.iter().enumerate() {
        let mut scene = sc.scene.clone();
        scene.user_pos = *pos;
        let grid = skeleton::simulate_source(&scene, &cfg, derive_seed(sc.seed, "skeleton-sample", i as u64))?;
        let tensor = skeleton::interpolate(&grid);
        let target = target_for(&scene);
        records.push(json!({ "position_m": [pos.x, pos.y], "source": grid.values, "target": target.values }));
        samples.push(skeleton::Sample::new(&tensor, target));
    }
    let model = skeleton::fit_baseline(&samples, &sc.skeleton.fit)?;
    let baseline = skeleton::mean_predictor_mse(&samples)?;
    rep.write_json("model.json", &model)?;
    rep.write_json("dataset.json", &records)?;
    rep.metric("samples_count", samples.len())?;
    rep.metric("train_mse_linear", model.train_mse)?;
    rep.metric("train_loss_sum_linear", model.loss_curve.last())?;
    rep.metric("mean_predictor_mse_linear", baseline)?;
    rep.finish()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {what} `{}`: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn skeleton_predict(ctx: &Context, model: Option<&Path>) -> Result<Report, CliError> {
    let sc = &ctx.scenario;
    let mut rep = ctx.report("skeleton-predict")?;
    let path = model.map_or_else(|| ctx.out_dir.join("skeleton-fit").join("model.json"), Path::to_path_buf);
    let model: skeleton::PredictorModel = read_json(&path, "model")?;
    let mut scene = sc.scene.clone();
    scene.user_pos = sc.skeleton.query;
    let grid = skeleton::simulate_source(&scene, &sample_config(sc), derive_seed(sc.seed, "skeleton-query", 0))?;
    let tensor = skeleton::interpolate(&grid);
    let v = skeleton::predict(&model, &tensor)?;
    let target = target_for(&scene);
    let pts = skeleton::pair_skeleton(&v);
    let truth = skeleton::pair_skeleton(&target);
    let mut csv = String::from("keypoint,x_norm,y_norm,template_x_norm,template_y_norm\n");
    let mut errs = Vec::new();
    for (p, (a, b)) in pts.points.iter().zip(&truth.points).enumerate() {
        writeln!(csv, "{},{},{},{},{}", skeleton::KEYPOINT_NAMES[p], a[0], a[1], b[0], b[1]).expect("string write");
        errs.push(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
    }
    rep.write("keypoints.csv", csv)?;
    rep.write_json("pose.json", &v)?;
    rep.metric("query_position_m", [scene.user_pos.x, scene.user_pos.y])?;
    rep.metric("pose_loss_sum_linear", skeleton::mse_loss(&v, &target)?)?;
    rep.metric("pose_mse_linear", skeleton::mean_squared_error(&v, &target)?)?;
    rep.metric("mean_keypoint_error_norm", errs.iter().sum::<f64>() / errs.len() as f64)?;
    rep.finish()
}

fn outcome_json(o: &incentive::GameOutcome) -> serde_json::Value {
    json!({
        "v_r": o.strategy.v_r,
        "I_b": o.strategy.i_b,
        "chi_s": o.allocation.chi_s,
        "chi_ag": o.allocation.chi_ag,
        "U_us": o.u_us,
        "U_vsp": o.u_vsp,
        "Q_t": o.q_t,
    })
}

pub fn incentive_oracle(ctx: &Context) -> Result<Report, CliError> {
    let sc = &ctx.scenario;
    let mut rep = ctx.report("incentive-oracle")?;
    let sweep = if sc.economy.max_aps_sweep.is_empty() {
        vec![sc.economy.env.max_aps]
    } else {
        sc.economy.max_aps_sweep.clone()
    };
    let mut records = Vec::new();
    let mut csv = String::from("max_aps_count,v_r_price,i_b_price,chi_s_units,chi_ag_units,u_us_util,u_vsp_util,q_t_qos\n");
    let mut violations = 0;
    let mut optima = Vec::new();
    for aps in sweep {
        let env = EnvState {
            max_aps: aps,
            ..sc.economy.env.clone()
        };
        let best = incentive::oracle_optimal_pricing(&env, &sc.economy.pricing)?;
        match &best {
            Some(o) => {
                violations += incentive::audit(o, &env).len();
                let mut r = outcome_json(o);
                r["max_aps"] = json!(aps);
                records.push(r);
                optima.push(json!({
                    "max_aps_count": aps,
                    "v_r_price": o.strategy.v_r,
                    "i_b_price": o.strategy.i_b,
                    "chi_s_units": o.allocation.chi_s,
                    "chi_ag_units": o.allocation.chi_ag,
                    "u_us_util": o.u_us,
                    "u_vsp_util": o.u_vsp,
                }));
                writeln!(
                    csv,
                    "{aps},{},{},{},{},{},{},{}",
                    o.strategy.v_r, o.strategy.i_b, o.allocation.chi_s, o.allocation.chi_ag, o.u_us, o.u_vsp, o.q_t
                )
                .expect("string write");
            }
            None => {
                records.push(json!({ "max_aps": aps, "feasible": false }));
                optima.push(json!({ "max_aps_count": aps, "feasible": false }));
            }
        }
    }
    rep.write_json("oracle.json", &records)?;
    rep.write("oracle.csv", csv)?;
    rep.metric("records_count", records.len())?;
    rep.metric("violations_count", violations)?;
    rep.metric("optima", optima)?;
    rep.finish()
}

pub fn train_policy(ctx: &Context) -> Result<Report, CliError> {
    let sc = &ctx.scenario;
    let mut rep = ctx.report("train-policy")?;
    let cfg = &sc.training.config;
    let run = dpolicy::train_policy_with(&sc.training.sampler, cfg, sc.seed, |s| {
        if s.epoch % 250 == 0 || s.epoch + 1 == cfg.epochs {
            eprintln!(
                "epoch {:>5}  reward {:>9.2}  feasible {:.3}  v_r {:.2}  I_b {:.2}",
                s.epoch, s.mean_reward, s.feasible_fraction, s.mean_v_r, s.mean_i_b
            );
        }
    })?;
    let mut csv = String::from(
        "epoch,mean_reward_util,feasible_ratio,mean_v_r_price,mean_i_b_price,out_of_box_ratio,critic_loss_linear,actor_loss_linear,learning_rate_linear\n",
    );
    for s in &run.curve {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            s.epoch, s.mean_reward, s.feasible_fraction, s.mean_v_r, s.mean_i_b, s.out_of_box, s.critic_loss, s.actor_loss, s.learning_rate
        )
        .expect("string write");
    }
    rep.write("reward_curve.csv", csv)?;
    rep.write_json("policy.json", &run.policy)?;
    let tail = &run.curve[run.curve.len().saturating_sub(50)..];
    rep.metric("epochs_count", run.curve.len())?;
    rep.metric("stopped_early", run.stopped_early)?;
    rep.metric(
        "final_mean_reward_util",
        tail.iter().map(|s| s.mean_reward).sum::<f64>() / tail.len().max(1) as f64,
    )?;
    rep.metric(
        "final_feasible_ratio",
        tail.iter().map(|s| s.feasible_fraction).sum::<f64>() / tail.len().max(1) as f64,
    )?;
    rep.finish()
}

pub fn eval_policy(ctx: &Context, policy: Option<&Path>) -> Result<Report, CliError> {
    let sc = &ctx.scenario;
    let mut rep = ctx.report("eval-policy")?;
    let path = policy.map_or_else(|| ctx.out_dir.join("train-policy").join("policy.json"), Path::to_path_buf);
    let policy: DiffusionPolicy = read_json(&path, "policy checkpoint")?;
    policy.validate()?;
    let envs = sc.training.sampler.draw(sc.training.eval_draws, sc.seed, "eval-env");
    let mut csv = String::from("draw,v_r_price,i_b_price,policy_u_us_util,policy_feasible,oracle_u_us_util,utility_ratio\n");
    let (mut ratios, mut hits, mut feasible, mut violations) = (Vec::new(), 0usize, 0usize, 0usize);
    for (i, env) in envs.iter().enumerate() {
        let c = dpolicy::compare_with_oracle(&policy, env, derive_seed(sc.seed, "eval-generate", i as u64))?;
        if c.policy_feasible {
            feasible += 1;
            violations += incentive::audit(&c.policy, env).len();
        }
        if let Some(o) = &c.oracle {
            violations += incentive::audit(o, env).len();
        }
        let ratio = c.ratio.unwrap_or(f64::NAN);
        hits += (ratio >= 0.9) as usize;
        ratios.push(ratio);
        writeln!(
            csv,
            "{i},{},{},{},{},{},{ratio}",
            c.policy.strategy.v_r,
            c.policy.strategy.i_b,
            c.policy.u_us,
            c.policy_feasible,
            c.oracle.map_or(f64::NAN, |o| o.u_us),
        )
        .expect("string write");
    }
    rep.write("eval.csv", csv)?;
    let n = envs.len().max(1) as f64;
    rep.metric("draws_count", envs.len())?;
    rep.metric("ratio_at_least_0_9_fraction", hits as f64 / n)?;
    rep.metric("median_utility_ratio", median(ratios.into_iter().filter(|r| r.is_finite()).collect()))?;
    rep.metric("policy_feasible_fraction", feasible as f64 / n)?;
    rep.metric("violations_count", violations)?;
    rep.finish()
}

pub fn pipeline(ctx: &Context) -> Result<Report, CliError> {
    let inner = ctx.nested("pipeline");
    let mut rep = Report::new("pipeline", &ctx.scenario, &inner.out_dir)?;
    let stages: [(&str, fn(&Context) -> Result<Report, CliError>); 8] = [
        ("simulate-csi", simulate_csi),
        ("estimate", |c| estimate(c, None)),
        ("smsp", smsp),
        ("skeleton-fit", skeleton_fit),
        ("skeleton-predict", |c| skeleton_predict(c, None)),
        ("incentive-oracle", incentive_oracle),
        ("train-policy", train_policy),
        ("eval-policy", |c| eval_policy(c, None)),
    ];
    for (name, f) in stages {
        let r = f(&inner)?;
        rep.stage(name, &r);
    }
    rep.metric("stages_count", stages.len())?;
    rep.finish()
}
