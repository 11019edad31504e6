//! `pcpo eval`: deterministic rollouts of a checkpointed policy with
//! trajectory dumps.

use std::fs::File;
use std::io::{BufWriter, Write};

use rand_chacha::ChaCha8Rng;

use pcpo::env::{generate_track, BicycleParams, DoneReason, IntersectionEnv, LaneEnv};
use pcpo::nn::{checkpoint, MlpSpec, Network};
use pcpo::train::{eval_policy, EnvKind, EvalEpisode};

use crate::{CliError, EvalArgs};

pub fn run(args: EvalArgs) -> Result<(), CliError> {
    let cfg = crate::train_cmd::load_config(args.config.as_deref())?;
    let env_kind = args.env.map(EnvKind::from).unwrap_or(cfg.env);

    let (obs_dim, low, high) = match env_kind {
        EnvKind::Lane => (
            2,
            vec![-std::f64::consts::FRAC_PI_4],
            vec![std::f64::consts::FRAC_PI_4],
        ),
        EnvKind::Intersection => (6, vec![-3.0; 3], vec![3.0; 3]),
    };
    let spec = MlpSpec::gaussian(obs_dim, &cfg.hidden, low, high);
    let params = checkpoint::load(&args.checkpoint, &spec)?;
    let policy = Network::new(spec, params)?;

    use rand_chacha::rand_core::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(e.into()))?;

    let episodes = match env_kind {
        EnvKind::Lane => {
            let track = generate_track(cfg.track_seed);
            let mut env = LaneEnv::new(track, BicycleParams::default());
            let eps = eval_policy(&policy, &mut env, &mut rng, args.episodes)?;
            // Track table for plotting trajectories against the geometry.
            let f = File::create(args.out.join("track.txt"))
                .map_err(|e| CliError::Runtime(e.into()))?;
            env.track().export(BufWriter::new(f))?;
            for (i, ep) in eps.iter().enumerate() {
                write_lane_trajectory(&args.out, i, ep)?;
            }
            eps
        }
        EnvKind::Intersection => {
            let mut env = IntersectionEnv::new();
            let eps = eval_policy(&policy, &mut env, &mut rng, args.episodes)?;
            for (i, ep) in eps.iter().enumerate() {
                write_intersection_trajectory(&args.out, i, ep)?;
            }
            eps
        }
    };

    let n = episodes.len() as f64;
    let mean_return: f64 = episodes.iter().map(|e| e.record.ret).sum::<f64>() / n;
    let mean_risk: f64 = episodes.iter().map(|e| e.record.risk).sum::<f64>() / n;
    let offlane = episodes
        .iter()
        .filter(|e| e.record.reason == DoneReason::OffLane)
        .count();
    let collisions = episodes
        .iter()
        .filter(|e| e.record.reason == DoneReason::Collision)
        .count();
    println!("episodes: {}", episodes.len());
    println!("mean_return: {mean_return}");
    println!("mean_risk: {mean_risk}");
    println!("offlane: {offlane}");
    println!("collisions: {collisions}");
    if let Some(total_dev) = episodes
        .iter()
        .map(|e| e.record.abs_dev_sum)
        .collect::<Option<Vec<f64>>>()
    {
        let steps: u32 = episodes.iter().map(|e| e.record.steps).sum();
        println!("mean_abs_deviation: {}", total_dev.iter().sum::<f64>() / steps as f64);
    }
    Ok(())
}

fn write_lane_trajectory(
    dir: &std::path::Path,
    index: usize,
    ep: &EvalEpisode,
) -> Result<(), CliError> {
    let f = File::create(dir.join(format!("traj_ep{index:03}.csv")))
        .map_err(|e| CliError::Runtime(e.into()))?;
    let mut w = BufWriter::new(f);
    (|| -> std::io::Result<()> {
        writeln!(w, "step,d,beta,delta_f,reward,risk")?;
        for (k, s) in ep.steps.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                k, s.obs[0], s.obs[1], s.action[0], s.reward, s.risk
            )?;
        }
        w.flush()
    })()
    .map_err(|e| CliError::Runtime(e.into()))
}

fn write_intersection_trajectory(
    dir: &std::path::Path,
    index: usize,
    ep: &EvalEpisode,
) -> Result<(), CliError> {
    let f = File::create(dir.join(format!("traj_ep{index:03}.csv")))
        .map_err(|e| CliError::Runtime(e.into()))?;
    let mut w = BufWriter::new(f);
    (|| -> std::io::Result<()> {
        writeln!(w, "step,l1,v1,l2,v2,l3,v3,reward,risk")?;
        for (k, s) in ep.steps.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                k, s.obs[0], s.obs[1], s.obs[2], s.obs[3], s.obs[4], s.obs[5], s.reward, s.risk
            )?;
        }
        w.flush()
    })()
    .map_err(|e| CliError::Runtime(e.into()))
}
