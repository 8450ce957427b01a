use std::fs;
use std::path::Path;
use std::time::Instant;

use kspace_rl_core::baselines::{GreedyOraclePolicy, LowFreqPolicy, Policy, RandomPolicy};
use kspace_rl_core::dataset::{load_dataset, save_dataset};
use kspace_rl_core::dqn::{
    evaluate_greedy, greedy_action, log_to_csv, mean_final_quality, train, TransformerPolicy,
};
use kspace_rl_core::env::{EpisodeConfig, Trajectory};
use kspace_rl_core::kspace::fft2_centered;
use kspace_rl_core::metrics::{nmse, psnr};
use kspace_rl_core::phantom::{generate_phantom, PhantomSpec};
use kspace_rl_core::{Environment, KSpaceMatrix, PhaseTransformer, Tensor};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pgm;

const EPISODE_KEY: &str = "meta.episode";
const SELECTIONS_KEY: &str = "meta.selections";
const THREADS_VAR: &str = "KSPACE_RL_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyKind {
    /// The trained phase transformer (needs --checkpoint).
    Title,
    Random,
    Lowfreq,
    Oracle,
}

impl PolicyKind {
    fn name(self) -> &'static str {
        match self {
            PolicyKind::Title => "title",
            PolicyKind::Random => "random",
            PolicyKind::Lowfreq => "lowfreq",
            PolicyKind::Oracle => "oracle",
        }
    }
}

fn load_data(path: &Path) -> Result<((usize, usize), Vec<KSpaceMatrix>), CliError> {
    load_dataset(path).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))
}

fn build_envs(slices: &[KSpaceMatrix], cfg: &EpisodeConfig) -> Result<Vec<Environment>, CliError> {
    slices
        .iter()
        .enumerate()
        .map(|(i, k)| {
            if (k.rows(), k.cols()) != (cfg.frequencies, cfg.phases) {
                return Err(CliError::Config(format!(
                    "slice {} is {}x{}, configuration expects {}x{}",
                    i,
                    k.rows(),
                    k.cols(),
                    cfg.frequencies,
                    cfg.phases
                )));
            }
            Environment::new(k.clone(), *cfg)
                .map_err(|e| CliError::Data(format!("slice {}: {}", i, e)))
        })
        .collect()
}

fn load_network(path: &Path) -> Result<(PhaseTransformer, Vec<(String, Tensor)>), CliError> {
    PhaseTransformer::load(path).map_err(|e| match e {
        kspace_rl_core::Error::Io(e) => CliError::Io {
            context: path.display().to_string(),
            source: e,
        },
        e => CliError::Data(format!("{}: {}", path.display(), e)),
    })
}

fn meta_count(extra: &[(String, Tensor)], key: &str) -> Option<usize> {
    extra
        .iter()
        .find(|(n, _)| n == key)
        .and_then(|(_, t)| t.data().first())
        .map(|v| *v as usize)
}

fn count_tensor(v: usize) -> Tensor {
    Tensor::new(&[1], vec![v as f32]).expect("scalar shape")
}

fn threads() -> Result<usize, CliError> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                CliError::Config(format!(
                    "{} must be a positive integer, got {:?}",
                    THREADS_VAR, v
                ))
            }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// `f` over `items` on up to `threads` workers; results keep input order.
fn parallel_map<I: Sync, O: Send>(
    items: &[I],
    threads: usize,
    f: impl Fn(usize, &I) -> Result<O, CliError> + Sync,
) -> Result<Vec<O>, CliError> {
    let chunk = items.len().div_ceil(threads.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, it)| f(c * chunk + j, it))
                        .collect::<Result<Vec<O>, CliError>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(CliError::io(path.display().to_string()))
}

pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (f, p) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected FxP, got {:?}", s))?;
    let f = f
        .trim()
        .parse()
        .map_err(|_| format!("bad row count in {:?}", s))?;
    let p = p
        .trim()
        .parse()
        .map_err(|_| format!("bad column count in {:?}", s))?;
    Ok((f, p))
}

pub fn gen_data(
    out: &Path,
    slices: usize,
    size: (usize, usize),
    seed: u64,
    ellipses: usize,
) -> Result<(), CliError> {
    let (f, p) = size;
    if f < 2 || p < 2 {
        return Err(CliError::Config(format!("size {}x{} is too small", f, p)));
    }
    let data = (0..slices)
        .map(|i| {
            let spec = PhantomSpec::random(f, p, ellipses, seed.wrapping_add(i as u64));
            Ok(fft2_centered(&generate_phantom::<f32>(&spec)?)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    save_dataset(out, (f, p), &data).map_err(|e| match e {
        kspace_rl_core::Error::Io(e) => CliError::Io {
            context: out.display().to_string(),
            source: e,
        },
        e => e.into(),
    })?;
    println!(
        "wrote {} slices of {}x{} to {}",
        slices,
        f,
        p,
        out.display()
    );
    Ok(())
}

pub fn train_cmd(config: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let (shape, slices) = load_data(&cfg.data)?;
    if slices.is_empty() {
        return Err(CliError::Data(format!(
            "{} holds no slices",
            cfg.data.display()
        )));
    }
    if shape != (cfg.episode.frequencies, cfg.episode.phases) {
        return Err(CliError::Config(format!(
            "data is {}x{}, configuration expects {}x{}",
            shape.0, shape.1, cfg.episode.frequencies, cfg.episode.phases
        )));
    }
    let mut train_envs = build_envs(&slices, &cfg.episode)?;
    let eval_envs = match &cfg.eval_data {
        Some(path) => build_envs(&load_data(path)?.1, &cfg.episode)?,
        None if cfg.train.eval_every > 0 => {
            if train_envs.len() <= cfg.eval_slices {
                return Err(CliError::Data(format!(
                    "{} slices cannot spare {} for evaluation",
                    train_envs.len(),
                    cfg.eval_slices
                )));
            }
            train_envs.split_off(train_envs.len() - cfg.eval_slices)
        }
        None => Vec::new(),
    };

    let mut tcfg = cfg.train.clone();
    let net = match resume {
        Some(path) => {
            let (net, extra) = load_network(path)?;
            if net.cfg != cfg.network {
                return Err(CliError::Config(format!(
                    "checkpoint network {:?} differs from configuration {:?}",
                    net.cfg, cfg.network
                )));
            }
            tcfg.first_episode = meta_count(&extra, EPISODE_KEY).unwrap_or(0);
            net
        }
        None => PhaseTransformer::new(cfg.network, cfg.init_seed)?,
    };
    println!(
        "training {} parameters on {} slices ({} held out), episodes {}..{}",
        net.params.parameter_count(),
        train_envs.len(),
        eval_envs.len(),
        tcfg.first_episode,
        tcfg.first_episode + tcfg.episodes
    );

    let out = train(net, &train_envs, &eval_envs, &tcfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(CliError::io(cfg.out_dir.display().to_string()))?;
    write_file(&cfg.out_dir.join("train_log.csv"), log_to_csv(&out.log))?;
    let meta = vec![
        (
            EPISODE_KEY.to_string(),
            count_tensor(tcfg.first_episode + tcfg.episodes),
        ),
        (
            SELECTIONS_KEY.to_string(),
            count_tensor(cfg.episode.selections),
        ),
    ];
    out.online.save(cfg.out_dir.join("final.ptw"), &meta)?;
    if let Some((best, score)) = &out.best {
        best.save(cfg.out_dir.join("best.ptw"), &meta)?;
        println!("best held-out SSIM {:.4}", score);
    }
    println!(
        "{} gradient steps; checkpoints and log in {}",
        out.gradient_steps,
        cfg.out_dir.display()
    );
    Ok(())
}

pub struct EvalArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub data: &'a Path,
    pub policy: PolicyKind,
    pub preselect: Option<usize>,
    pub selections: Option<usize>,
    pub slices: Option<usize>,
    pub seed: u64,
    pub out: Option<&'a Path>,
}

struct Loaded {
    net: Option<PhaseTransformer>,
    episode: EpisodeConfig,
    envs: Vec<Environment>,
}

fn load_for_rollouts(
    checkpoint: Option<&Path>,
    data: &Path,
    preselect: Option<usize>,
    selections: Option<usize>,
    limit: Option<usize>,
) -> Result<Loaded, CliError> {
    let ((f, p), mut slices) = load_data(data)?;
    let (net, extra) = match checkpoint {
        Some(path) => {
            let (n, e) = load_network(path)?;
            (Some(n), e)
        }
        None => (None, Vec::new()),
    };
    let preselect = match (&net, preselect) {
        (Some(n), Some(l)) if l != n.cfg.preselect => {
            return Err(CliError::Config(format!(
                "--preselect {} conflicts with the checkpoint's {}",
                l, n.cfg.preselect
            )))
        }
        (Some(n), _) => n.cfg.preselect,
        (None, l) => l.unwrap_or(EpisodeConfig::desk().preselect),
    };
    let selections = selections
        .or_else(|| meta_count(&extra, SELECTIONS_KEY))
        .unwrap_or(EpisodeConfig::desk().selections);
    let episode = EpisodeConfig::new(f, p, preselect, selections);
    episode
        .validate()
        .map_err(|e| CliError::Config(format!("episode: {}", e)))?;
    if let Some(n) = &net {
        if (n.cfg.image_rows, n.cfg.image_cols) != (f, p) {
            return Err(CliError::Config(format!(
                "checkpoint expects {}x{} slices, data is {}x{}",
                n.cfg.image_rows, n.cfg.image_cols, f, p
            )));
        }
    }
    if let Some(n) = limit {
        slices.truncate(n);
    }
    let envs = build_envs(&slices, &episode)?;
    Ok(Loaded { net, episode, envs })
}

fn rollout(
    kind: PolicyKind,
    net: Option<&PhaseTransformer>,
    env: &Environment,
    seed: u64,
) -> Result<Trajectory<f32>, CliError> {
    let mut policy: Box<dyn Policy<f32> + '_> = match kind {
        PolicyKind::Title => Box::new(TransformerPolicy {
            net: net.ok_or_else(|| CliError::Config("policy title needs --checkpoint".into()))?,
        }),
        PolicyKind::Random => Box::new(RandomPolicy::new(seed)),
        PolicyKind::Lowfreq => Box::new(LowFreqPolicy),
        PolicyKind::Oracle => Box::new(GreedyOraclePolicy),
    };
    Ok(env.rollout(&mut policy)?)
}

pub fn evaluate(args: EvalArgs) -> Result<(), CliError> {
    if args.policy == PolicyKind::Title && args.checkpoint.is_none() {
        return Err(CliError::Config("policy title needs --checkpoint".into()));
    }
    let loaded = load_for_rollouts(
        args.checkpoint,
        args.data,
        args.preselect,
        args.selections,
        args.slices,
    )?;
    let rows = parallel_map(&loaded.envs, threads()?, |i, env| {
        let tr = rollout(
            args.policy,
            loaded.net.as_ref(),
            env,
            args.seed.wrapping_add(i as u64),
        )?;
        let img = &tr.final_state.image;
        let gt = env.ground_truth();
        Ok((
            tr.final_quality(),
            psnr(img, gt, gt.max() as f64)?,
            nmse(img, gt)?,
        ))
    })?;

    let mut csv = String::from("slice_id,policy,ssim,psnr_db,nmse\n");
    for (i, (s, p, n)) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{:.6},{:.4},{:.6e}\n",
            i,
            args.policy.name(),
            s,
            p,
            n
        ));
    }
    let count = rows.len().max(1) as f64;
    let mean = |f: fn(&(f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / count;
    let (ms, mp, mn) = (mean(|r| r.0), mean(|r| r.1), mean(|r| r.2));
    csv.push_str(&format!(
        "mean,{},{:.6},{:.4},{:.6e}\n",
        args.policy.name(),
        ms,
        mp,
        mn
    ));
    match args.out {
        Some(path) => {
            write_file(path, &csv)?;
            println!(
                "{} on {} slices (L={}, M={}, AF {:.2}): SSIM {:.4}, PSNR {:.2} dB, NMSE {:.4e}",
                args.policy.name(),
                rows.len(),
                loaded.episode.preselect,
                loaded.episode.selections,
                loaded.episode.acceleration(),
                ms,
                mp,
                mn
            );
        }
        None => print!("{}", csv),
    }
    Ok(())
}

fn summarize(label: &str, v: &[f64]) {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (s.len().max(2) - 1) as f64;
    let p95 = s[((s.len() as f64 * 0.95).ceil() as usize).clamp(1, s.len()) - 1];
    println!(
        "{}: mean {:.3} ms, p95 {:.3} ms, std {:.3} ms",
        label,
        mean,
        p95,
        var.sqrt()
    );
}

pub fn bench_time(
    checkpoint: &Path,
    repeats: usize,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if repeats == 0 {
        return Err(CliError::Config("--repeats must be positive".into()));
    }
    let (net, extra) = load_network(checkpoint)?;
    let (f, p) = (net.cfg.image_rows, net.cfg.image_cols);
    let k = match data {
        Some(path) => {
            let (shape, slices) = load_data(path)?;
            if shape != (f, p) {
                return Err(CliError::Config(format!(
                    "checkpoint expects {}x{} slices, data is {}x{}",
                    f, p, shape.0, shape.1
                )));
            }
            slices
                .into_iter()
                .next()
                .ok_or_else(|| CliError::Data(format!("{} holds no slices", path.display())))?
        }
        None => fft2_centered(&generate_phantom::<f32>(&PhantomSpec::random(f, p, 6, 0))?)?,
    };
    let selections = meta_count(&extra, SELECTIONS_KEY)
        .unwrap_or(1)
        .clamp(1, p - net.cfg.preselect);
    let env = Environment::new(k, EpisodeConfig::new(f, p, net.cfg.preselect, selections))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let state = env.reset()?;
    let valid = env.actions().valid_slots(&state.indicator);
    net.forward(&state.image, &state.indicator)?;

    let (mut select, mut full) = (Vec::with_capacity(repeats), Vec::with_capacity(repeats));
    for _ in 0..repeats {
        let t0 = Instant::now();
        let q = net.forward(&state.image, &state.indicator)?;
        let slot = greedy_action(&q, &valid)?;
        select.push(t0.elapsed().as_secs_f64() * 1e3);
        let next = env.step(&state, env.actions().phase(slot))?;
        full.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(next);
    }
    println!(
        "{}x{} network, {} parameters, {} repeats",
        f,
        p,
        net.params.parameter_count(),
        repeats
    );
    summarize("selection (forward + argmax)", &select);
    summarize("selection + IFFT reconstruction", &full);
    if let Some(path) = out {
        let mut csv = String::from("repeat,select_ms,select_with_ifft_ms\n");
        for (i, (a, b)) in select.iter().zip(&full).enumerate() {
            csv.push_str(&format!("{},{:.4},{:.4}\n", i, a, b));
        }
        write_file(path, csv)?;
    }
    Ok(())
}

pub struct VisualizeArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub slice: usize,
    pub selections: Option<usize>,
    pub out_dir: &'a Path,
    pub average: bool,
}

pub fn visualize(args: VisualizeArgs) -> Result<(), CliError> {
    let loaded = load_for_rollouts(
        Some(args.checkpoint),
        args.data,
        None,
        args.selections,
        None,
    )?;
    let net = loaded.net.as_ref().expect("checkpoint given");
    let env = loaded.envs.get(args.slice).ok_or_else(|| {
        CliError::Config(format!(
            "--slice {} is out of range for {} slices",
            args.slice,
            loaded.envs.len()
        ))
    })?;
    fs::create_dir_all(args.out_dir).map_err(CliError::io(args.out_dir.display().to_string()))?;
    let (f, p) = (loaded.episode.frequencies, loaded.episode.phases);
    let tr = env.rollout(&mut TransformerPolicy { net })?;
    let files: [(&str, usize, usize, Vec<u8>); 4] = [
        (
            "mask.pgm",
            p,
            pgm::BARCODE_ROWS,
            pgm::mask_barcode(&tr.final_state.indicator),
        ),
        (
            "order.pgm",
            p,
            pgm::BARCODE_ROWS,
            pgm::order_heatmap(p, env.actions().preselected(), &tr.phases),
        ),
        (
            "recon.pgm",
            p,
            f,
            pgm::scale_to_u8(tr.final_state.image.data(), 1.0),
        ),
        (
            "truth.pgm",
            p,
            f,
            pgm::scale_to_u8(env.ground_truth().data(), 1.0),
        ),
    ];
    for (name, w, h, px) in &files {
        pgm::write(&args.out_dir.join(name), *w, *h, px)?;
    }
    println!(
        "slice {}: selected {:?}, SSIM {:.4} (from {:.4})",
        args.slice,
        tr.phases,
        tr.final_quality(),
        tr.initial_quality
    );

    if args.average {
        let all = evaluate_greedy(net, &loaded.envs)?;
        let mut freq = vec![0f32; p];
        for t in &all {
            for &ph in &t.phases {
                freq[ph] += 1.0 / all.len() as f32;
            }
        }
        let mass: f32 = freq.iter().sum();
        let center: f32 = freq[p / 4..p / 4 + p / 2].iter().sum();
        let peak = freq.iter().cloned().fold(0.0, f32::max);
        pgm::write(
            &args.out_dir.join("mask_mean.pgm"),
            p,
            pgm::BARCODE_ROWS,
            &pgm::scale_to_u8(&freq, peak).repeat(pgm::BARCODE_ROWS),
        )?;
        println!(
            "mean over {} slices: SSIM {:.4}, center-half share of learned selections {:.3}",
            all.len(),
            mean_final_quality(&all),
            if mass > 0.0 { center / mass } else { 0.0 }
        );
    }
    Ok(())
}
