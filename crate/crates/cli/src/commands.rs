use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{s, Array2};

use vimco_core::data::{sop_view, Cases, DataSource, Dataset};
use vimco_core::estimators::{Estimator, EstimatorKind};
use vimco_core::objective::MeanKind;
use vimco_core::oracle::toys::suite;
use vimco_core::oracle::{enumerate, estimator_moments, exact_bound_from, Budget};
use vimco_core::rng::RngTree;
use vimco_core::sbn::SbnSystem;
use vimco_core::train::{epoch_order, eval_bound, eval_nll_per_case, load_checkpoint, train, TaskData, TaskMode, TrainConfig, Trainer};
use vimco_core::verify::{report_csv, run_suite, SuiteConfig};

use crate::settings::Settings;

/// Raised when `oracle-check` finds failing rows; maps to exit code 2.
#[derive(Debug)]
pub struct ChecksFailed(pub usize);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

pub fn data_source(s: &Settings) -> Result<DataSource> {
    Ok(match s.raw("data.source") {
        "bars" => DataSource::Bars {
            side: s.get("data.bars_side")?,
            cases: s.get("data.bars_cases")?,
            noise: s.get("data.bars_noise")?,
            seed: s.get("seed")?,
        },
        "idx" => {
            let sizes: Vec<usize> = s.list("data.split")?;
            let sizes: [usize; 3] = sizes
                .try_into()
                .map_err(|_| anyhow::anyhow!("data.split needs three sizes"))?;
            DataSource::Idx {
                path: s.get("data.images")?,
                binarization: s.get("data.binarize")?,
                sizes,
            }
        }
        "amat" => DataSource::Amat {
            train: s.get("data.train")?,
            valid: s.get("data.valid")?,
            test: s.get("data.test")?,
            height: s.get("data.height")?,
            width: s.get("data.width")?,
        },
        other => bail!("unknown data.source {other:?} (bars, idx or amat)"),
    })
}

pub fn train_config(s: &Settings) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        estimator: s.get("train.estimator")?,
        k: s.get("train.k")?,
        lr: s.get("train.lr")?,
        batch_size: s.get("train.batch_size")?,
        epochs: s.get("train.epochs")?,
        max_steps: s.opt("train.max_steps")?,
        seed: s.get("seed")?,
        mean_kind: s.get("train.mean")?,
        mode: s.get("train.mode")?,
        latent: s.list("train.latent")?,
        sweep: s.list("train.sweep")?,
        eval_every: s.get("train.eval_every")?,
        eval_draws: s.get("train.eval_draws")?,
        log_every: s.get("train.log_every")?,
        init_std: s.get("train.init_std")?,
        init_observation_bias: s.get("train.init_observation_bias")?,
        sleep: s.get("train.sleep")?,
        rms_decay: s.get("train.rms_decay")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(s: &Settings) -> Result<PathBuf> {
    let dir: PathBuf = s.get("out")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn rate_label(lr: f64) -> String {
    format!("lr-{lr:e}")
}

pub fn cmd_train(s: &Settings) -> Result<()> {
    let base = train_config(s)?;
    let ds = data_source(s)?.load()?;
    let data = TaskData::new(&ds, base.mode)?;
    let root = out_dir(s)?;
    let rates = base.learning_rates();
    let sweeping = !base.sweep.is_empty();
    let header = "lr,best_valid_bound,best_step,steps,test_bound\n";
    let mut summary = header.to_string();
    for lr in rates {
        let cfg = TrainConfig { lr, ..base.clone() };
        let dir = if sweeping { root.join(rate_label(lr)) } else { root.clone() };
        fs::create_dir_all(&dir)?;
        let mut resolved = s.clone();
        resolved.set("train.lr", lr)?;
        resolved.set("out", dir.display())?;
        write(&dir.join("config.resolved"), &resolved.resolved(&["train", "data"]))?;
        let outcome = train(&cfg, &data, Some(&dir))?;
        write(&dir.join("metrics.csv"), &outcome.metrics_csv(&cfg))?;
        let (best, step) = outcome.best.unwrap_or((f64::NAN, outcome.steps));
        let test = eval_bound(&outcome.best_system, &data.test, cfg.k, cfg.eval_draws, &RngTree::new(cfg.seed))?;
        let line = format!("{lr:e},{best},{step},{},{test}\n", outcome.steps);
        write(&dir.join("report.csv"), &format!("{header}{line}"))?;
        summary += &line;
        eprintln!("lr {lr:e}: best validation bound {best:.4} at step {step}, test bound {test:.4}");
    }
    if sweeping {
        write(&root.join("report.csv"), &summary)?;
    }
    Ok(())
}

fn eval_inputs(s: &Settings) -> Result<(SbnSystem, Cases, String)> {
    let ckpt: PathBuf = s.get("eval.checkpoint").context("a checkpoint is required")?;
    let system = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let ds = data_source(s)?.load()?;
    let mode = if system.dims().is_conditional() {
        TaskMode::SopLearned
    } else {
        TaskMode::Generative
    };
    let data = TaskData::new(&ds, mode)?;
    let split = s.raw("eval.split").to_string();
    let cases = match split.as_str() {
        "train" => data.train,
        "valid" => data.valid,
        "test" => data.test,
        other => bail!("unknown eval.split {other:?}"),
    };
    Ok((system, cases, split))
}

pub fn cmd_eval_nll(s: &Settings) -> Result<()> {
    let (system, cases, split) = eval_inputs(s)?;
    let samples: usize = s.get("eval.samples")?;
    let v = eval_nll_per_case(&system, &cases, samples, &RngTree::new(s.get("seed")?))?;
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let dir = out_dir(s)?;
    write(&dir.join("config.resolved"), &s.resolved(&["eval", "data"]))?;
    write(
        &dir.join("report.csv"),
        &format!("split,cases,samples,nll,stderr\n{split},{},{samples},{mean},{}\n", v.len(), (var / n).sqrt()),
    )?;
    eprintln!("{split}: NLL estimate {mean:.4} nats with {samples} samples");
    Ok(())
}

pub fn cmd_eval_bound(s: &Settings) -> Result<()> {
    let (system, cases, split) = eval_inputs(s)?;
    let k: usize = match s.opt("eval.k")? {
        Some(k) => k,
        None => s.get("train.k")?,
    };
    let draws: usize = s.get("eval.draws")?;
    let b = eval_bound(&system, &cases, k, draws, &RngTree::new(s.get("seed")?))?;
    let dir = out_dir(s)?;
    write(&dir.join("config.resolved"), &s.resolved(&["eval", "data"]))?;
    write(
        &dir.join("report.csv"),
        &format!("split,cases,k,draws,bound\n{split},{},{k},{draws},{b}\n", cases.len()),
    )?;
    eprintln!("{split}: {k}-sample bound {b:.4}");
    Ok(())
}

fn budget(s: &Settings, tuples_key: &str) -> Result<Budget> {
    Ok(Budget {
        max_configs: s.get("oracle.max_configs")?,
        max_tuples: s.get(tuples_key)?,
    })
}

pub fn cmd_oracle_check(s: &Settings) -> Result<()> {
    let cfg = SuiteConfig {
        seed: s.get("seed")?,
        instances: s.get("oracle.instances")?,
        max_latent_bits: s.get("oracle.max_latent_bits")?,
        ks: s.list("oracle.k")?,
        budget: budget(s, "oracle.max_tuples")?,
    };
    let dir = out_dir(s)?;
    write(&dir.join("config.resolved"), &s.resolved(&["oracle"]))?;
    let rows = run_suite(&cfg)?;
    write(&dir.join("report.csv"), &report_csv(&rows))?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    eprintln!("{} checks, {failed} failed", rows.len());
    if failed > 0 {
        return Err(ChecksFailed(failed).into());
    }
    Ok(())
}

fn probe_estimator(kind: EstimatorKind, lk: f64) -> Option<Estimator> {
    match kind {
        EstimatorKind::Naive => Some(Estimator::Naive),
        EstimatorKind::Nvil => Some(Estimator::nvil(lk, 0.0)),
        EstimatorKind::Vimco => Some(Estimator::Vimco(MeanKind::Geometric)),
        EstimatorKind::RwsWake => Some(Estimator::RwsWake),
        EstimatorKind::RwsSleep => None,
    }
}

/// Exact θ-variance on toy models and learning-signal RMS from short
/// training runs, per estimator and K.
pub fn cmd_probe_variance(s: &Settings) -> Result<()> {
    let seed: u64 = s.get("seed")?;
    let ks: Vec<usize> = s.list("probe.k")?;
    let kinds: Vec<EstimatorKind> = s.list("probe.estimators")?;
    let n: usize = s.get("probe.instances")?;
    let b = budget(s, "probe.max_tuples")?;
    let dir = out_dir(s)?;
    write(&dir.join("config.resolved"), &s.resolved(&["probe", "train", "data"]))?;
    let mut out = String::from("estimator,k,source,metric,value\n");

    for &k in &ks {
        // Largest latent size whose K-tuples fit the budget.
        let bits = (1..=3).rev().find(|&d| (1u64 << d).checked_pow(k as u32).is_some_and(|t| t <= b.max_tuples));
        let Some(bits) = bits.filter(|&d| d >= 2) else {
            eprintln!("K = {k}: no toy model fits the tuple budget, skipping exact variances");
            continue;
        };
        let instances = suite(seed, n, bits)?;
        let mut totals = vec![0.0; kinds.len()];
        for t in &instances {
            let e = enumerate(&t.system, &t.x, t.context(), &b)?;
            let lk = exact_bound_from(&e, k, &b)?;
            for (tot, kind) in totals.iter_mut().zip(&kinds) {
                if let Some(est) = probe_estimator(*kind, lk).filter(|_| k >= kind.min_k()) {
                    *tot += estimator_moments(&e, k, &est, &b)?.summed_theta_variance();
                }
            }
        }
        for (tot, kind) in totals.iter().zip(&kinds) {
            if probe_estimator(*kind, 0.0).is_some() && k >= kind.min_k() {
                let _ = writeln!(out, "{kind},{k},exact,theta_variance,{}", tot / instances.len() as f64);
            }
        }
    }

    let steps: u64 = s.get("probe.steps")?;
    if steps > 0 {
        let ds = data_source(s)?.load()?;
        let base = train_config(s)?;
        let data = TaskData::new(&ds, base.mode)?;
        for &k in &ks {
            for kind in &kinds {
                if !matches!(kind, EstimatorKind::Naive | EstimatorKind::Nvil | EstimatorKind::Vimco) || k < kind.min_k() {
                    continue;
                }
                let cfg = TrainConfig {
                    estimator: *kind,
                    k,
                    mean_kind: vimco_core::train::SignalMean::Geometric,
                    ..base.clone()
                };
                let (final_rms, mean_rms) = signal_trace(&cfg, &data, steps)?;
                let _ = writeln!(out, "{kind},{k},training,signal_rms_final,{final_rms}");
                let _ = writeln!(out, "{kind},{k},training,signal_rms_after_burn_in,{mean_rms}");
            }
        }
    }
    write(&dir.join("report.csv"), &out)?;
    Ok(())
}

/// Final smoothed RMS and the mean smoothed RMS over the last 80% of steps.
pub fn signal_trace(cfg: &TrainConfig, data: &TaskData, steps: u64) -> Result<(f64, f64)> {
    let mut trainer = Trainer::new(cfg.clone(), &data.train)?;
    let n = data.train.len();
    let burn_in = steps / 5;
    let (mut sum, mut count, mut last) = (0.0, 0u64, 0.0);
    let mut step = 0u64;
    let mut epoch = 0u64;
    while step < steps {
        let order = epoch_order(cfg.seed, epoch, n);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            if step >= steps {
                break;
            }
            let xs = data.train.observations.select(ndarray::Axis(0), idx);
            let cs = data.train.contexts.as_ref().map(|c| c.select(ndarray::Axis(0), idx));
            let st = trainer.step_on(xs.view(), cs.as_ref().map(|c| c.view()), [epoch, bi as u64])?;
            step += 1;
            last = st.smoothed_rms;
            if step > burn_in {
                sum += st.smoothed_rms;
                count += 1;
            }
        }
        epoch += 1;
    }
    Ok((last, sum / count.max(1) as f64))
}

fn pgm(width: usize, height: usize, pixels: &Array2<f64>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Grid with one column per case: the original image on top, then `n`
/// completions (top half kept, bottom half replaced by Bernoulli means).
pub fn completion_grid(system: &SbnSystem, ds: &Dataset, images: &Array2<f64>, n: usize, seed: u64) -> Result<Array2<f64>> {
    let (h, w) = (ds.height, ds.width);
    let (ctx, _) = sop_view(images.view(), h, w)?;
    let cut = (h / 2) * w;
    let cases = images.nrows();
    let tree = RngTree::new(seed);
    let mut grid = Array2::zeros(((n + 1) * h, cases * w));
    for c in 0..cases {
        let context = ctx.row(c).to_vec();
        for r in 0..=n {
            let mut img = images.row(c).to_owned();
            if r > 0 {
                let (_, means) = system
                    .model
                    .sample_prior(&mut tree.stream(&[c as u64, r as u64]), Some(&context))?;
                img.slice_mut(s![cut..]).assign(&means);
            }
            for y in 0..h {
                for x in 0..w {
                    grid[[r * h + y, c * w + x]] = img[y * w + x];
                }
            }
        }
    }
    Ok(grid)
}

pub fn cmd_complete(s: &Settings) -> Result<()> {
    let ckpt: PathBuf = s.get("eval.checkpoint").context("a checkpoint is required")?;
    let system = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if !system.dims().is_conditional() {
        bail!("{} is not a structured-output checkpoint", ckpt.display());
    }
    let ds = data_source(s)?.load()?;
    if system.dims().context + system.dims().observation != ds.pixels() {
        bail!("checkpoint and dataset image sizes differ");
    }
    let split = match s.raw("eval.split") {
        "train" => &ds.train,
        "valid" => &ds.valid,
        "test" => &ds.test,
        other => bail!("unknown eval.split {other:?}"),
    };
    let cases: usize = s.get("complete.cases")?;
    let n: usize = s.get("complete.n")?;
    if cases == 0 || cases > split.nrows() {
        bail!("complete.cases must lie in 1..={}", split.nrows());
    }
    let images = split.slice(s![..cases, ..]).to_owned();
    let grid = completion_grid(&system, &ds, &images, n, s.get("seed")?)?;
    let dir = out_dir(s)?;
    write(&dir.join("config.resolved"), &s.resolved(&["eval", "complete", "data"]))?;
    let path = dir.join("completions.pgm");
    fs::write(&path, pgm(grid.ncols(), grid.nrows(), &grid))?;
    eprintln!("wrote {} ({} × {})", path.display(), grid.ncols(), grid.nrows());
    Ok(())
}
