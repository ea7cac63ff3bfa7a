use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde_json::json;

use comic_core::gradcheck::{check_all, Component, GradCheckOptions};
use comic_core::trainer::{epoch_csv, model_loss_csv, Checkpoint, EpochLog};
use comic_core::{Dataset, Error, RunConfig, ShotGroup, Trainer};

use crate::rundir::{manifest_json, RunDir};
use crate::svg::{line_chart, Series};
use crate::{BuildArgs, CmdResult, EvalArgs, Failure, GradcheckArgs, Module, PlotArgs, TrainArgs};

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

pub fn build_dataset(a: BuildArgs) -> CmdResult {
    let mut data = load_config(a.config.as_deref())?.data;
    if let Some(v) = a.classes {
        data.classes = v;
    }
    if let Some(v) = a.dim {
        data.dim = v;
    }
    if let Some(v) = a.n_max {
        data.n_max = v;
    }
    if let Some(v) = a.decay {
        data.decay = v;
    }
    if let Some(v) = a.noise {
        data.noise = v;
    }
    if let Some(v) = a.missing_rate {
        data.missing_rate = v;
    }
    if let Some(v) = a.seed {
        data.seed = v;
    }
    let ds = data.build()?;
    ds.save(&a.out)?;
    let manifest = serde_json::to_string_pretty(&manifest_json(&ds)).expect("manifest serializes");
    fs::write(manifest_path(&a.out), manifest + "\n")
        .with_context(|| format!("writing manifest next to {}", a.out.display()))?;
    print!("{}", histogram(&ds));
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn histogram(ds: &Dataset) -> String {
    let m = &ds.manifest;
    let max = m.class_counts.iter().copied().max().unwrap_or(1).max(1);
    let mut out = String::new();
    let _ = writeln!(out, "class  count  group");
    for (c, (&n, g)) in m.class_counts.iter().zip(&m.shot_groups).enumerate() {
        let bar = "#".repeat((n * 40).div_ceil(max));
        let _ = writeln!(out, "{c:>5}  {n:>5}  {g:<6} {bar}");
    }
    let size = |g: ShotGroup| m.shot_groups.iter().filter(|&&x| x == g).count();
    let _ = writeln!(
        out,
        "shot groups: many {}, medium {}, few {}",
        size(ShotGroup::Many),
        size(ShotGroup::Medium),
        size(ShotGroup::Few)
    );
    out
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = load_config(a.config.as_deref())?;
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(anyhow!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(loss) = &a.loss {
        cfg.set("loss", loss)?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    for m in &a.disable {
        match m {
            Module::Rlc => cfg.train.use_rlc = false,
            Module::Mfm => cfg.set("loss", "bce")?,
            Module::Htb => cfg.train.use_htb = false,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_error(path: &Path, e: anyhow::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(format!("{e:#}")),
    }
}

fn write_logs(run: &RunDir, trainer: &Trainer) -> Result<(), Error> {
    for (path, text) in [
        (run.epochs(), epoch_csv(trainer.history())),
        (run.model_losses(), model_loss_csv(trainer.history())),
        (run.corrections(), trainer.correction_log()),
    ] {
        run.write(&path, &text).map_err(|e| io_error(&path, e))?;
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let cfg = resolve_train_config(&a)?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.config
            .as_deref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    });
    let run = RunDir::new(a.run_root.join(&name));
    if run.checkpoint().exists() && !a.force && a.resume.is_none() {
        return Err(Failure::from(anyhow!(
            "{} already holds a run; pass --force to replace it",
            run.root.display()
        )));
    }

    let (dataset, dataset_path) = match &a.dataset {
        Some(p) => {
            if !p.exists() {
                return Err(anyhow!("dataset {} does not exist", p.display()).into());
            }
            let abs = fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))?;
            (Dataset::load(p)?, abs.display().to_string())
        }
        None => (cfg.data.build()?, "dataset.jsonl".to_string()),
    };
    if a.dataset.is_none() {
        run.write(&run.dataset(), &dataset.to_jsonl())?;
    }
    run.write(&run.config(), &cfg.to_text())?;
    let info = json!({
        "dataset_path": dataset_path,
        "dataset_hash": dataset.content_hash(),
        "manifest": manifest_json(&dataset),
    });
    run.write(&run.info(), &(serde_json::to_string_pretty(&info).expect("json") + "\n"))?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            let mut expected = cfg.train.clone();
            expected.epochs = ckpt.config.epochs;
            if expected != ckpt.config {
                return Err(anyhow!(
                    "checkpoint {} was trained with a different configuration",
                    path.display()
                )
                .into());
            }
            ckpt.config.epochs = cfg.train.epochs;
            Trainer::restore(ckpt, &dataset)?
        }
        None => Trainer::new(cfg.train.clone(), &dataset)?,
    };

    let every = cfg.checkpoint_every;
    let result = trainer.run(|t, log| {
        print_epoch(log);
        write_logs(&run, t)?;
        if every > 0 && log.epoch % every == 0 {
            t.checkpoint().save(run.periodic_checkpoint(log.epoch)).or_else(|e| match e {
                Error::Io { .. } => {
                    let dir = run.root.join("checkpoints");
                    fs::create_dir_all(&dir).map_err(|s| io_error(&dir, s.into()))?;
                    t.checkpoint().save(run.periodic_checkpoint(log.epoch))
                }
                other => Err(other),
            })?;
        }
        Ok(())
    });
    write_logs(&run, &trainer)?;
    trainer.checkpoint().save(run.checkpoint())?;
    result?;

    if !trainer.history().is_empty() {
        let report = trainer.evaluate(trainer.test_split())?;
        run.write(&run.metrics(), &(report.to_json() + "\n"))?;
    }
    println!("run written to {}", run.root.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_epoch(h: &EpochLog) {
    println!(
        "epoch {:>3}  loss {:.5} (rlc {:.5} mfm {:.5} htb {:.5})  corrections {} (tp {} fp {})  mAP {} many {} medium {} few {}",
        h.epoch,
        h.loss_total,
        h.loss_rlc,
        h.loss_mfm,
        h.loss_htb,
        h.corrections,
        h.tp,
        h.fp,
        fmt_opt(h.map_total),
        fmt_opt(h.map_many),
        fmt_opt(h.map_medium),
        fmt_opt(h.map_few),
    );
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let run = a.run.as_ref().map(RunDir::new);
    let ckpt_path = match (&a.checkpoint, &run) {
        (Some(p), _) => p.clone(),
        (None, Some(r)) => r.checkpoint(),
        (None, None) => return Err(Failure::usage(anyhow!("pass --run or --checkpoint"))),
    };
    if !ckpt_path.exists() {
        return Err(anyhow!("checkpoint {} does not exist", ckpt_path.display()).into());
    }
    let ds_path = match (&a.dataset, &run) {
        (Some(p), _) => p.clone(),
        (None, Some(r)) => r.recorded_dataset()?,
        (None, None) => return Err(Failure::usage(anyhow!("pass --dataset or --run"))),
    };
    let dataset = Dataset::load(&ds_path)?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let trainer = Trainer::restore(ckpt, &dataset).map_err(|e| match e {
        Error::Checkpoint { ref field, .. } if field == "dataset_hash" => {
            Failure::from(anyhow!("refusing to evaluate: {e}"))
        }
        other => Failure::from(other),
    })?;
    let json = trainer.evaluate(trainer.test_split())?.to_json();
    if let Some(out) = &a.out {
        fs::write(out, json.clone() + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{json}");
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let components = if a.component.is_empty() {
        Component::ALL.to_vec()
    } else {
        a.component
            .iter()
            .map(|c| c.parse::<Component>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(Failure::usage)?
    };
    let inject = a
        .inject_sign_flip
        .as_deref()
        .map(str::parse::<Component>)
        .transpose()
        .map_err(Failure::usage)?;
    let opts = GradCheckOptions {
        seed: a.seed,
        instances: a.instances,
        inject_sign_flip: inject,
    };
    let reports = check_all(&components, &opts)?;
    println!("{:<10} {:>9} {:>12} {:>9}  status", "component", "instances", "max rel err", "tolerance");
    for r in &reports {
        println!(
            "{:<10} {:>9} {:>12.3e} {:>9.0e}  {}",
            r.component.name(),
            r.instances,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.component.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::numeric(anyhow!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn plot_data(a: PlotArgs) -> CmdResult {
    let run = RunDir::new(&a.run);
    if !run.epochs().exists() {
        return Err(anyhow!("{} has no epoch log", a.run.display()).into());
    }
    if !run.checkpoint().exists() {
        return Err(anyhow!("{} has no checkpoint", a.run.display()).into());
    }
    let history = Checkpoint::load(run.checkpoint())?.state.history;
    let out = a.out.clone().unwrap_or_else(|| run.root.join("plots"));
    let epochs: Vec<f64> = history.iter().map(|h| h.epoch as f64).collect();

    let mut tp_fp = String::from("epoch,tp,fp,cumulative_tp,cumulative_fp\n");
    let (mut ctp, mut cfp) = (0, 0);
    for h in &history {
        ctp += h.tp;
        cfp += h.fp;
        let _ = writeln!(tp_fp, "{},{},{},{ctp},{cfp}", h.epoch, h.tp, h.fp);
    }
    let mut map = String::from("epoch,mAP_total,mAP_many,mAP_medium,mAP_few\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for h in &history {
        let _ = writeln!(
            map,
            "{},{},{},{},{}",
            h.epoch,
            cell(h.map_total),
            cell(h.map_many),
            cell(h.map_medium),
            cell(h.map_few)
        );
    }

    let series = |name: &'static str, f: &dyn Fn(&EpochLog) -> Option<f64>| Series {
        name,
        points: history
            .iter()
            .zip(&epochs)
            .filter_map(|(h, &e)| f(h).map(|v| (e, v)))
            .collect(),
    };
    let cumulative = |pick: fn(&EpochLog) -> usize| {
        let mut acc = 0;
        history
            .iter()
            .zip(&epochs)
            .map(|(h, &e)| {
                acc += pick(h);
                (e, acc as f64)
            })
            .collect::<Vec<_>>()
    };
    let tp_svg = line_chart(
        "Label corrections (cumulative)",
        "epoch",
        &[
            Series { name: "true positives", points: cumulative(|h| h.tp) },
            Series { name: "false positives", points: cumulative(|h| h.fp) },
        ],
    );
    let loss_svg = line_chart(
        "Loss per model",
        "epoch",
        &[
            series("head", &|h| h.loss_head),
            series("balanced", &|h| Some(h.loss_balanced)),
            series("tail", &|h| h.loss_tail),
        ],
    );
    let map_svg = line_chart(
        "mAP per shot group",
        "epoch",
        &[
            series("total", &|h| h.map_total),
            series("many", &|h| h.map_many),
            series("medium", &|h| h.map_medium),
            series("few", &|h| h.map_few),
        ],
    );
    for (file, text) in [
        ("tp_fp.csv", tp_fp),
        ("loss_per_model.csv", model_loss_csv(&history)),
        ("map_per_group.csv", map),
        ("tp_fp.svg", tp_svg),
        ("loss_per_model.svg", loss_svg),
        ("map_per_group.svg", map_svg),
    ] {
        run.write(&out.join(file), &text)?;
    }
    println!("plot data written to {}", out.display());
    Ok(())
}
