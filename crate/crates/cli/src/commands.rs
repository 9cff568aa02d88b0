use std::fmt::Write as _;

use facdiff::bench::{diagnostics_csv, train_models, Bench, Roster, RunSpec, TrainedModels};
use facdiff::certify::{estimate_contraction, ContractionEstimate, TubeCertificate};
use facdiff::denoiser::learned_field;
use facdiff::schedule::plan_ddim;
use facdiff::score::{SamplePlan, ScoreField};
use facdiff::Exec;
use serde::Serialize;

use crate::config::{tasks_from_names, RosterKind, RunConfig};
use crate::output::{read_json, Artifacts};
use crate::{Cli, CliError, Command};

struct Ctx {
    cfg: RunConfig,
    exec: Exec,
    dry_run: bool,
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let exec = match cli.jobs {
        Some(1) => Exec::Sequential,
        Some(0) | None => Exec::Parallel,
        Some(n) => {
            // a second call in the same process keeps the first pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Exec::Parallel
        }
    };
    let ctx = Ctx {
        cfg,
        exec,
        dry_run: cli.dry_run,
    };
    match &cli.command {
        Command::Train => train(&ctx),
        Command::Certify { task } => certify(&ctx, task),
        Command::Race => race(&ctx),
        Command::Sweep => sweep(&ctx),
        Command::Diagnose => diagnose(&ctx),
        Command::EstimateContraction => contraction(&ctx),
    }
}

impl Ctx {
    fn artifacts(&self, command: &str, seeds: Vec<u64>) -> Artifacts {
        Artifacts::new(&self.cfg.out.join(command), command, self.cfg.hash(), seeds)
    }

    /// Prints what would be written and reports whether to stop.
    fn plan(&self, command: &str, files: &[&str]) -> bool {
        if self.dry_run {
            println!("config ok (sha256 {})", self.cfg.hash());
            for f in files.iter().chain(["config.toml", "manifest.json"].iter()) {
                println!("would write {}", self.cfg.out.join(command).join(f).display());
            }
        }
        self.dry_run
    }

    fn bench(&self) -> Result<Bench, CliError> {
        let c = &self.cfg;
        Ok(Bench::prepare(
            c.track_seed,
            c.train_steps,
            c.frame.clone(),
            c.vehicle.clone(),
            self.exec,
        )?)
    }

    fn models(&self) -> Result<Option<TrainedModels>, CliError> {
        if self.cfg.roster == RosterKind::ClosedForm {
            return Ok(None);
        }
        let path = self.cfg.checkpoint_path();
        if !path.exists() {
            return Err(CliError::Config(format!(
                "no checkpoint at {}; run `facdiff train` first or set roster = \"closed-form\"",
                path.display()
            )));
        }
        read_json(&path, "models").map(Some)
    }

    fn tasks(
        &self,
        bench: &Bench,
        names: &Option<Vec<String>>,
        held_out_default: bool,
    ) -> Result<Vec<Vec<usize>>, CliError> {
        match names {
            Some(n) => tasks_from_names(n),
            None if held_out_default => Ok(bench
                .matrix
                .held_out
                .iter()
                .filter(|z| bench.matrix.feasible(z))
                .cloned()
                .collect()),
            None => Ok(bench.matrix.feasible_tasks()),
        }
    }

    fn finish(&self, mut art: Artifacts) -> Result<(), CliError> {
        art.text(
            "config.toml",
            &format!("# config_sha256={}\n{}", self.cfg.hash(), self.cfg.to_toml()),
        )?;
        let m = art.finish()?;
        println!("wrote {}", m.display());
        Ok(())
    }
}

fn roster<'a>(cfg: &RunConfig, bench: &Bench, models: &'a Option<TrainedModels>) -> Result<Roster<'a>, CliError> {
    Ok(match models {
        Some(m) => Roster::learned(m)?,
        None => Roster::closed_form(&bench.expert, &bench.matrix, cfg.models.oracle)?,
    })
}

fn train(ctx: &Ctx) -> Result<(), CliError> {
    if ctx.plan("train", &["models.json", "losses.csv"]) {
        return Ok(());
    }
    let bench = ctx.bench()?;
    let mut mc = ctx.cfg.models.clone();
    mc.train.seed = ctx.cfg.seed;
    let models = train_models(&bench.expert, &bench.matrix, &bench.schedule, &mc, ctx.exec)?;
    let mut csv = String::from("network,step,loss\n");
    for (name, curve) in &models.losses {
        for (k, l) in curve.iter().enumerate() {
            let _ = writeln!(csv, "{name},{k},{l}");
        }
    }
    let mut art = ctx.artifacts("train", vec![ctx.cfg.seed]);
    art.json("models.json", "models", &models)?;
    art.csv("losses.csv", &csv)?;
    for (name, curve) in &models.losses {
        if let (Some(a), Some(b)) = (curve.first(), curve.last()) {
            println!("{name}: loss {a:.4} -> {b:.4}");
        }
    }
    ctx.finish(art)
}

fn contraction(ctx: &Ctx) -> Result<(), CliError> {
    if ctx.plan("estimate-contraction", &["contraction.json"]) {
        return Ok(());
    }
    let bench = ctx.bench()?;
    let mut spec = ctx.cfg.contraction.clone();
    spec.seed = ctx.cfg.seed;
    let ens = bench.contraction_ensemble(&spec)?;
    let k = estimate_contraction(&bench.stack, &ens, ctx.exec)?;
    println!(
        "lambda = {:.3}, B = {:.4}, w = {:.4} from {} step triples",
        k.lambda, k.b_kappa, k.w, k.n_triples
    );
    let mut art = ctx.artifacts("estimate-contraction", vec![ctx.cfg.seed]);
    art.json("contraction.json", "contraction", &k)?;
    ctx.finish(art)
}

#[derive(Serialize)]
struct CertifyEntry {
    task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    certificate: Option<TubeCertificate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    refused: Option<String>,
}

fn certify(ctx: &Ctx, task_flags: &[String]) -> Result<(), CliError> {
    let names = if task_flags.is_empty() {
        ctx.cfg.certify.tasks.clone()
    } else {
        Some(task_flags.to_vec())
    };
    if let Some(n) = &names {
        tasks_from_names(n)?;
    }
    let path = ctx.cfg.contraction_path();
    if !path.exists() {
        return Err(CliError::Config(format!(
            "no contraction estimate at {}; run `facdiff estimate-contraction` first or point certify.contraction at one",
            path.display()
        )));
    }
    let k: ContractionEstimate = read_json(&path, "contraction")?;
    if ctx.plan("certify", &["certificates.json"]) {
        return Ok(());
    }
    let bench = ctx.bench()?;
    let models = ctx.models()?;
    let roster = roster(&ctx.cfg, &bench, &models)?;
    let plan = plan_ddim(&bench.schedule, ctx.cfg.ddim_steps)?;
    let parts = match &ctx.cfg.certify.budget {
        Some(p) => p.clone(),
        None => {
            let net = models.as_ref().map(|m| learned_field(&m.factored));
            let samples = SamplePlan {
                samples_per_task: ctx.cfg.certify.budget_samples,
                seed: ctx.cfg.seed,
            };
            bench.measure_budget(
                &roster,
                net.as_ref().map(|n| n as &dyn ScoreField),
                &plan,
                samples,
                ctx.exec,
            )?
        }
    };
    let c = &ctx.cfg.certify;
    let mut entries = Vec::new();
    for z in ctx.tasks(&bench, &names, true)? {
        let name = bench.matrix.task_name(&z);
        match bench.certify_task(
            &roster,
            &z,
            &plan,
            &parts,
            k.clone(),
            ctx.cfg.seed,
            c.delta0,
            c.tolerance,
            ctx.exec,
        ) {
            Ok(cert) => {
                println!("{name}: {}", cert.summary());
                entries.push(CertifyEntry {
                    task: name,
                    certificate: Some(cert),
                    refused: None,
                });
            }
            Err(e @ facdiff::Error::NominalMissesGate { .. }) => {
                println!("{name}: {e}");
                entries.push(CertifyEntry {
                    task: name,
                    certificate: None,
                    refused: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut art = ctx.artifacts("certify", vec![ctx.cfg.seed]);
    art.json("certificates.json", "certificates", &entries)?;
    ctx.finish(art)
}

fn race(ctx: &Ctx) -> Result<(), CliError> {
    if ctx.plan("race", &["rows.csv", "aggregate.csv", "report.json"]) {
        return Ok(());
    }
    let bench = ctx.bench()?;
    let models = ctx.models()?;
    let roster = roster(&ctx.cfg, &bench, &models)?;
    let rc = &ctx.cfg.race;
    if let Some(m) = rc.models.iter().find(|m| !roster.has(**m)) {
        return Err(CliError::Config(format!(
            "model {} is not available with this roster",
            m.name()
        )));
    }
    let spec = RunSpec {
        models: rc.models.clone(),
        ddim_steps: ctx.cfg.ddim_steps,
        seeds: rc.seeds.clone(),
        tasks: Some(ctx.tasks(&bench, &rc.tasks, false)?),
    };
    let report = bench.run_matrix(&roster, &spec, ctx.exec)?;
    print!("{}", report.aggregate_csv());
    let mut art = ctx.artifacts("race", rc.seeds.clone());
    art.csv("rows.csv", &report.rows_csv())?;
    art.csv("aggregate.csv", &report.aggregate_csv())?;
    art.json("report.json", "report", &report)?;
    ctx.finish(art)
}

fn sweep(ctx: &Ctx) -> Result<(), CliError> {
    if ctx.plan("sweep", &["sweep.csv", "sweep.json"]) {
        return Ok(());
    }
    let bench = ctx.bench()?;
    let models = ctx.models()?;
    let roster = roster(&ctx.cfg, &bench, &models)?;
    let spec = &ctx.cfg.sweep;
    if let Some(m) = spec.models.iter().find(|m| !roster.has(**m)) {
        return Err(CliError::Config(format!(
            "model {} is not available with this roster",
            m.name()
        )));
    }
    let table = bench.sweep(&roster, spec, ctx.exec)?;
    print!("{}", table.to_csv());
    let mut art = ctx.artifacts("sweep", spec.seeds.clone());
    art.csv("sweep.csv", &table.to_csv())?;
    art.json("sweep.json", "sweep", &table)?;
    ctx.finish(art)
}

fn diagnose(ctx: &Ctx) -> Result<(), CliError> {
    if ctx.plan("diagnose", &["diagnose.csv"]) {
        return Ok(());
    }
    let bench = ctx.bench()?;
    let models = ctx.models()?;
    let roster = roster(&ctx.cfg, &bench, &models)?;
    let dc = &ctx.cfg.diagnose;
    let plan = plan_ddim(&bench.schedule, ctx.cfg.ddim_steps)?;
    let tasks = ctx.tasks(&bench, &dc.tasks, true)?;
    let rows = bench.diagnose(&roster, &plan, &tasks, &dc.seeds, ctx.exec)?;
    let csv = diagnostics_csv(&rows);
    print!("{csv}");
    let mut art = ctx.artifacts("diagnose", dc.seeds.clone());
    art.csv("diagnose.csv", &csv)?;
    ctx.finish(art)
}
