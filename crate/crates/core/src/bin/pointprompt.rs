//! End-to-end pipeline driver: generate the synthetic benchmark, pretrain
//! and freeze the encoders, distill prompts, generate attack archives,
//! evaluate robustness grids, export embeddings, and pretty-print reports.
//!
//! Every artifact lives under `--out` by convention (override per flag):
//! `train.manifest`, `test.manifest`, `teachers.ppck`, `state.ppck`,
//! `train_log.csv`, `lambda_trace.csv`, `attacks.manifest` + `attacks.f32`,
//! `report.csv` (+ `report-blackbox.csv`), `embeddings-*.csv`.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pointprompt::attacks::{generate_archive, AttackArchive, AttackSuiteConfig, ARCHIVE_MANIFEST};
use pointprompt::encoders::{bootstrap_teachers, BootstrapConfig, TeacherBundle};
use pointprompt::geometry::{
    generate_dataset, load_manifest, manifest_for_split, mix_seed, write_manifest, DatasetSpec,
    PointCloud,
};
use pointprompt::pipeline::{
    adv_train_baseline, distill_from, evaluate_archive, evaluate_whitebox_grid,
    export_embeddings_csv, load_state, load_teachers, save_state, save_teachers, train_surrogate,
    write_lambda_trace, write_train_log, AdvTrainConfig, DefenseKind, DistillConfig,
    InferenceSession, RobustnessReport, RobustnessRow, TrainState,
};
use pointprompt::projection::project_depth;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "pointprompt",
    about = "Prompt-based robustness for point-cloud classifiers: data, training, attacks, reports"
)]
struct Cli {
    /// Training config TOML (defaults are used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config's seed when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory all artifacts are read from and written to.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic 8-class benchmark and write split manifests.
    GenData {
        /// Also dump this many training clouds as PGM depth views.
        #[arg(long, default_value_t = 0)]
        pgm: usize,
    },
    /// Pretrain the four encoders jointly, freeze them, save the bundle.
    Bootstrap,
    /// Train point/text prompts against the frozen bundle.
    Distill {
        /// Resume from a saved training state instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train an independent surrogate and archive its attack suite for
    /// black-box transfer evaluation.
    AttackGen,
    /// Run the robustness grid (models x defenses x attacks) and write CSV.
    Evaluate {
        /// Comma-separated defenses: none, srs, sor.
        #[arg(long, default_value = "none,srs,sor")]
        defenses: String,
        /// Also replay the attack archive (black-box rows).
        #[arg(long, default_value_t = false)]
        blackbox: bool,
        /// Train and include the head-finetuned adversarial baseline.
        #[arg(long, default_value_t = false)]
        adv_baseline: bool,
        /// Evaluate only this many test samples per class (0 = all).
        #[arg(long, default_value_t = 0)]
        per_class: usize,
    },
    /// Write per-sample embeddings of the test split as CSV.
    ExportEmbeddings {
        /// Which model embeds: "prompted" or "no-prompt".
        #[arg(long, default_value = "prompted")]
        model: String,
        /// Embed PGD-attacked clouds instead of clean ones.
        #[arg(long, default_value_t = false)]
        attacked: bool,
    },
    /// Pretty-print report.csv (and the black-box report when present).
    Report,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;
    match &cli.cmd {
        Cmd::GenData { pgm } => gen_data(&cli, *pgm),
        Cmd::Bootstrap => bootstrap(&cli),
        Cmd::Distill { resume } => distill_cmd(&cli, resume.as_deref()),
        Cmd::AttackGen => attack_gen(&cli),
        Cmd::Evaluate {
            defenses,
            blackbox,
            adv_baseline,
            per_class,
        } => evaluate(&cli, defenses, *blackbox, *adv_baseline, *per_class),
        Cmd::ExportEmbeddings { model, attacked } => export_embeddings(&cli, model, *attacked),
        Cmd::Report => report(&cli),
    }
}

// ── shared plumbing ──────────────────────────────────────────────────────────

fn base_seed(cli: &Cli) -> u64 {
    cli.seed.unwrap_or(0)
}

fn distill_config(cli: &Cli) -> Result<DistillConfig> {
    let mut cfg = match &cli.config {
        Some(path) => DistillConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => DistillConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_split(cli: &Cli, split: &str) -> Result<(Vec<PointCloud>, Vec<String>)> {
    let path = cli.out.join(format!("{split}.manifest"));
    load_manifest(&path).with_context(|| {
        format!(
            "loading {} (run `pointprompt gen-data` first?)",
            path.display()
        )
    })
}

fn load_bundle(cli: &Cli) -> Result<TeacherBundle> {
    let path = cli.out.join("teachers.ppck");
    load_teachers(&path).with_context(|| {
        format!(
            "loading {} (run `pointprompt bootstrap` first?)",
            path.display()
        )
    })
}

fn load_state_if_any(cli: &Cli, bundle: &TeacherBundle) -> Result<Option<TrainState>> {
    let path = cli.out.join("state.ppck");
    if !path.exists() {
        return Ok(None);
    }
    let cfg = distill_config(cli)?;
    let state = load_state(&path, bundle, &cfg)
        .with_context(|| format!("loading {}", path.display()))?;
    Ok(Some(state))
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ── subcommands ──────────────────────────────────────────────────────────────

fn gen_data(cli: &Cli, pgm: usize) -> Result<()> {
    let seed = base_seed(cli);
    let spec = DatasetSpec::standard(seed);
    let data = generate_dataset(&spec)?;
    write_manifest(&cli.out.join("train.manifest"), &manifest_for_split(&spec, 0))?;
    write_manifest(&cli.out.join("test.manifest"), &manifest_for_split(&spec, 1))?;
    println!(
        "wrote {} train / {} test samples across {} classes (seed {seed})",
        data.train.len(),
        data.test.len(),
        data.class_names.len()
    );
    if pgm > 0 {
        let dir = cli.out.join("pgm");
        std::fs::create_dir_all(&dir)?;
        for pc in data.train.iter().take(pgm) {
            let depth = project_depth(pc, 32, 6)?;
            for v in 0..depth.view_count() {
                depth.write_pgm(v, &dir.join(format!("{}-view{v}.pgm", pc.id)))?;
            }
        }
        println!("dumped depth views of {pgm} clouds to {}", dir.display());
    }
    Ok(())
}

fn bootstrap(cli: &Cli) -> Result<()> {
    let (train, class_names) = load_split(cli, "train")?;
    let seed = base_seed(cli);
    let cfg = BootstrapConfig::standard();
    let bundle = bootstrap_teachers(&train, &class_names, &cfg, seed)?;
    let path = cli.out.join("teachers.ppck");
    save_teachers(&bundle, &path)?;
    let m = &bundle.metrics;
    println!(
        "froze encoders after {} epochs; final accuracy student {:.3}, point {:.3}, image {:.3}",
        m.epochs_run, m.final_accuracy[0], m.final_accuracy[1], m.final_accuracy[2]
    );
    println!("saved {}", path.display());
    Ok(())
}

fn distill_cmd(cli: &Cli, resume: Option<&Path>) -> Result<()> {
    let (train, _) = load_split(cli, "train")?;
    let bundle = load_bundle(cli)?;
    let cfg = distill_config(cli)?;
    let state = match resume {
        Some(path) => Some(load_state(path, &bundle, &cfg)?),
        None => None,
    };
    if let Some(s) = &state {
        println!("resuming at epoch {} (step {})", s.next_epoch, s.step);
    }
    let run = distill_from(&bundle, &train, &cfg, state, None)?;
    let state_path = cli.out.join("state.ppck");
    save_state(&run.state, &bundle, &cfg, &state_path)?;
    write_train_log(&run.log, &cli.out.join("train_log.csv"))?;
    write_lambda_trace(&run.lambda_trace, &cli.out.join("lambda_trace.csv"))?;
    if let Some(last) = run.log.last() {
        println!(
            "distilled to epoch {} ({} steps); final weights image {:.3}, point {:.3}, text {:.3}",
            run.state.next_epoch, run.state.step, last.weights[0], last.weights[1], last.weights[2]
        );
    }
    println!("saved {}", state_path.display());
    Ok(())
}

fn attack_gen(cli: &Cli) -> Result<()> {
    let (train, class_names) = load_split(cli, "train")?;
    let (test, _) = load_split(cli, "test")?;
    let seed = base_seed(cli);
    // Transfer protocol: the attacker never sees the deployed model, only an
    // independently trained stand-in from the same encoder family.
    let surrogate_seed = mix_seed(seed, 0x5A60, 0);
    println!("training surrogate encoder (seed {surrogate_seed})...");
    let surrogate = train_surrogate(&train, &class_names, surrogate_seed)?;
    let suite = AttackSuiteConfig::default();
    let archive = generate_archive(&surrogate, &test, &suite, seed)?;
    archive.write(&cli.out)?;
    let mut meta = String::new();
    let _ = writeln!(meta, "surrogate independent-point-encoder");
    let _ = writeln!(meta, "surrogate_seed {surrogate_seed}");
    let _ = writeln!(meta, "seed {seed}");
    let _ = writeln!(
        meta,
        "pgd epsilon={} steps={} alpha={}",
        suite.pgd.epsilon, suite.pgd.steps, suite.pgd.alpha
    );
    let _ = writeln!(meta, "entries {}", archive.entries.len());
    std::fs::write(cli.out.join("attacks.meta"), meta)?;
    println!(
        "archived {} entries against the surrogate (seed {seed})",
        archive.entries.len()
    );
    Ok(())
}

fn parse_defenses(spec: &str) -> Result<Vec<DefenseKind>> {
    let mut out = Vec::new();
    for name in spec.split(',').filter(|s| !s.is_empty()) {
        out.push(match name.trim() {
            "none" => DefenseKind::None,
            "srs" => DefenseKind::Srs { keep_ratio: 0.75 },
            "sor" => DefenseKind::Sor { k: 5, alpha: 1.1 },
            other => bail!("unknown defense '{other}' (expected none, srs, sor)"),
        });
    }
    if out.is_empty() {
        bail!("no defenses requested");
    }
    Ok(out)
}

/// Class-balanced prefix subset: the first `per_class` test samples of each
/// class in manifest order (0 = everything).
fn subset(test: &[PointCloud], classes: usize, per_class: usize) -> Vec<PointCloud> {
    if per_class == 0 {
        return test.to_vec();
    }
    let mut taken = vec![0usize; classes];
    let mut out = Vec::new();
    for pc in test {
        if taken[pc.label] < per_class {
            taken[pc.label] += 1;
            out.push(pc.clone());
        }
    }
    out
}

fn evaluate(
    cli: &Cli,
    defenses: &str,
    blackbox: bool,
    adv_baseline: bool,
    per_class: usize,
) -> Result<()> {
    let (test, class_names) = load_split(cli, "test")?;
    let bundle = load_bundle(cli)?;
    let defenses = parse_defenses(defenses)?;
    let cfg = distill_config(cli)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let suite = AttackSuiteConfig::default();
    let test = subset(&test, class_names.len(), per_class);

    // Models: the promptless student always, the prompted student when a
    // distilled state exists, the adversarially finetuned head on request.
    let mut models: Vec<(String, InferenceSession)> = vec![(
        "no-prompt".to_string(),
        InferenceSession::new(&bundle.student, &bundle.text, &bundle.class_names, None)?,
    )];
    if let Some(state) = load_state_if_any(cli, &bundle)? {
        models.push((
            "prompted".to_string(),
            InferenceSession::new(
                &bundle.student,
                &bundle.text,
                &bundle.class_names,
                Some(&state.prompts),
            )?,
        ));
    }
    let adv_student;
    if adv_baseline {
        let (train, _) = load_split(cli, "train")?;
        // The head baseline trains on the same recipe the prompts did, so
        // --config governs both and the comparison stays like-for-like.
        let adv_cfg = AdvTrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr0: cfg.lr0,
            eta_min: cfg.eta_min,
            weight_decay: cfg.weight_decay,
            tau: cfg.tau,
            mix_fraction: cfg.mix_fraction,
            mix_epsilon: cfg.mix_epsilon,
            mix_steps: cfg.mix_steps,
            mix_alpha: cfg.mix_alpha,
            seed,
        };
        println!("training adversarial head baseline ({} epochs)...", adv_cfg.epochs);
        adv_student = adv_train_baseline(&bundle, &train, &adv_cfg)?;
        models.push((
            "adv-head".to_string(),
            InferenceSession::new(&adv_student, &bundle.text, &bundle.class_names, None)?,
        ));
    }

    let mut rows: Vec<RobustnessRow> = Vec::new();
    for (name, session) in &models {
        println!("white-box grid for {name} on {} samples...", test.len());
        rows.extend(evaluate_whitebox_grid(
            name, session, &test, &suite, &defenses, seed,
        )?);
    }
    let report = RobustnessReport { rows };
    let report_path = cli.out.join("report.csv");
    report.write_csv(&report_path)?;
    println!("wrote {}", report_path.display());

    if blackbox {
        let archive = AttackArchive::read(&cli.out).with_context(|| {
            format!(
                "reading {} (run `pointprompt attack-gen` first?)",
                cli.out.join(ARCHIVE_MANIFEST).display()
            )
        })?;
        let mut bb_rows = Vec::new();
        for (name, session) in &models {
            for &defense in &defenses {
                bb_rows.push(evaluate_archive(name, session, &archive, defense, seed)?);
            }
        }
        let bb = RobustnessReport { rows: bb_rows };
        let bb_path = cli.out.join("report-blackbox.csv");
        bb.write_csv(&bb_path)?;
        println!("wrote {}", bb_path.display());
    }

    let mut meta = String::new();
    let _ = writeln!(meta, "seed {seed}");
    let _ = writeln!(meta, "config_sha {}", sha_hex(cfg.to_toml_string().as_bytes()));
    let _ = writeln!(meta, "test_samples {}", test.len());
    let _ = writeln!(
        meta,
        "models {}",
        models.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(
        meta,
        "defenses {}",
        defenses.iter().map(|d| d.name()).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(
        meta,
        "pgd epsilon={} steps={} alpha={}",
        suite.pgd.epsilon, suite.pgd.steps, suite.pgd.alpha
    );
    std::fs::write(cli.out.join("report.meta"), meta)?;
    Ok(())
}

fn export_embeddings(cli: &Cli, model: &str, attacked: bool) -> Result<()> {
    let (test, _) = load_split(cli, "test")?;
    let bundle = load_bundle(cli)?;
    let session = match model {
        "no-prompt" => {
            InferenceSession::new(&bundle.student, &bundle.text, &bundle.class_names, None)?
        }
        "prompted" => {
            let state = load_state_if_any(cli, &bundle)?.context(
                "no distilled state found (run `pointprompt distill` or use --model no-prompt)",
            )?;
            InferenceSession::new(
                &bundle.student,
                &bundle.text,
                &bundle.class_names,
                Some(&state.prompts),
            )?
        }
        other => bail!("unknown model '{other}' (expected prompted or no-prompt)"),
    };

    let cfg = distill_config(cli)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let clouds = if attacked {
        let pgd = pointprompt::attacks::PgdConfig::default();
        let mut out = Vec::with_capacity(test.len());
        for (si, pc) in test.iter().enumerate() {
            let aseed = pointprompt::geometry::mix_seed(seed, 1, si as u64);
            let mut adv = pointprompt::attacks::pgd_attack(&session, pc, &pgd, aseed)?.cloud;
            adv.id = format!("{}-pgd", pc.id);
            out.push(adv);
        }
        out
    } else {
        test
    };

    let suffix = if attacked { "-adv" } else { "" };
    let path = cli.out.join(format!("embeddings-{model}{suffix}.csv"));
    export_embeddings_csv(&session, &clouds, &path)?;
    println!("wrote {} rows to {}", clouds.len(), path.display());
    Ok(())
}

fn report(cli: &Cli) -> Result<()> {
    let mut printed = false;
    for (title, file) in [
        ("white-box", "report.csv"),
        ("black-box (archive replay)", "report-blackbox.csv"),
    ] {
        let path = cli.out.join(file);
        if !path.exists() {
            continue;
        }
        let report = RobustnessReport::read_csv(&path)?;
        println!("{title} — {}", path.display());
        print_table(&report);
        println!();
        printed = true;
    }
    if !printed {
        bail!(
            "no report found under {} (run `pointprompt evaluate` first)",
            cli.out.display()
        );
    }
    Ok(())
}

fn print_table(report: &RobustnessReport) {
    let kinds: Vec<&str> = report
        .rows
        .first()
        .map(|r| r.per_attack.iter().map(|(k, _)| k.name()).collect())
        .unwrap_or_default();
    let mut header = format!("{:<12} {:<8} {:>7}", "model", "defense", "clean");
    for k in &kinds {
        let _ = write!(header, " {k:>8}");
    }
    let _ = write!(header, " {:>7}", "avg-r");
    println!("{header}");
    for r in &report.rows {
        let mut line = format!("{:<12} {:<8} {:>7.4}", r.model, r.defense, r.clean_acc);
        for (_, a) in &r.per_attack {
            let _ = write!(line, " {a:>8.4}");
        }
        let _ = write!(line, " {:>7.4}", r.avg_robust);
        println!("{line}");
    }
}
