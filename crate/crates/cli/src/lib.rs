//! Command-line driver: `boxalign <command> [--config FILE] [--key=value ...]`.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use boxalign_core::RunConfig;
use boxalign_core::data::{generate_dataset, subsample_folds, Dataset};
use boxalign_core::eval::{
    coco_thresholds, detect_all, evaluate_ap, ground_truth, gt_embeddings, knn_purity, paired_finetune, report_text, summarize,
    ArmSummary, FoldResult,
};
use boxalign_core::metrics::{CsvWriter, StepMetrics};
use boxalign_core::netcore::checkpoint::{load_params, save_params};
use boxalign_core::netcore::net::BACKBONE_PREFIX;
use boxalign_core::DetectorNet;
use boxalign_core::pretrain::{image_domain_pretrain, load_checkpoint, run_box_pretrain, BoxState, RunOptions};
use boxalign_core::proposals::{generate_proposals, read_proposals, write_proposals, ProposalSet};

pub const USAGE: &str = "\
usage: boxalign <command> [--config FILE] [--key=value ...] [options]

commands:
  gen-data         --out DIR                      synthetic train/ and eval/ sets
  gen-proposals    --data DIR [--out FILE]        selective-search proposals
  pretrain-image   --data DIR --out DIR           self-supervised backbone
  pretrain-box     --data DIR --backbone FILE --out DIR
                   [--proposals FILE] [--resume DIR]
  finetune         --data DIR --eval DIR --checkpoint DIR --out DIR
                   paired fine-tune: pre-trained vs random neck/head
  eval             --eval DIR (--weights FILE | --checkpoint DIR)
                   AP of a fine-tuned detector, or k-NN purity of a checkpoint
  report           RESULT.json... [--out FILE]    per-fold and mean results

Any config key can be overridden with --key=value (e.g. --box.lr=0.01).
Exit status: 0 success, 1 usage or config error, 2 runtime error.
";

/// Failure of a command, mapped to the exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime<E: Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage<E: Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

const COMMANDS: [(&str, &[&str]); 7] = [
    ("gen-data", &["out"]),
    ("gen-proposals", &["data", "out"]),
    ("pretrain-image", &["data", "out"]),
    ("pretrain-box", &["data", "backbone", "out", "proposals", "resume"]),
    ("finetune", &["data", "eval", "checkpoint", "out"]),
    ("eval", &["eval", "weights", "checkpoint"]),
    ("report", &["out"]),
];

/// Parsed command line.
#[derive(Debug)]
struct Invocation {
    command: String,
    cfg: RunConfig,
    opts: HashMap<String, String>,
    positional: Vec<String>,
}

impl Invocation {
    fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        self.opts
            .get(name)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Usage(format!("{} needs --{name}", self.command)))
    }

    fn opt_path(&self, name: &str) -> Option<PathBuf> {
        self.opts.get(name).map(PathBuf::from)
    }
}

fn parse_args(args: &[String]) -> Result<Option<Invocation>, CliError> {
    let Some(command) = args.first() else {
        return Err(CliError::Usage("missing command".into()));
    };
    if command == "--help" || command == "-h" || command == "help" {
        return Ok(None);
    }
    let Some((_, known)) = COMMANDS.iter().find(|(c, _)| c == command) else {
        return Err(CliError::Usage(format!("unknown command `{command}`")));
    };
    let mut opts = HashMap::new();
    let mut overrides = Vec::new();
    let mut positional = Vec::new();
    let mut config_file = None;
    let mut it = args[1..].iter();
    while let Some(arg) = it.next() {
        if arg == "--help" || arg == "-h" {
            return Ok(None);
        }
        let Some(flag) = arg.strip_prefix("--") else {
            positional.push(arg.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let is_opt = name == "config" || known.contains(&name.as_str());
        let value = match inline {
            Some(v) => v,
            None if is_opt => it.next().cloned().ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?,
            None => return Err(CliError::Usage(format!("unknown flag --{name}"))),
        };
        if name == "config" {
            config_file = Some(value);
        } else if is_opt {
            opts.insert(name, value);
        } else {
            overrides.push((name, value));
        }
    }
    let mut cfg = match &config_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{path}: {e}")))?;
            RunConfig::from_text(&text).map_err(|e| CliError::Usage(format!("{path}: {e}")))?
        }
        None => RunConfig::default(),
    };
    for (k, v) in &overrides {
        cfg.set(k, v).map_err(|e| CliError::Usage(format!("--{k}: {e}")))?;
    }
    cfg.validate().map_err(usage)?;
    if command != "report" && !positional.is_empty() {
        return Err(CliError::Usage(format!("unexpected argument `{}`", positional[0])));
    }
    Ok(Some(Invocation { command: command.clone(), cfg, opts, positional }))
}

/// Runs one command line (without the program name); returns the exit status.
pub fn cli_main(args: &[String]) -> i32 {
    let result = parse_args(args).and_then(|inv| match inv {
        None => {
            print!("{USAGE}");
            Ok(())
        }
        Some(inv) => run(&inv),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("boxalign: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprint!("\n{USAGE}");
            }
            e.exit_code()
        }
    }
}

fn run(inv: &Invocation) -> Result<(), CliError> {
    match inv.command.as_str() {
        "gen-data" => gen_data(inv),
        "gen-proposals" => gen_proposals(inv),
        "pretrain-image" => pretrain_image(inv),
        "pretrain-box" => pretrain_box(inv),
        "finetune" => finetune(inv),
        "eval" => eval(inv),
        "report" => report(inv),
        other => unreachable!("command {other} passed parsing"),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn metrics_writer(path: &Path) -> Result<CsvWriter<BufWriter<File>>, CliError> {
    let f = File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    CsvWriter::new(BufWriter::new(f)).map_err(runtime)
}

/// Streams rows to `w`, keeping the first write error for after training.
fn record<'a>(w: &'a mut CsvWriter<BufWriter<File>>, err: &'a mut Option<std::io::Error>) -> impl FnMut(&StepMetrics) + 'a {
    move |m| {
        if err.is_none() {
            if let Err(e) = w.write(m) {
                *err = Some(e);
            }
        }
    }
}

fn finish(mut w: CsvWriter<BufWriter<File>>, err: Option<std::io::Error>) -> Result<(), CliError> {
    if let Some(e) = err {
        return Err(runtime(e));
    }
    w.flush().map_err(runtime)
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    Dataset::load(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn gen_data(inv: &Invocation) -> Result<(), CliError> {
    let out = inv.path("out")?;
    let cfg = &inv.cfg;
    let train = generate_dataset(&out.join("train"), &cfg.scene, cfg.train_count, cfg.seed, 0).map_err(runtime)?;
    let eval = generate_dataset(&out.join("eval"), &cfg.scene, cfg.eval_count, cfg.seed.wrapping_add(1), cfg.train_count as u64)
        .map_err(runtime)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    println!("wrote {} train and {} eval images to {}", train.images.len(), eval.images.len(), out.display());
    Ok(())
}

const PROPOSALS_FILE: &str = "proposals.txt";

fn gen_proposals(inv: &Invocation) -> Result<(), CliError> {
    let data_dir = inv.path("data")?;
    let out = inv.opt_path("out").unwrap_or_else(|| data_dir.join(PROPOSALS_FILE));
    let data = load_dataset(&data_dir)?;
    let sets: Vec<ProposalSet> = data
        .manifest
        .images
        .iter()
        .zip(&data.images)
        .map(|(r, img)| generate_proposals(r.id, img, &inv.cfg.proposals))
        .collect();
    let f = File::create(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let mut w = BufWriter::new(f);
    write_proposals(&mut w, &sets).and_then(|_| w.flush()).map_err(runtime)?;
    let total: usize = sets.iter().map(|s| s.len()).sum();
    println!("wrote {total} proposals for {} images to {}", sets.len(), out.display());
    Ok(())
}

const BACKBONE_FILE: &str = "backbone.bin";

fn pretrain_image(inv: &Invocation) -> Result<(), CliError> {
    let data = load_dataset(&inv.path("data")?)?;
    let out = inv.path("out")?;
    create_dir(&out)?;
    write_text(&out.join("config.txt"), &inv.cfg.to_text())?;
    let net_cfg = inv.cfg.net_config(data.manifest.num_classes());
    let mut w = metrics_writer(&out.join("metrics.csv"))?;
    let mut err = None;
    let params = image_domain_pretrain(&data.unlabeled(), &net_cfg, &inv.cfg.image_config(), &mut record(&mut w, &mut err))
        .map_err(runtime)?;
    finish(w, err)?;
    let path = out.join(BACKBONE_FILE);
    save_params(&path, &params.subset(&[BACKBONE_PREFIX])).map_err(runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_proposals(path: &Path) -> Result<HashMap<u64, ProposalSet>, CliError> {
    let f = File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let sets = read_proposals(BufReader::new(f)).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(sets.into_iter().map(|s| (s.image_id, s)).collect())
}

fn pretrain_box(inv: &Invocation) -> Result<(), CliError> {
    let data_dir = inv.path("data")?;
    let data = load_dataset(&data_dir)?;
    let out = inv.path("out")?;
    let props_path = inv.opt_path("proposals").unwrap_or_else(|| data_dir.join(PROPOSALS_FILE));
    let proposals = load_proposals(&props_path)?;
    let cfg = inv.cfg.train_config(data.manifest.num_classes());
    let state = match inv.opt_path("resume") {
        Some(dir) => {
            let m = load_checkpoint(&dir).map_err(runtime)?;
            if m.seed != cfg.seed {
                return Err(CliError::Usage(format!("checkpoint seed {} differs from seed {}", m.seed, cfg.seed)));
            }
            BoxState::from_manifest(&cfg, &m).map_err(runtime)?
        }
        None => {
            let backbone = load_params(&inv.path("backbone")?).map_err(runtime)?;
            BoxState::new(&cfg, &backbone).map_err(runtime)?
        }
    };
    create_dir(&out)?;
    let snapshot = inv.cfg.to_text();
    write_text(&out.join("config.txt"), &snapshot)?;
    let mut w = metrics_writer(&out.join("metrics.csv"))?;
    let mut err = None;
    let opts = RunOptions { out_dir: Some(out.clone()), config_snapshot: snapshot, stop_at: None };
    let state = run_box_pretrain(&data.unlabeled(), &proposals, state, &cfg, &opts, &mut record(&mut w, &mut err)).map_err(runtime)?;
    finish(w, err)?;
    println!("box-domain pre-training finished at step {}; checkpoint in {}", state.step, out.join("final").display());
    Ok(())
}

const RESULT_FILE: &str = "result.json";

fn finetune(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.cfg;
    let train_all = load_dataset(&inv.path("data")?)?;
    let eval = load_dataset(&inv.path("eval")?)?;
    let manifest = load_checkpoint(&inv.path("checkpoint")?).map_err(runtime)?;
    let out = inv.path("out")?;
    create_dir(&out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    let f = &cfg.finetune;
    let folds = subsample_folds(&train_all.manifest, f.fraction, f.folds, cfg.seed).map_err(runtime)?;
    let train = train_all.select(&folds[f.fold]);
    let net_cfg = cfg.net_config(train_all.manifest.num_classes());
    let ft = cfg.finetune_config();

    let mut writers = HashMap::new();
    for arm in ["pretrained", "random"] {
        writers.insert(arm.to_string(), metrics_writer(&out.join(format!("metrics_{arm}.csv")))?);
    }
    let mut err = None;
    let run = paired_finetune(&manifest, &net_cfg, &train, &eval, &ft, &mut |arm, m| {
        if err.is_none() {
            if let Err(e) = writers.get_mut(arm).expect("known arm").write(m) {
                err = Some(e);
            }
        }
    })
    .map_err(runtime)?;
    if let Some(e) = err {
        return Err(runtime(e));
    }
    for (_, mut w) in writers {
        w.flush().map_err(runtime)?;
    }
    for (arm, r) in [("pretrained", &run.pretrained), ("random", &run.random)] {
        create_dir(&out.join(arm))?;
        save_params(&out.join(arm).join("weights.bin"), &r.net.params).map_err(runtime)?;
    }
    let result = FoldResult {
        flavor: cfg.flavor.to_string(),
        seed: cfg.seed,
        fraction: f.fraction,
        fold: f.fold,
        steps: f.steps,
        pretrained: ArmSummary::from_run(&run.pretrained),
        random: ArmSummary::from_run(&run.random),
    };
    let json = serde_json::to_string_pretty(&result).map_err(runtime)?;
    write_text(&out.join(RESULT_FILE), &json)?;
    println!(
        "AP50 pretrained {:.4} random {:.4}; AP pretrained {:.4} random {:.4}",
        result.pretrained.ap.ap50, result.random.ap.ap50, result.pretrained.ap.ap, result.random.ap.ap
    );
    Ok(())
}

fn eval(inv: &Invocation) -> Result<(), CliError> {
    let eval = load_dataset(&inv.path("eval")?)?;
    let net_cfg = inv.cfg.net_config(eval.manifest.num_classes());
    if let Some(w) = inv.opt_path("weights") {
        let params = load_params(&w).map_err(runtime)?;
        let net = DetectorNet { cfg: net_cfg.clone(), params };
        let dets = detect_all(&net, &eval, &inv.cfg.finetune_config()).map_err(runtime)?;
        let ap = evaluate_ap(&dets, &ground_truth(&eval), net_cfg.num_classes, &coco_thresholds());
        println!("{}", serde_json::to_string_pretty(&ap).map_err(runtime)?);
        return Ok(());
    }
    let Some(dir) = inv.opt_path("checkpoint") else {
        return Err(CliError::Usage("eval needs --weights or --checkpoint".into()));
    };
    let m = load_checkpoint(&dir).map_err(runtime)?;
    let (rows, classes) = gt_embeddings(&net_cfg, &m.online, &eval).map_err(runtime)?;
    let purity = knn_purity(&rows, net_cfg.embed_dim, &classes, 5).map_err(runtime)?;
    println!("{{\"knn_purity_k5\": {purity}}}");
    Ok(())
}

fn report(inv: &Invocation) -> Result<(), CliError> {
    if inv.positional.is_empty() {
        return Err(CliError::Usage("report needs at least one result.json".into()));
    }
    let mut folds = Vec::new();
    for p in &inv.positional {
        let path = Path::new(p);
        let path = if path.is_dir() { path.join(RESULT_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let r: FoldResult = serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        folds.push(r);
    }
    let summary = summarize(folds);
    print!("{}", report_text(&summary));
    if let Some(out) = inv.opt_path("out") {
        write_text(&out, &serde_json::to_string_pretty(&summary).map_err(runtime)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(a: &[&str]) -> Vec<String> {
        a.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_overrides_and_paths() {
        let inv = parse_args(&args(&["finetune", "--data", "d", "--seed=3", "--finetune.steps=5", "--out=o"])).unwrap().unwrap();
        assert_eq!(inv.cfg.seed, 3);
        assert_eq!(inv.cfg.finetune.steps, 5);
        assert_eq!(inv.path("out").unwrap(), PathBuf::from("o"));
    }

    #[test]
    fn rejects_bad_input_as_usage() {
        for a in [&["nope"][..], &["eval", "--bogus=1"], &["eval", "--bogus"], &["eval", "--seed=x"], &["gen-data", "stray"]] {
            assert!(matches!(parse_args(&args(a)), Err(CliError::Usage(_))), "{a:?}");
        }
        assert!(parse_args(&args(&["--help"])).unwrap().is_none());
    }
}
