//! Command-line driver for the ConneX pipeline.
//!
//! Each subcommand runs one stage and writes its declared output files plus
//! a reproducibility record (`<output>.record.json`). Configuration
//! precedence, lowest first: built-in defaults, the `--config` file, then
//! command-line flags (`--seed`, `--dataset`).
//!
//! Exit codes: 0 on success, 1 for invalid arguments or inputs, 2 for
//! failures during computation.

pub mod connectivity;
pub mod error;
pub mod record;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use connex_core::backbone::{train_backbone, Backbone};
use connex_core::config::{DatasetSource, FusionVariant};
use connex_core::data::{synthesize_dataset, ConnectomeGraph, ConnectomeMatrix, Dataset, Modality, SyntheticSpec};
use connex_core::explain::{finetune_backbone, learn_global_mask, masked_embeddings, top_connections, GlobalEdgeMask};
use connex_core::rng::{substream, subseed};
use connex_core::store::{self, MaskSidecar};
use connex_core::train::{
    fusion_logits, metrics, predict, rows_to_csv, run_ablations, train_fusion, FrozenEncoders, Metrics,
};
use connex_core::PipelineConfig;
use log::info;

pub use connectivity::{emit_connectivity_data, NetworkLabels};
pub use error::{CliError, CliResult};
pub use record::RunRecord;

#[derive(Debug, Parser)]
#[command(name = "connex", version, about = "Explainable multimodal connectome classification")]
struct Cli {
    /// Log progress (-v) or details (-vv) to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Pipeline configuration (JSON), or a run record to take it from.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset manifest; overrides the configured dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct Subset {
    /// File with one subject id per line; only these subjects are used.
    #[arg(long)]
    ids: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct Encoders {
    #[arg(long)]
    sc_backbone: PathBuf,
    #[arg(long)]
    fnc_backbone: PathBuf,
    #[arg(long)]
    sc_mask: PathBuf,
    #[arg(long)]
    fnc_mask: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest plus CSV matrices).
    Synth {
        /// Synthetic dataset parameters (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a graph backbone on one modality.
    TrainBackbone {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subset: Subset,
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a global edge mask against a frozen backbone.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subset: Subset,
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
        #[arg(long)]
        backbone: PathBuf,
        /// Mask CSV; its settings go to the `.json` file beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a backbone on masked graphs.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subset: Subset,
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fusion network on frozen, masked backbones.
    TrainFusion {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subset: Subset,
        #[command(flatten)]
        encoders: Encoders,
        /// One of concat, cross_att, connex, optionally suffixed `_unified`.
        #[arg(long, default_value = "connex_unified", value_parser = parse_variant)]
        variant: FusionVariant,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score fine-tuned backbones and a fusion network.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        subset: Subset,
        #[command(flatten)]
        encoders: Encoders,
        #[arg(long)]
        fusion: PathBuf,
        /// Metrics CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate every unimodal and fusion configuration.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Results CSV, one row per configuration.
        #[arg(long)]
        out: PathBuf,
    },
    /// Strongest group-level connections under a mask, as CSV and DOT.
    Report {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// SZ or HC (or the label 1 / 0).
        #[arg(long, value_parser = parse_group)]
        group: u8,
        #[arg(long, default_value_t = 100)]
        top: usize,
        /// `node,group` CSV assigning nodes to brain networks.
        #[arg(long)]
        networks: Option<PathBuf>,
        /// Output prefix; writes `<prefix>.csv` and `<prefix>.dot`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a stage from its reproducibility record.
    Rerun {
        #[arg(long)]
        record: PathBuf,
    },
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    Modality::ALL
        .into_iter()
        .find(|m| m.tag() == s)
        .ok_or_else(|| format!("unknown modality `{s}` (expected sc or fnc)"))
}

fn parse_variant(s: &str) -> Result<FusionVariant, String> {
    FusionVariant::all()
        .into_iter()
        .find(|v| v.tag() == s)
        .ok_or_else(|| format!("unknown fusion variant `{s}`"))
}

fn parse_group(s: &str) -> Result<u8, String> {
    match s {
        "SZ" | "sz" | "1" => Ok(1),
        "HC" | "hc" | "0" => Ok(0),
        _ => Err(format!("unknown group `{s}` (expected SZ or HC)")),
    }
}

/// Runs the tool on `argv` (including the program name) and returns the
/// process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(cli.command, argv.get(1..).unwrap_or_default().to_vec(), None) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Files read and written by a stage, for its record.
#[derive(Default)]
struct Io {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Io {
    fn read(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn dataset(&mut self, config: &PipelineConfig) -> CliResult<()> {
        if let DatasetSource::Manifest(path) = &config.dataset {
            self.read(path);
            let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
            let manifest: connex_core::data::Manifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            for s in manifest.subjects {
                self.inputs.push(base.join(s.sc_path));
                self.inputs.push(base.join(s.fnc_path));
            }
        }
        Ok(())
    }
}

fn write_output(io: &mut Io, path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    io.outputs.push(path.to_path_buf());
    Ok(())
}

/// Effective configuration: defaults, then the config file, then flags.
/// Manifest paths are made absolute so the snapshot stands on its own.
fn resolve_config(common: &Common, preset: Option<&PipelineConfig>) -> CliResult<PipelineConfig> {
    if let Some(c) = preset {
        return Ok(c.clone());
    }
    let (mut cfg, base) = match &common.config {
        Some(p) => {
            // the snapshot in the record stands in for the file
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (PipelineConfig::load(p)?, base)
        }
        None => (PipelineConfig::default(), PathBuf::new()),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &common.dataset {
        cfg.dataset = DatasetSource::Manifest(d.clone());
    } else if let DatasetSource::Manifest(p) = &cfg.dataset {
        if p.is_relative() {
            cfg.dataset = DatasetSource::Manifest(base.join(p));
        }
    }
    if let DatasetSource::Manifest(p) = &cfg.dataset {
        let abs = std::path::absolute(p).map_err(|e| CliError::input(p, e))?;
        cfg.dataset = DatasetSource::Manifest(abs);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_subset(subset: &Subset, dataset: &Dataset, io: &mut Io) -> CliResult<Vec<usize>> {
    let Some(path) = &subset.ids else {
        return Ok((0..dataset.len()).collect());
    };
    io.read(path);
    let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
    let index: BTreeMap<&str, usize> = dataset.subjects.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut out = Vec::new();
    for id in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let &i = index
            .get(id)
            .ok_or_else(|| CliError::Usage(format!("{}: unknown subject `{id}`", path.display())))?;
        out.push(i);
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{} lists no subjects", path.display())));
    }
    Ok(out)
}

struct Prepared {
    config: PipelineConfig,
    dataset: Dataset,
    idx: Vec<usize>,
    labels: Vec<u8>,
}

impl Prepared {
    fn new(common: &Common, subset: &Subset, preset: Option<&PipelineConfig>, io: &mut Io) -> CliResult<Self> {
        let config = resolve_config(common, preset)?;
        io.dataset(&config)?;
        let dataset = config.dataset.load(None)?;
        let idx = load_subset(subset, &dataset, io)?;
        let all = dataset.labels();
        let labels = idx.iter().map(|&i| all[i]).collect();
        Ok(Self {
            config,
            dataset,
            idx,
            labels,
        })
    }

    fn graphs(&self, m: Modality) -> CliResult<Vec<ConnectomeGraph>> {
        let subjects = self.dataset.select(&self.idx);
        subjects
            .iter()
            .map(|s| connex_core::data::build_graph(s.matrix(m), self.config.graph.k, self.config.graph.ldp))
            .collect::<connex_core::Result<Vec<_>>>()
            .map_err(CliError::from)
    }

    fn seed(&self, stage: &str, m: &str) -> u64 {
        subseed(self.config.seed, &[stage, m])
    }
}

fn load_frozen(path: &Path, config: &PipelineConfig, io: &mut Io) -> CliResult<Backbone> {
    let mut b = store::load_backbone(&io.read(path), Some(&config.backbone.arch))?;
    b.freeze();
    Ok(b)
}

fn load_mask_for(path: &Path, m: Modality, size: usize, io: &mut Io) -> CliResult<GlobalEdgeMask> {
    io.read(path);
    io.read(&store::sidecar_path(path));
    let (mask, _) = store::load_mask(path)?;
    if mask.modality != m || mask.size() != size {
        return Err(CliError::Usage(format!(
            "{} is a {}x{} {} mask, expected {size}x{size} {m}",
            path.display(),
            mask.size(),
            mask.size(),
            mask.modality
        )));
    }
    Ok(mask)
}

fn refs(graphs: &[ConnectomeGraph]) -> Vec<&ConnectomeGraph> {
    graphs.iter().collect()
}

fn execute(command: Command, argv: Vec<String>, preset: Option<&PipelineConfig>) -> CliResult<()> {
    let mut io = Io::default();
    let stage = stage_name(&command);
    let (config, record_for) = match command {
        Command::Synth { spec, out } => {
            let text = fs::read_to_string(io.read(&spec)).map_err(|e| CliError::input(&spec, e))?;
            let spec: SyntheticSpec =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", spec.display())))?;
            let ds = synthesize_dataset(&spec)?;
            let manifest = ds.save(&out)?;
            io.outputs.push(manifest);
            for s in &ds.subjects {
                io.outputs.push(out.join("sc").join(format!("{}.csv", s.id)));
                io.outputs.push(out.join("fnc").join(format!("{}.csv", s.id)));
            }
            let config = PipelineConfig {
                seed: spec.seed,
                dataset: DatasetSource::Synthetic(spec),
                ..Default::default()
            };
            (config, out)
        }
        Command::TrainBackbone {
            common,
            subset,
            modality,
            out,
        } => {
            let p = Prepared::new(&common, &subset, preset, &mut io)?;
            let graphs = p.graphs(modality)?;
            let seed = p.seed("backbone", modality.tag());
            let (b, report) = train_backbone(&refs(&graphs), &p.labels, p.config.backbone.arch, &p.config.backbone.train, seed)?;
            info!("trained {} epochs, final loss {:?}", report.loss_trace.len(), report.loss_trace.last());
            let meta = serde_json::json!({ "modality": modality, "seed": seed, "loss_trace": report.loss_trace });
            store::save_backbone(&out, &b, meta)?;
            io.outputs.push(out.clone());
            (p.config, out)
        }
        Command::Explain {
            common,
            subset,
            modality,
            backbone,
            out,
        } => {
            let p = Prepared::new(&common, &subset, preset, &mut io)?;
            let graphs = p.graphs(modality)?;
            let b = load_frozen(&backbone, &p.config, &mut io)?;
            let seed = p.seed("explain", modality.tag());
            let (mask, report) = learn_global_mask(&refs(&graphs), &b, modality, &p.config.mask, &mut substream(seed, &[]))?;
            info!("mask mean weight {:.4}, final loss {:?}", mask.mean_weight(), report.loss_trace.last());
            store::save_mask(&out, &mask, &MaskSidecar::new(modality, seed, &p.config.mask))?;
            io.outputs.push(out.clone());
            io.outputs.push(store::sidecar_path(&out));
            (p.config, out)
        }
        Command::Finetune {
            common,
            subset,
            modality,
            backbone,
            mask,
            out,
        } => {
            let p = Prepared::new(&common, &subset, preset, &mut io)?;
            let graphs = p.graphs(modality)?;
            let b = load_frozen(&backbone, &p.config, &mut io)?;
            let mask = load_mask_for(&mask, modality, p.dataset.num_nodes, &mut io)?;
            let seed = p.seed("finetune", modality.tag());
            let (tuned, report) =
                finetune_backbone(&b, &refs(&graphs), &p.labels, &mask, &p.config.finetune, &mut substream(seed, &[]))?;
            let meta = serde_json::json!({ "modality": modality, "seed": seed, "loss_trace": report.loss_trace });
            store::save_backbone(&out, &tuned, meta)?;
            io.outputs.push(out.clone());
            (p.config, out)
        }
        Command::TrainFusion {
            common,
            subset,
            encoders,
            variant,
            out,
        } => {
            let p = Prepared::new(&common, &subset, preset, &mut io)?;
            let (backbones, masks) = load_encoders(&encoders, &p, &mut io)?;
            let (sc, fnc) = (p.graphs(Modality::Sc)?, p.graphs(Modality::Fnc)?);
            let frozen = FrozenEncoders {
                backbones: [&backbones[0], &backbones[1]],
                masks: [&masks[0], &masks[1]],
            };
            let arch = p.config.fusion.arch(variant, p.config.backbone.arch.channels);
            let seed = p.seed("fusion", &variant.tag());
            let (model, report) =
                train_fusion(&refs(&sc), &refs(&fnc), &p.labels, &frozen, arch, &p.config.fusion.train, seed)?;
            let extra = serde_json::json!({ "variant": variant.tag(), "seed": seed, "loss_trace": report.loss_trace });
            store::save_fusion(&out, &model, extra)?;
            io.outputs.push(out.clone());
            (p.config, out)
        }
        Command::Evaluate {
            common,
            subset,
            encoders,
            fusion,
            out,
        } => {
            let p = Prepared::new(&common, &subset, preset, &mut io)?;
            let (backbones, masks) = load_encoders(&encoders, &p, &mut io)?;
            let model = store::load_fusion(&io.read(&fusion))?;
            let mut rows: Vec<(String, Metrics)> = Vec::new();
            let mut emb = Vec::new();
            for (k, m) in Modality::ALL.into_iter().enumerate() {
                let graphs = p.graphs(m)?;
                let (e, logits) = masked_embeddings(&backbones[k], &refs(&graphs), &masks[k])?;
                rows.push((format!("{}_explained", m.tag()), metrics(&predict(&logits), &p.labels)?));
                emb.push(e);
            }
            let fused = fusion_logits(&model, &emb[0], &emb[1])?;
            let tag = FusionVariant {
                method: model.arch.method,
                unified: model.arch.unified,
            }
            .tag();
            rows.push((tag, metrics(&predict(&fused), &p.labels)?));
            let mut csv = String::from("config,accuracy,precision,f1\n");
            for (tag, m) in rows {
                csv.push_str(&format!("{tag},{:.4},{:.4},{:.4}\n", m.accuracy, m.precision, m.f1));
            }
            write_output(&mut io, &out, &csv)?;
            (p.config, out)
        }
        Command::Ablate { common, out } => {
            let p = Prepared::new(&common, &Subset { ids: None }, preset, &mut io)?;
            let outcome = run_ablations(&p.dataset, &p.config)?;
            write_output(&mut io, &out, &rows_to_csv(&outcome.rows))?;
            (p.config, out)
        }
        Command::Report {
            mask,
            dataset,
            group,
            top,
            networks,
            out,
        } => {
            let config = preset.cloned().unwrap_or_default();
            let manifest = std::path::absolute(&dataset).map_err(|e| CliError::input(&dataset, e))?;
            let ds_config = PipelineConfig {
                dataset: DatasetSource::Manifest(manifest),
                ..config.clone()
            };
            io.dataset(&ds_config)?;
            let ds = ds_config.dataset.load(None)?;
            io.read(&mask);
            io.read(&store::sidecar_path(&mask));
            let (y, _) = store::load_mask(&mask)?;
            let members: Vec<&ConnectomeMatrix> =
                ds.subjects.iter().filter(|s| s.label == group).map(|s| s.matrix(y.modality)).collect();
            let report = top_connections(&members, &y, group, top)?;
            let (dot, csv) = match &networks {
                Some(path) => {
                    let text = fs::read_to_string(io.read(path)).map_err(|e| CliError::input(path, e))?;
                    emit_connectivity_data(&report, &NetworkLabels::from_csv(&text, path)?)?
                }
                None => (report.to_dot(), report.to_csv()),
            };
            write_output(&mut io, &with_suffix(&out, ".csv"), &csv)?;
            write_output(&mut io, &with_suffix(&out, ".dot"), &dot)?;
            (config, with_suffix(&out, ".csv"))
        }
        Command::Rerun { record } => {
            let rec = RunRecord::load(&record)?;
            rec.verify_inputs()?;
            let mut full = vec!["connex".to_string()];
            full.extend(rec.argv.iter().cloned());
            let cli = Cli::try_parse_from(&full).map_err(|e| CliError::Usage(e.to_string()))?;
            if matches!(cli.command, Command::Rerun { .. }) {
                return Err(CliError::Usage("a record cannot replay another rerun".into()));
            }
            return execute(cli.command, rec.argv, Some(&rec.config));
        }
    };
    write_record(stage, argv, config, io, &record_for)
}

fn load_encoders(enc: &Encoders, p: &Prepared, io: &mut Io) -> CliResult<([Backbone; 2], [GlobalEdgeMask; 2])> {
    let m = p.dataset.num_nodes;
    let backbones = [load_frozen(&enc.sc_backbone, &p.config, io)?, load_frozen(&enc.fnc_backbone, &p.config, io)?];
    let masks = [
        load_mask_for(&enc.sc_mask, Modality::Sc, m, io)?,
        load_mask_for(&enc.fnc_mask, Modality::Fnc, m, io)?,
    ];
    Ok((backbones, masks))
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn stage_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::TrainBackbone { .. } => "train-backbone",
        Command::Explain { .. } => "explain",
        Command::Finetune { .. } => "finetune",
        Command::TrainFusion { .. } => "train-fusion",
        Command::Evaluate { .. } => "evaluate",
        Command::Ablate { .. } => "ablate",
        Command::Report { .. } => "report",
        Command::Rerun { .. } => "rerun",
    }
}

fn write_record(stage: &str, argv: Vec<String>, config: PipelineConfig, io: Io, out: &Path) -> CliResult<()> {
    let hash_all = |paths: &[PathBuf]| -> CliResult<BTreeMap<String, String>> {
        paths
            .iter()
            .map(|p| Ok((p.display().to_string(), record::hash_file(p)?)))
            .collect()
    };
    let rec = RunRecord {
        stage: stage.to_string(),
        seed: config.seed,
        argv,
        inputs: hash_all(&io.inputs)?,
        outputs: hash_all(&io.outputs)?,
        config,
    };
    rec.save(&record::record_path(out))
}
