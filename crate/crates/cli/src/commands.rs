//! Subcommand implementations.

use crate::config::{DataSource, RunConfig, Seeds};
use crate::manifest::Manifest;
use crate::{BenchArgs, CliError, CliResult, EvalArgs, IngestArgs, SynthArgs, TrainArgs};
use anyhow::Context;
use feddy_core::bench::{self, BenchConfig, MIN_REPEATS};
use feddy_core::dynamic_gnn::{self, init_params, read_checkpoint, write_checkpoint, ModelError, ModelParams};
use feddy_core::federated::{
    self, partition_clients, FederatedError, Mode, PlainTransport, SecureTransport, Transport,
};
use feddy_core::graph_model::GraphSequence;
use feddy_core::ingest::{self, IngestError, RecordFilter};
use feddy_core::secure_agg::{self, DEFAULT_FIXED_E, MIN_MODULUS_BITS};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::json;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn bad_input(path: &Path, e: IngestError) -> CliError {
    CliError::invalid(format!("{}: {e}", path.display()))
}

fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_sequence(path: &Path) -> CliResult<GraphSequence> {
    ingest::read_native(open(path)?).map_err(|e| bad_input(path, e))
}

fn read_sdd(path: &Path, width: f64, height: f64, fps: f64, filter: RecordFilter) -> CliResult<GraphSequence> {
    let records = ingest::parse_sdd_annotations(open(path)?).map_err(|e| bad_input(path, e))?;
    if records.is_empty() {
        return Err(CliError::invalid(format!("{}: no annotation records", path.display())));
    }
    ingest::tracks_to_graph_sequence(&records, width, height, fps, filter).map_err(|e| bad_input(path, e))
}

pub fn ingest(a: &IngestArgs) -> CliResult<()> {
    let mut errs = Vec::new();
    for (name, v) in [("width", a.width), ("height", a.height), ("fps", a.fps)] {
        if !(v > 0.0 && v.is_finite()) {
            errs.push(format!("--{name} must be a positive number, got {v}"));
        }
    }
    if !errs.is_empty() {
        return Err(CliError::Validation(errs));
    }
    let filter = RecordFilter {
        include_lost: a.include_lost,
        include_occluded: !a.exclude_occluded,
        include_generated: !a.exclude_generated,
    };
    let records = ingest::parse_sdd_annotations(open(&a.annotations)?).map_err(|e| bad_input(&a.annotations, e))?;
    if records.is_empty() {
        return Err(CliError::invalid(format!(
            "{}: no annotation records",
            a.annotations.display()
        )));
    }
    let mut seq = ingest::tracks_to_graph_sequence(&records, a.width, a.height, a.fps, filter)
        .map_err(|e| bad_input(&a.annotations, e))?;
    let colored = match &a.colors {
        Some(path) => {
            let colors = ingest::parse_color_sidecar(open(path)?).map_err(|e| bad_input(path, e))?;
            ingest::merge_color_sidecar(&mut seq, &colors)
        }
        None => 0,
    };
    let mut out = create(&a.out)?;
    ingest::write_native(&seq, &mut out).context("writing native sequence")?;
    out.flush().context("writing native sequence")?;

    let counts: Vec<usize> = seq.graphs.iter().map(|g| g.len()).collect();
    let total = seq.total_nodes();
    let labels = ingest::label_distribution(&records);
    let accepted = records.iter().filter(|r| filter.accepts(r)).count();
    println!("dimensions: {}x{} at {} fps", a.width, a.height, a.fps);
    println!("records: {} read, {} kept", records.len(), accepted);
    println!("frames: {}", seq.len());
    println!(
        "nodes: {} total, per frame min {} / mean {:.2} / max {}",
        total,
        counts.iter().min().copied().unwrap_or(0),
        total as f64 / seq.len().max(1) as f64,
        counts.iter().max().copied().unwrap_or(0)
    );
    if a.colors.is_some() {
        println!("colored nodes: {colored}");
    }
    println!("labels:");
    for (label, frac) in &labels {
        println!("  {label:<12} {:.4}", frac);
    }
    if a.per_frame {
        println!("frame,nodes");
        for g in &seq.graphs {
            println!("{},{}", g.frame_index, g.len());
        }
    }

    let mut manifest = Manifest::new(
        "ingest",
        json!({
            "annotations": a.annotations,
            "width": a.width,
            "height": a.height,
            "fps": a.fps,
            "colors": a.colors,
            "filter": filter,
        }),
        None,
    );
    manifest.outputs.push(a.out.display().to_string());
    manifest.summary = json!({
        "records": records.len(),
        "kept": accepted,
        "frames": seq.len(),
        "total_nodes": total,
        "labels": labels,
    });
    manifest.write(&sidecar_path(&a.out, ".manifest.json"))?;
    Ok(())
}

/// Every sequence the config describes, in video order.
fn load_sequences(cfg: &RunConfig, seeds: &Seeds) -> CliResult<Vec<GraphSequence>> {
    let data = &cfg.data;
    let seqs = match data.source {
        DataSource::Synth => (0..data.videos)
            .map(|i| {
                let mut synth = cfg.synth.clone();
                synth.seed = seeds.synth_video(i);
                ingest::synth_scene(&synth).map_err(|e| CliError::invalid(format!("synth: {e}")))
            })
            .collect::<CliResult<Vec<_>>>()?,
        DataSource::Native => data.paths.iter().map(|p| read_sequence(p)).collect::<CliResult<_>>()?,
        DataSource::Sdd => {
            let (w, h, fps) = (
                data.width.unwrap_or_default(),
                data.height.unwrap_or_default(),
                data.fps.unwrap_or_default(),
            );
            data.paths
                .iter()
                .map(|p| read_sdd(p, w, h, fps, data.filter))
                .collect::<CliResult<_>>()?
        }
    };
    let k = seqs[0].feature_len;
    let mismatched: Vec<String> = data
        .paths
        .iter()
        .zip(&seqs)
        .filter(|(_, s)| s.feature_len != k)
        .map(|(p, s)| format!("{}: {} features per node, expected {k}", p.display(), s.feature_len))
        .collect();
    if !mismatched.is_empty() {
        return Err(CliError::Validation(mismatched));
    }
    Ok(seqs)
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let cfg = a.run.resolve()?;
    if cfg.data.source != DataSource::Synth {
        return Err(CliError::invalid("synth needs data.source = \"synth\""));
    }
    if a.video >= cfg.data.videos {
        return Err(CliError::invalid(format!(
            "--video {} is out of range for {} videos",
            a.video, cfg.data.videos
        )));
    }
    let seeds = Seeds::derive(cfg.training.seed);
    let mut synth = cfg.synth.clone();
    synth.seed = seeds.synth_video(a.video);
    let seq = ingest::synth_scene(&synth).map_err(|e| CliError::invalid(format!("synth: {e}")))?;
    let mut out = create(&a.out)?;
    ingest::write_native(&seq, &mut out).context("writing native sequence")?;
    out.flush().context("writing native sequence")?;
    println!("wrote {} frames, {} nodes to {}", seq.len(), seq.total_nodes(), a.out.display());

    let mut manifest = Manifest::new("synth", &cfg, Some(seeds));
    manifest.outputs.push(a.out.display().to_string());
    manifest.summary = json!({ "video": a.video, "frames": seq.len(), "total_nodes": seq.total_nodes() });
    manifest.write(&sidecar_path(&a.out, ".manifest.json"))?;
    Ok(())
}

/// Input problems surface as validation failures, everything else as runtime.
fn classify(e: FederatedError) -> CliError {
    match e {
        FederatedError::Partition(msg) | FederatedError::Plan(msg) => CliError::invalid(msg),
        FederatedError::Model(
            e @ (ModelError::InvalidHyperparams(_)
            | ModelError::EmptyLossWindow(_)
            | ModelError::InvalidDeltaT
            | ModelError::DimensionMismatch { .. }),
        ) => CliError::invalid(e.to_string()),
        e => CliError::Runtime(e.into()),
    }
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = a.run.resolve()?;
    let seeds = Seeds::derive(cfg.training.seed);
    let seqs = load_sequences(&cfg, &seeds)?;
    let hyper = cfg.model.hyperparams(seqs[0].feature_len);
    hyper.validate().map_err(|e| CliError::invalid(e.to_string()))?;
    let tr = &cfg.training;
    let delta_t = cfg.model.delta_t;
    let clients = partition_clients(&seqs, tr.m, tr.partition, &hyper, delta_t).map_err(classify)?;
    let init = init_params(hyper, seeds.init).map_err(|e| CliError::Runtime(e.into()))?;

    let mut transport: Box<dyn Transport> = match tr.mode {
        Mode::FedSecure => {
            let sec = &cfg.secure;
            let (params, attestation) =
                secure_agg::setup_params(sec.modulus_bits, sec.fixed_e, Some(seeds.keygen), sec.session_id)
                    .context("secure setup")?;
            tracing::info!(erased = ?attestation.erased, "secure setup complete");
            let mut rng = ChaCha20Rng::seed_from_u64(seeds.pads);
            Box::new(
                SecureTransport::new(params, clients.len(), &mut rng)
                    .map_err(classify)?
                    .with_value_bound(sec.value_bound),
            )
        }
        Mode::Central | Mode::FedPlain => Box::new(PlainTransport),
    };
    let run_id = format!(
        "{}-m{}-d{}-seed{}",
        tr.mode.as_str(),
        tr.m,
        cfg.model.d,
        tr.seed
    );
    let out = federated::train(&tr.plan(), &clients, init, transport.as_mut(), &run_id).map_err(classify)?;

    let dir = &cfg.output.dir;
    let ckpt = dir.join("checkpoint.txt");
    let metrics = dir.join("metrics.csv");
    let mut w = create(&ckpt)?;
    write_checkpoint(&out.params, &mut w).context("writing checkpoint")?;
    w.flush().context("writing checkpoint")?;
    federated::write_metrics_csv(&out.metrics, create(&metrics)?).context("writing metrics")?;

    let last = out.metrics.last().context("training produced no metrics")?;
    let baseline = federated::baseline_constant_position_many(&seqs, delta_t).map_err(classify)?;
    println!(
        "{run_id}: {} syncs, loss {:.6}, rmse ({:.3}, {:.3}) px, constant-position ({:.3}, {:.3}) px",
        out.metrics.len(),
        last.loss,
        last.rmse_x,
        last.rmse_y,
        baseline.x,
        baseline.y
    );

    let mut manifest = Manifest::new("train", &cfg, Some(seeds));
    manifest.outputs = vec![ckpt.display().to_string(), metrics.display().to_string()];
    manifest.summary = json!({
        "run_id": run_id,
        "param_count": out.params.len(),
        "client_samples": clients.iter().map(|c| c.n_j).collect::<Vec<_>>(),
        "final_loss": last.loss,
        "rmse": { "x": last.rmse_x, "y": last.rmse_y },
        "baseline_rmse": { "x": baseline.x, "y": baseline.y },
    });
    manifest.write(&dir.join("train_manifest.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    predictor: &'static str,
    axis: &'static str,
    rmse: f64,
}

fn load_checkpoint(path: &Path) -> CliResult<ModelParams> {
    read_checkpoint(open(path)?).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    if a.delta_t == 0 {
        return Err(CliError::invalid("--delta-t must be at least 1"));
    }
    let params = load_checkpoint(&a.checkpoint)?;
    let seq = read_sequence(&a.sequence)?;
    let h = &params.hyper;
    if h.k != seq.feature_len {
        return Err(CliError::invalid(format!(
            "checkpoint expects {} features per node (d = {}, input width {}), sequence has {} features per node",
            h.k,
            h.d,
            h.input_dim(),
            seq.feature_len
        )));
    }
    let model = dynamic_gnn::evaluate_rmse(&seq, &params, a.delta_t)
        .map_err(|e| classify(FederatedError::Model(e)))?;
    let baseline = federated::baseline_constant_position(&seq, a.delta_t).map_err(classify)?;
    let rows = [
        EvalRow { predictor: "model", axis: "x", rmse: model.x },
        EvalRow { predictor: "model", axis: "y", rmse: model.y },
        EvalRow { predictor: "constant_position", axis: "x", rmse: baseline.x },
        EvalRow { predictor: "constant_position", axis: "y", rmse: baseline.y },
    ];
    let path = a.out_dir.join("eval.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for r in &rows {
        w.serialize(r).context("writing eval csv")?;
    }
    w.flush().context("writing eval csv")?;
    println!("predictor,axis,rmse");
    for r in &rows {
        println!("{},{},{}", r.predictor, r.axis, r.rmse);
    }

    let mut manifest = Manifest::new(
        "eval",
        json!({
            "checkpoint": a.checkpoint,
            "sequence": a.sequence,
            "delta_t": a.delta_t,
            "hyperparams": h,
        }),
        None,
    );
    manifest.outputs.push(path.display().to_string());
    manifest.summary = json!({
        "model": { "x": model.x, "y": model.y },
        "constant_position": { "x": baseline.x, "y": baseline.y },
    });
    manifest.write(&a.out_dir.join("eval_manifest.json"))?;
    Ok(())
}

pub fn bench(a: &BenchArgs) -> CliResult<()> {
    let mut errs = Vec::new();
    if a.repeats < MIN_REPEATS {
        errs.push(format!("--repeats must be at least {MIN_REPEATS}, got {}", a.repeats));
    }
    if a.modulus_bits < MIN_MODULUS_BITS {
        errs.push(format!(
            "--modulus-bits must be at least {MIN_MODULUS_BITS}, got {}",
            a.modulus_bits
        ));
    }
    if a.m_values.is_empty() || a.m_values.iter().any(|&m| m < 2) {
        errs.push("--m needs one or more user counts, each at least 2".into());
    }
    if a.d_values.is_empty() || a.d_values.contains(&0) {
        errs.push("--d needs one or more positive dimensions".into());
    }
    if a.layers == 0 {
        errs.push("--layers must be at least 1".into());
    }
    if a.threads == Some(0) {
        errs.push("--threads must be at least 1".into());
    }
    if !errs.is_empty() {
        return Err(CliError::Validation(errs));
    }

    let seeds = Seeds::derive(a.seed);
    let (params, _) = secure_agg::setup_params(a.modulus_bits, DEFAULT_FIXED_E, Some(seeds.keygen), 1)
        .context("secure setup")?;
    let cfg = BenchConfig {
        m_values: a.m_values.clone(),
        d_values: a.d_values.clone(),
        repeats: a.repeats,
        n_layers: a.layers,
        threads: a.threads,
        seed: seeds.pads,
    };
    let report = bench::run_bench(&cfg, &params).context("benchmark")?;
    let csv_path = a.out_dir.join("bench.csv");
    let summary = bench::emit_report(&report, &params, create(&csv_path)?).context("writing bench csv")?;
    print!("{summary}");
    let summary_path = a.out_dir.join("bench_summary.txt");
    std::fs::write(&summary_path, &summary).with_context(|| format!("writing {}", summary_path.display()))?;

    let violations = bench::trend_violations(&report.results, &params, bench::TREND_TOLERANCE);
    let mut manifest = Manifest::new(
        "bench",
        json!({
            "grid": cfg,
            "modulus_bits": report.modulus_bits,
            "threads": report.threads,
        }),
        Some(seeds),
    );
    manifest.outputs = vec![csv_path.display().to_string(), summary_path.display().to_string()];
    manifest.summary = json!({ "results": report.results.len(), "trend_violations": violations });
    manifest.write(&a.out_dir.join("bench_manifest.json"))?;
    Ok(())
}
