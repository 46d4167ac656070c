use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use effattn::analysis::record_keys;
use effattn::attention_sim::{synthesize_heads, SublayerConfig};
use effattn::bench::{run_overhead_benchmark, BenchConfig, BenchReport};
use effattn::decomposition::{decompose_batch, residual_factor, verify, VerificationReport};
use effattn::tensor_io::{read_bundle_file, write_bundle_file};
use effattn::{Bundle, Precision};

use crate::failure::{CliResult, Context, Failure};
use crate::select::filter_records;
use crate::{check_tolerance, BenchArgs, DecomposeArgs, FormatArg, PrecisionArg, SynthArgs};

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let cfg = SublayerConfig {
        d_s: args.seq_len,
        d_model: args.d_model,
        d_q: args.d_k,
        d_k: args.d_k,
        d_v: args.d_v,
        n_heads: args.n_heads,
        seed: args.seed,
    };
    let precision = match args.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };
    let records = synthesize_heads(&cfg, args.examples)?;
    let bundle = Bundle::new(args.task.as_str(), args.tag.as_str(), precision).with_records(records);
    let bytes = write_bundle_file(&bundle, &args.output).context(args.output.display())?;
    eprintln!("wrote {} records ({bytes} bytes) to {}", bundle.records.len(), args.output.display());
    Ok(())
}

pub fn read_input(path: &Path) -> CliResult<Bundle> {
    read_bundle_file(path).context(path.display())
}

#[derive(Debug, Serialize)]
struct HeadFailure {
    layer: u16,
    head: u16,
    example: usize,
    #[serde(flatten)]
    report: VerificationReport,
}

#[derive(Debug, Serialize)]
struct VerificationSummary {
    input: String,
    output: String,
    tolerance: f64,
    residual_factor: f64,
    heads: usize,
    failed: usize,
    passed: bool,
    max_residual_identity: f64,
    max_residual_annihilation: f64,
    max_residual_reconstruction: f64,
    /// Largest `max(‖A⊥V − AV‖, ‖A∥V‖) / σ₁` over all heads.
    max_relative_output_residual: f64,
    nullspace_dim_min: usize,
    nullspace_dim_max: usize,
    failures: Vec<HeadFailure>,
}

pub fn decompose(args: &DecomposeArgs) -> CliResult<()> {
    let tolerance = check_tolerance(args.tolerance)?;
    let input = read_input(&args.input)?;
    if input.effective {
        return Err(Failure::argument(format!("{} already holds effective attention", args.input.display())));
    }
    let rel_tol = tolerance.unwrap_or(input.precision.default_rel_tol());
    let mut records = filter_records(input.records, args.filters.layers.as_ref(), args.filters.heads.as_ref());
    if records.is_empty() {
        return Err(Failure::argument("no records match the layer/head filters"));
    }
    if let Some(len) = args.pad_to {
        records = records.iter().map(|r| r.padded_to(len)).collect::<Result<_, _>>()?;
    }

    let decompositions = decompose_batch(&records, rel_tol)
        .into_iter()
        .zip(record_keys(&records))
        .map(|(d, key)| {
            d.map_err(|e| {
                let f = Failure::from(e);
                Failure {
                    code: f.code,
                    message: format!("layer {} head {} example {}: {}", key.layer, key.head, key.example, f.message),
                }
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut summary = VerificationSummary {
        input: args.input.display().to_string(),
        output: args.output.display().to_string(),
        tolerance: rel_tol,
        residual_factor: residual_factor(rel_tol),
        heads: records.len(),
        failed: 0,
        passed: true,
        max_residual_identity: 0.0,
        max_residual_annihilation: 0.0,
        max_residual_reconstruction: 0.0,
        max_relative_output_residual: 0.0,
        nullspace_dim_min: usize::MAX,
        nullspace_dim_max: 0,
        failures: Vec::new(),
    };
    let mut effective = Vec::with_capacity(records.len());
    for ((record, dec), key) in records.iter().zip(decompositions).zip(record_keys(&records)) {
        let report = verify(&dec, record);
        summary.max_residual_identity = summary.max_residual_identity.max(report.residual_identity);
        summary.max_residual_annihilation = summary.max_residual_annihilation.max(report.residual_annihilation);
        summary.max_residual_reconstruction = summary.max_residual_reconstruction.max(report.residual_reconstruction);
        if report.sigma_max > 0.0 {
            let rel = report.residual_identity.max(report.residual_annihilation) / report.sigma_max;
            summary.max_relative_output_residual = summary.max_relative_output_residual.max(rel);
        }
        summary.nullspace_dim_min = summary.nullspace_dim_min.min(dec.nullspace_dim());
        summary.nullspace_dim_max = summary.nullspace_dim_max.max(dec.nullspace_dim());
        if !report.passed {
            summary.failures.push(HeadFailure { layer: key.layer, head: key.head, example: key.example, report });
        }
        effective.push(record.with_attention(dec.a_perp)?);
    }
    summary.failed = summary.failures.len();
    summary.passed = summary.failed == 0;

    let mut out = Bundle::new(input.task_name, input.checkpoint_tag, Precision::F64).with_records(effective);
    out.effective = true;
    write_bundle_file(&out, &args.output).context(args.output.display())?;

    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut p = args.output.clone().into_os_string();
        p.push(".verify.json");
        PathBuf::from(p)
    });
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(&report_path, format!("{json}\n")).context(report_path.display())?;
    println!("{json}");

    if summary.passed {
        Ok(())
    } else {
        Err(Failure::tolerance(format!(
            "{} of {} heads exceed the residual bounds; see {}",
            summary.failed,
            summary.heads,
            report_path.display()
        )))
    }
}

pub fn bench(args: &BenchArgs) -> CliResult<()> {
    let tolerance = check_tolerance(args.tolerance)?;
    let mut cfg = BenchConfig::new(SublayerConfig {
        d_s: args.seq_len,
        d_model: args.d_model,
        d_q: args.d_k,
        d_k: args.d_k,
        d_v: args.d_v,
        n_heads: 1,
        seed: args.seed,
    });
    cfg.warmup = args.warmup;
    cfg.iterations = args.iterations;
    if let Some(t) = tolerance {
        cfg.rel_tol = t;
    }
    let report = run_overhead_benchmark(&cfg)?;
    eprintln!(
        "forward {:.3} ms, forward+decompose {:.3} ms, ratio {:.2} (reference {} {}s -> {}s, {:.1}x)",
        report.forward_median_secs * 1e3,
        report.forward_decompose_median_secs * 1e3,
        report.ratio,
        report.reference.task,
        report.reference.standard_secs,
        report.reference.effective_secs,
        report.reference.ratio
    );
    let text = match args.format {
        FormatArg::Json => format!("{}\n", serde_json::to_string_pretty(&report)?),
        FormatArg::Csv => bench_csv(&report)?,
    };
    match &args.output {
        Some(path) => fs::write(path, text).context(path.display())?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    d_s: usize,
    d_model: usize,
    d_v: usize,
    warmup: usize,
    iterations: usize,
    forward_median_secs: f64,
    forward_decompose_median_secs: f64,
    ratio: f64,
    reference_task: &'static str,
    reference_standard_secs: f64,
    reference_effective_secs: f64,
    reference_ratio: f64,
}

fn bench_csv(r: &BenchReport) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(BenchRow {
        d_s: r.d_s,
        d_model: r.d_model,
        d_v: r.d_v,
        warmup: r.warmup,
        iterations: r.iterations,
        forward_median_secs: r.forward_median_secs,
        forward_decompose_median_secs: r.forward_decompose_median_secs,
        ratio: r.ratio,
        reference_task: r.reference.task,
        reference_standard_secs: r.reference.standard_secs,
        reference_effective_secs: r.reference.effective_secs,
        reference_ratio: r.reference.ratio,
    })?;
    let bytes = w.into_inner().map_err(|e| Failure::from(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
