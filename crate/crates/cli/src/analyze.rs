//! `analyze` subcommands. Every report shares the key columns `task`,
//! `checkpoint`, `kind`, `layer`, `head`, so standard and effective runs can
//! be joined row by row.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use effattn::analysis::{
    finetune_drift, pattern_census, token_attention_map, token_relevance, PatternConfig, PatternLabelKind, TargetToken,
};
use effattn::heatmap::Heatmap;
use effattn::{AttentionKind, Bundle, TokenCategory};

use crate::commands::read_input;
use crate::failure::{CliResult, Context, Failure};
use crate::select::filter_records;
use crate::{check_tolerance, AnalyzeArgs, AnalyzeCommand, FormatArg, KindArg, TargetArg};

/// A report kind and the attention actually computed for it. Bundles written
/// by `decompose` already hold effective attention, so their payload is used
/// as is.
#[derive(Debug, Clone, Copy)]
struct KindPlan {
    label: AttentionKind,
    compute: AttentionKind,
}

fn plan_kinds(arg: KindArg, payload_is_effective: bool) -> CliResult<Vec<KindPlan>> {
    use AttentionKind::{Effective, Standard};
    if payload_is_effective {
        return match arg {
            KindArg::Standard => {
                Err(Failure::argument("input holds effective attention; standard attention is not available"))
            }
            KindArg::Both => {
                eprintln!("note: input holds effective attention; reporting the effective kind only");
                Ok(vec![KindPlan { label: Effective, compute: Standard }])
            }
            KindArg::Effective => Ok(vec![KindPlan { label: Effective, compute: Standard }]),
        };
    }
    let kinds = match arg {
        KindArg::Standard => vec![Standard],
        KindArg::Effective => vec![Effective],
        KindArg::Both => vec![Standard, Effective],
    };
    Ok(kinds.into_iter().map(|k| KindPlan { label: k, compute: k }).collect())
}

struct Loaded {
    bundle: Bundle,
    rel_tol: f64,
    explicit_tol: Option<f64>,
}

fn load(args: &AnalyzeArgs, path: &Path) -> CliResult<Loaded> {
    let explicit_tol = check_tolerance(args.tolerance)?;
    let mut bundle = read_input(path)?;
    bundle.records = filter_records(bundle.records, args.filters.layers.as_ref(), args.filters.heads.as_ref());
    if bundle.records.is_empty() {
        return Err(Failure::argument(format!("no records in {} match the layer/head filters", path.display())));
    }
    let rel_tol = explicit_tol.unwrap_or(bundle.precision.default_rel_tol());
    Ok(Loaded { bundle, rel_tol, explicit_tol })
}

pub fn run(cmd: &AnalyzeCommand) -> CliResult<()> {
    match cmd {
        AnalyzeCommand::Tokens(args) => tokens(args),
        AnalyzeCommand::Patterns { common, thresholds } => patterns(common, thresholds.as_deref()),
        AnalyzeCommand::FinetuneDiff { common, input_b } => finetune_diff(common, input_b),
        AnalyzeCommand::TokenMap { common, target } => token_map(common, *target),
    }
}

struct Writer<'a> {
    dir: &'a Path,
    format: FormatArg,
}

impl<'a> Writer<'a> {
    fn new(args: &'a AnalyzeArgs) -> CliResult<Self> {
        fs::create_dir_all(&args.output).context(args.output.display())?;
        Ok(Self { dir: &args.output, format: args.format })
    }

    fn path(&self, stem: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{stem}.{ext}"))
    }

    fn csv<T: Serialize>(&self, stem: &str, rows: &[T]) -> CliResult<()> {
        let path = self.path(stem, "csv");
        let mut w = csv::Writer::from_path(&path).context(path.display())?;
        for row in rows {
            w.serialize(row).context(path.display())?;
        }
        w.flush().context(path.display())?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }

    fn json<T: Serialize>(&self, stem: &str, value: &T) -> CliResult<()> {
        let path = self.path(stem, "json");
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, format!("{text}\n")).context(path.display())?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }

    /// Writes either the flat rows (CSV) or the nested document (JSON).
    fn report<R: Serialize, N: Serialize>(&self, stem: &str, rows: &[R], nested: impl FnOnce() -> N) -> CliResult<()> {
        match self.format {
            FormatArg::Csv => self.csv(stem, rows),
            FormatArg::Json => self.json(stem, &nested()),
        }
    }

    fn heatmap(&self, stem: &str, map: &Heatmap, range: Option<(f64, f64)>) -> CliResult<()> {
        let path = self.path(stem, "pgm");
        let sidecar = map.write(&path, range).context(path.display())?;
        eprintln!("wrote {} and {}", path.display(), sidecar.display());
        Ok(())
    }
}

type Nested<T> = BTreeMap<u16, BTreeMap<u16, T>>;

#[derive(Serialize)]
struct Document<'a, T: Serialize, E: Serialize> {
    task: &'a str,
    checkpoint: &'a str,
    analysis: &'static str,
    kind: AttentionKind,
    #[serde(flatten)]
    extra: E,
    layers: Nested<T>,
}

// ---- tokens ---------------------------------------------------------------

#[derive(Serialize)]
struct TokenRow<'a> {
    task: &'a str,
    checkpoint: &'a str,
    kind: AttentionKind,
    layer: u16,
    head: u16,
    category: TokenCategory,
    weight: Option<f64>,
    examples: usize,
}

#[derive(Serialize)]
struct TokenCellJson {
    weight: Option<f64>,
    examples: usize,
}

#[derive(Serialize)]
struct SkippedExtra {
    skipped_records: usize,
}

fn tokens(args: &AnalyzeArgs) -> CliResult<()> {
    let Loaded { bundle, rel_tol, .. } = load(args, &args.input)?;
    let out = Writer::new(args)?;
    for plan in plan_kinds(args.kind, bundle.effective)? {
        let table = token_relevance(&bundle.records, plan.compute, rel_tol)?;
        let rows: Vec<TokenRow> = table
            .cells
            .iter()
            .map(|c| TokenRow {
                task: &bundle.task_name,
                checkpoint: &bundle.checkpoint_tag,
                kind: plan.label,
                layer: table.layer,
                head: c.head,
                category: c.category,
                weight: c.weight,
                examples: c.examples,
            })
            .collect();
        out.report(&format!("tokens_{}", plan.label), &rows, || {
            let mut layers: Nested<BTreeMap<TokenCategory, TokenCellJson>> = BTreeMap::new();
            for c in &table.cells {
                layers
                    .entry(table.layer)
                    .or_default()
                    .entry(c.head)
                    .or_default()
                    .insert(c.category, TokenCellJson { weight: c.weight, examples: c.examples });
            }
            Document {
                task: &bundle.task_name,
                checkpoint: &bundle.checkpoint_tag,
                analysis: "tokens",
                kind: plan.label,
                extra: SkippedExtra { skipped_records: table.skipped_records },
                layers,
            }
        })?;
    }
    Ok(())
}

// ---- patterns -------------------------------------------------------------

#[derive(Serialize)]
struct PatternRow<'a> {
    task: &'a str,
    checkpoint: &'a str,
    kind: AttentionKind,
    layer: u16,
    head: u16,
    example: usize,
    label: PatternLabelKind,
    column_concentration: f64,
    diagonal_mass: f64,
    block_mass: Option<f64>,
    entropy: f64,
}

#[derive(Serialize)]
struct CensusRow<'a> {
    task: &'a str,
    checkpoint: &'a str,
    kind: AttentionKind,
    label: PatternLabelKind,
    count: usize,
    percentage: f64,
}

#[derive(Serialize)]
struct CensusEntry {
    count: usize,
    percentage: f64,
}

#[derive(Serialize)]
struct CensusExtra {
    total: usize,
    census: BTreeMap<PatternLabelKind, CensusEntry>,
}

#[derive(Serialize)]
struct PatternCellJson {
    example: usize,
    label: PatternLabelKind,
    column_concentration: f64,
    diagonal_mass: f64,
    block_mass: Option<f64>,
    entropy: f64,
}

fn patterns(args: &AnalyzeArgs, thresholds: Option<&Path>) -> CliResult<()> {
    let config = match thresholds {
        Some(path) => PatternConfig::load(path).context(path.display())?,
        None => PatternConfig::default(),
    };
    let Loaded { bundle, rel_tol, .. } = load(args, &args.input)?;
    let out = Writer::new(args)?;
    for plan in plan_kinds(args.kind, bundle.effective)? {
        let census = pattern_census(&bundle.records, plan.compute, rel_tol, &config)?;
        let task = bundle.task_name.as_str();
        let checkpoint = bundle.checkpoint_tag.as_str();
        let rows: Vec<PatternRow> = census
            .labels
            .iter()
            .map(|(k, p)| PatternRow {
                task,
                checkpoint,
                kind: plan.label,
                layer: k.layer,
                head: k.head,
                example: k.example,
                label: p.label,
                column_concentration: p.features.column_concentration,
                diagonal_mass: p.features.diagonal_mass,
                block_mass: p.features.block_mass,
                entropy: p.features.entropy,
            })
            .collect();
        let stem = format!("patterns_{}", plan.label);
        out.report(&stem, &rows, || {
            let mut layers: Nested<Vec<PatternCellJson>> = BTreeMap::new();
            for (k, p) in &census.labels {
                layers.entry(k.layer).or_default().entry(k.head).or_default().push(PatternCellJson {
                    example: k.example,
                    label: p.label,
                    column_concentration: p.features.column_concentration,
                    diagonal_mass: p.features.diagonal_mass,
                    block_mass: p.features.block_mass,
                    entropy: p.features.entropy,
                });
            }
            let census_map = census
                .counts
                .iter()
                .map(|&(l, count)| (l, CensusEntry { count, percentage: census.percentage(l) }))
                .collect();
            Document {
                task,
                checkpoint,
                analysis: "patterns",
                kind: plan.label,
                extra: CensusExtra { total: census.total, census: census_map },
                layers,
            }
        })?;
        if args.format == FormatArg::Csv {
            let summary: Vec<CensusRow> = census
                .counts
                .iter()
                .map(|&(label, count)| CensusRow {
                    task,
                    checkpoint,
                    kind: plan.label,
                    label,
                    count,
                    percentage: census.percentage(label),
                })
                .collect();
            out.csv(&format!("patterns_summary_{}", plan.label), &summary)?;
        }
        let shares: Vec<String> = census.percentages.iter().map(|(l, p)| format!("{} {p:.2}%", l.as_str())).collect();
        eprintln!("{} ({} heads): {}", plan.label, census.total, shares.join(", "));
    }
    Ok(())
}

// ---- finetune-diff --------------------------------------------------------

#[derive(Serialize)]
struct DriftRow<'a> {
    task: &'a str,
    checkpoint: &'a str,
    checkpoint_b: &'a str,
    kind: AttentionKind,
    layer: u16,
    head: u16,
    cosine: Option<f64>,
    examples: usize,
    undefined_pairs: usize,
}

#[derive(Serialize)]
struct DriftCellJson {
    cosine: Option<f64>,
    examples: usize,
    undefined_pairs: usize,
}

#[derive(Serialize)]
struct DriftExtra<'a> {
    checkpoint_b: &'a str,
}

fn finetune_diff(args: &AnalyzeArgs, input_b: &Path) -> CliResult<()> {
    let a = load(args, &args.input)?;
    let b = load(args, input_b)?;
    if a.bundle.effective != b.bundle.effective {
        return Err(Failure::argument("one bundle holds effective attention and the other does not"));
    }
    let out = Writer::new(args)?;
    for plan in plan_kinds(args.kind, a.bundle.effective)? {
        let drift = finetune_drift(&a.bundle, &b.bundle, plan.compute, a.explicit_tol)?;
        let (task, ck, ck_b) =
            (a.bundle.task_name.as_str(), a.bundle.checkpoint_tag.as_str(), b.bundle.checkpoint_tag.as_str());
        let rows: Vec<DriftRow> = drift
            .cells
            .iter()
            .map(|c| DriftRow {
                task,
                checkpoint: ck,
                checkpoint_b: ck_b,
                kind: plan.label,
                layer: c.layer,
                head: c.head,
                cosine: c.cosine,
                examples: c.examples,
                undefined_pairs: c.undefined_pairs,
            })
            .collect();
        let stem = format!("finetune_diff_{}", plan.label);
        out.report(&stem, &rows, || {
            let mut layers: Nested<DriftCellJson> = BTreeMap::new();
            for c in &drift.cells {
                layers.entry(c.layer).or_default().insert(
                    c.head,
                    DriftCellJson { cosine: c.cosine, examples: c.examples, undefined_pairs: c.undefined_pairs },
                );
            }
            Document {
                task,
                checkpoint: ck,
                analysis: "finetune_diff",
                kind: plan.label,
                extra: DriftExtra { checkpoint_b: ck_b },
                layers,
            }
        })?;
        let map = Heatmap::from_cells(drift.cells.iter().map(|c| (c.layer, c.head, c.cosine)));
        out.heatmap(&stem, &map, None)?;
    }
    Ok(())
}

// ---- token-map ------------------------------------------------------------

#[derive(Serialize)]
struct MapRow<'a> {
    task: &'a str,
    checkpoint: &'a str,
    kind: AttentionKind,
    layer: u16,
    head: u16,
    target: &'static str,
    value: f64,
    examples: usize,
}

#[derive(Serialize)]
struct MapCellJson {
    value: f64,
    examples: usize,
}

#[derive(Serialize)]
struct MapExtra {
    target: &'static str,
    value_range: Option<(f64, f64)>,
    skipped_records: usize,
}

fn token_map(args: &AnalyzeArgs, target: TargetArg) -> CliResult<()> {
    let target = match target {
        TargetArg::Cls => TargetToken::Cls,
        TargetArg::Sep => TargetToken::Sep,
    };
    let target_name = match target {
        TargetToken::Cls => "cls",
        TargetToken::Sep => "sep",
    };
    let Loaded { bundle, rel_tol, .. } = load(args, &args.input)?;
    let out = Writer::new(args)?;
    for plan in plan_kinds(args.kind, bundle.effective)? {
        let mut map = token_attention_map(&bundle.records, target, plan.compute, rel_tol)?;
        if plan.label == AttentionKind::Effective && map.value_range.is_none() {
            map.value_range = map.cells.iter().fold(None, |acc, c| match acc {
                None => Some((c.value, c.value)),
                Some((lo, hi)) => Some((f64::min(lo, c.value), f64::max(hi, c.value))),
            });
        }
        let (task, ck) = (bundle.task_name.as_str(), bundle.checkpoint_tag.as_str());
        let rows: Vec<MapRow> = map
            .cells
            .iter()
            .map(|c| MapRow {
                task,
                checkpoint: ck,
                kind: plan.label,
                layer: c.layer,
                head: c.head,
                target: target_name,
                value: c.value,
                examples: c.examples,
            })
            .collect();
        let stem = format!("token_map_{target_name}_{}", plan.label);
        out.report(&stem, &rows, || {
            let mut layers: Nested<MapCellJson> = BTreeMap::new();
            for c in &map.cells {
                layers.entry(c.layer).or_default().insert(c.head, MapCellJson { value: c.value, examples: c.examples });
            }
            Document {
                task,
                checkpoint: ck,
                analysis: "token_map",
                kind: plan.label,
                extra: MapExtra {
                    target: target_name,
                    value_range: map.value_range,
                    skipped_records: map.skipped_records,
                },
                layers,
            }
        })?;
        let heat = Heatmap::from_cells(map.cells.iter().map(|c| (c.layer, c.head, Some(c.value))));
        out.heatmap(&stem, &heat, map.value_range)?;
    }
    Ok(())
}
