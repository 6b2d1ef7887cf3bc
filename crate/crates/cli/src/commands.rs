use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use klora_core::analysis::{model_histogram, MagnitudeHistogram};
use klora_core::engine::switch_step;
use klora_core::export::boundary_steps;
use klora_core::manifest::SourceRef;
use klora_core::{
    build_fixed_schedule, build_random_schedule, build_schedule, build_subset_schedule,
    build_topk_no_scale_schedule, export_merged_lora, k_sweep, parse_file, render_heatmap,
    FusionManifest, LoraModel, ScheduleParams, Selection, SelectionSchedule, SwitchStep,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{
    AblateArgs, AblationMode, AnalyzeArgs, Cli, Command, HeatmapArgs, HeatmapOpts, MergeArgs,
    ScheduleArgs,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] klora_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_input_error() => 2,
            CliError::Core(_) | CliError::Internal(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cli: &Cli) -> CliResult {
    let config = serde_json::to_value(&cli.command)
        .map_err(|e| CliError::Internal(format!("cannot record run config: {e}")))?;
    match &cli.command {
        Command::Analyze(a) => analyze(a, cli.json),
        Command::Schedule(a) => schedule(a, config, cli.json),
        Command::Merge(a) => merge(a, cli.json),
        Command::Heatmap(a) => heatmap(a),
        Command::Ablate(a) => ablate(a, config, cli.json),
    }
}

fn print_json(value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Internal(format!("cannot encode report: {e}")))?;
    println!("{text}");
    Ok(())
}

fn switch_label(row: &[Selection]) -> String {
    match switch_step(row) {
        SwitchStep::Never => "never".into(),
        SwitchStep::AlwaysStyle => "always_style".into(),
        SwitchStep::At(t) => t.to_string(),
        SwitchStep::Irregular => "irregular".into(),
    }
}

fn load_pair(content: &Path, style: &Path) -> CliResult<(LoraModel, LoraModel)> {
    Ok((parse_file(content)?, parse_file(style)?))
}

fn histogram_json(h: &MagnitudeHistogram) -> Value {
    let bins: Vec<Value> = h
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(i, &n)| {
            let (lo, hi) = MagnitudeHistogram::bin_edges(i);
            json!({ "lo": lo, "hi": hi, "count": n })
        })
        .collect();
    json!({
        "total": h.total,
        "zeros": h.zeros,
        "below_range": h.below_range,
        "above_range": h.above_range,
        "bins": bins,
    })
}

fn histogram_text(out: &mut String, label: &str, h: &MagnitudeHistogram) {
    let _ = writeln!(
        out,
        "{label} |dW| histogram: {} values, {} zero, {} below range, {} above range",
        h.total, h.zeros, h.below_range, h.above_range
    );
    let peak = h.counts.iter().copied().max().unwrap_or(0).max(1);
    for (i, &n) in h.counts.iter().enumerate().filter(|(_, &n)| n > 0) {
        let (lo, hi) = MagnitudeHistogram::bin_edges(i);
        let bar = "#".repeat(((n * 40).div_ceil(peak)) as usize);
        let _ = writeln!(out, "  [{lo:9.2e}, {hi:9.2e}) {n:>10} {bar}");
    }
}

fn analyze(args: &AnalyzeArgs, as_json: bool) -> CliResult {
    let params = args.params.to_params();
    let (content, style) = load_pair(&args.content, &args.style)?;
    let schedule = build_schedule(&content, &style, &params)?;
    let hist_c = model_histogram(&content, params.apply_lora_alpha)?;
    let hist_s = model_histogram(&style, params.apply_lora_alpha)?;
    let gamma = schedule
        .gamma
        .ok_or_else(|| CliError::Internal("Top-K schedule without gamma".into()))?;

    if as_json {
        let layers: Vec<Value> = schedule
            .layer_order
            .iter()
            .zip(&schedule.origins)
            .zip(&schedule.grid)
            .map(|((name, origin), row)| {
                let imp = schedule.importance(name);
                json!({
                    "base_module": name,
                    "origin": origin,
                    "s_content": imp.map(|i| i.s_content),
                    "s_style": imp.map(|i| i.s_style),
                    "k_used": imp.map(|i| i.k_used),
                    "rank_content": imp.map(|i| i.rank_content),
                    "rank_style": imp.map(|i| i.rank_style),
                    "switch_step": switch_label(row),
                })
            })
            .collect();
        return print_json(&json!({
            "content": SourceRef::of(&content),
            "style": SourceRef::of(&style),
            "gamma": gamma,
            "params": params,
            "layers": layers,
            "content_cells": schedule.count(Selection::Content),
            "style_cells": schedule.count(Selection::Style),
            "histograms": {
                "content": histogram_json(&hist_c),
                "style": histogram_json(&hist_s),
            },
            "warnings": {
                "content": content.warnings,
                "style": style.warnings,
            },
        }));
    }

    let mut out = String::new();
    let _ = writeln!(
        out,
        "content: {} ({} layers)",
        args.content.display(),
        content.len()
    );
    let _ = writeln!(
        out,
        "style:   {} ({} layers)",
        args.style.display(),
        style.len()
    );
    for w in content.warnings.iter().chain(&style.warnings) {
        let _ = writeln!(out, "warning: {w}");
    }
    let _ = writeln!(
        out,
        "gamma = {:.6} (content {:.6e} / style {:.6e})",
        gamma.value, gamma.content_total, gamma.style_total
    );
    let _ = writeln!(
        out,
        "{:<48} {:>6} {:>6} {:>8} {:>14} {:>14} {:>12}",
        "layer", "r_c", "r_s", "k", "S_content", "S_style", "switch"
    );
    for (name, row) in schedule.layer_order.iter().zip(&schedule.grid) {
        match schedule.importance(name) {
            Some(imp) => {
                let _ = writeln!(
                    out,
                    "{:<48} {:>6} {:>6} {:>8} {:>14.6e} {:>14.6e} {:>12}",
                    name,
                    imp.rank_content,
                    imp.rank_style,
                    imp.k_used,
                    imp.s_content,
                    imp.s_style,
                    switch_label(row)
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "{:<48} {:>6} {:>6} {:>8} {:>14} {:>14} {:>12}",
                    name,
                    "-",
                    "-",
                    "-",
                    "-",
                    "-",
                    switch_label(row)
                );
            }
        }
    }
    let _ = writeln!(
        out,
        "cells: {} content, {} style",
        schedule.count(Selection::Content),
        schedule.count(Selection::Style)
    );
    histogram_text(&mut out, "content", &hist_c);
    histogram_text(&mut out, "style", &hist_s);
    print!("{out}");
    Ok(())
}

fn maybe_heatmap(schedule: &SelectionSchedule, opts: &HeatmapOpts) -> CliResult {
    if let Some(path) = &opts.heatmap {
        render_heatmap(schedule, path, opts.heatmap_format.into(), opts.cell_size)?;
    }
    Ok(())
}

fn summary(schedule: &SelectionSchedule, output: &Path) -> Value {
    json!({
        "output": output.display().to_string(),
        "mode": schedule.mode.name(),
        "layers": schedule.num_layers(),
        "steps": schedule.total_steps(),
        "content_cells": schedule.count(Selection::Content),
        "style_cells": schedule.count(Selection::Style),
        "off_cells": schedule.count(Selection::Off),
        "gamma": schedule.gamma.map(|g| g.value),
    })
}

fn report(schedule: &SelectionSchedule, output: &Path, as_json: bool) -> CliResult {
    if as_json {
        return print_json(&summary(schedule, output));
    }
    let mut line = format!(
        "wrote {} ({} layers x {} steps, {} content / {} style",
        output.display(),
        schedule.num_layers(),
        schedule.total_steps(),
        schedule.count(Selection::Content),
        schedule.count(Selection::Style)
    );
    let off = schedule.count(Selection::Off);
    if off > 0 {
        let _ = write!(line, " / {off} off");
    }
    line.push(')');
    if let Some(g) = schedule.gamma {
        let _ = write!(line, ", gamma {:.6}", g.value);
    }
    println!("{line}");
    Ok(())
}

fn write_manifest_with(
    schedule: &SelectionSchedule,
    content: Option<&LoraModel>,
    style: Option<&LoraModel>,
    config: Value,
    path: &Path,
) -> CliResult {
    FusionManifest::from_schedule(schedule)
        .with_sources(content, style)
        .with_run_config(config)
        .write(path)?;
    Ok(())
}

fn schedule(args: &ScheduleArgs, config: Value, as_json: bool) -> CliResult {
    let params = args.params.to_params();
    let (content, style) = load_pair(&args.content, &args.style)?;
    let schedule = build_schedule(&content, &style, &params)?;
    write_manifest_with(
        &schedule,
        Some(&content),
        Some(&style),
        config,
        &args.output,
    )?;
    maybe_heatmap(&schedule, &args.heatmap)?;
    report(&schedule, &args.output, as_json)
}

fn check_source(label: &str, expected: Option<&SourceRef>, model: &LoraModel) -> CliResult {
    match expected {
        Some(src) if src.sha256 != model.sha256 => Err(CliError::Usage(format!(
            "{label} file {} does not match the manifest (sha256 {} vs recorded {})",
            model.source_path, model.sha256, src.sha256
        ))),
        _ => Ok(()),
    }
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Internal(format!("cannot create directory {}: {e}", path.display())))
}

fn merge(args: &MergeArgs, as_json: bool) -> CliResult {
    let manifest = FusionManifest::read(&args.manifest)?;
    let schedule = manifest.to_schedule()?;
    let (content, style) = load_pair(&args.content, &args.style)?;
    check_source("content", manifest.content_source.as_ref(), &content)?;
    check_source("style", manifest.style_source.as_ref(), &style)?;

    let steps: Vec<usize> = if args.boundaries_only {
        boundary_steps(&schedule)
    } else {
        (0..schedule.total_steps()).collect()
    };
    create_dir(&args.output)?;
    let mut written: Vec<PathBuf> = Vec::with_capacity(steps.len());
    for &t in &steps {
        let path = args.output.join(format!("step_{t:03}.safetensors"));
        export_merged_lora(&content, &style, &schedule, t, &path)?;
        written.push(path);
    }
    if as_json {
        let files: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
        return print_json(&json!({ "steps": steps, "files": files }));
    }
    println!(
        "wrote {} checkpoint(s) to {}",
        written.len(),
        args.output.display()
    );
    Ok(())
}

fn heatmap(args: &HeatmapArgs) -> CliResult {
    let schedule = FusionManifest::read(&args.manifest)?.to_schedule()?;
    render_heatmap(&schedule, &args.output, args.format.into(), args.cell_size)?;
    Ok(())
}

fn require_style(args: &AblateArgs) -> CliResult<&Path> {
    args.style.as_deref().ok_or_else(|| {
        CliError::Usage(format!(
            "ablation mode `{}` needs --style",
            mode_name(args.mode)
        ))
    })
}

fn mode_name(mode: AblationMode) -> &'static str {
    match mode {
        AblationMode::Fixed => "fixed",
        AblationMode::Random => "random",
        AblationMode::Subset => "subset",
        AblationMode::NoScale => "no-scale",
        AblationMode::KSweep => "k-sweep",
    }
}

/// Layers shared by both adapters, in content order, or all content layers without a style.
fn weightless_layers(content: &LoraModel, style: Option<&LoraModel>) -> CliResult<Vec<String>> {
    let names: Vec<String> = content
        .layers
        .keys()
        .filter(|k| style.is_none_or(|s| s.layers.contains_key(*k)))
        .cloned()
        .collect();
    if names.is_empty() {
        return Err(CliError::Usage(
            "content and style adapters share no layers".into(),
        ));
    }
    Ok(names)
}

fn ablate(args: &AblateArgs, config: Value, as_json: bool) -> CliResult {
    let params: ScheduleParams = args.params.to_params();
    let content = parse_file(&args.content)?;
    let style = match (args.mode, &args.style) {
        (AblationMode::Subset, _) | (_, None) => None,
        (_, Some(path)) => Some(parse_file(path)?),
    };

    let schedule = match args.mode {
        AblationMode::Fixed => {
            let layers = weightless_layers(&content, style.as_ref())?;
            build_fixed_schedule(&params, &layers, args.fixed_reading.into())?
        }
        AblationMode::Random => {
            let layers = weightless_layers(&content, style.as_ref())?;
            build_random_schedule(&params, &layers, args.seed, args.p_content)?
        }
        AblationMode::Subset => {
            let layers = weightless_layers(&content, None)?;
            build_subset_schedule(&params, &layers, args.fraction, args.seed)?
        }
        AblationMode::NoScale => {
            require_style(args)?;
            let style = style.as_ref().expect("style loaded");
            build_topk_no_scale_schedule(&content, style, &params)?
        }
        AblationMode::KSweep => {
            require_style(args)?;
            let style = style.as_ref().expect("style loaded");
            return sweep(args, &content, style, &params, config, as_json);
        }
    };
    write_manifest_with(
        &schedule,
        Some(&content),
        style.as_ref(),
        config,
        &args.output,
    )?;
    maybe_heatmap(&schedule, &args.heatmap)?;
    report(&schedule, &args.output, as_json)
}

fn sweep(
    args: &AblateArgs,
    content: &LoraModel,
    style: &LoraModel,
    params: &ScheduleParams,
    config: Value,
    as_json: bool,
) -> CliResult {
    let runs = k_sweep(content, style, params, &args.k_values)?;
    create_dir(&args.output)?;
    let mut rows = Vec::with_capacity(runs.len());
    for (k, schedule) in &runs {
        let path = args.output.join(format!("k_{k}.json"));
        write_manifest_with(schedule, Some(content), Some(style), config.clone(), &path)?;
        rows.push(json!({
            "k": k,
            "output": path.display().to_string(),
            "content_cells": schedule.count(Selection::Content),
            "style_cells": schedule.count(Selection::Style),
        }));
        if !as_json {
            println!(
                "k={k:<8} content cells {:>8} style cells {:>8} -> {}",
                schedule.count(Selection::Content),
                schedule.count(Selection::Style),
                path.display()
            );
        }
    }
    if as_json {
        return print_json(&json!({ "sweep": rows }));
    }
    Ok(())
}
