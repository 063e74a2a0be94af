//! Command implementations. Each writes its report to `out`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use regseg_core::fov::{analyze_graph_fov, measure_empirical_fov};
use regseg_core::graph::{build_backbone, build_backbone_prefix, init_weights, BoundModel, ExecOptions, WeightMap};
use regseg_core::io::{self, Normalization, Palette};
use regseg_core::metrics::{argmax_labels, compute_iou, count_macs, count_params, ConfusionMatrix};
use regseg_core::{Error, ModelGraph, Shape, Tensor};

use crate::bench::{block_comparison, model_timing, BLOCK_GROUP_WIDTH, BLOCK_INPUT, BLOCK_WIDTH};
use crate::config::{check_size, ReportFormat, RunConfig};
use crate::error::CliError;
use crate::suites;

type CmdResult = Result<(), CliError>;

fn w(out: &mut dyn Write, text: &str) -> CmdResult {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Output(e.to_string()))
}

fn giga(v: u64) -> String {
    format!("{:.3}G", v as f64 / 1e9)
}

pub fn describe(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let p = &cfg.preset;
    let graph = p.build()?;
    let rows = p.layer_table()?;
    let params = count_params(&graph);
    let macs = count_macs(&graph, cfg.size)?;
    let backbone = build_backbone(&p.backbone, &p.schedule)?;
    let fov = analyze_graph_fov(&backbone);
    let violations = fov.violations();
    let (h, wd) = cfg.size;
    let mut s = String::new();
    match cfg.report {
        ReportFormat::Text => {
            s += &format!(
                "preset {} ({} classes), schedule {}\n\n",
                p.name, p.num_classes, p.schedule
            );
            s += &format!(
                "{:<10} {:>7} {:>7} {:>10} {:>8}\n",
                "Operator", "d1, d2", "Stride", "#Channels", "#Repeat"
            );
            for r in &rows {
                s += &format!(
                    "{:<10} {:>7} {:>7} {:>10} {:>8}\n",
                    r.operator, r.dilations, r.stride, r.channels, r.repeat
                );
            }
            s += &format!("\nparams          {params} ({:.3}M)\n", params as f64 / 1e6);
            s += &format!(
                "MACs @ {h}x{wd}  {} (2*MACs {})\n",
                giga(macs.macs()),
                giga(macs.flops())
            );
            s += &format!("field of view   {}\n", fov.fov());
            if violations.is_empty() {
                s += "hole-free       yes\n";
            } else {
                s += "hole-free       no\n";
                for v in &violations {
                    s += &format!("  {v}\n");
                }
            }
        }
        ReportFormat::Csv => {
            s += "operator,dilations,stride,channels,repeat\n";
            for r in &rows {
                s += &format!(
                    "{},\"{}\",{},{},{}\n",
                    r.operator, r.dilations, r.stride, r.channels, r.repeat
                );
            }
            s += &format!(
                "\nkey,value\npreset,{}\nschedule,{}\nclasses,{}\n",
                p.name, p.schedule, p.num_classes
            );
            s += &format!(
                "params,{params}\nsize,{h}x{wd}\nmacs,{}\nflops,{}\n",
                macs.macs(),
                macs.flops()
            );
            s += &format!("fov,{}\nhole_free,{}\n", fov.fov(), violations.is_empty());
        }
    }
    w(out, &s)
}

pub fn fov(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let p = &cfg.preset;
    let graph = match cfg.prefix {
        Some(n) => build_backbone_prefix(&p.backbone, &p.schedule, n)?,
        None => build_backbone(&p.backbone, &p.schedule)?,
    };
    let report = analyze_graph_fov(&graph);
    let mut s = String::new();
    match cfg.report {
        ReportFormat::Text => {
            s += &report.to_text(Some(cfg.size));
            for v in report.violations() {
                s += &format!("violation: {v}\n");
            }
        }
        ReportFormat::Csv => {
            s += "layer,k_prime,s_prime,r,k,s,hole_free\n";
            for r in &report.rows {
                s += &format!(
                    "{},{},{},{},{},{},{}\n",
                    r.layer,
                    r.kernel,
                    r.stride,
                    r.dilation,
                    r.after.k,
                    r.after.s,
                    r.hole_free()
                );
            }
        }
    }
    if cfg.measure {
        let shapes = graph.output_shapes(Shape::new(1, graph.input_channels(), cfg.size.0, cfg.size.1))?;
        let o = shapes[&report.output];
        let e = measure_empirical_fov(&graph, (o.h / 2, o.w / 2), cfg.size)?;
        s += &format!(
            "measured at output ({}, {}): extent {}x{}, holes {}, clipped {}\n",
            o.h / 2,
            o.w / 2,
            e.vertical.extent(),
            e.horizontal.extent(),
            e.horizontal.holes.len() + e.vertical.holes.len(),
            e.clipped()
        );
    }
    w(out, &s)
}

/// Binds the configured weights, or seeded random weights when none are
/// given. Also returns the input normalization to use.
fn load_model(cfg: &RunConfig, graph: &ModelGraph) -> Result<(BoundModel<f32>, Normalization), CliError> {
    let (weights, norm): (WeightMap<f32>, Normalization) = match &cfg.weights {
        Some(path) => {
            let c = io::read_container(path)?;
            let norm = Normalization::from_metadata(&c.metadata)?;
            (c.tensors, norm)
        }
        None => (init_weights(graph, cfg.seed), Normalization::default()),
    };
    Ok((BoundModel::bind(graph, &weights, ExecOptions::default())?, norm))
}

const IMAGE_EXTS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn infer(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("infer needs --input".into()))?;
    let output = cfg
        .output
        .as_ref()
        .ok_or_else(|| Error::Config("infer needs --output".into()))?;
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        std::fs::create_dir_all(output).map_err(|e| Error::Config(format!("{}: {e}", output.display())))?;
        list_images(input)?
            .into_iter()
            .map(|p| {
                let o = output.join(format!("{}.png", stem(&p)));
                (p, o)
            })
            .collect()
    } else {
        vec![(input.clone(), output.clone())]
    };
    if jobs.is_empty() {
        return Err(Error::Config(format!("no images in {}", input.display())).into());
    }
    let palette = match &cfg.palette {
        Some(p) => Palette::load(p)?,
        None => Palette::cityscapes(),
    };
    let graph = cfg.preset.build()?;
    let (model, norm) = load_model(cfg, &graph)?;
    if cfg.weights.is_none() {
        w(
            out,
            &format!("note: no --weights given, using random weights (seed {})\n", cfg.seed),
        )?;
    }
    for (src, dst) in jobs {
        let x = io::load_image(&src, &norm)?;
        let s = x.shape();
        check_size((s.h, s.w))?;
        let logits = model.forward(&x)?;
        let labels = argmax_labels(&logits)?;
        io::save_label(&dst, &labels)?;
        let mut line = format!("{} -> {} ({}x{})", src.display(), dst.display(), s.h, s.w);
        if cfg.color {
            let cdst = dst.with_file_name(format!("{}_color.png", stem(&dst)));
            io::save_color(&cdst, &labels, &palette)?;
            line += &format!(", color {}", cdst.display());
        }
        w(out, &(line + "\n"))?;
    }
    Ok(())
}

fn file_names(files: &[PathBuf]) -> BTreeSet<String> {
    files
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect()
}

pub fn eval(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let preds = cfg
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs --input (prediction directory)".into()))?;
    let labels = cfg
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs --labels (label directory)".into()))?;
    let (pa, la) = (file_names(&list_images(preds)?), file_names(&list_images(labels)?));
    if pa != la {
        let only_p: Vec<&String> = pa.difference(&la).collect();
        let only_l: Vec<&String> = la.difference(&pa).collect();
        return Err(Error::Config(format!(
            "prediction and label files differ: only predictions {only_p:?}, only labels {only_l:?}"
        ))
        .into());
    }
    if pa.is_empty() {
        return Err(Error::Config(format!("no label maps in {}", labels.display())).into());
    }
    let classes = cfg.preset.num_classes;
    let names: Vec<&String> = pa.iter().collect();
    let cm = names
        .par_iter()
        .map(|n| -> regseg_core::Result<ConfusionMatrix> {
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(&io::load_label(&preds.join(n))?, &io::load_label(&labels.join(n))?)?;
            Ok(cm)
        })
        .try_reduce(
            || ConfusionMatrix::new(classes),
            |mut a, b| {
                a.merge(&b)?;
                Ok(a)
            },
        )?;
    let report = compute_iou(&cm, &cfg.excluded);
    let text = match cfg.report {
        ReportFormat::Text => format!(
            "{} image pairs, {} pixels\n{}",
            names.len(),
            cm.total(),
            report.to_text()
        ),
        ReportFormat::Csv => report.to_csv(),
    };
    w(out, &text)
}

fn ms(secs: f64) -> String {
    format!("{:.3}", secs * 1e3)
}

pub fn bench(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let csv = cfg.report == ReportFormat::Csv;
    if csv {
        w(out, "what,mean_ms,stddev_ms,iters\n")?;
    }
    if !cfg.skip_model {
        let graph = cfg.preset.build()?;
        let (model, _) = load_model(cfg, &graph)?;
        let x = Tensor::full([1, 3, cfg.size.0, cfg.size.1], 0.5f32)?;
        let t = model_timing(&model, &x, cfg.warmup, cfg.iters)?;
        let (h, wd) = cfg.size;
        if csv {
            w(
                out,
                &format!(
                    "model {h}x{wd},{},{},{}\n",
                    ms(t.total.mean()),
                    ms(t.total.stddev()),
                    cfg.iters
                ),
            )?;
            for (k, d) in &t.blocks {
                w(out, &format!("{k},{},,{}\n", ms(d.as_secs_f64()), cfg.iters))?;
            }
        } else {
            w(
                out,
                &format!(
                    "model {} at {h}x{wd}: mean {} ms, stddev {} ms (warmup {}, iters {})\nper-block mean latency (ms):\n",
                    cfg.preset.name,
                    ms(t.total.mean()),
                    ms(t.total.stddev()),
                    cfg.warmup,
                    cfg.iters
                ),
            )?;
            for (k, d) in &t.blocks {
                w(out, &format!("  {k:<18} {:>10}\n", ms(d.as_secs_f64())))?;
            }
        }
    }
    if !cfg.skip_blocks {
        let rows = block_comparison(cfg.warmup, cfg.iters, cfg.seed)?;
        let i = BLOCK_INPUT;
        if !csv {
            w(
                out,
                &format!(
                    "block comparison (w={BLOCK_WIDTH}, g={BLOCK_GROUP_WIDTH}, input {}x{}x{}x{}, warmup {}, iters {}):\n",
                    i.n, i.c, i.h, i.w, cfg.warmup, cfg.iters
                ),
            )?;
        }
        for r in rows {
            let line = if csv {
                format!(
                    "{},{},{},{}\n",
                    r.name,
                    ms(r.timing.mean()),
                    ms(r.timing.stddev()),
                    cfg.iters
                )
            } else {
                format!(
                    "  {:<14} mean {:>9} ms  stddev {:>8} ms\n",
                    r.name,
                    ms(r.timing.mean()),
                    ms(r.timing.stddev())
                )
            };
            w(out, &line)?;
        }
    }
    Ok(())
}

pub fn selftest(cfg: &RunConfig, out: &mut dyn Write) -> CmdResult {
    let mut failed = Vec::new();
    for r in suites::all(cfg.seed) {
        if r.passed() {
            w(out, &format!("PASS  {} ({} cases)\n", r.name, r.cases))?;
        } else {
            w(
                out,
                &format!("FAIL  {} ({} of {} cases)\n", r.name, r.failures.len(), r.cases),
            )?;
            for f in r.failures.iter().take(5) {
                w(out, &format!("        {f}\n"))?;
            }
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("suites failed: {}", failed.join(", "))))
    }
}
