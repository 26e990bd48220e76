use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nabla_core::harness::{
    distill, load_checkpoint, save_checkpoint, train, write_csv, Dataset, ToyDiTConfig, TrainRun,
};
use nabla_core::{
    apply_reorder, block_sparse_attention_counted, build_permutation, count_dense_blocks_eq5,
    dense_attention, export_mask_image, join_masks, load_mask, load_tensor, masked_dense_attention,
    nabla_mask, save_mask, save_tensor, sparsity, sta_mask, AttentionInputs, BlockMask, Direction, FlopCount,
    NablaParams, StaWindow, TokenGrid,
};
use serde::Serialize;

use crate::{
    AttnArgs, AttnMode, Command, DistillArgs, MaskExportPgmArgs, MaskJoinArgs, MaskNablaArgs, MaskStaArgs,
    MaskStatsArgs, ReorderArgs, TrainArgs, TrainingFlags,
};

pub(crate) fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Reorder(a) => reorder(a, out),
        Command::MaskNabla(a) => mask_nabla(a, out),
        Command::MaskSta(a) => mask_sta(a, out),
        Command::MaskJoin(a) => mask_join(a, out),
        Command::MaskStats(a) => mask_stats(a, out),
        Command::MaskExportPgm(a) => mask_export_pgm(a, out),
        Command::Attn(a) => attn(a, out),
        Command::TrainToy(a) => train_toy(a, out),
        Command::DistillToy(a) => distill_toy(a, out),
    }
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn grid([t, h, w, p]: [usize; 4]) -> Result<TokenGrid> {
    Ok(TokenGrid::new(t, h, w, p)?)
}

fn read_mask(path: &Path) -> Result<BlockMask> {
    load_mask(path).with_context(|| format!("reading {}", path.display()))
}

#[derive(Serialize)]
struct MaskSummary<'a> {
    command: &'a str,
    output: String,
    heads: usize,
    rows: usize,
    cols: usize,
    popcount: u64,
    sparsity: f64,
}

fn summary<'a>(command: &'a str, output: &Path, m: &BlockMask) -> MaskSummary<'a> {
    MaskSummary {
        command,
        output: output.display().to_string(),
        heads: m.heads(),
        rows: m.rows(),
        cols: m.cols(),
        popcount: m.popcount(),
        sparsity: sparsity(m),
    }
}

fn reorder(a: ReorderArgs, out: &mut dyn Write) -> Result<()> {
    let g = grid(a.grid)?;
    let x = load_tensor(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let dir = if a.inverse {
        Direction::Inverse
    } else {
        Direction::Forward
    };
    let y = apply_reorder(&x, &build_permutation(&g)?, dir)?;
    save_tensor(&y, &a.output)?;
    #[derive(Serialize)]
    struct Record<'a> {
        command: &'a str,
        output: String,
        shape: &'a [usize],
        direction: &'a str,
    }
    emit(
        out,
        &Record {
            command: "reorder",
            output: a.output.display().to_string(),
            shape: y.shape(),
            direction: if a.inverse { "inverse" } else { "forward" },
        },
    )
}

fn mask_nabla(a: MaskNablaArgs, out: &mut dyn Write) -> Result<()> {
    let q = load_tensor(&a.q).with_context(|| format!("reading {}", a.q.display()))?;
    let k = load_tensor(&a.k).with_context(|| format!("reading {}", a.k.display()))?;
    let d = *q.shape().last().unwrap_or(&1);
    let mut params = NablaParams::new(a.thr, a.block_n, d)?;
    if let Some(s) = a.scale {
        params.scale = s;
    }
    let m = nabla_mask(&q, &k, &params)?;
    save_mask(&m, &a.output)?;
    emit(out, &summary("mask-nabla", &a.output, &m))
}

fn mask_sta(a: MaskStaArgs, out: &mut dyn Write) -> Result<()> {
    let [wt, wh, ww] = a.window;
    let w = StaWindow::new(wt, wh, ww, grid(a.grid)?)?;
    let m = sta_mask(&w)?;
    save_mask(&m, &a.output)?;
    emit(out, &summary("mask-sta", &a.output, &m))
}

fn mask_join(a: MaskJoinArgs, out: &mut dyn Write) -> Result<()> {
    let m = join_masks(&read_mask(&a.inputs[0])?, &read_mask(&a.inputs[1])?)?;
    save_mask(&m, &a.output)?;
    emit(out, &summary("mask-join", &a.output, &m))
}

fn mask_stats(a: MaskStatsArgs, out: &mut dyn Write) -> Result<()> {
    let m = read_mask(&a.mask)?;
    let closed_form = match (a.window, a.grid) {
        (Some([wt, wh, ww]), Some(g)) => {
            let w = StaWindow::new(wt, wh, ww, grid(g)?)?;
            if w.grid.num_blocks() != m.rows() {
                bail!(
                    "window grid has {} blocks but the mask has {} rows",
                    w.grid.num_blocks(),
                    m.rows()
                );
            }
            Some(count_dense_blocks_eq5(&w)?)
        }
        _ => None,
    };
    #[derive(Serialize)]
    struct Record {
        mask: String,
        heads: usize,
        rows: usize,
        cols: usize,
        popcount: u64,
        total: u64,
        sparsity: f64,
        head_popcounts: Vec<u64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        dense_blocks_closed_form: Option<u64>,
    }
    emit(
        out,
        &Record {
            mask: a.mask.display().to_string(),
            heads: m.heads(),
            rows: m.rows(),
            cols: m.cols(),
            popcount: m.popcount(),
            total: m.total_bits(),
            sparsity: sparsity(&m),
            head_popcounts: (0..m.heads()).map(|h| m.head_popcount(h)).collect(),
            dense_blocks_closed_form: closed_form,
        },
    )
}

fn mask_export_pgm(a: MaskExportPgmArgs, out: &mut dyn Write) -> Result<()> {
    let m = read_mask(&a.mask)?;
    export_mask_image(&m, a.head, &a.output)?;
    #[derive(Serialize)]
    struct Record {
        output: String,
        head: usize,
        width: usize,
        height: usize,
    }
    emit(
        out,
        &Record {
            output: a.output.display().to_string(),
            head: a.head,
            width: m.cols(),
            height: m.rows(),
        },
    )
}

/// Work done by the masked kernel, which visits the same tiles as the
/// block-sparse one.
fn masked_flops(m: &BlockMask, heads: usize, n: usize, d: usize) -> FlopCount {
    let tiles: u64 = (0..heads).map(|h| m.head_popcount(m.head_for(h))).sum();
    let macs = tiles * (n * n * d) as u64;
    FlopCount {
        score_macs: macs,
        value_macs: macs,
        mask_macs: 0,
    }
}

fn attn(a: AttnArgs, out: &mut dyn Write) -> Result<()> {
    let read = |p: &Path| load_tensor(p).with_context(|| format!("reading {}", p.display()));
    let (q, k, v) = (read(&a.q)?, read(&a.k)?, read(&a.v)?);
    let mut inp = AttentionInputs::new(q, k, v)?;
    if let Some(s) = a.scale {
        inp.scale = s;
    }
    let (h, s, d) = inp.validate()?;
    let mask = a.mask.as_deref().map(read_mask).transpose()?;
    let block_n = match (&mask, a.block_n) {
        (_, Some(n)) => n,
        (Some(m), None) if m.rows() > 0 && s % m.rows() == 0 => s / m.rows(),
        (Some(m), None) => bail!(
            "sequence length {s} is not a multiple of the mask size {}",
            m.rows()
        ),
        (None, None) => s,
    };
    let (output, flops, mask_sparsity) = match (a.mode, &mask) {
        (AttnMode::Dense, _) => (dense_attention(&inp)?, FlopCount::dense(h, s, d), 0.0),
        (AttnMode::Masked, Some(m)) => (
            masked_dense_attention(&inp, m, block_n)?,
            masked_flops(m, h, block_n, d),
            sparsity(m),
        ),
        (AttnMode::Sparse, Some(m)) => {
            let (o, f) = block_sparse_attention_counted(&inp, m, block_n)?;
            (o, f, sparsity(m))
        }
        (mode, None) => bail!("--mode {mode:?} needs --mask"),
    };
    save_tensor(&output, &a.output)?;
    let max_abs_diff = if a.compare_dense {
        Some(output.max_abs_diff(&dense_attention(&inp)?)? as f64)
    } else {
        None
    };
    #[derive(Serialize)]
    struct Record<'a> {
        mode: &'a str,
        output: String,
        heads: usize,
        seq: usize,
        dim: usize,
        block_n: usize,
        score_macs: u64,
        value_macs: u64,
        total_macs: u64,
        dense_macs: u64,
        sparsity: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        max_abs_diff: Option<f64>,
    }
    emit(
        out,
        &Record {
            mode: match a.mode {
                AttnMode::Dense => "dense",
                AttnMode::Masked => "masked",
                AttnMode::Sparse => "sparse",
            },
            output: a.output.display().to_string(),
            heads: h,
            seq: s,
            dim: d,
            block_n,
            score_macs: flops.score_macs,
            value_macs: flops.value_macs,
            total_macs: flops.total(),
            dense_macs: FlopCount::dense(h, s, d).total(),
            sparsity: mask_sparsity,
            max_abs_diff,
        },
    )
}

/// Defaults, then the config file, then `--set` entries, then dedicated flags.
fn build_config(flags: &TrainingFlags) -> Result<ToyDiTConfig> {
    let mut c = ToyDiTConfig::default();
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        c.apply_kv_text(&text)
            .with_context(|| format!("in {}", path.display()))?;
    }
    for (k, v) in &flags.overrides {
        c.set(k, v)?;
    }
    if let Some(x) = flags.steps {
        c.train_steps = x;
    }
    if let Some(x) = flags.seed {
        c.seed = x;
    }
    if let Some(x) = flags.lr {
        c.lr = x;
    }
    if let Some(x) = flags.batch {
        c.batch = x;
    }
    c.validate()?;
    Ok(c)
}

#[derive(Serialize)]
struct StepLine<'a> {
    event: &'a str,
    step: usize,
    train_loss: f64,
    val_loss: Option<f64>,
    step_seconds: f64,
    sparsity: f64,
    attention_macs: u64,
}

fn report(
    run: &TrainRun,
    kind: &str,
    mode: String,
    flags: &TrainingFlags,
    out: &mut dyn Write,
) -> Result<()> {
    for (r, s) in run.records.iter().zip(&run.stats) {
        emit(
            out,
            &StepLine {
                event: "step",
                step: r.step,
                train_loss: r.train_loss,
                val_loss: r.val_loss,
                step_seconds: r.step_seconds,
                sparsity: r.sparsity,
                attention_macs: s.flops.total(),
            },
        )?;
    }
    if let Some(path) = &flags.csv {
        write_csv(&run.records, path)?;
    }
    if let Some(dir) = &flags.checkpoint {
        save_checkpoint(&run.model, dir)?;
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        event: &'a str,
        mode: String,
        steps: usize,
        parameters: usize,
        final_train_loss: Option<f64>,
        final_val_loss: Option<f64>,
        mean_step_seconds: f64,
    }
    let final_train = (!run.records.is_empty()).then(|| run.final_train_loss(10));
    eprintln!(
        "{kind}: {} steps, mode {mode}, final train loss {}",
        run.records.len(),
        final_train.map_or("n/a".to_string(), |l| format!("{l:.5}"))
    );
    emit(
        out,
        &Summary {
            event: "summary",
            mode,
            steps: run.records.len(),
            parameters: run.model.param_count(),
            final_train_loss: final_train,
            final_val_loss: run.final_val_loss(),
            mean_step_seconds: run.mean_step_seconds(),
        },
    )
}

fn train_toy(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = build_config(&a.flags)?;
    if let Some(mode) = a.mode {
        config.attention_mode = mode;
        config.validate()?;
    }
    let data = Dataset::synth(&config)?;
    let run = train(&config, &data)?;
    report(
        &run,
        "train-toy",
        config.attention_mode.to_string(),
        &a.flags,
        out,
    )
}

fn distill_toy(a: DistillArgs, out: &mut dyn Write) -> Result<()> {
    let teacher = load_checkpoint(&a.teacher)
        .with_context(|| format!("loading teacher checkpoint {}", a.teacher.display()))?;
    let mut config = build_config(&a.flags)?;
    // The data must match the teacher's geometry.
    let arch = teacher.config();
    config.grid = arch.grid;
    config.channels = arch.channels;
    let data = Dataset::synth(&config)?;
    let run = distill(a.student_mode, a.teacher_mode, &teacher, &config, &data)?;
    report(&run, "distill-toy", a.student_mode.to_string(), &a.flags, out)
}
