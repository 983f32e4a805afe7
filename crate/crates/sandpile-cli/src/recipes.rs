//! Ready-to-run config files for the standard imagery: masked chip
//! snapshots of an exploding random background, supports at first window
//! exit, the frozen-path filling experiment, and the deterministic all-3
//! diamond. Each file is an ordinary `--config` document; rerunning one
//! with the same seed reproduces its artifacts byte for byte.

use std::path::PathBuf;

use serde::Serialize;

use sandpile::io;
use sandpile::{BackgroundSpec, Family};

use crate::config::{CliResult, Ctx, OutputFormat, Params};

#[derive(Serialize)]
struct RecipeEntry {
    file: String,
    command: String,
    description: String,
}

fn base() -> Params {
    Params { seed: Some("12".into()), format: Some(vec![OutputFormat::Pgm, OutputFormat::Json]), ..Params::default() }
}

pub fn recipes(ctx: &Ctx) -> CliResult<String> {
    let mut entries = Vec::new();
    let mut emit = |name: &str, command: &str, description: String, params: &Params| -> CliResult<()> {
        io::write_json(&ctx.artifact(name), params)?;
        entries.push(RecipeEntry {
            file: name.to_string(),
            command: command.to_string(),
            description,
        });
        Ok(())
    };

    // Chip-value snapshots of one exploding run at increasing times.
    for t in [50u64, 100, 250, 500] {
        let params = Params {
            background: Some("bernoulli:2,3,0.5".into()),
            chips: Some(4096),
            steps: Some(t),
            window: Some(t as i64 + 10),
            out: Some(PathBuf::from(format!("growth_t{t}"))),
            ..base()
        };
        emit(
            &format!("growth_t{t}.json"),
            "simulate",
            format!(
                "Chip values on toppled sites after {t} parallel steps of an exploding \
                 Bernoulli(2,3,1/2) sandpile; white is untoppled."
            ),
            &params,
        )?;
    }

    // Support at the first exit from a fixed window, across densities and
    // dimensions.
    for (dim, radius, a, b) in [(2usize, 250i64, 2, 3), (3, 100, 4, 5)] {
        for tag in ["25", "50", "75"] {
            let params = Params {
                background: Some(format!("bernoulli:{a},{b},0.{tag}")),
                dim: Some(dim),
                chips: Some(65536),
                window: Some(radius),
                format: Some(if dim == 2 {
                    vec![OutputFormat::Pgm, OutputFormat::Json]
                } else {
                    vec![OutputFormat::Csv, OutputFormat::Json]
                }),
                out: Some(PathBuf::from(format!("support_exit_d{dim}_p{tag}"))),
                ..base()
            };
            let size_note = if dim == 3 {
                " The window is kept at radius 100 so the run fits in a few hundred MB; \
                 raise --window to 250 for the full box of side 500."
            } else {
                ""
            };
            emit(
                &format!("support_exit_d{dim}_p{tag}.json"),
                "simulate",
                format!(
                    "Support of an exploding Bernoulli({a},{b},0.{tag}) sandpile in d={dim} \
                     the first time it reaches the window frontier.{size_note}"
                ),
                &params,
            )?;
        }
    }

    // Frozen-path filling: the terminal odometer fills the path's bounding
    // rectangle over the all-2 background.
    let params = Params {
        background: Some("constant:2".into()),
        path: Some(96),
        out: Some(PathBuf::from("path_filling")),
        ..base()
    };
    emit(
        "path_filling.json",
        "wave",
        "Terminal odometer after freezing a random 96-step lattice path, seeding its \
         odometer at one, and toppling over the all-2 background: the toppled set fills \
         the path's bounding rectangle."
            .into(),
        &params,
    )?;

    // The all-3 periodic tile: the support after t steps is the exact
    // |x| <= t-1 diamond.
    let tile = BackgroundSpec::new(
        2,
        12,
        Family::Checkerboard { extent: vec![1, 1], tiles: vec![vec![3]], probs: vec![1.0] },
    )?;
    io::write_json(&ctx.artifact("diamond_tile.json"), &tile)?;
    let params = Params {
        background: Some("@diamond_tile.json".into()),
        chips: Some(1),
        steps: Some(60),
        window: Some(70),
        out: Some(PathBuf::from("diamond")),
        ..base()
    };
    emit(
        "diamond.json",
        "simulate",
        "Deterministic all-3 tile: one extra chip explodes and the support after 60 steps \
         is the exact L1 diamond."
            .into(),
        &params,
    )?;

    let count = entries.len();
    io::write_json(&ctx.artifact("recipes.json"), &entries)?;
    Ok(format!(
        "wrote {count} recipe configs to {}; run one with, e.g., \
         `sandpile simulate --config {}/diamond.json`",
        ctx.out.display(),
        ctx.out.display()
    ))
}
