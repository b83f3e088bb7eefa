//! The seen/unseen evaluation harness: sweep a checkpoint over a
//! {pattern x CS ratio} grid, including ratios and the mask pattern the
//! model never trained on.
//!
//! ```text
//! cargo run --release --example eval_grid [checkpoint.ckpt]
//! ```

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ckpt = match std::env::args().nth(1) {
        Some(p) => p,
        None => {
            println!("no checkpoint given; training a quick toy model first...");
            std::fs::create_dir_all("/tmp/spadun_grid")?;
            spadun::cli::run_with_args([
                "spadun",
                "train",
                "--epochs",
                "10",
                "--out",
                "/tmp/spadun_grid",
            ])
            .map_err(|e| e.message().to_string())?;
            "/tmp/spadun_grid/checkpoint.ckpt".into()
        }
    };
    // The grid below covers: both trained ratios (seen), one interpolated
    // ratio (unseen-ratio), and the swapped mask pattern (unseen-pattern).
    spadun::cli::run_with_args([
        "spadun",
        "eval",
        "--checkpoint",
        &ckpt,
        "--cs-ratios",
        "2,3,4",
        "--pattern-swap",
        "--clips",
        "4",
        "--seed",
        "9",
        "--out",
        "/tmp/spadun_grid/eval",
    ])
    .map_err(|e| e.message().to_string())?;
    println!("full report: /tmp/spadun_grid/eval/report.jsonl");
    Ok(())
}
