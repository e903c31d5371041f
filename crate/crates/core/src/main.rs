use std::process::ExitCode;

use anyhow::Context;

use dba3c::cli::{parse_args, CliError, RunConfig};
use dba3c::runtime::{run_local, run_role, RunReport};
use dba3c::telemetry::write_staleness_histogram;

fn main() -> ExitCode {
    let cfg = match parse_args(std::env::args_os()) {
        Ok(c) => c,
        Err(CliError::Usage(e)) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("run with --help for usage");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if cfg.print_config {
        println!("{}", cfg.to_args().join(" "));
        return ExitCode::SUCCESS;
    }
    match run(cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cfg: RunConfig) -> anyhow::Result<()> {
    if let Some(role) = cfg.role.clone() {
        let r = run_role(cfg.train, role.clone()).context("role failed")?;
        let checksum = r.checksum.map(|c| format!("{c:016x}")).unwrap_or_else(|| "-".into());
        println!(
            "role {role:?} finished: steps={} checksum={checksum} tx_payload_bytes={} rx_payload_bytes={}",
            r.global_step, r.counters.tx_payload_bytes, r.counters.rx_payload_bytes
        );
        return Ok(());
    }
    let out = cfg.train.out.clone();
    let report = run_local(cfg.train.clone()).context("training failed")?;
    if let Some(out) = &out {
        let hist = out.with_extension("staleness.csv");
        write_staleness_histogram(&report.telemetry.staleness_hist, &hist)
            .context("writing the staleness histogram")?;
    }
    print_summary(&report);
    Ok(())
}

fn print_summary(r: &RunReport) {
    let eval = r
        .final_eval
        .as_ref()
        .map(|e| format!("{:.3}", e.mean_score))
        .unwrap_or_else(|| "-".into());
    println!(
        "done: steps={} wall_time_s={:.2} final_eval_mean={eval} target_reached={} data_points={} drops={} checksum={:016x}",
        r.global_step, r.wall_time_s, r.target_reached, r.telemetry.data_points, r.drops, r.checksum
    );
}
