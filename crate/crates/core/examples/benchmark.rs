//! Location-scatter benchmark at the desk budget.
//!
//!     cargo run --release -p barywin --example benchmark -- 8 uniform

use barywin::bench::{benchmark_population, run_scatter_benchmark};
use barywin::measures::BaseKind;
use barywin::win::WinConfig;

fn main() -> barywin::Result<()> {
    let mut args = std::env::args().skip(1);
    let dim: usize = args.next().map_or(Ok(4), |a| a.parse()).expect("dimension must be an integer");
    let base: BaseKind = args.next().as_deref().unwrap_or("gaussian").parse()?;

    let spec = benchmark_population(dim, base, 0)?;
    let run = run_scatter_benchmark(&spec, &WinConfig::desk(), 0, |m| {
        println!(
            "iter {:3}  proxy {:.5e}  UVP {:.3}%",
            m.outer_iter,
            m.proxy_objective,
            m.uvp_vs_truth.unwrap_or(f64::NAN)
        );
    })?;
    let r = &run.report;
    println!(
        "D={} {}: trained {:.3}%, constant shift {:.2}%, {:.0}s",
        r.dim, r.base, r.uvp, r.baseline_uvp, r.wall_seconds
    );
    Ok(())
}
