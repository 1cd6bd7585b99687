use std::time::Instant;

use oscmin::driver::{solve, SolverConfig};
use oscmin::problems::{gen_cvar_portfolio, gen_density, gen_kelly, gen_newsvendor, DensityRegularizer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("all");
    let cfg = SolverConfig { collect_trace: false, ..SolverConfig::default() };
    let mut run = |name: &str, inst: oscmin::ProblemInstance| {
        let t0 = Instant::now();
        match solve(&inst.oracle, &inst.g, &inst.x0, &cfg) {
            Ok(r) => {
                println!(
                    "{name}: status {:?} iters {} h {:.8e} L {:.4e} gap {:.3e} time {:.2}s",
                    r.status,
                    r.iters(),
                    r.h,
                    r.lower_bound,
                    r.gap(),
                    t0.elapsed().as_secs_f64()
                );
                let descent_ok = r.records.windows(2).all(|w| w[1].h < w[0].h);
                println!("   strict descent: {descent_ok}, evals/iter {:.2}", 
                    r.records.iter().skip(1).map(|x| x.f_evals as f64).sum::<f64>() / r.iters().max(1) as f64);
            }
            Err(e) => println!("{name}: ERROR {e}"),
        }
    };
    if which == "all" || which == "kelly" {
        run("kelly", gen_kelly(50, 20000, 0));
    }
    if which == "all" || which == "density" {
        run("density", gen_density(10000, 2000, 0, 0.0, DensityRegularizer::L2));
    }
    if which == "all" || which == "newsvendor" {
        run("newsvendor", gen_newsvendor(40, 20000, 0));
    }
    if which == "all" || which == "cvar" {
        run("cvar", gen_cvar_portfolio(20, 20000, 0));
    }
}

#[allow(dead_code)]
fn descent_detail() {}
