use oscmin::driver::{solve, SolverConfig};
use oscmin::problems::{gen_cvar_portfolio, gen_newsvendor};
use std::time::Instant;

fn main() {
    for (name, inst) in [
        ("newsvendor", gen_newsvendor(40, 20000, 0)),
        ("cvar", gen_cvar_portfolio(20, 20000, 0)),
    ] {
        let cfg = SolverConfig::default();
        let t0 = Instant::now();
        let r = solve(&inst.oracle, &inst.g, &inst.x0, &cfg).unwrap();
        let violations = r.records.windows(2).filter(|w| w[1].h >= w[0].h).count();
        println!(
            "{name}: status {:?} iters {} h {:.8e} gap {:.3e} descent-violations {violations} time {:.2}s",
            r.status, r.iters(), r.h, r.gap(), t0.elapsed().as_secs_f64()
        );
    }
}
