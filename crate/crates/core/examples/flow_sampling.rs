//! Samples a Gaussian target with its exact velocity field and compares ODE,
//! full SDE and single-step SDE terminals against the data law.
//!
//!     cargo run --release --example flow_sampling

use anyhow::Result;
use diffcore::RngStream;
use flowpost::flowsde::{lambda_rect, sample_terminals, Cond, NoiseSchedule, PathSpec, SdeSteps};
use flowpost::gaussian::{max_abs_diff, moments, GaussianOracle, MvGaussian};

fn main() -> Result<()> {
    let data = MvGaussian::new(vec![1.5, -0.5], vec![0.6, 0.25, 0.25, 0.4])?;
    let oracle = GaussianOracle::new(data.clone());
    let schedule = NoiseSchedule::default();
    let n = 8000;
    let mid = schedule.eligible_indices()[schedule.eligible_indices().len() / 2];

    println!("target mean {:?} cov {:?}", data.mean(), data.cov());
    println!("{:<14} {:>10} {:>10}", "sampler", "mean gap", "cov gap");
    for (name, sde) in [
        ("ode", SdeSteps::None),
        ("sde", SdeSteps::AllEligible),
        ("single step", SdeSteps::Single(mid)),
    ] {
        let specs = (0..n)
            .map(|i| PathSpec::new(0, sde.clone(), RngStream::derive(7, "flow-sampling", 0, i as u64)))
            .collect();
        let xs = sample_terminals(&oracle, &Cond::Prompts(vec![0; n]), &schedule, specs)?;
        let (m, c) = moments(&xs);
        println!(
            "{name:<14} {:>10.4} {:>10.4}",
            max_abs_diff(&m, data.mean()),
            max_abs_diff(&c, &data.cov())
        );
    }

    println!("\nrectification factor on the eligible grid");
    for k in schedule.eligible_indices().into_iter().step_by(4) {
        let t = schedule.time(k);
        let lam = lambda_rect(t, schedule.dt(), schedule.sigma(t)?)?;
        println!("  k={k:>2} t={t:.2} lambda={lam:.4}");
    }
    Ok(())
}
