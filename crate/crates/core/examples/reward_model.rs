//! Fits a Bradley-Terry reward net with an uncertainty head to oracle-labelled
//! pairs, then checks its ranking against the analytic reward.
//!
//!     cargo run --release --example reward_model -- [label_noise]

use anyhow::{Context, Result};
use diffcore::RngStream;
use flowpost::genmodel::Task;
use flowpost::rewards::{
    make_preferences, pair_accuracy, train_reward_model, OracleReward, RewardNet, RewardTrainConfig,
    RewardWeights, TerminalReward,
};

type Unlabelled = Vec<(usize, Vec<f64>, Vec<f64>)>;

/// Target draws blurred by a random amount, so the oracle has an ordering to learn.
fn blurred_pairs(task: &Task, n: usize, rng: &mut RngStream) -> Result<Unlabelled> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = i % task.num_prompts();
        let mut draw = |scale: f64| -> Result<Vec<f64>> {
            let x = task.sample_target(p, rng)?;
            let e = rng.gaussian(x.len());
            Ok(x.iter().zip(e).map(|(x, e)| x + scale * e).collect())
        };
        let (a, b) = (draw(0.3)?, draw(1.2)?);
        out.push(if i % 2 == 0 { (p, a, b) } else { (p, b, a) });
    }
    Ok(out)
}

fn main() -> Result<()> {
    let noise: f64 = match std::env::args().nth(1) {
        Some(v) => v.parse().context("label noise must be a number")?,
        None => 0.05,
    };
    let task = Task::point();
    let oracle = OracleReward::new(task.clone(), RewardWeights::default());
    let mut rng = RngStream::derive(11, "reward-example", 0, 0);

    let pairs = make_preferences(&oracle, &blurred_pairs(&task, 3000, &mut rng)?, noise, &mut rng)?;
    let mut net = RewardNet::new(task.state_dim(), task.num_prompts(), 32, &mut rng);
    let rep = train_reward_model(&mut net, &pairs, &RewardTrainConfig::default(), &mut rng)?;
    println!("label noise {noise}: held-out accuracy {:.3}, final loss {:.4}", rep.heldout_accuracy, rep.final_loss);

    let fresh = make_preferences(&oracle, &blurred_pairs(&task, 1000, &mut rng)?, 0.0, &mut rng)?;
    println!("agreement with the oracle on fresh pairs {:.3}", pair_accuracy(&net, &fresh)?);

    // learned and analytic scores for the lightly blurred side of each pair
    let xs: Vec<Vec<f64>> = fresh.iter().map(|p| p.a.clone()).collect();
    let ps: Vec<usize> = fresh.iter().map(|p| p.prompt).collect();
    let learned: Vec<f64> = net.predict(&xs, &ps)?.into_iter().map(|(r, _)| r).collect();
    let truth = xs.iter().zip(&ps).map(|(x, &p)| Ok(oracle.score(p, x)?.aggregate)).collect::<Result<Vec<f64>>>()?;
    let mean_u = net.predict(&xs, &ps)?.iter().map(|(_, u)| u).sum::<f64>() / xs.len() as f64;
    println!("mean predicted uncertainty {mean_u:.4}");
    let (mut agree, mut total) = (0usize, 0usize);
    for _ in 0..5000 {
        let (i, j) = (rng.below(xs.len()), rng.below(xs.len()));
        if i != j && ps[i] == ps[j] {
            total += 1;
            agree += ((learned[i] > learned[j]) == (truth[i] > truth[j])) as usize;
        }
    }
    println!("rank concordance with the oracle within prompts {:.3}", agree as f64 / total.max(1) as f64);
    Ok(())
}
