//! Train the toy configuration on the synthetic walkers and print retrieval
//! before and after, plus how peaked the matching distributions are.
//!
//! `SEED`, `MODE` (both, static, dynamic) and `STEPS` override the defaults:
//!
//! ```text
//! SEED=1 MODE=dynamic cargo run --release --example toy
//! ```

use std::time::Instant;

use gaitfield::config::RunConfig;
use gaitfield::eval::evaluate;
use gaitfield::head::FusionMode;
use gaitfield::matching::{compute_field_cached, MatchingBranch};
use gaitfield::model::Model;
use gaitfield::synth::{synth_walkers, Dataset};
use gaitfield::train::train;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mean peak matching probability and mean `|G|` over foreground pixels of
/// the first probe sequence of every identity.
fn matching_stats(name: &str, ds: &Dataset, branch: &MatchingBranch) -> gaitfield::Result<()> {
    let (mut peak, mut mag, mut n) = (0.0, 0.0, 0usize);
    for id in 0..ds.num_ids() {
        let s = ds.sample(id, ds.spec.seqs_per_id - 2);
        let (field, cache) = compute_field_cached(&s.features, &s.masks, branch)?;
        let p = cache.distribution();
        let k = p.c();
        for (i, g) in field.frames.data().chunks(2).enumerate() {
            if s.masks.frames().data()[i] == 0.0 {
                continue;
            }
            peak += p.data()[i * k..(i + 1) * k].iter().copied().fold(0.0, f64::max);
            mag += g[0].hypot(g[1]);
            n += 1;
        }
    }
    println!("{name:<18} peak prob {:.3}  |G| {:.3}", peak / n as f64, mag / n as f64);
    Ok(())
}

fn main() -> gaitfield::Result<()> {
    let mut run = RunConfig::toy();
    if let Some(seed) = std::env::var("SEED").ok().and_then(|v| v.parse().ok()) {
        run.train.seed = seed;
    }
    if let Some(steps) = std::env::var("STEPS").ok().and_then(|v| v.parse::<usize>().ok()) {
        run.train.steps = steps;
        run.train.milestones = vec![steps * 3 / 4];
    }
    if let Ok(mode) = std::env::var("MODE") {
        run.train.model.mode = FusionMode::parse(&mode).unwrap_or(FusionMode::Both);
    }
    let ds = synth_walkers(&run.dataset)?;

    let untrained = Model::init(run.train.model, &mut ChaCha8Rng::seed_from_u64(run.train.seed))?;
    matching_stats("untrained static", &ds, &untrained.static_branch)?;
    matching_stats("untrained dynamic", &ds, &untrained.dynamic_branch)?;
    print!("{}", evaluate(&untrained, &ds, &run.split)?.to_table());

    let t = Instant::now();
    let out = train(&ds, &run.split, &run.train)?;
    let secs = t.elapsed().as_secs_f64();
    for r in out.trace.iter().step_by((run.train.steps / 10).max(1)) {
        println!(
            "step {:>5} total {:.4} triplet {:.4} ce {:.4}",
            r.step, r.loss.total, r.loss.triplet, r.loss.cross_entropy
        );
    }
    println!("trained in {secs:.1}s ({:.3}s/step)", secs / run.train.steps as f64);
    matching_stats("trained static", &ds, &out.model.static_branch)?;
    matching_stats("trained dynamic", &ds, &out.model.dynamic_branch)?;
    print!("{}", evaluate(&out.model, &ds, &run.split)?.to_table());
    Ok(())
}
