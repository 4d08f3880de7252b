//! Pick-to-Learn meta-training loops.
//!
//! [`p2l`] is the original loop: grow a compression set one worst-loss point
//! at a time, retrain on it, stop once every point outside has loss below
//! `gamma`. [`mp2l`] is the weighted, block-wise variant used for continual
//! learning: replayed points carry weight ω, `k` points are added per
//! iteration, the loop can be capped, and the returned checkpoint is the one
//! minimizing [`bound_b`] on the fresh task.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::bound_b;
use crate::error::{Error, Result};
use crate::model::{Evaluation, Example, ExampleKey, Learner, ParameterVector, WeightedExample};
use crate::numerics::Probability;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MP2LConfig {
    /// Stopping threshold on the worst weighted cross-entropy.
    pub gamma: f64,
    /// Points added to the compression set per iteration.
    pub block_size: usize,
    /// Iteration cap `K*`; `None` is unbounded.
    pub max_iterations: Option<usize>,
    /// Confidence parameter of the early-stopping bound.
    pub delta: Probability,
    /// Return the bound-minimizing checkpoint instead of the last iterate.
    pub early_stopping: bool,
}

impl MP2LConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block size must be at least 1".into()));
        }
        if self.delta.get() <= 0.0 {
            return Err(Error::Config("delta must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub iteration: usize,
    pub compression_size: usize,
    /// Worst weighted loss outside the compression set; `-inf` when empty.
    pub max_weighted_loss: f64,
    pub bound: Probability,
}

#[derive(Debug, Clone)]
pub struct P2LOutcome {
    pub params: ParameterVector,
    /// Keys of the compression set in insertion order, truncated at the
    /// selected checkpoint.
    pub compression_set: Vec<ExampleKey>,
    pub iterations_run: usize,
    pub selected_iteration: usize,
    pub bound_at_selected: Probability,
    pub trace: Vec<IterationTrace>,
}

/// `true` iff every point of `pool` outside `compression` has weighted
/// cross-entropy strictly below `gamma`.
pub fn weighted_stop_satisfied(
    learner: &Learner,
    params: &ParameterVector,
    pool: &[WeightedExample<'_>],
    compression: &HashSet<ExampleKey>,
    gamma: f64,
) -> Result<bool> {
    for we in pool.iter().filter(|we| !compression.contains(&we.key())) {
        if learner.per_example_loss(params, we.example)? * we.weight >= gamma {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Original Pick-to-Learn on unweighted data.
pub fn p2l(learner: &Learner, params0: &ParameterVector, data: &[Example], gamma: f64) -> Result<P2LOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyExamples);
    }
    let mut in_c = vec![false; data.len()];
    let mut order: Vec<usize> = Vec::new();
    let mut params = params0.clone();
    let mut iterations = 0;

    let worst = |params: &ParameterVector, in_c: &[bool]| -> Result<Option<(usize, f64)>> {
        let mut best: Option<(usize, f64)> = None;
        for (i, ex) in data.iter().enumerate().filter(|(i, _)| !in_c[*i]) {
            let loss = learner.per_example_loss(params, ex)?;
            let better = match best {
                None => true,
                Some((b, bl)) => loss > bl || (loss == bl && ex.key() < data[b].key()),
            };
            if better {
                best = Some((i, loss));
            }
        }
        Ok(best)
    };

    let mut candidate = worst(&params, &in_c)?;
    while let Some((idx, loss)) = candidate {
        if loss < gamma {
            break;
        }
        iterations += 1;
        in_c[idx] = true;
        order.push(idx);
        let set: Vec<_> = order.iter().map(|&i| WeightedExample::new(&data[i], 1.0)).collect();
        params = learner.update(&params, &set)?;
        candidate = worst(&params, &in_c)?;
    }

    Ok(P2LOutcome {
        params,
        compression_set: order.iter().map(|&i| data[i].key()).collect(),
        iterations_run: iterations,
        selected_iteration: iterations,
        bound_at_selected: Probability::ONE,
        trace: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy)]
enum Stopping {
    Criterion,
    Exact(usize),
}

/// Modified Pick-to-Learn on `fresh ∪ buffer`.
///
/// `fresh` points should carry weight 1 and `buffer` points weight ω; the two
/// must not share keys. Selection takes the `block_size` largest weighted
/// losses outside the compression set (ties to the smaller key); the loop
/// stops when the worst weighted loss drops below `gamma` or after
/// `max_iterations`. Unless capped, the returned checkpoint minimizes
/// [`bound_b`] over the fresh points.
pub fn mp2l(
    learner: &Learner,
    params0: &ParameterVector,
    fresh: &[WeightedExample<'_>],
    buffer: &[WeightedExample<'_>],
    cfg: &MP2LConfig,
) -> Result<P2LOutcome> {
    cfg.validate()?;
    run(learner, params0, fresh, buffer, cfg, Stopping::Criterion)
}

/// Replays mP2L for exactly `iterations` iterations with no early-stopping
/// search. Used by reconstruction, where the iteration count is part of the
/// message.
pub fn mp2l_fixed_iterations(
    learner: &Learner,
    params0: &ParameterVector,
    fresh: &[WeightedExample<'_>],
    buffer: &[WeightedExample<'_>],
    cfg: &MP2LConfig,
    iterations: usize,
) -> Result<P2LOutcome> {
    cfg.validate()?;
    run(learner, params0, fresh, buffer, cfg, Stopping::Exact(iterations))
}

fn run(
    learner: &Learner,
    params0: &ParameterVector,
    fresh: &[WeightedExample<'_>],
    buffer: &[WeightedExample<'_>],
    cfg: &MP2LConfig,
    stopping: Stopping,
) -> Result<P2LOutcome> {
    let mut pool: Vec<(WeightedExample<'_>, bool)> = fresh
        .iter()
        .map(|we| (*we, true))
        .chain(buffer.iter().map(|we| (*we, false)))
        .collect();
    pool.sort_by_key(|(we, _)| we.key());
    if let Some(w) = pool.windows(2).find(|w| w[0].0.key() == w[1].0.key()) {
        return Err(Error::Domain(format!("duplicate example {:?} in mP2L input", w[0].0.key())));
    }

    let n_fresh = fresh.len();
    let mut in_c = vec![false; pool.len()];
    let mut order: Vec<usize> = Vec::new();
    let mut params = params0.clone();
    let mut iteration = 0usize;
    let mut trace = Vec::new();

    let mut best_params = params.clone();
    let mut best_iteration = 0usize;
    let mut best_size = 0usize;
    let mut best_bound = Probability::ONE;

    let stopped_by_cap = loop {
        let evals: Vec<Option<Evaluation>> = pool
            .par_iter()
            .zip(in_c.par_iter())
            .map(|((we, _), &inside)| {
                if inside {
                    Ok(None)
                } else {
                    learner.evaluate(&params, we.example).map(Some)
                }
            })
            .collect::<Result<_>>()?;

        let mut fresh_in_c = 0usize;
        let mut fresh_errors = 0usize;
        let mut max_weighted = f64::NEG_INFINITY;
        for (i, ((we, is_fresh), eval)) in pool.iter().zip(&evals).enumerate() {
            match eval {
                None => fresh_in_c += usize::from(*is_fresh && in_c[i]),
                Some(e) => {
                    if *is_fresh {
                        fresh_errors += usize::from(e.zero_one);
                    }
                    max_weighted = max_weighted.max(e.cross_entropy * we.weight);
                }
            }
        }
        let bound = if fresh_in_c < n_fresh {
            bound_b(
                n_fresh,
                Probability::ratio(fresh_errors, n_fresh - fresh_in_c),
                fresh_in_c,
                cfg.delta,
            )?
        } else {
            Probability::ONE
        };
        trace.push(IterationTrace {
            iteration,
            compression_size: order.len(),
            max_weighted_loss: max_weighted,
            bound,
        });
        if iteration == 0 || bound < best_bound {
            best_bound = bound;
            best_iteration = iteration;
            best_size = order.len();
            best_params.clone_from(&params);
        }

        let remaining: Vec<usize> = (0..pool.len()).filter(|&i| !in_c[i]).collect();
        match stopping {
            Stopping::Criterion => {
                if remaining.is_empty() || max_weighted < cfg.gamma {
                    break false;
                }
                if cfg.max_iterations.is_some_and(|cap| iteration >= cap) {
                    break true;
                }
            }
            Stopping::Exact(target) => {
                if iteration == target {
                    break true;
                }
                if remaining.is_empty() {
                    return Err(Error::Incompatible(format!(
                        "ran out of points after {iteration} of {target} iterations"
                    )));
                }
            }
        }

        let mut ranked: Vec<(usize, f64)> = remaining
            .iter()
            .map(|&i| {
                let eval = evals[i].expect("evaluated");
                (i, eval.cross_entropy * pool[i].0.weight)
            })
            .collect();
        // descending weighted loss, then ascending key (pool is key-sorted)
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(i, _) in ranked.iter().take(cfg.block_size) {
            in_c[i] = true;
            order.push(i);
        }
        iteration += 1;

        let set: Vec<WeightedExample<'_>> = order.iter().map(|&i| pool[i].0).collect();
        params = learner.update(&params, &set)?;
    };

    let search = cfg.early_stopping && !stopped_by_cap;
    let (params, size, selected, bound) = if search {
        (best_params, best_size, best_iteration, best_bound)
    } else {
        let last = trace.last().expect("at least one checkpoint").bound;
        (params, order.len(), iteration, last)
    };

    Ok(P2LOutcome {
        params,
        compression_set: order[..size].iter().map(|&i| pool[i].0.key()).collect(),
        iterations_run: iteration,
        selected_iteration: selected,
        bound_at_selected: bound,
        trace,
    })
}

/// Writes the trace as CSV: `iteration,compression_size,max_weighted_loss,bound_B`.
pub fn write_trace_csv<W: Write>(out: W, trace: &[IterationTrace]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    writer
        .write_record(["iteration", "compression_size", "max_weighted_loss", "bound_B"])
        .map_err(csv_err)?;
    for row in trace {
        writer
            .write_record([
                row.iteration.to_string(),
                row.compression_size.to_string(),
                row.max_weighted_loss.to_string(),
                row.bound.get().to_string(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io("writing trace", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, HeadMode, LearnerConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const GAMMA: f64 = std::f64::consts::LN_2;

    fn learner(architecture: Architecture) -> Learner {
        Learner::new(LearnerConfig {
            architecture,
            input_dim: 2,
            class_count: 2,
            learning_rate: 0.5,
            epochs_per_update: 20,
            init_seed: 3,
            head_mode: HeadMode::Single,
        })
        .unwrap()
    }

    fn blobs(n: usize, sep: f64, seed: u64, task_id: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y = i % 2;
                let c = if y == 0 { -sep / 2.0 } else { sep / 2.0 };
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                Example {
                    x: vec![c + a, b],
                    y,
                    task_id,
                    global_index: i,
                }
            })
            .collect()
    }

    fn cfg(k: usize, cap: Option<usize>, early: bool) -> MP2LConfig {
        MP2LConfig {
            gamma: GAMMA,
            block_size: k,
            max_iterations: cap,
            delta: Probability::new(0.05).unwrap(),
            early_stopping: early,
        }
    }

    fn weighted(data: &[Example], w: f64) -> Vec<WeightedExample<'_>> {
        data.iter().map(|e| WeightedExample::new(e, w)).collect()
    }

    #[test]
    fn p2l_already_fitted_returns_input() {
        let l = learner(Architecture::Softmax);
        let data = blobs(40, 8.0, 1, 1);
        let fitted = l.train(&l.init_params(), &weighted(&data, 1.0), 0.5, 200).unwrap();
        assert!(data.iter().all(|e| l.per_example_loss(&fitted, e).unwrap() < GAMMA));
        let out = p2l(&l, &fitted, &data, GAMMA).unwrap();
        assert!(out.compression_set.is_empty());
        assert!(out.params.bit_eq(&fitted));

        let huge = p2l(&l, &l.init_params(), &data, 1e300).unwrap();
        assert_eq!(huge.iterations_run, 0);
    }

    #[test]
    fn p2l_separable_blobs() {
        let l = learner(Architecture::Softmax);
        let data = blobs(200, 8.0, 2, 1);
        let out = p2l(&l, &l.init_params(), &data, GAMMA).unwrap();
        assert!(out.compression_set.len() < data.len());
        let in_c: HashSet<_> = out.compression_set.iter().copied().collect();
        for e in data.iter().filter(|e| !in_c.contains(&e.key())) {
            assert!(l.per_example_loss(&out.params, e).unwrap() < GAMMA);
            assert_eq!(l.zero_one_loss(&out.params, e).unwrap(), 0);
        }
        assert!(p2l(&l, &l.init_params(), &[], GAMMA).is_err());
    }

    #[test]
    fn mp2l_degenerates_to_p2l() {
        for arch in [Architecture::Softmax, Architecture::Mlp { hidden_width: 4 }] {
            let l = learner(arch);
            let data = blobs(60, 2.5, 4, 1);
            let a = p2l(&l, &l.init_params(), &data, GAMMA).unwrap();
            let b = mp2l(&l, &l.init_params(), &weighted(&data, 1.0), &[], &cfg(1, None, false)).unwrap();
            assert_eq!(a.compression_set, b.compression_set);
            assert_eq!(a.iterations_run, b.iterations_run);
            assert!(a.params.bit_eq(&b.params));
        }
    }

    #[test]
    fn weighted_buffer_point_wins_selection() {
        // zero parameters: every loss is ln 2, so weights decide
        let l = learner(Architecture::Softmax);
        let params = ParameterVector::zeros(*l.layout());
        let fresh = blobs(4, 1.0, 5, 2);
        let old = blobs(1, 1.0, 6, 1);
        // a fresh point at weight 20 stands in for one with 20x the loss
        let fresh_w = weighted(&fresh, 20.0);
        let buffer_w = weighted(&old, 25.0);
        let out = mp2l_fixed_iterations(&l, &params, &fresh_w, &buffer_w, &cfg(1, None, false), 1).unwrap();
        assert_eq!(out.compression_set, vec![old[0].key()]);
    }

    #[test]
    fn capped_run_has_exact_size() {
        let l = learner(Architecture::Softmax);
        let data = blobs(100, 0.5, 7, 1);
        let out = mp2l(&l, &l.init_params(), &weighted(&data, 1.0), &[], &cfg(4, Some(3), true)).unwrap();
        assert_eq!(out.iterations_run, 3);
        assert_eq!(out.selected_iteration, 3);
        assert_eq!(out.compression_set.len(), 12);
    }

    #[test]
    fn final_partial_block_takes_what_is_left() {
        let l = learner(Architecture::Softmax);
        let data = blobs(10, 0.0, 8, 1);
        let out = mp2l_fixed_iterations(&l, &l.init_params(), &weighted(&data, 1.0), &[], &cfg(4, None, false), 3).unwrap();
        assert_eq!(out.compression_set.len(), 10);
        assert!(mp2l_fixed_iterations(&l, &l.init_params(), &weighted(&data, 1.0), &[], &cfg(4, None, false), 4).is_err());
    }

    #[test]
    fn stop_check_examples() {
        let l = learner(Architecture::Softmax);
        let params = ParameterVector::zeros(*l.layout());
        let data = blobs(3, 1.0, 9, 1);
        let all: HashSet<_> = data.iter().map(|e| e.key()).collect();
        assert!(weighted_stop_satisfied(&l, &params, &weighted(&data, 1.0), &all, GAMMA).unwrap());

        // zero params give loss ln 2 for every point
        let one = &data[..1];
        let none = HashSet::new();
        assert!(weighted_stop_satisfied(&l, &params, &weighted(one, 1.0), &none, GAMMA + 1e-9).unwrap());
        assert!(!weighted_stop_satisfied(&l, &params, &weighted(one, 1.0), &none, GAMMA).unwrap());
        // buffer point at weight 15 with loss ln 2 against γ = 15·(ln 2 - 1e-9)
        let gamma = 15.0 * (GAMMA - 1e-9);
        assert!(!weighted_stop_satisfied(&l, &params, &weighted(one, 15.0), &none, gamma).unwrap());
    }

    #[test]
    fn run_invariants() {
        for arch in [Architecture::Softmax, Architecture::Mlp { hidden_width: 5 }] {
            let l = learner(arch);
            let fresh_data = blobs(80, 2.0, 10, 2);
            let old_data = blobs(20, 2.0, 11, 1);
            let fresh = weighted(&fresh_data, 1.0);
            let buffer = weighted(&old_data, 4.0);
            let full = mp2l(&l, &l.init_params(), &fresh, &buffer, &cfg(2, None, false)).unwrap();
            let early = mp2l(&l, &l.init_params(), &fresh, &buffer, &cfg(2, None, true)).unwrap();

            // same trajectory, early stopping only picks a checkpoint
            assert_eq!(full.iterations_run, early.iterations_run);
            assert!(early.selected_iteration <= early.iterations_run);
            assert_eq!(early.compression_set[..], full.compression_set[..early.compression_set.len()]);
            let min = full.trace.iter().map(|t| t.bound).fold(Probability::ONE, |a, b| if b < a { b } else { a });
            assert_eq!(early.bound_at_selected, min);

            // no repeats
            let unique: HashSet<_> = full.compression_set.iter().collect();
            assert_eq!(unique.len(), full.compression_set.len());

            // uncapped final iterate: fresh complement has CE < γ, hence no errors
            let in_c: HashSet<_> = full.compression_set.iter().copied().collect();
            for e in fresh_data.iter().filter(|e| !in_c.contains(&e.key())) {
                assert!(l.per_example_loss(&full.params, e).unwrap() < GAMMA);
                assert_eq!(l.zero_one_loss(&full.params, e).unwrap(), 0);
            }
            assert!(weighted_stop_satisfied(&l, &full.params, &[fresh.clone(), buffer.clone()].concat(), &in_c, GAMMA).unwrap());

            // replay with the selected iteration count reproduces the run
            let replay =
                mp2l_fixed_iterations(&l, &l.init_params(), &fresh, &buffer, &cfg(2, None, true), early.selected_iteration)
                    .unwrap();
            assert!(replay.params.bit_eq(&early.params));
            assert_eq!(replay.compression_set, early.compression_set);
        }
    }

    #[test]
    fn duplicate_keys_rejected() {
        let l = learner(Architecture::Softmax);
        let data = blobs(4, 1.0, 12, 1);
        let w = weighted(&data, 1.0);
        assert!(mp2l(&l, &l.init_params(), &w, &w, &cfg(1, None, true)).is_err());
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let l = learner(Architecture::Softmax);
        let data = blobs(30, 3.0, 13, 1);
        let out = mp2l(&l, &l.init_params(), &weighted(&data, 1.0), &[], &cfg(2, None, true)).unwrap();
        let mut bytes = Vec::new();
        write_trace_csv(&mut bytes, &out.trace).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("iteration,compression_size,max_weighted_loss,bound_B\n"));
        assert_eq!(text.lines().count(), out.trace.len() + 1);
    }

    #[test]
    fn zero_params_random_data_is_deterministic() {
        let l = learner(Architecture::Mlp { hidden_width: 3 });
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let data: Vec<Example> = (0..50)
            .map(|i| Example {
                x: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                y: rng.random_range(0..2),
                task_id: 1,
                global_index: i,
            })
            .collect();
        let a = mp2l(&l, &l.init_params(), &weighted(&data, 1.0), &[], &cfg(3, None, true)).unwrap();
        let b = mp2l(&l, &l.init_params(), &weighted(&data, 1.0), &[], &cfg(3, None, true)).unwrap();
        assert!(a.params.bit_eq(&b.params));
        assert_eq!(a.compression_set, b.compression_set);
    }
}
