use collabedit_core::collab::*;
use collabedit_core::config::RunConfig;
use collabedit_core::eval::*;
use collabedit_core::interventions::*;
use collabedit_core::knowledge::*;

fn main() {
    // isolated pair: one conflict, two clients, nothing else
    for seed in 0..10u64 {
        let cfg = RunConfig { mu: 1.5e2, n_init: 64, seed, ..RunConfig::default() };
        let universe = cfg.universe();
        let (stack, _) = cfg.build_stack(&universe).unwrap();
        let layer = stack.layers[0].clone();
        let requests = sample_edit_requests(&universe, 1, 1, seed, &layer.base_facts).unwrap();
        let (all, groups) = conflict_inject(&universe, &requests, 1.0, 2, seed + 1);
        let mut state = ServerState::new(universe.clone(), LayerStack::single(layer.clone()),
            &PriorMode::Covariance, 1.0, 1.0, false);
        let per_client = partition_by_client(&all, 2);
        state.run_round(&per_client, &MergeStrategy::CollabEdit).unwrap();
        let lyr = &state.stack.layers[0];
        let g = &groups[0];
        let winner = select_winner(g, ConflictPolicy::Fcfs).unwrap();
        let loser_obj = g.requests.iter().map(|r| r.fact.object).find(|&o| o != winner.fact.object).unwrap();
        let key = universe.key_of_fact(&winner.fact);
        let dist = object_distribution(&universe, lyr, &key, 0.1);
        println!("seed {seed}: P(w)={:.4} P(l)={:.4} winner_is_original={}",
            dist[winner.fact.object as usize], dist[loser_obj as usize],
            winner.fact.object == requests[0].fact.object);
    }

    // aggregate over many groups, measured before any resolution
    let mut w = 0; let mut l = 0; let mut o = 0;
    for seed in 0..5u64 {
        let cfg = RunConfig { mu: 1.5e2, n_init: 64, seed, ..RunConfig::default() };
        let universe = cfg.universe();
        let (stack, _) = cfg.build_stack(&universe).unwrap();
        let layer = stack.layers[0].clone();
        let requests = sample_edit_requests(&universe, 40, 4, seed, &layer.base_facts).unwrap();
        let (all, groups) = conflict_inject(&universe, &requests, 1.0, 4, seed + 1);
        let mut state = ServerState::new(universe.clone(), LayerStack::single(layer.clone()),
            &PriorMode::Covariance, 1.0, 1.0, false);
        state.run_round(&partition_by_client(&all, 4), &MergeStrategy::CollabEdit).unwrap();
        let lyr = &state.stack.layers[0];
        for g in &groups {
            let winner = select_winner(g, ConflictPolicy::Fcfs).unwrap();
            let loser_obj = g.requests.iter().map(|r| r.fact.object).find(|&ob| ob != winner.fact.object).unwrap();
            let key = universe.key_of_fact(&winner.fact);
            let am = argmax_object(&universe, lyr, &key);
            if am == winner.fact.object { w += 1; } else if am == loser_obj { l += 1; } else { o += 1; }
        }
    }
    println!("5 seeds x 40 groups: winner {w}, loser {l}, other {o}");
}
