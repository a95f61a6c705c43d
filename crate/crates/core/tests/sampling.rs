use sbac_core::mdp::registry::{generate, make_env, tabular_behavior};
use sbac_core::mdp::{index_of, TransitionDataset};
use sbac_core::oracle::exact_visitation;

fn state_frequencies(ds: &TransitionDataset, n: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n];
    for tr in ds.transitions() {
        counts[index_of(&tr.s)] += 1.0;
    }
    counts.iter().map(|c| c / ds.len() as f64).collect()
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[test]
fn dataset_state_marginal_matches_behavior_visitation() {
    let env = make_env("gridworld", 0.99).unwrap();
    let mdp = env.as_tabular().unwrap();
    let mu = tabular_behavior(env.as_ref(), "expert").unwrap().unwrap();
    let ds = generate(env.as_ref(), "expert", 200, 0).unwrap();
    let freq = state_frequencies(&ds, mdp.n_states());
    let exact = exact_visitation(mdp, &mu).unwrap();
    let tv = total_variation(&freq, exact.as_slice());
    assert!(tv < 0.02, "tv = {tv}");
}

#[test]
fn uniform_policy_matches_monte_carlo_visitation() {
    let env = make_env("gridworld", 0.99).unwrap();
    let mdp = env.as_tabular().unwrap();
    let mu = tabular_behavior(env.as_ref(), "random").unwrap().unwrap();
    // About 4 * 10^6 steps: each episode lasts 1 / (1 - g) = 100 steps on average.
    let ds = generate(env.as_ref(), "random", 40_000, 7).unwrap();
    let freq = state_frequencies(&ds, mdp.n_states());
    let exact = exact_visitation(mdp, &mu).unwrap();
    for (s, (f, d)) in freq.iter().zip(exact.as_slice()).enumerate() {
        assert!((f - d).abs() < 0.01, "state {s}: {f} vs {d}");
    }
}

#[test]
fn action_counts_are_binomial() {
    let env = make_env("gridworld", 0.99).unwrap();
    let mdp = env.as_tabular().unwrap();
    let mu = tabular_behavior(env.as_ref(), "medium").unwrap().unwrap();
    let ds = generate(env.as_ref(), "medium", 200, 3).unwrap();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut counts = vec![0.0; ns * na];
    for tr in ds.transitions() {
        counts[index_of(&tr.s) * na + index_of(&tr.a)] += 1.0;
    }
    let (mut cells, mut beyond3) = (0, 0);
    for s in 0..ns {
        let n: f64 = counts[s * na..(s + 1) * na].iter().sum();
        if n == 0.0 {
            continue;
        }
        for a in 0..na {
            let p = mu.prob(s, a);
            let z = (counts[s * na + a] - n * p) / (n * p * (1.0 - p)).sqrt();
            assert!(z.abs() < 5.0, "state {s} action {a}: z = {z}");
            cells += 1;
            if z.abs() > 3.0 {
                beyond3 += 1;
            }
        }
    }
    assert!(beyond3 as f64 <= 0.01 * cells as f64 + 1.0, "{beyond3} of {cells} beyond 3 sigma");
}

#[test]
fn regenerated_dataset_survives_a_file_round_trip() {
    let env = make_env("chain", 0.99).unwrap();
    let ds = generate(env.as_ref(), "medium", 5, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    ds.save(&path).unwrap();
    let back = TransitionDataset::load(&path).unwrap();
    assert_eq!(back.transitions(), ds.transitions());
    assert_eq!(back.meta(), ds.meta());
    assert_eq!(generate(env.as_ref(), "medium", 5, 1).unwrap().transitions(), ds.transitions());
}
