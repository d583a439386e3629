use std::fs;

use rotavg::envgraph::{generate_uniform_env, GeneratorConfig};
use rotavg::io::{load_env, save_env};

#[test]
fn hundred_random_environments_survive_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..100u64 {
        let env = generate_uniform_env(&GeneratorConfig {
            n_nodes: 10 + (seed as usize % 40),
            k_neighbors: 2 + (seed as usize % 3),
            seed,
            ..Default::default()
        })
        .unwrap();
        let first = dir.path().join(format!("env_{seed}.txt"));
        let second = dir.path().join(format!("env_{seed}_again.txt"));
        save_env(&env, &first).unwrap();
        let loaded = load_env(&first).unwrap();
        assert_eq!(loaded, env, "seed {seed}");
        save_env(&loaded, &second).unwrap();
        assert_eq!(
            fs::read(&first).unwrap(),
            fs::read(&second).unwrap(),
            "seed {seed}"
        );
    }
}
