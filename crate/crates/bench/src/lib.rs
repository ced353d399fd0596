//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stg_core::autodiff::Tensor;
use stg_core::nets::{init_all, Dims, ParamStore};
use stg_core::tasks::{gen_fewshot_task, Example, TaskSpec};

/// Default-width networks with every parameter randomized, so the adapter
/// and selector are not at their zero initialization.
pub fn random_store(seed: u64) -> ParamStore {
    let mut s = init_all(Dims::new(33), seed).expect("default dims are valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = s.names().map(str::to_string).collect();
    for n in names {
        let shape = s.get(&n).expect("listed").shape().to_vec();
        s.set(&n, Tensor::from_fn(&shape, |_| rng.random_range(-0.2..0.2)))
            .expect("same shape");
    }
    s.set_frozen("lm.", true);
    s
}

/// A few examples of the default task.
pub fn examples(n: usize) -> Vec<Example> {
    let spec = TaskSpec {
        n_test: n,
        ..TaskSpec::default()
    };
    gen_fewshot_task(&spec, 1)
        .expect("default task is valid")
        .test
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixtures_build() {
        let s = super::random_store(1);
        assert!(s.num_params() > 0);
        assert_eq!(super::examples(3).len(), 3);
    }
}
