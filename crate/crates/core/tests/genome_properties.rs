use std::collections::BTreeSet;

use cuevo_core::genome_ops::{crossover_variable, mutate_fixed, mutate_variable, crossover_fixed};
use cuevo_core::schema::{random_genotype, Cue, CueCategory, CueSchema, DataItem, Genotype};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schema(sizes: &[usize]) -> CueSchema {
    CueSchema::new(
        DataItem::Windows,
        "UK",
        sizes
            .iter()
            .enumerate()
            .map(|(c, &n)| CueCategory {
                name: format!("c{c}"),
                allowed_cues: (0..n).map(|i| Cue::new(format!("{c}:{i}")).unwrap()).collect(),
            })
            .collect(),
    )
    .unwrap()
}

/// A variable-length genotype with random subsets per chromosome.
fn subset_genotype(s: &CueSchema, rng: &mut ChaCha8Rng) -> Genotype {
    use rand::Rng;
    Genotype::new(
        s.categories
            .iter()
            .map(|c| c.allowed_cues.iter().filter(|_| rng.random_bool(0.3)).cloned().collect())
            .collect(),
    )
}

proptest! {
    #[test]
    fn crossover_invents_nothing(sizes in prop::collection::vec(1usize..12, 1..8), seed in any::<u64>()) {
        let s = schema(&sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = subset_genotype(&s, &mut rng);
        let b = subset_genotype(&s, &mut rng);
        let child = crossover_variable(&a, &b, &mut rng).unwrap();
        for (x, chromosome) in child.chromosomes.iter().enumerate() {
            let parents: BTreeSet<&Cue> = a.chromosomes[x].iter().chain(&b.chromosomes[x]).collect();
            prop_assert!(chromosome.iter().all(|c| parents.contains(c)));
            prop_assert!(chromosome.len() <= a.chromosomes[x].len().max(b.chromosomes[x].len()));
            prop_assert_eq!(chromosome.iter().collect::<BTreeSet<_>>().len(), chromosome.len());
        }
        prop_assert!(child.validate(&s, false).is_ok());
    }

    #[test]
    fn variable_mutation_touches_one_chromosome(sizes in prop::collection::vec(1usize..12, 1..8), seed in any::<u64>()) {
        let s = schema(&sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = subset_genotype(&s, &mut rng);
        let m = mutate_variable(&g, &s, &mut rng);
        let changed = g.chromosomes.iter().zip(&m.chromosomes).filter(|(a, b)| a != b).count();
        prop_assert!(changed <= 1);
        prop_assert!(m.validate(&s, false).is_ok());
    }

    #[test]
    fn fixed_operators_keep_one_cue(sizes in prop::collection::vec(1usize..12, 1..8), seed in any::<u64>()) {
        let s = schema(&sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_genotype(&s, &mut rng);
        let b = random_genotype(&s, &mut rng);
        let child = mutate_fixed(&crossover_fixed(&a, &b, &mut rng).unwrap(), &s, &mut rng);
        prop_assert!(child.validate(&s, true).is_ok());
    }
}

#[test]
fn every_cue_is_reachable_by_mutation() {
    let s = schema(&[5, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Genotype::empty(2);
    let mut seen = BTreeSet::new();
    for _ in 0..2000 {
        g = mutate_variable(&g, &s, &mut rng);
        seen.extend(g.cues().map(|(x, c)| (x, c.clone())));
    }
    assert_eq!(seen.len(), 8);
}
