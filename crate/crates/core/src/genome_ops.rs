//! Crossover and mutation for fixed-length and variable-length genotypes.
//!
//! Fixed-length genotypes carry exactly one cue per chromosome. Variable-length
//! genotypes carry anywhere from zero cues to the full vocabulary of each
//! category. All random choices are uniform.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Cue, CueSchema, Genotype};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenomeError {
    #[error("parents have {0} and {1} chromosomes")]
    ChromosomeMismatch(usize, usize),
}

/// Chromosome encoding used by a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fixed,
    Variable,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(Mode::Fixed),
            "variable" => Ok(Mode::Variable),
            other => Err(format!("unknown mode `{other}` (expected fixed or variable)")),
        }
    }
}

/// The three variable-length mutation operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationOp {
    Swap,
    Delete,
    Add,
}

/// Removes repeated labels, keeping the first occurrence of each.
pub fn dedup(chromosome: Vec<Cue>) -> Vec<Cue> {
    let mut seen = HashSet::with_capacity(chromosome.len());
    chromosome
        .into_iter()
        .filter(|cue| seen.insert(cue.clone()))
        .collect()
}

fn check_parents(p1: &Genotype, p2: &Genotype) -> Result<(), GenomeError> {
    if p1.chromosomes.len() != p2.chromosomes.len() {
        return Err(GenomeError::ChromosomeMismatch(
            p1.chromosomes.len(),
            p2.chromosomes.len(),
        ));
    }
    Ok(())
}

/// Uniform crossover: each chromosome's single cue comes from either parent.
pub fn crossover_fixed<R: Rng + ?Sized>(
    p1: &Genotype,
    p2: &Genotype,
    rng: &mut R,
) -> Result<Genotype, GenomeError> {
    check_parents(p1, p2)?;
    let chromosomes = p1
        .chromosomes
        .iter()
        .zip(&p2.chromosomes)
        .map(|(a, b)| if rng.random_bool(0.5) { a.clone() } else { b.clone() })
        .collect();
    Ok(Genotype::new(chromosomes))
}

/// Replaces the cue of one uniformly chosen chromosome with a different cue
/// from the same category. Size-1 categories leave the genotype unchanged.
pub fn mutate_fixed<R: Rng + ?Sized>(g: &Genotype, schema: &CueSchema, rng: &mut R) -> Genotype {
    let mut child = g.clone();
    if child.chromosomes.is_empty() {
        return child;
    }
    let x = rng.random_range(0..child.chromosomes.len());
    let vocabulary = &schema.categories[x].allowed_cues;
    let Some(current) = child.chromosomes[x].first() else {
        return child;
    };
    let others: Vec<&Cue> = vocabulary.iter().filter(|c| *c != current).collect();
    if others.is_empty() {
        return child;
    }
    let replacement = others[rng.random_range(0..others.len())].clone();
    child.chromosomes[x] = vec![replacement];
    child
}

/// Builds one chromosome from two parent chromosomes.
///
/// Positions shared by both parents take either parent's cue with equal
/// probability; each position present only in the longer parent is inherited
/// with probability 0.5. Duplicates are then removed.
pub fn crossover_chromosome<R: Rng + ?Sized>(a: &[Cue], b: &[Cue], rng: &mut R) -> Vec<Cue> {
    let shared = a.len().min(b.len());
    let longer = if a.len() >= b.len() { a } else { b };
    let mut child = Vec::with_capacity(longer.len());
    for i in 0..shared {
        child.push(if rng.random_bool(0.5) { a[i].clone() } else { b[i].clone() });
    }
    for cue in &longer[shared..] {
        if rng.random_bool(0.5) {
            child.push(cue.clone());
        }
    }
    dedup(child)
}

pub fn crossover_variable<R: Rng + ?Sized>(
    p1: &Genotype,
    p2: &Genotype,
    rng: &mut R,
) -> Result<Genotype, GenomeError> {
    check_parents(p1, p2)?;
    let chromosomes = p1
        .chromosomes
        .iter()
        .zip(&p2.chromosomes)
        .map(|(a, b)| crossover_chromosome(a, b, rng))
        .collect();
    Ok(Genotype::new(chromosomes))
}

/// Applies one uniformly chosen operation to one uniformly chosen chromosome.
pub fn mutate_variable<R: Rng + ?Sized>(g: &Genotype, schema: &CueSchema, rng: &mut R) -> Genotype {
    if g.chromosomes.is_empty() {
        return g.clone();
    }
    let x = rng.random_range(0..g.chromosomes.len());
    let op = match rng.random_range(0..3) {
        0 => MutationOp::Swap,
        1 => MutationOp::Delete,
        _ => MutationOp::Add,
    };
    apply_mutation(g, schema, x, op, rng)
}

/// Applies `op` to chromosome `x`. Exposed so that tests and tools can drive
/// specific operations; [`mutate_variable`] picks `x` and `op` at random.
pub fn apply_mutation<R: Rng + ?Sized>(
    g: &Genotype,
    schema: &CueSchema,
    x: usize,
    op: MutationOp,
    rng: &mut R,
) -> Genotype {
    let mut child = g.clone();
    let vocabulary = &schema.categories[x].allowed_cues;
    let chromosome = &mut child.chromosomes[x];
    match op {
        MutationOp::Swap if !chromosome.is_empty() => {
            let at = rng.random_range(0..chromosome.len());
            chromosome[at] = vocabulary[rng.random_range(0..vocabulary.len())].clone();
        }
        // swap on an empty chromosome adds instead
        MutationOp::Swap | MutationOp::Add => {
            chromosome.push(vocabulary[rng.random_range(0..vocabulary.len())].clone());
        }
        MutationOp::Delete => {
            if !chromosome.is_empty() {
                let at = rng.random_range(0..chromosome.len());
                chromosome.remove(at);
            }
        }
    }
    *chromosome = dedup(std::mem::take(chromosome));
    child
}

pub fn crossover<R: Rng + ?Sized>(
    mode: Mode,
    p1: &Genotype,
    p2: &Genotype,
    rng: &mut R,
) -> Result<Genotype, GenomeError> {
    match mode {
        Mode::Fixed => crossover_fixed(p1, p2, rng),
        Mode::Variable => crossover_variable(p1, p2, rng),
    }
}

pub fn mutate<R: Rng + ?Sized>(mode: Mode, g: &Genotype, schema: &CueSchema, rng: &mut R) -> Genotype {
    match mode {
        Mode::Fixed => mutate_fixed(g, schema, rng),
        Mode::Variable => mutate_variable(g, schema, rng),
    }
}
