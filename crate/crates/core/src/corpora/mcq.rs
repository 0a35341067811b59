use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arithmetic::{gen_arithmetic, ArithmeticExample};

/// A question with `k` candidate completions, exactly one correct.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCQExample {
    pub question: String,
    pub candidates: Vec<String>,
    pub correct: usize,
}

/// Near-miss distractors: off-by-one first, then off-by-two and sign flip.
pub fn distractors(answer: i64, k: usize) -> Vec<i64> {
    let pool = [answer - 1, answer + 1, answer + 2, -answer, answer - 2, answer + 3, answer - 3];
    let mut out: Vec<i64> = Vec::new();
    for v in pool {
        if v != answer && !out.contains(&v) {
            out.push(v);
        }
        if out.len() + 1 == k {
            break;
        }
    }
    out
}

pub fn mcq_from_arithmetic(ex: &ArithmeticExample, k: usize, rng: &mut ChaCha8Rng) -> MCQExample {
    let mut values = distractors(ex.answer, k);
    values.push(ex.answer);
    values.shuffle(rng);
    let correct = values.iter().position(|&v| v == ex.answer).expect("answer is a candidate");
    MCQExample { question: ex.prompt(), candidates: values.iter().map(|v| v.to_string()).collect(), correct }
}

/// Arithmetic multiple-choice items with `k` candidates each.
pub fn gen_mcq_k(seed: u64, n: usize, k: usize) -> Vec<MCQExample> {
    assert!((2..=8).contains(&k), "between 2 and 8 candidates");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d63_7100);
    gen_arithmetic(seed, n).iter().map(|ex| mcq_from_arithmetic(ex, k, &mut rng)).collect()
}

pub fn gen_mcq(seed: u64, n: usize) -> Vec<MCQExample> {
    gen_mcq_k(seed, n, 4)
}
