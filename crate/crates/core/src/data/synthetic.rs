use super::{Dataset, ElectrolyteComponent, Formulation, TargetKind};
use crate::rng::{self, Rng};
use rand::RngCore;

/// Token alphabet for synthetic SMILES. Any concatenation of these
/// tokenizes back into the same tokens.
pub const SYNTHETIC_ALPHABET: [&str; 20] = [
    "C", "N", "O", "F", "S", "P", "Cl", "Br", "c", "n", "o", "(", ")", "=", "#", "1", "2", "[Li+]",
    "[PF6-]", "[N-]",
];

/// Seed of the fixed target function. Independent of the dataset seed so
/// every synthetic dataset shares one ground truth.
const TARGET_FN_SEED: u64 = 0xC0EF_F5EE_D000_0001;

fn pick(rng: &mut Rng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

/// `n` random formulations of 2 to 4 components, each a random string of
/// 3 to 12 alphabet tokens. The LCE target is a fixed smooth function of
/// the ratio-weighted mean token score:
/// `lce = 1.2 + 0.6 * tanh(1.5 * sum_i p_i * mean_t w[t])`.
pub fn synthetic_dataset(n: usize, seed: u64) -> Dataset {
    let mut wrng = rng::seeded(TARGET_FN_SEED);
    let weights: Vec<f64> = SYNTHETIC_ALPHABET
        .iter()
        .map(|_| rng::normal(&mut wrng, 1.0))
        .collect();

    let mut rng = rng::seeded(seed);
    let formulations = (0..n)
        .map(|i| {
            let n_comp = 2 + pick(&mut rng, 3);
            let mut components = Vec::with_capacity(n_comp);
            let mut scores = Vec::with_capacity(n_comp);
            for _ in 0..n_comp {
                let len = 3 + pick(&mut rng, 10);
                let toks: Vec<usize> = (0..len)
                    .map(|_| pick(&mut rng, SYNTHETIC_ALPHABET.len()))
                    .collect();
                scores.push(toks.iter().map(|&t| weights[t]).sum::<f64>() / len as f64);
                let smiles: String = toks.iter().map(|&t| SYNTHETIC_ALPHABET[t]).collect();
                let ratio = (100.0 + (rng::uniform(&mut rng) * 900.0).round()) / 1000.0;
                components.push(ElectrolyteComponent {
                    smiles,
                    molar_ratio: ratio,
                });
            }
            let total: f64 = components.iter().map(|c| c.molar_ratio).sum();
            let s: f64 = components
                .iter()
                .zip(&scores)
                .map(|(c, m)| c.molar_ratio / total * m)
                .sum();
            let lce = 1.2 + 0.6 * (1.5 * s).tanh();
            Formulation {
                id: format!("syn-{i:04}"),
                components,
                target_ce: super::ce_from_lce(lce).expect("positive lce"),
                target_lce: lce,
                source: TargetKind::Lce,
            }
        })
        .collect();
    Dataset {
        name: "synthetic".into(),
        provenance: format!("synthetic_dataset(n={n}, seed={seed})"),
        formulations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::tokenize;

    #[test]
    fn deterministic_and_tokenizable() {
        let a = synthetic_dataset(16, 3);
        assert_eq!(a, synthetic_dataset(16, 3));
        assert_ne!(a, synthetic_dataset(16, 4));
        for f in &a.formulations {
            assert!((2..=4).contains(&f.components.len()));
            assert!(f.target_lce > 0.5 && f.target_lce < 1.9);
            for c in &f.components {
                tokenize(&c.smiles).unwrap();
            }
        }
    }
}
