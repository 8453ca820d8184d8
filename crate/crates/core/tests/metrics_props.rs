mod common;

use common::oracle_fid;
use nextshot::metrics::{
    consistency, cosine, evaluate, fid, text_fidelity, Embedder, GeneratedItem, OracleEmbedder, ProjectionEmbedder,
    PromptOracleEmbedder, ReferenceItem, TextEmbedder, COV_SHRINKAGE,
};
use nextshot::tensor::{Rng, Tensor};
use nextshot::world::{generate_dataset, PatternMix, Split};
use proptest::prelude::*;

fn gaussian_set(n: usize, d: usize, shift: &[f64], rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|j| rng.normal() as f64 + shift[j]).collect()).collect()
}

/// Embeds an image as its first pixel's channels.
struct FirstPixel;

impl Embedder for FirstPixel {
    fn name(&self) -> &str {
        "first-pixel"
    }
    fn dim(&self) -> usize {
        3
    }
    fn embed(&self, image: &Tensor) -> nextshot::Result<Vec<f64>> {
        Ok(image.data()[..3].iter().map(|&v| v as f64).collect())
    }
}

fn pixel(r: f32, g: f32, b: f32) -> Tensor {
    Tensor::new(vec![1, 1, 3], vec![r, g, b]).unwrap()
}

#[test]
fn consistency_examples() {
    let conds = vec![pixel(1.0, 0.0, 0.0), pixel(0.0, 1.0, 0.0)];
    assert_eq!(consistency(&FirstPixel, &conds, &conds).unwrap(), 1.0);
    let gens = vec![pixel(2.0, 0.0, 0.0), pixel(0.0, 0.0, 1.0)];
    assert_eq!(consistency(&FirstPixel, &conds, &gens).unwrap(), 0.5);
    assert!(consistency(&FirstPixel, &conds, &gens[..1]).is_err());
}

#[test]
fn consistency_matches_scalar_loop() {
    let mut rng = Rng::new(3);
    let conds: Vec<Tensor> = (0..12).map(|_| Tensor::from_fn(&[4, 4, 3], |_| rng.uniform())).collect();
    let gens: Vec<Tensor> = (0..12).map(|_| Tensor::from_fn(&[4, 4, 3], |_| rng.uniform())).collect();
    let e = ProjectionEmbedder::default();
    let mut sum = 0.0;
    for (c, g) in conds.iter().zip(&gens) {
        let (a, b) = (e.embed(c).unwrap(), e.embed(g).unwrap());
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        sum += dot / (na * nb);
    }
    assert!((consistency(&e, &conds, &gens).unwrap() - sum / 12.0).abs() < 1e-6);
}

#[test]
fn text_fidelity_checks_widths_and_matches_oracle() {
    let pairs = generate_dataset(10, &PatternMix::uniform(), 1, Split::Heldout, 16).unwrap();
    let gens: Vec<Tensor> = pairs.iter().map(|p| p.tgt.clone()).collect();
    let prompts: Vec<_> = pairs.iter().map(|p| p.prompt.tgt).collect();
    let oracle = OracleEmbedder::default();
    let got = text_fidelity(&oracle, &PromptOracleEmbedder, &gens, &prompts).unwrap();
    let want: f64 = gens
        .iter()
        .zip(&prompts)
        .map(|(g, p)| cosine(&oracle.embed(g).unwrap(), &PromptOracleEmbedder.embed_prompt(p)).unwrap())
        .sum::<f64>()
        / 10.0;
    assert!((got - want).abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&got));
    assert!(text_fidelity(&ProjectionEmbedder::default(), &PromptOracleEmbedder, &gens, &prompts).is_err());
    assert!(text_fidelity(&oracle, &PromptOracleEmbedder, &gens, &prompts[..3]).is_err());
}

#[test]
fn fid_matches_jacobi_oracle_on_small_instances() {
    let mut rng = Rng::new(99);
    for case in 0..20 {
        let d = 4;
        let n = 8 + rng.below(20);
        let shift: Vec<f64> = (0..d).map(|_| rng.normal() as f64).collect();
        let a = gaussian_set(n, d, &vec![0.0; d], &mut rng);
        let b: Vec<Vec<f64>> =
            gaussian_set(n + 3, d, &shift, &mut rng).into_iter().map(|v| v.iter().map(|x| x * 1.7).collect()).collect();
        let ours = fid(&a, &b).unwrap();
        let oracle = oracle_fid(&a, &b, COV_SHRINKAGE);
        assert!((ours - oracle).abs() < 1e-5, "case {case}: {ours} vs {oracle}");
    }
}

#[test]
fn fid_of_shifted_unit_gaussians_approaches_the_mean_gap() {
    let mut rng = Rng::new(5);
    let d = 4;
    let m = [0.8, -0.5, 0.3, 1.0];
    let a = gaussian_set(5000, d, &[0.0; 4], &mut rng);
    let b = gaussian_set(5000, d, &m, &mut rng);
    let want: f64 = m.iter().map(|x| x * x).sum();
    let got = fid(&a, &b).unwrap();
    assert!((got - want).abs() < 0.05 * want, "{got} vs {want}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fid_is_zero_on_itself_symmetric_and_order_free(seed in any::<u64>(), n in 6usize..30, d in 1usize..5) {
        let mut rng = Rng::new(seed);
        let a = gaussian_set(n, d, &vec![0.0; d], &mut rng);
        let b = gaussian_set(n + 2, d, &vec![0.5; d], &mut rng);
        prop_assert!(fid(&a, &a).unwrap() <= 1e-6);
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * ab.max(1.0));
        let mut shuffled = a.clone();
        rng.shuffle(&mut shuffled);
        prop_assert!((fid(&shuffled, &b).unwrap() - ab).abs() <= 1e-9 * ab.max(1.0));
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(v in proptest::collection::vec(-5.0f64..5.0, 1..8), k in 0.1f64..10.0) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let w: Vec<f64> = v.iter().map(|x| x * k).collect();
        prop_assert!((cosine(&v, &w).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        prop_assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
    }
}

fn references(seed: u64, n: usize) -> Vec<ReferenceItem> {
    generate_dataset(n, &PatternMix::uniform(), seed, Split::Heldout, 16)
        .unwrap()
        .into_iter()
        .map(|p| ReferenceItem { id: p.id, cond: p.cond, tgt: p.tgt, prompt: p.prompt.tgt })
        .collect()
}

#[test]
fn ground_truth_scores_like_itself() {
    let refs = references(4, 40);
    let gens: Vec<GeneratedItem> = refs.iter().map(|r| GeneratedItem { id: r.id, image: r.tgt.clone() }).collect();
    let report = evaluate(&gens, &refs, "h").unwrap();
    let conds: Vec<Tensor> = refs.iter().map(|r| r.cond.clone()).collect();
    let tgts: Vec<Tensor> = refs.iter().map(|r| r.tgt.clone()).collect();
    assert!((report.consistency_a - consistency(&OracleEmbedder::default(), &conds, &tgts).unwrap()).abs() < 1e-12);
    assert!((report.consistency_b - consistency(&ProjectionEmbedder::default(), &conds, &tgts).unwrap()).abs() < 1e-12);
    assert!(report.fid.abs() <= 1e-6);
    assert_eq!(report.samples, 40);
    assert_eq!(consistency(&OracleEmbedder::default(), &tgts, &tgts).unwrap(), 1.0);
}

#[test]
fn shuffled_inputs_give_identical_reports() {
    let refs = references(6, 20);
    let gens: Vec<GeneratedItem> = refs.iter().map(|r| GeneratedItem { id: r.id, image: r.cond.clone() }).collect();
    let a = evaluate(&gens, &refs, "h").unwrap();
    let (mut g2, mut r2) = (gens.clone(), refs.clone());
    let mut rng = Rng::new(1);
    rng.shuffle(&mut g2);
    rng.shuffle(&mut r2);
    assert_eq!(evaluate(&g2, &r2, "h").unwrap(), a);
}

#[test]
fn missing_pairs_are_listed() {
    let refs = references(7, 6);
    let gens: Vec<GeneratedItem> =
        refs[1..5].iter().map(|r| GeneratedItem { id: r.id, image: r.tgt.clone() }).collect();
    let err = evaluate(&gens, &refs, "h").unwrap_err().to_string();
    assert!(err.contains(&refs[0].id.to_string()) && err.contains(&refs[5].id.to_string()), "{err}");
}
