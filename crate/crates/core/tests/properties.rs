use proptest::prelude::*;

use eimlab::denoiser::{ConditionMap, GaussianFactorConfig, GaussianFactorModel};
use eimlab::diffusion::{forward_noise, reverse_sample, LatentImage, NoiseDraw, NoiseSchedule, SamplerConfig, VarianceMode};
use eimlab::distill::{identify_image_direction, HSDSConfig};
use eimlab::metrics::{sde_flip_average, SdeConfig};
use eimlab::pipeline::{eim_edit, AnalyticCodec, EditOptions, EditRequest};
use eimlab::rng::{derive_stream, normal_matrix};
use eimlab::scene::{render_scene, FactorVector};
use eimlab::text::{encode_prompt, level_name, EditPlan, PlanEntry, SemanticVocabulary};

fn model(seed: u64) -> (SemanticVocabulary, GaussianFactorModel) {
    let v = SemanticVocabulary::scene_default(0);
    let m = GaussianFactorModel::new(
        GaussianFactorConfig::disentangled(seed),
        &v,
        ConditionMap::scene(&v).unwrap(),
        NoiseSchedule::default(),
    )
    .unwrap();
    (v, m)
}

fn request(plan: EditPlan, seed: u64) -> EditRequest {
    EditRequest {
        scene: render_scene(&FactorVector::from_coordinates(&[0.0, 1.0, 0.2, 0.4, 0.6]).unwrap()).unwrap(),
        plan,
        sampler: SamplerConfig {
            guidance_scale: 1.0,
            ..SamplerConfig::default()
        },
        hsds: HSDSConfig::default(),
        options: EditOptions::default(),
        seed,
    }
}

fn entry(attribute: &str, from: &str, to: &str) -> PlanEntry {
    PlanEntry {
        attribute: attribute.into(),
        from: from.into(),
        to: to.into(),
        degree: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reverse_sample_ends_clean(t in 1usize..=50, seed in 0u64..1000, w in 0.0f64..8.0, mean_only in any::<bool>()) {
        let (v, m) = model(1);
        let mut rng = derive_stream(seed, 0);
        let z = LatentImage::new(normal_matrix(&mut rng, 16, 32), t).unwrap();
        let cond = encode_prompt(&v, &[("color", "red"), ("object", "circle")]).unwrap();
        let cfg = SamplerConfig {
            guidance_scale: w,
            variance: if mean_only { VarianceMode::PosteriorMean } else { VarianceMode::Ancestral },
            ..SamplerConfig::default()
        };
        let out = reverse_sample(&z, &cond, &v.null_embedding(2), &m, &cfg, &NoiseSchedule::default(), &mut rng).unwrap();
        prop_assert_eq!(out.timestep, 0);
        prop_assert!(out.tokens.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn identification_keeps_the_timestep(t in 1usize..=50, seed in 0u64..1000) {
        let (v, m) = model(2);
        let mut rng = derive_stream(seed, 1);
        let z = LatentImage::new(normal_matrix(&mut rng, 16, 32), t).unwrap();
        let src = encode_prompt(&v, &[("color", "red"), ("size", "0.2")]).unwrap();
        let dst = encode_prompt(&v, &[("color", "red"), ("size", "0.8")]).unwrap();
        let cfg = HSDSConfig { iterations: 5, ..HSDSConfig::default() };
        let (dir, trace) = identify_image_direction(&m, &z, &src, &dst, &cfg).unwrap();
        prop_assert_eq!(dir.delta.dim(), (16, 32));
        prop_assert_eq!(trace.grad_norms.len(), 5);
        prop_assert_eq!(z.timestep, t);
    }

    #[test]
    fn sde_total_is_ratio_plus_edited(seed in 0u64..200, size in 0usize..=10) {
        let (v, m) = model(2);
        let codec = AnalyticCodec { model: &m };
        let scene = render_scene(&FactorVector::from_coordinates(&[0.0, 1.0, size as f64 / 10.0, 0.5, 0.5]).unwrap()).unwrap();
        let r = sde_flip_average(&scene, &v, &m, &codec, &NoiseSchedule::default(), &SdeConfig::default(), seed).unwrap();
        prop_assert!(r.conditioned >= 0.0 && r.edited >= 0.0);
        if r.ratio.is_finite() {
            prop_assert_eq!(r.total, r.ratio + r.edited);
        }
    }
}

#[test]
fn image_direction_shrinks_as_lambda_grows() {
    let (v, m) = model(2);
    let sched = NoiseSchedule::default();
    let src = encode_prompt(&v, &[("color", "red"), ("object", "circle"), ("size", "0.2")]).unwrap();
    let dst = encode_prompt(&v, &[("color", "red"), ("object", "circle"), ("size", "0.9")]).unwrap();
    for seed in 0..10 {
        let mut rng = derive_stream(seed, 2);
        let z0 = LatentImage::clean(normal_matrix(&mut rng, 16, 32)).unwrap();
        let eps = NoiseDraw::sample(&mut rng, (16, 32), (seed, 0));
        let zt = forward_noise(&z0, 38, &eps, &sched).unwrap();
        let norms: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&lambda| {
                let cfg = HSDSConfig { lambda, ..HSDSConfig::default() };
                let (dir, _) = identify_image_direction(&m, &zt, &src, &dst, &cfg).unwrap();
                dir.delta.iter().map(|x| x * x).sum::<f64>().sqrt()
            })
            .collect();
        assert!(norms.windows(2).all(|w| w[1] <= w[0] + 1e-12), "seed {seed}: {norms:?}");
    }
}

#[test]
fn two_attribute_edit_matches_single_edits() {
    let (v, m) = model(2);
    let codec = AnalyticCodec { model: &m };
    let sched = NoiseSchedule::default();
    let mean = |plan: EditPlan| {
        let mut acc = [0.0; 5];
        for s in 0..50 {
            let r = eim_edit(&request(plan.clone(), s), &m, &codec, &v, &sched).unwrap();
            for (a, x) in acc.iter_mut().zip(&r.recovered) {
                *a += x / 50.0;
            }
        }
        acc
    };
    let both = mean(EditPlan::new(vec![entry("size", "0.2", "0.9"), entry("x", "0.4", "0.8")]).unwrap());
    let size = mean(EditPlan::single("size", "0.2", "0.9", 1.0));
    let x = mean(EditPlan::single("x", "0.4", "0.8", 1.0));
    assert!((both[2] - size[2]).abs() < 0.05, "size {} vs {}", both[2], size[2]);
    assert!((both[3] - x[3]).abs() < 0.05, "x {} vs {}", both[3], x[3]);
    for i in [0, 1, 4] {
        assert!((both[i] - size[i]).abs() < 0.05 && (both[i] - x[i]).abs() < 0.05);
    }
}

#[test]
fn every_single_attribute_edit_is_decomposable() {
    let (v, m) = model(2);
    let codec = AnalyticCodec { model: &m };
    let sched = NoiseSchedule::default();
    let plans = [
        EditPlan::single("color", "red", "blue", 1.0),
        EditPlan::single("object", "circle", "square", 1.0),
        EditPlan::single("size", "0.2", &level_name(7), 1.0),
        EditPlan::single("x", "0.4", &level_name(9), 1.0),
        EditPlan::single("y", "0.6", &level_name(1), 1.0),
    ];
    for (i, plan) in plans.into_iter().enumerate() {
        let mut drift = [0.0; 5];
        let mut source = [0.0; 5];
        for s in 0..50 {
            let r = eim_edit(&request(plan.clone(), s), &m, &codec, &v, &sched).unwrap();
            for j in 0..5 {
                drift[j] += r.recovered[j] / 50.0;
                source[j] = r.source_factors[j];
            }
        }
        for j in (0..5).filter(|&j| j != i) {
            assert!((drift[j] - source[j]).abs() < 0.05, "plan {i} moved factor {j}");
        }
    }
}
