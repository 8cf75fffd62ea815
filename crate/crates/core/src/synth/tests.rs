use super::*;
use crate::fieldcore::{max_interior_displacement, mse, sample_field};

fn still_config() -> CohortConfig {
    CohortConfig {
        num_subjects: 4,
        svf_amplitude: 0.0,
        svf_log_scale: 0.0,
        nuisance_amplitude: 0.0,
        progression_mm: 0.0,
        noise_std: 0.0,
        ..CohortConfig::default()
    }
}

fn small_default(n: usize) -> CohortConfig {
    CohortConfig {
        num_subjects: n,
        ..CohortConfig::default()
    }
}

#[test]
fn ring_profile_peaks_at_radius() {
    let cfg = CohortConfig {
        ring_center: Some(vec![48.0, 48.0]),
        blobs: vec![],
        texture_amplitude: 0.0,
        intensity: 1.0,
        ..CohortConfig::default()
    };
    let t = make_template(&cfg).unwrap();
    let at = |y: usize, x: usize| t.image.values()[y * 96 + x];
    assert_eq!(at(48, 74), 1.0);
    assert!(at(48, 73) < 1.0 && at(48, 75) < 1.0);
    assert_eq!(at(22, 48), 1.0);
}

#[test]
fn template_is_deterministic_and_points_are_analytic() {
    let cfg = CohortConfig::default();
    let (a, b) = (make_template(&cfg).unwrap(), make_template(&cfg).unwrap());
    assert_eq!(a.image.values(), b.image.values());
    assert_eq!(a.hash, b.hash);
    assert_eq!(a.points.len(), 4 + cfg.blobs.len());
    assert_eq!(a.points.row(0), &[47.5 - 26.0, 47.5]);
    assert_eq!(a.points.row(3), &[47.5, 47.5 + 26.0]);
    for (i, b) in cfg.blobs.iter().enumerate() {
        assert_eq!(a.points.row(4 + i), b.center.as_slice());
    }
}

#[test]
fn structures_outside_the_image_are_rejected() {
    let cfg = CohortConfig {
        ring_radius: 45.0,
        ..CohortConfig::default()
    };
    assert!(make_template(&cfg).is_err());
    let mut cfg = CohortConfig::default();
    cfg.blobs[0].center = vec![2.0, 50.0];
    assert!(make_template(&cfg).is_err());
}

#[test]
fn zero_deformation_reproduces_the_template() {
    let cohort = generate_cohort(&still_config()).unwrap();
    for s in &cohort.subjects {
        assert_eq!(s.image_t0().values(), cohort.template.image.values());
        assert_eq!(s.image_t1().values(), cohort.template.image.values());
        assert_eq!(s.gt_landmarks[0].points, cohort.template.points);
        assert_eq!(s.thinning_mm, 0.0);
    }
}

#[test]
fn labels_follow_progression_and_gate_thinning() {
    let cohort = generate_cohort(&small_default(12)).unwrap();
    for s in &cohort.subjects {
        assert_eq!(s.label, s.spec.progression > 0.5);
        if !s.label {
            assert_eq!(s.thinning_mm, 0.0);
        } else {
            assert!(s.thinning_mm >= 1.5 && s.thinning_mm <= 3.0);
        }
    }
}

#[test]
fn label_balance_over_seeds() {
    for seed in 0..10 {
        let specs = subject_specs(&CohortConfig {
            seed,
            ..CohortConfig::default()
        });
        let pos = specs.iter().filter(|s| s.progression > 0.5).count();
        let frac = pos as f64 / specs.len() as f64;
        assert!((0.4..=0.6).contains(&frac), "seed {seed}: {frac}");
    }
}

#[test]
fn gt_landmarks_are_mapped_template_points() {
    let cohort = generate_cohort(&small_default(3)).unwrap();
    for s in &cohort.subjects {
        for t in 0..2 {
            let d = sample_field(s.to_subject[t].displacement(), &cohort.template.points).unwrap();
            for ((g, p), dd) in s.gt_landmarks[t].points.rows().zip(cohort.template.points.rows()).zip(d.rows()) {
                for k in 0..2 {
                    assert!((g[k] - p[k] - dd[k]).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn noise_is_independent_per_image() {
    let sd = 0.5;
    let cohort = generate_cohort(&CohortConfig {
        noise_std: sd,
        ..still_config()
    })
    .unwrap();
    let t = cohort.template.image.values();
    let residual = |img: &Image| -> Vec<f64> { img.values().iter().zip(t).map(|(v, t)| v - t).collect() };
    let (r0, r1) = (residual(cohort.subjects[0].image_t0()), residual(cohort.subjects[0].image_t1()));
    let n = r0.len() as f64;
    let std = (r0.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    assert!((std - sd).abs() < 0.02, "{std}");
    let corr = r0.iter().zip(&r1).map(|(a, b)| a * b).sum::<f64>() / (n * sd * sd);
    assert!(corr.abs() < 0.03, "{corr}");
}

#[test]
fn self_registration_is_identity() {
    let cohort = generate_cohort(&small_default(2)).unwrap();
    let k = ImageKey::new(1, Timepoint::T1);
    let m = cohort.register(k, k).unwrap();
    assert_eq!(max_interior_displacement(&m, 0), 0.0);
}

#[test]
fn oracle_warp_matches_target() {
    let cohort = generate_cohort(&CohortConfig {
        noise_std: 0.0,
        ..small_default(6)
    })
    .unwrap();
    let keys = cohort.keys(&[0, 1, 2, 3, 4, 5], &[Timepoint::T0, Timepoint::T1]);
    for w in keys.windows(3) {
        let (tgt, src) = (w[0], w[2]);
        let m = cohort.register(tgt, src).unwrap();
        let warped = warp_image(cohort.image(src), &m).unwrap();
        let target = cohort.image(tgt);
        let e = mse(&warped, target).unwrap();
        assert!(e <= 0.01 * target.variance(), "{e} vs {}", target.variance());
    }
}

#[test]
fn oracle_is_inverse_consistent() {
    let cohort = generate_cohort(&small_default(4)).unwrap();
    for (a, b) in [(0, 1), (2, 3), (1, 3)] {
        let (ka, kb) = (ImageKey::new(a, Timepoint::T0), ImageKey::new(b, Timepoint::T1));
        let ab = cohort.register(ka, kb).unwrap();
        let ba = cohort.register(kb, ka).unwrap();
        let round = compose(&ba, &ab).unwrap();
        let err = max_interior_displacement(&round, 16);
        assert!(err <= 0.05, "{a}->{b}: {err}");
    }
}

#[test]
fn gt_landmarks_correspond_through_the_oracle() {
    let cohort = generate_cohort(&small_default(5)).unwrap();
    let keys = cohort.keys(&[0, 1, 2, 3, 4], &[Timepoint::T0, Timepoint::T1]);
    for &a in &keys {
        for &b in &keys {
            let m = cohort.register(a, b).unwrap();
            let moved = m.apply(gt_points(&cohort, a)).unwrap();
            for (p, q) in moved.rows().zip(gt_points(&cohort, b).rows()) {
                assert!(crate::fieldcore::distance(p, q) <= 0.1, "{a:?} -> {b:?}");
            }
        }
    }
}

#[test]
fn different_templates_are_refused() {
    let a = generate_cohort(&small_default(1)).unwrap();
    let b = generate_cohort(&CohortConfig {
        ring_radius: 20.0,
        ..small_default(1)
    })
    .unwrap();
    let r = oracle_registration((&a.subjects[0], Timepoint::T0), (&b.subjects[0], Timepoint::T0));
    assert!(r.is_err());
}

#[test]
fn cohort_generation_is_deterministic() {
    let (a, b) = (generate_cohort(&small_default(4)).unwrap(), generate_cohort(&small_default(4)).unwrap());
    assert_eq!(a.payload_hash(), b.payload_hash());
    let c = generate_cohort(&CohortConfig {
        seed: 1,
        ..small_default(4)
    })
    .unwrap();
    assert_ne!(a.payload_hash(), c.payload_hash());
}

#[test]
fn cohort_directory_roundtrip() {
    let cohort = generate_cohort(&small_default(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_cohort(&cohort, dir.path(), false).unwrap();
    assert!(write_cohort(&cohort, dir.path(), false).is_err());
    write_cohort(&cohort, dir.path(), true).unwrap();
    let back = load_cohort(dir.path()).unwrap();
    assert_eq!(back.payload_hash(), cohort.payload_hash());
    assert_eq!(back.labels(), cohort.labels());
    assert_eq!(back.config, cohort.config);
    for (x, y) in back.subjects.iter().zip(&cohort.subjects) {
        assert_eq!(x.to_subject[1].displacement().vectors(), y.to_subject[1].displacement().vectors());
        assert_eq!(x.gt_landmarks[0].points, y.gt_landmarks[0].points);
    }
    let k = (ImageKey::new(0, Timepoint::T0), ImageKey::new(2, Timepoint::T1));
    assert_eq!(
        back.register(k.0, k.1).unwrap().displacement().vectors(),
        cohort.register(k.0, k.1).unwrap().displacement().vectors()
    );
}

#[test]
fn field_directory_oracle_reads_named_files() {
    let cohort = generate_cohort(&still_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ids: Vec<String> = cohort.subjects.iter().map(|s| s.id.clone()).collect();
    let oracle = FieldDirOracle::new(dir.path(), ids);
    let (a, b) = (ImageKey::new(0, Timepoint::T0), ImageKey::new(1, Timepoint::T1));
    assert_eq!(oracle.file_name(a, b).unwrap(), "field_000_t0_001_t1.ltf");
    assert!(oracle.register(a, b).is_err());
    let id = crate::fieldcore::identity_map(cohort.image(a).grid());
    crate::fieldcore::ltf::save_transform(&id, dir.path().join("field_000_t0_001_t1.ltf")).unwrap();
    let m = oracle.register(a, b).unwrap();
    let warped = warp_image(cohort.image(b), &m).unwrap();
    assert_eq!(warped.values(), cohort.image(b).values());
}

#[test]
fn volumetric_cohort_smoke() {
    let cfg = CohortConfig {
        num_subjects: 2,
        dims: vec![24, 24, 24],
        spacing: vec![1.0; 3],
        ring_radius: 6.0,
        ring_thickness: 3.0,
        blobs: vec![Blob {
            center: vec![11.5, 11.5, 11.5],
            radius: 2.0,
            intensity: 0.8,
        }],
        svf_points: 4,
        svf_amplitude: 0.8,
        svf_width: 6.0,
        progression_mm: 1.0,
        ..CohortConfig::default()
    };
    let cohort = generate_cohort(&cfg).unwrap();
    assert_eq!(cohort.template.points.len(), 7);
    let (a, b) = (ImageKey::new(0, Timepoint::T0), ImageKey::new(1, Timepoint::T1));
    let m = cohort.register(a, b).unwrap();
    let moved = m.apply(gt_points(&cohort, a)).unwrap();
    for (p, q) in moved.rows().zip(gt_points(&cohort, b).rows()) {
        assert!(crate::fieldcore::distance(p, q) <= 0.1);
    }
}
