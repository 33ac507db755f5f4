use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xmodal_core::downstream::*;
use xmodal_core::synthdata::MorphologyClass;
use xmodal_core::{Error, Modality};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn bag(instances: Vec<Vec<f64>>, label: u8) -> Bag {
    Bag {
        slide_id: "slide".into(),
        instances,
        label,
    }
}

/// Bags of `n` instances; positive bags get a fraction of instances shifted
/// along a fixed direction.
fn shifted_bags(r: &mut ChaCha8Rng, count: usize, n: usize, d: usize) -> Vec<Bag> {
    let shift: Vec<f64> = (0..d).map(|j| if j < 3 { 2.5 } else { 0.0 }).collect();
    (0..count)
        .map(|b| {
            let label = (b % 2) as u8;
            let instances = (0..n)
                .map(|i| {
                    let mut v = random_vec(r, d);
                    if label == 1 && i < n / 3 {
                        v.iter_mut().zip(&shift).for_each(|(x, s)| *x += s);
                    }
                    v
                })
                .collect();
            Bag {
                slide_id: format!("s{b}"),
                instances,
                label,
            }
        })
        .collect()
}

fn small_config() -> AbmilConfig {
    AbmilConfig {
        hidden: 16,
        epochs: 30,
        ..AbmilConfig::default()
    }
}

#[test]
fn abmil_single_instance_attends_fully() {
    let mut r = rng(0);
    let bags = shifted_bags(&mut r, 6, 5, 8);
    let params = abmil_train(&bags, &[], &small_config()).unwrap();
    let (p, att) = abmil_predict(&params, &bag(vec![random_vec(&mut r, 8)], 0)).unwrap();
    assert_eq!(att, vec![1.0]);
    assert!(p > 0.0 && p < 1.0);
}

#[test]
fn abmil_attention_is_normalized_and_permutation_invariant() {
    let mut r = rng(1);
    let train = shifted_bags(&mut r, 8, 6, 5);
    let params = abmil_train(&train, &[], &small_config()).unwrap();
    for _ in 0..100 {
        let n = r.random_range(1..20);
        let mut inst: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut r, 5)).collect();
        let (p, att) = abmil_predict(&params, &bag(inst.clone(), 0)).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert!(att.iter().all(|&a| a >= 0.0));
        assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        inst.shuffle(&mut r);
        let (q, _) = abmil_predict(&params, &bag(inst, 0)).unwrap();
        assert!((p - q).abs() < 1e-6);
    }
}

#[test]
fn abmil_learns_a_shifted_instance_signal() {
    let mut r = rng(2);
    let train = shifted_bags(&mut r, 30, 12, 16);
    let val = shifted_bags(&mut r, 8, 12, 16);
    let test = shifted_bags(&mut r, 40, 12, 16);
    let params = abmil_train(&train, &val, &AbmilConfig::default()).unwrap();
    let correct = test
        .iter()
        .filter(|b| u8::from(abmil_predict(&params, b).unwrap().0 >= 0.5) == b.label)
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.9, "accuracy {acc}");
    // positive bags concentrate attention on the shifted instances
    let pos = test.iter().find(|b| b.label == 1).unwrap();
    let (_, att) = abmil_predict(&params, pos).unwrap();
    let shifted: f64 = att[..4].iter().sum();
    assert!(shifted > 4.0 / 12.0, "attention on signal {shifted}");
}

#[test]
fn abmil_refuses_single_class_training() {
    let mut r = rng(3);
    let bags: Vec<Bag> = (0..4).map(|_| bag(vec![random_vec(&mut r, 4)], 1)).collect();
    assert!(matches!(abmil_train(&bags, &[], &small_config()), Err(Error::Training(_))));
}

fn blobs(r: &mut ChaCha8Rng, centers: &[f64], per: usize, sd: f64) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, sd).unwrap();
    centers
        .iter()
        .flat_map(|&c| (0..per).map(move |_| c).collect::<Vec<_>>())
        .map(|c| vec![c + noise.sample(r)])
        .collect()
}

#[test]
fn gmm_separates_two_blobs_by_sign() {
    let mut r = rng(4);
    let x = blobs(&mut r, &[-5.0, 5.0], 100, 1.0);
    let model = gmm_fit(&x, &GmmConfig::new(2, 0)).unwrap();
    let (labels, resp) = gmm_assign(&model, &x).unwrap();
    let neg_label = labels[0];
    for (v, l) in x.iter().zip(&labels) {
        assert_eq!(v[0] < 0.0, *l == neg_label, "point {}", v[0]);
    }
    for row in &resp {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }
    assert!((model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-8);
}

#[test]
fn gmm_one_component_per_point() {
    let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 3.0, (i * i) as f64]).collect();
    let model = gmm_fit(&x, &GmmConfig::new(6, 1)).unwrap();
    assert!(model.log_likelihood.iter().all(|l| l.is_finite()));
    let (labels, _) = gmm_assign(&model, &x).unwrap();
    let mut seen = labels.clone();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 6);
    assert!(model.variances.iter().flatten().all(|&v| v >= VARIANCE_FLOOR));
}

#[test]
fn gmm_reseeds_a_collapsed_component_once() {
    let mut r = rng(5);
    let x = blobs(&mut r, &[-3.0, 3.0], 50, 0.5);
    let start = |far: usize| ClusterModel {
        weights: vec![1.0 / 3.0; 3],
        means: (0..3)
            .map(|c| vec![if c < far { 1e6 * (c + 1) as f64 } else { [-1.0, 1.0, 0.0][c] }])
            .collect(),
        variances: vec![vec![1.0]; 3],
        log_likelihood: Vec::new(),
    };
    let cfg = GmmConfig::new(3, 0);
    let fitted = gmm_refine(start(1), &x, &cfg).unwrap();
    assert!(fitted.weights.iter().all(|&w| w > DEGENERATE_WEIGHT));
    assert!(fitted.means[0][0].abs() < 10.0);
    // two stranded components need two reseeds
    assert!(matches!(gmm_refine(start(2), &x, &cfg), Err(Error::Numeric(_))));
}

#[test]
fn gmm_rejects_too_few_points() {
    let x = vec![vec![0.0], vec![1.0]];
    assert!(gmm_fit(&x, &GmmConfig::new(3, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn em_log_likelihood_never_decreases(seed in any::<u64>(), k in 1usize..5, d in 1usize..4) {
        let mut r = rng(seed);
        let centers: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut r, d).iter().map(|v| v * 6.0).collect()).collect();
        let x: Vec<Vec<f64>> = (0..60)
            .map(|i| centers[i % 3].iter().map(|c| c + r.random_range(-1.0..1.0)).collect())
            .collect();
        let model = gmm_fit(&x, &GmmConfig::new(k, seed)).unwrap();
        for w in model.log_likelihood.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
        let (_, resp) = gmm_assign(&model, &x).unwrap();
        for row in resp {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn hungarian_matches_exhaustive_search(seed in any::<u64>(), n in 1usize..=6) {
        let mut r = rng(seed);
        let w: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut r, n)).collect();
        let perm = hungarian_max(&w);
        let score = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| w[i][j]).sum::<f64>();
        let mut best = f64::NEG_INFINITY;
        let mut p: Vec<usize> = (0..n).collect();
        permutations(&mut p, 0, &mut |q| best = best.max(score(q)));
        let mut sorted = perm.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert!((score(&perm) - best).abs() < 1e-12);
    }

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>(), p in 2usize..20) {
        let mut r = rng(seed);
        let recs = paired_records(&mut r, p, 6, 0.8);
        let ks: Vec<usize> = (1..=p + 1).collect();
        let rec = cross_modal_recall(&recs, &ks).unwrap();
        for w in rec.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        prop_assert!((rec[p - 1] - 1.0).abs() < 1e-12);
    }
}

fn permutations(p: &mut Vec<usize>, at: usize, visit: &mut dyn FnMut(&[usize])) {
    if at == p.len() {
        visit(p);
        return;
    }
    for i in at..p.len() {
        p.swap(at, i);
        permutations(p, at + 1, visit);
        p.swap(at, i);
    }
}

#[test]
fn medoid_of_collinear_points() {
    let pts: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![10.0]];
    let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
    assert_eq!(greedy_medoids(&refs, 1), vec![1]);
    assert_eq!(greedy_medoids(&refs[..1], 1), vec![0]);
    assert_eq!(greedy_medoids(&refs, 5), vec![0, 1, 2]);
}

#[test]
fn first_medoid_matches_exhaustive_search() {
    let mut r = rng(6);
    let x: Vec<Vec<f64>> = (0..120).map(|i| {
        let c = [(-4.0, 0.0), (4.0, 1.0), (0.0, 6.0)][i % 3];
        vec![c.0 + r.random_range(-1.5..1.5), c.1 + r.random_range(-1.5..1.5)]
    }).collect();
    let ids: Vec<String> = (0..x.len()).map(|i| format!("p{i:03}")).collect();
    let model = gmm_fit(&x, &GmmConfig::new(3, 2)).unwrap();
    let (labels, _) = gmm_assign(&model, &x).unwrap();
    let protos = kmedoids_prototypes(&model, &x, &ids, 3).unwrap();
    for (c, medoids) in protos.iter().enumerate() {
        let members: Vec<usize> = (0..x.len()).filter(|&i| labels[i] == c).collect();
        assert!(members.len() <= 50);
        let cost = |m: usize| -> f64 {
            members.iter().map(|&i| ((x[i][0] - x[m][0]).powi(2) + (x[i][1] - x[m][1]).powi(2)).sqrt()).sum()
        };
        let best = *members.iter().min_by(|&&a, &&b| cost(a).total_cmp(&cost(b))).unwrap();
        assert_eq!(medoids[0], ids[best]);
        assert_eq!(medoids.len(), 3.min(members.len()));
        for m in medoids {
            let idx = ids.iter().position(|i| i == m).unwrap();
            assert_eq!(labels[idx], c, "medoid outside its cluster");
        }
    }
}

fn model_with_means(means: Vec<Vec<f64>>) -> ClusterModel {
    let k = means.len();
    let d = means[0].len();
    ClusterModel {
        weights: vec![1.0 / k as f64; k],
        means,
        variances: vec![vec![1.0; d]; k],
        log_likelihood: Vec::new(),
    }
}

#[test]
fn matching_identical_and_permuted_models() {
    let mut r = rng(7);
    let means: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut r, 5)).collect();
    let a = model_with_means(means.clone());
    let m = match_clusters(&a, &a).unwrap();
    assert_eq!(m.perm, (0..6).collect::<Vec<_>>());
    assert!((m.mean_cosine - 1.0).abs() < 1e-12);

    let shuffle = [3usize, 0, 5, 1, 4, 2];
    let b = model_with_means(shuffle.iter().map(|&i| means[i].clone()).collect());
    let m = match_clusters(&a, &b).unwrap();
    for (i, &j) in m.perm.iter().enumerate() {
        assert_eq!(shuffle[j], i);
    }
    let he_labels = vec![0, 1, 2, 3];
    let sim_labels: Vec<usize> = he_labels.iter().map(|&h| m.perm[h]).collect();
    assert_eq!(m.agreement(&he_labels, &sim_labels).unwrap(), 1.0);
}

fn record(slide: usize, patch: usize, modality: Modality, vector: Vec<f64>) -> EmbeddingRecord {
    EmbeddingRecord {
        slide_id: format!("slide_{slide:03}"),
        patch_id: format!("patch_{patch:03}"),
        modality,
        class: MorphologyClass::SparseStroma,
        bag_label: (slide % 2) as u8,
        vector,
    }
}

/// `p` pairs; the SIM vector is the H&E vector plus noise of size `noise`.
fn paired_records(r: &mut ChaCha8Rng, p: usize, d: usize, noise: f64) -> Vec<EmbeddingRecord> {
    let mut out = Vec::new();
    for i in 0..p {
        let he = random_vec(r, d);
        let sim: Vec<f64> = he.iter().map(|v| v + noise * r.random_range(-1.0..1.0)).collect();
        out.push(record(i / 10, i % 10, Modality::He, he));
        out.push(record(i / 10, i % 10, Modality::Sim, sim));
    }
    out
}

#[test]
fn merged_embeddings_align_perfectly() {
    let mut r = rng(8);
    let recs = paired_records(&mut r, 60, 8, 0.0);
    let rec = cross_modal_recall(&recs, &[1, 5]).unwrap();
    assert_eq!(rec, vec![1.0, 1.0]);
    for seed in 0..5 {
        let acc = domain_probe_accuracy(&recs, seed).unwrap();
        assert!((0.4..=0.6).contains(&acc), "seed {seed}: probe {acc}");
    }
}

#[test]
fn duplicate_candidates_break_ties_by_id() {
    // every SIM vector is identical, so each query ties across all candidates
    let mut recs = Vec::new();
    for i in 0..4 {
        recs.push(record(0, i, Modality::He, vec![1.0, i as f64]));
        recs.push(record(0, i, Modality::Sim, vec![1.0, 0.0]));
    }
    let rec = cross_modal_recall(&recs, &[1]).unwrap();
    // he→sim: only patch_000 ranks first; sim→he: patch_000's partner is the closest
    assert!((rec[0] - 2.0 / 8.0).abs() < 1e-12, "{}", rec[0]);
}

#[test]
fn random_embeddings_retrieve_at_chance() {
    let p = 50;
    let mut total = 0.0;
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let mut recs = Vec::new();
        for i in 0..p {
            recs.push(record(i / 10, i % 10, Modality::He, random_vec(&mut r, 16)));
            recs.push(record(i / 10, i % 10, Modality::Sim, random_vec(&mut r, 16)));
        }
        total += cross_modal_recall(&recs, &[1]).unwrap()[0];
    }
    let mean = total / 10.0;
    assert!(mean < 4.0 / p as f64, "mean recall@1 {mean}");
}

#[test]
fn separated_modalities_are_probed_and_silhouetted() {
    let mut r = rng(9);
    let mut recs = paired_records(&mut r, 40, 6, 0.1);
    for rec in recs.iter_mut().filter(|r| r.modality == Modality::Sim) {
        rec.vector[0] += 10.0;
    }
    let m = alignment_metrics(&recs, 0).unwrap();
    assert!(m.domain_probe_acc > 0.99);
    assert!(m.silhouette_by_modality > 0.5);
    assert!((0.0..=1.0).contains(&m.recall_at_1));
}

#[test]
fn recall_needs_pairs() {
    let recs = vec![record(0, 0, Modality::He, vec![1.0]), record(0, 1, Modality::He, vec![2.0])];
    assert!(matches!(cross_modal_recall(&recs, &[1]), Err(Error::Input(_))));
}

#[test]
fn pca_rotates_planar_input() {
    let mut r = rng(10);
    let x: Vec<Vec<f64>> = (0..50).map(|_| vec![r.random_range(-3.0..3.0), r.random_range(-0.5..0.5)]).collect();
    let y = project_2d(&x, ProjectionMethod::Pca, 0).unwrap();
    assert_eq!(y.len(), x.len());
    let dist = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    for i in 0..x.len() {
        for j in 0..x.len() {
            assert!((dist(&x[i], &x[j]) - dist(&y[i], &y[j])).abs() < 1e-9);
        }
    }
    let var = |k: usize| y.iter().map(|p| p[k] * p[k]).sum::<f64>();
    assert!(var(0) >= var(1));
}

#[test]
fn pca_reconstruction_error_is_the_discarded_variance() {
    let mut r = rng(11);
    let d = 6;
    let x: Vec<Vec<f64>> = (0..80)
        .map(|_| (0..d).map(|j| r.random_range(-1.0..1.0) * (d - j) as f64).collect())
        .collect();
    let n = x.len() as f64;
    let pca = Pca::fit(&x).unwrap();
    let mut err = 0.0;
    for v in &x {
        let t = pca.transform(v, 2);
        for j in 0..d {
            let back = pca.mean[j] + t[0] * pca.components[0][j] + t[1] * pca.components[1][j];
            err += (v[j] - back).powi(2) / n;
        }
    }
    // eigenvalues from an independent Jacobi sweep over the covariance
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|v| v[j]).sum::<f64>() / n).collect();
    let mut c = vec![vec![0.0; d]; d];
    for v in &x {
        for a in 0..d {
            for b in 0..d {
                c[a][b] += (v[a] - mean[a]) * (v[b] - mean[b]) / n;
            }
        }
    }
    let total: f64 = (0..d).map(|a| c[a][a]).sum();
    let mut eig = jacobi_eigenvalues(c);
    eig.sort_by(|a, b| b.total_cmp(a));
    assert!((err - (total - eig[0] - eig[1])).abs() < 1e-9, "{err} vs {}", total - eig[0] - eig[1]);
}

fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-15 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let (c, s) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

#[test]
fn neighbor_embedding_is_seeded_and_keeps_blobs_apart() {
    let mut r = rng(12);
    let x: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            let c = if i < 20 { 0.0 } else { 20.0 };
            (0..5).map(|_| c + r.random_range(-1.0..1.0)).collect()
        })
        .collect();
    let a = project_2d(&x, ProjectionMethod::NeighborEmbedding, 3).unwrap();
    let b = project_2d(&x, ProjectionMethod::NeighborEmbedding, 3).unwrap();
    assert_eq!(a, b);
    let centroid = |s: &[[f64; 2]]| {
        let n = s.len() as f64;
        [s.iter().map(|p| p[0]).sum::<f64>() / n, s.iter().map(|p| p[1]).sum::<f64>() / n]
    };
    let (c0, c1) = (centroid(&a[..20]), centroid(&a[20..]));
    let gap = ((c0[0] - c1[0]).powi(2) + (c0[1] - c1[1]).powi(2)).sqrt();
    let spread = a[..20].iter().map(|p| ((p[0] - c0[0]).powi(2) + (p[1] - c0[1]).powi(2)).sqrt()).fold(0.0, f64::max);
    assert!(gap > spread, "gap {gap} spread {spread}");
}

#[test]
fn projection_needs_three_points() {
    assert!(project_2d(&[vec![0.0], vec![1.0]], ProjectionMethod::Pca, 0).is_err());
}

#[test]
fn auc_cases() {
    assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]), Some(1.0));
    assert_eq!(roc_auc(&[0.1, 0.2, 0.9, 0.8], &[1, 1, 0, 0]), Some(0.0));
    assert_eq!(roc_auc(&[0.5, 0.5], &[1, 0]), Some(0.5));
    assert_eq!(roc_auc(&[0.3], &[1]), None);
}

#[test]
fn slide_splits_are_stratified_and_disjoint() {
    let labels = [1, 0, 1, 0, 0, 1, 1, 0, 0, 1];
    for seed in 0..20 {
        let s = split_slides(&labels, seed).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for part in [&s.test, &s.val] {
            assert_eq!(part.iter().filter(|&&i| labels[i] == 1).count(), 1);
        }
    }
    assert!(split_slides(&[0, 1], 0).is_err());
}
