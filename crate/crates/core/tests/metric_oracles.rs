mod common;

use common::*;
use ribosphere::metrics::{self, tm_d0};
use ribosphere::structure::parse_sequence;
use ribosphere_tensor::rng::{seeded, uniform};

const INSTANCES: usize = 50;

#[test]
fn horn_agrees_with_its_own_rmsd() {
    let mut rng = seeded(1);
    for _ in 0..20 {
        let a = random_points(7, 10.0, &mut rng);
        let r = random_rotation(&mut rng);
        let b = moved(&r, [3.0, -1.0, 2.0], &a);
        assert!(oracle_rmsd(&a, &b) < 1e-10);
    }
}

#[test]
fn rmsd_matches_quaternion_oracle() {
    let mut rng = seeded(2);
    for k in 0..INSTANCES {
        let n = 3 + k % 8;
        let a = random_points(n, 10.0, &mut rng);
        let b = jitter(&moved(&random_rotation(&mut rng), [1.0, 2.0, 3.0], &a), 1.0, &mut rng);
        let ours = metrics::rmsd(&a, &b, true).unwrap();
        assert!((ours - oracle_rmsd(&a, &b)).abs() < 1e-9, "instance {k}");
        let raw = metrics::rmsd(&a, &b, false).unwrap();
        assert!((raw - raw_rmsd(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn kabsch_recovers_planted_transforms() {
    let mut rng = seeded(3);
    for _ in 0..INSTANCES {
        let a = random_points(8, 20.0, &mut rng);
        let r = random_rotation(&mut rng);
        let t = [uniform(&mut rng) * 50.0, -20.0, 7.5];
        let b = moved(&r, t, &a);
        let al = metrics::kabsch_align(&a, &b).unwrap();
        let moved_a = al.apply_all(&a);
        assert!(raw_rmsd(&moved_a, &b) < 1e-8);
        let rt = al.rotation.transpose() * al.rotation;
        assert!((rt - nalgebra::Matrix3::identity()).norm() < 1e-10);
        assert!((al.rotation.determinant() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn mirror_image_cannot_be_superposed() {
    let mut rng = seeded(4);
    let a = random_points(6, 10.0, &mut rng);
    let b: Vec<_> = a.iter().map(|p| [-p[0], p[1], p[2]]).collect();
    let al = metrics::kabsch_align(&a, &b).unwrap();
    assert!((al.rotation.determinant() - 1.0).abs() < 1e-10);
    let ours = metrics::rmsd(&a, &b, true).unwrap();
    // Coarse search over proper rotations: none reaches zero, and none beats
    // the fitted one.
    let (ca, cb) = (centroid(&a), centroid(&b));
    let mut grid_best = f64::INFINITY;
    let steps = 24;
    for i in 0..steps {
        for j in 0..steps {
            for k in 0..steps {
                let q = [i, j, k].map(|v| -1.0 + 2.0 * v as f64 / (steps - 1) as f64);
                let w2 = 1.0 - q.iter().map(|x| x * x).sum::<f64>();
                if w2 < 0.0 {
                    continue;
                }
                let r = quat([w2.sqrt(), q[0], q[1], q[2]]);
                let moved_a: Vec<_> = a.iter().map(|p| {
                    let x = rot(&r, [p[0] - ca[0], p[1] - ca[1], p[2] - ca[2]]);
                    [x[0] + cb[0], x[1] + cb[1], x[2] + cb[2]]
                }).collect();
                grid_best = grid_best.min(raw_rmsd(&moved_a, &b));
            }
        }
    }
    assert!(grid_best > 0.1, "a proper rotation superposes a mirror image: {grid_best}");
    assert!(ours > 0.1);
    assert!(ours <= grid_best + 1e-9);
}

fn centroid(p: &[ribosphere::geometry::Point]) -> ribosphere::geometry::Point {
    ribosphere::geometry::centroid(p)
}

fn quat(q: [f64; 4]) -> M3 {
    let [q0, q1, q2, q3] = q;
    [
        [q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3, 2.0 * (q1 * q2 - q0 * q3), 2.0 * (q1 * q3 + q0 * q2)],
        [2.0 * (q1 * q2 + q0 * q3), q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3, 2.0 * (q2 * q3 - q0 * q1)],
        [2.0 * (q1 * q3 - q0 * q2), 2.0 * (q2 * q3 + q0 * q1), q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3],
    ]
}

#[test]
fn tm_score_matches_fragment_oracle() {
    let mut rng = seeded(5);
    for k in 0..INSTANCES {
        let n = 3 + k % 8;
        let r = random_points(n, 8.0, &mut rng);
        let p = jitter(&moved(&random_rotation(&mut rng), [0.5, 0.0, -4.0], &r), 0.2 + 0.1 * (k % 5) as f64, &mut rng);
        let ours = metrics::tm_score_points(&p, &r).unwrap();
        assert!((ours - oracle_tm(&p, &r)).abs() < 1e-9, "instance {k}: {ours} vs {}", oracle_tm(&p, &r));
        assert!(ours + 1e-12 >= oracle_tm_full_fit(&p, &r));
        assert!(ours > 0.0 && ours <= 1.0);
    }
}

#[test]
fn d0_values() {
    assert_eq!(tm_d0(42), 1.92);
    assert!((tm_d0(42) - oracle_d0(42)).abs() < 1e-15);
    assert!((tm_d0(100) - oracle_d0(100)).abs() < 1e-14);
    assert_eq!(tm_d0(10), 0.5);
    assert!((tm_d0(18) - oracle_d0(18)).abs() < 1e-15);
}

#[test]
fn lddt_matches_pair_enumeration() {
    let mut rng = seeded(6);
    for k in 0..INSTANCES {
        let l = 2 + k % 9;
        let atoms = 2;
        let r = random_points(l * atoms, 12.0, &mut rng);
        let p = jitter(&r, 0.3 + 0.4 * (k % 4) as f64, &mut rng);
        let res: Vec<usize> = (0..l * atoms).map(|i| i / atoms).collect();
        let ours = metrics::lddt_points(&p, &r, &res).unwrap();
        assert!((ours - oracle_lddt(&p, &r, &res)).abs() < 1e-9, "instance {k}");
    }
}

#[test]
fn diversity_matches_direct_correlation() {
    let mut rng = seeded(7);
    let fixed = ["AAAAA".to_string(), "AAAAC".to_string()];
    let seqs: Vec<_> = fixed.iter().map(|s| parse_sequence(s).unwrap()).collect();
    let ours = metrics::diversity_3mer(&seqs).unwrap();
    assert!((ours - oracle_diversity(&fixed)).abs() < 1e-12);
    for k in 0..INSTANCES {
        let n = 2 + k % 4;
        let strs: Vec<String> = (0..n).map(|_| random_bases(3 + (k % 8), &mut rng)).collect();
        let seqs: Vec<_> = strs.iter().map(|s| parse_sequence(s).unwrap()).collect();
        let ours = metrics::diversity_3mer(&seqs).unwrap();
        assert!((ours - oracle_diversity(&strs)).abs() < 1e-12, "instance {k}: {strs:?}");
    }
}

#[test]
fn auroc_matches_pair_counting() {
    let mut rng = seeded(8);
    for k in 0..INSTANCES {
        let n = 2 + k % 9;
        let mut labels: Vec<bool> = (0..n).map(|_| uniform(&mut rng) < 0.5).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse grid so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| (uniform(&mut rng) * 4.0).floor() / 4.0).collect();
        let ours = metrics::auroc(&scores, &labels).unwrap();
        assert!((ours - oracle_auroc(&scores, &labels)).abs() < 1e-12, "instance {k}");
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        assert_eq!(ours + metrics::auroc(&scores, &flipped).unwrap(), 1.0);
    }
    let v = metrics::auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    assert_eq!(v, 0.75);
}

#[test]
fn metrics_invariant_under_joint_rigid_motion() {
    let mut rng = seeded(9);
    let r = random_points(10, 10.0, &mut rng);
    let p = jitter(&r, 0.7, &mut rng);
    let rot_m = random_rotation(&mut rng);
    let (r2, p2) = (moved(&rot_m, [5.0, 1.0, 0.0], &r), moved(&rot_m, [5.0, 1.0, 0.0], &p));
    let res: Vec<usize> = (0..10).collect();
    assert!((metrics::rmsd(&p, &r, true).unwrap() - metrics::rmsd(&p2, &r2, true).unwrap()).abs() < 1e-9);
    assert!((metrics::tm_score_points(&p, &r).unwrap() - metrics::tm_score_points(&p2, &r2).unwrap()).abs() < 1e-9);
    assert!((metrics::lddt_points(&p, &r, &res).unwrap() - metrics::lddt_points(&p2, &r2, &res).unwrap()).abs() < 1e-12);
    assert!((metrics::rmsd(&p, &r, true).unwrap() - metrics::rmsd(&r, &p, true).unwrap()).abs() < 1e-9);
}

#[test]
fn tm_score_falls_with_noise() {
    let r = random_points(30, 30.0, &mut seeded(10));
    let mut means = Vec::new();
    for sigma in [0.5, 1.0, 2.0, 4.0] {
        let m: f64 = (0..20)
            .map(|s| metrics::tm_score_points(&jitter(&r, sigma, &mut seeded(100 + s)), &r).unwrap())
            .sum::<f64>()
            / 20.0;
        means.push(m);
    }
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
}
