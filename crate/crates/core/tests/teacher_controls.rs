//! Teacher construction: session ingestion, neural averaging, random and
//! shuffled controls.

use brainteacher::rsm::{compute_rsm, ResponseMatrix, Rsm};
use brainteacher::teacher::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img{i}")).collect()
}

fn session(id: &str, stim: &[String], d: usize, values: Vec<f64>) -> SessionRecording {
    SessionRecording {
        session_id: id.into(),
        responses: ResponseMatrix::new(stim.to_vec(), d, values).unwrap(),
    }
}

/// Ten sessions of 39 neurons with known rates, generated in the test.
fn fixture_sessions(stimuli: usize) -> Vec<SessionRecording> {
    let stim = ids(stimuli);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..10)
        .map(|s| {
            let v = (0..stimuli * 39).map(|_| rng.random_range(0.0..3.0)).collect();
            session(&format!("sess{s:02}"), &stim, 39, v)
        })
        .collect()
}

#[test]
fn loads_ten_sessions_in_filename_order() {
    let dir = tempfile::tempdir().unwrap();
    let sessions = fixture_sessions(100);
    for (i, s) in sessions.iter().enumerate().rev() {
        write_session(s, &dir.path().join(format!("s{i:02}.txt"))).unwrap();
    }
    let loaded = load_sessions(dir.path()).unwrap();
    assert_eq!(loaded.len(), 10);
    assert!(loaded.iter().all(|s| s.responses.stimulus_ids() == ids(100)));
    assert_eq!(loaded[3].session_id, "sess03");
    let orig = &sessions[3].responses;
    assert!(loaded[3].responses.values().iter().zip(orig.values()).all(|(a, b)| a == b));
}

#[test]
fn empty_dir_and_mismatched_session_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_sessions(dir.path()).is_err());
    let a = session("alpha", &ids(3), 1, vec![1.0, 2.0, 3.0]);
    let b = session("beta", &["img0".into(), "img2".into(), "img1".into()], 1, vec![1.0, 2.0, 3.0]);
    write_session(&a, &dir.path().join("a.txt")).unwrap();
    write_session(&b, &dir.path().join("b.txt")).unwrap();
    let err = load_sessions(dir.path()).unwrap_err();
    assert!(err.to_string().contains("beta"), "{err}");
}

#[test]
fn negative_rate_is_rejected() {
    let text = "s1, 1, 2\na, b\n1.0, -0.5\n";
    let err = parse_session(text, std::path::Path::new("s1.txt")).unwrap_err();
    assert!(err.to_string().contains("-0.5"), "{err}");
}

#[test]
fn neural_teacher_examples() {
    let one = fixture_sessions(6).remove(0);
    assert_eq!(build_neural_teacher(std::slice::from_ref(&one)).unwrap(), compute_rsm(&one.responses));

    // Two stimuli: orthogonal rows in one session, identical rows in the other.
    let st = ids(2);
    let orth = session("a", &st, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let same = session("b", &st, 2, vec![2.0, 1.0, 2.0, 1.0]);
    let t = build_neural_teacher(&[orth, same]).unwrap();
    assert!((t.get(0, 1) - 0.5).abs() < 1e-15);
}

#[test]
fn neural_teacher_matches_per_session_average_and_ignores_order() {
    let sessions = fixture_sessions(12);
    let t = build_neural_teacher(&sessions).unwrap();
    // Oracle: cosine per session by explicit loops, then the mean.
    let m = 12;
    let mut acc = vec![0.0; m * m];
    for s in &sessions {
        let r = &s.responses;
        for i in 0..m {
            for j in 0..m {
                let (a, b) = (r.row(i), r.row(j));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                acc[i * m + j] += dot / (na * nb) / 10.0;
            }
        }
    }
    for (a, b) in t.values().iter().zip(&acc) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut rev = sessions.clone();
    rev.reverse();
    let t2 = build_neural_teacher(&rev).unwrap();
    for (a, b) in t.values().iter().zip(t2.values()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Monte-Carlo oracle of E[cos(u, v)] for i.i.d. N(μ, σ²) vectors, drawn
/// with Box–Muller from a different generator than the teacher uses.
fn monte_carlo_cosine(mu: f64, sigma: f64, units: usize, pairs: usize) -> f64 {
    let mut rng = rand::rngs::StdRng::seed_from_u64(2024);
    let mut normal = || {
        let (u1, u2): (f64, f64) = (rng.random_range(f64::EPSILON..1.0), rng.random());
        mu + sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let mut total = 0.0;
    for _ in 0..pairs {
        let u: Vec<f64> = (0..units).map(|_| normal()).collect();
        let v: Vec<f64> = (0..units).map(|_| normal()).collect();
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        total += dot / (nu * nv);
    }
    total / pairs as f64
}

#[test]
fn random_teacher_concentrates_at_the_oracle() {
    let t = generate_random_teacher(&ids(200), 39, 5.0, 0.582, 1).unwrap();
    let oracle = monte_carlo_cosine(5.0, 0.582, 39, 20_000);
    assert!((t.off_diagonal_mean() - oracle).abs() < 0.01);
    assert!((t.off_diagonal_mean() - 25.0 / (25.0 + 0.582f64.powi(2))).abs() < 0.01);
    let z = generate_random_teacher(&ids(200), 39, 0.0, 1.0, 1).unwrap();
    assert!(z.off_diagonal_mean().abs() < 0.05);
    assert_eq!(t, generate_random_teacher(&ids(200), 39, 5.0, 0.582, 1).unwrap());
    assert_ne!(t, generate_random_teacher(&ids(200), 39, 5.0, 0.582, 2).unwrap());
    assert!(generate_random_teacher(&ids(1), 39, 5.0, 0.582, 1).is_err());
    assert!(generate_random_teacher(&ids(5), 39, 5.0, 0.0, 1).is_err());
}

fn sorted_neurons(s: &SessionRecording) -> Vec<Vec<u64>> {
    (0..s.num_neurons())
        .map(|n| {
            let mut v: Vec<u64> = s.neuron(n).iter().map(|x| x.to_bits()).collect();
            v.sort_unstable();
            v
        })
        .collect()
}

proptest! {
    #[test]
    fn shuffling_preserves_every_neurons_multiset(seed in 0u64..10_000) {
        let sessions = fixture_sessions(15);
        let shuffled = shuffle_sessions(&sessions, seed).unwrap();
        for (a, b) in sessions.iter().zip(&shuffled) {
            prop_assert_eq!(sorted_neurons(a), sorted_neurons(b));
            prop_assert_eq!(a.responses.stimulus_ids(), b.responses.stimulus_ids());
        }
        let rsm = build_shuffled_teacher(&sessions, seed).unwrap();
        for i in 0..15 {
            prop_assert_eq!(rsm.get(i, i), 1.0);
        }
    }
}

#[test]
fn shuffled_examples() {
    let st = ids(4);
    let constant = session("c", &st, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    assert_eq!(
        build_shuffled_teacher(std::slice::from_ref(&constant), 5).unwrap(),
        build_neural_teacher(std::slice::from_ref(&constant)).unwrap()
    );

    // One neuron over three stimuli: every positive scalar pair has cosine 1.
    let one = session("n", &ids(3), 1, vec![0.5, 2.0, 7.0]);
    let t = build_shuffled_teacher(std::slice::from_ref(&one), 11).unwrap();
    assert!(t.values().iter().all(|&v| v == 1.0));

    // Two neurons over three stimuli with a fixed seed: the permuted session is
    // observable, so the expected matrix follows by hand from its rows.
    let two = session("p", &ids(3), 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let shuffled = shuffle_sessions(std::slice::from_ref(&two), 11).unwrap().remove(0);
    let rows: Vec<[f64; 2]> = (0..3).map(|i| [shuffled.responses.get(i, 0), shuffled.responses.get(i, 1)]).collect();
    let t = build_shuffled_teacher(std::slice::from_ref(&two), 11).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = (rows[i], rows[j]);
            let expected = (a[0] * b[0] + a[1] * b[1]) / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt());
            assert!((t.get(i, j) - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn teacher_spec_parsing_and_validation() {
    let spec: TeacherSpec = "kind=random_v1_stats,sigma=0.582,seed=4,tag=V4".parse().unwrap();
    assert_eq!(spec.kind, TeacherKind::RandomV1Stats);
    assert_eq!(spec.mu(), 0.495);
    assert_eq!(spec.attach_tag.as_deref(), Some("V4"));
    let net = brainteacher::nn::NetworkSpec::cornet_z_mini(10, [3, 32, 32]);
    spec.validate(&net).unwrap();
    assert!("kind=random,sigma=0".parse::<TeacherSpec>().unwrap().validate(&net).is_err());
    assert!("kind=neural".parse::<TeacherSpec>().unwrap().validate(&net).is_err());
    assert!("kind=random,tag=V9".parse::<TeacherSpec>().unwrap().validate(&net).is_err());
    assert!("mu=3".parse::<TeacherSpec>().is_err());
    assert!("kind=random,colour=blue".parse::<TeacherSpec>().is_err());
    let none: Option<Rsm> = TeacherSpec::of_kind(TeacherKind::None).build(&ids(3)).unwrap();
    assert!(none.is_none());
}

#[test]
fn synthetic_sessions_look_like_recordings() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images: Vec<Vec<f32>> = (0..20).map(|_| (0..3 * 16 * 16).map(|_| rng.random::<f32>()).collect()).collect();
    let sessions = synthesize_sessions(&images, &ids(20), (16, 16), 10, 3).unwrap();
    assert_eq!(sessions.len(), 10);
    for s in &sessions {
        assert!((35..=43).contains(&s.num_neurons()));
        let mean = s.responses.values().iter().sum::<f64>() / s.responses.values().len() as f64;
        assert!((mean - V1_MU).abs() < 1e-9);
        assert!(s.responses.values().iter().all(|&v| v >= 0.0));
    }
    build_neural_teacher(&sessions).unwrap();
}
