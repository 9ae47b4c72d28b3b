use super::*;
use crate::corpus::{oracle_sing, OracleConfig};
use crate::score::{parse_score, PhonemeLexicon};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn features(mgc: Vec<f64>, bap: Vec<f64>, logf0: Vec<f64>, vuv: Vec<f64>) -> AcousticFeatureSequence {
    AcousticFeatureSequence::new(mgc, bap, logf0, vuv).unwrap()
}

fn random_features(rng: &mut ChaCha8Rng, t: usize) -> AcousticFeatureSequence {
    let vuv = (0..t).map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let logf0 = vuv.iter().map(|&v| if v == 1.0 { rng.gen_range(5.0..6.5) } else { 0.0 }).collect();
    features(random(rng, t * MGC_DIM, -1.0, 1.0), random(rng, t * BAP_DIM, -60.0, 0.0), logf0, vuv)
}

#[test]
fn rmse_corr_examples() {
    let x = [1.0, 2.0, 3.0, 7.0];
    assert_eq!(rmse_corr(&x, &x).unwrap(), RmseCorr { rmse: 0.0, corr: Some(1.0) });
    let z = [-1.5, 0.5, 1.0];
    let neg: Vec<f64> = z.iter().map(|v| -v).collect();
    assert_eq!(rmse_corr(&neg, &z).unwrap().corr, Some(-1.0));
    let r = rmse_corr(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]).unwrap();
    assert!((r.rmse - (4.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert!((r.rmse - 1.1547).abs() < 1e-4);
    assert_eq!(rmse_corr(&[2.0, 2.0], &[1.0, 3.0]).unwrap().corr, None);
    assert!(matches!(rmse_corr(&[1.0], &[1.0, 2.0]), Err(MetricError::Length { .. })));
    assert!(matches!(rmse_corr(&[], &[]), Err(MetricError::Empty(_))));
}

#[test]
fn f0_metrics_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = random_features(&mut rng, 40);
    let same = f0_metrics(&gt, &gt).unwrap().unwrap();
    assert_eq!(same.rmse, 0.0);
    assert_eq!(same.corr, Some(1.0));

    let up = features(
        gt.mgc().to_vec(),
        gt.bap().to_vec(),
        gt.logf0().iter().zip(gt.vuv()).map(|(&l, &v)| if v == 1.0 { l + 2f64.ln() } else { l }).collect(),
        gt.vuv().to_vec(),
    );
    // RMSE between 2f and f is the RMS of f over voiced frames.
    let hz: Vec<f64> = gt.logf0().iter().zip(gt.vuv()).filter(|(_, &v)| v == 1.0).map(|(l, _)| l.exp()).collect();
    let want = (hz.iter().map(|f| f * f).sum::<f64>() / hz.len() as f64).sqrt();
    let got = f0_metrics(&up, &gt).unwrap().unwrap();
    assert!((got.rmse - want).abs() < 1e-9 * want);
    assert!((got.corr.unwrap() - 1.0).abs() < 1e-12);

    let a = features(vec![0.0; 2 * MGC_DIM], vec![0.0; 2 * BAP_DIM], vec![5.0, 0.0], vec![1.0, 0.0]);
    let b = features(vec![0.0; 2 * MGC_DIM], vec![0.0; 2 * BAP_DIM], vec![0.0, 5.0], vec![0.0, 1.0]);
    assert_eq!(f0_metrics(&a, &b).unwrap(), None);
}

fn naive_mcd(p: &[f64], g: &[f64]) -> f64 {
    let t = p.len() / MGC_DIM;
    let mut total = 0.0;
    for i in 0..t {
        let mut sq = 0.0;
        for d in 1..MGC_DIM {
            let diff = p[i * MGC_DIM + d] - g[i * MGC_DIM + d];
            sq += diff * diff;
        }
        total += 10.0 / 10f64.ln() * (2.0 * sq).sqrt();
    }
    total / t as f64
}

fn naive_bapd(p: &[f64], g: &[f64]) -> f64 {
    let t = p.len() / BAP_DIM;
    let mut sq = 0.0;
    for i in 0..t {
        for d in 0..BAP_DIM {
            let diff = p[i * BAP_DIM + d] - g[i * BAP_DIM + d];
            sq += diff * diff;
        }
    }
    (sq / (t * BAP_DIM) as f64).sqrt()
}

#[test]
fn mcd_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random(&mut rng, 9 * MGC_DIM, -1.0, 1.0);
    assert_eq!(mcd(&g, &g).unwrap(), 0.0);
    let mut one_db = g.clone();
    let mut energy_only = g.clone();
    for t in 0..9 {
        one_db[t * MGC_DIM + 1] += 10f64.ln() / (10.0 * 2f64.sqrt());
        energy_only[t * MGC_DIM] += 5.0;
    }
    assert!((mcd(&one_db, &g).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(mcd(&energy_only, &g).unwrap(), 0.0);
    let p = random(&mut rng, 9 * MGC_DIM, -1.0, 1.0);
    assert!((mcd(&p, &g).unwrap() - naive_mcd(&p, &g)).abs() < 1e-12);
    assert!(matches!(mcd(&p[1..], &g[1..]), Err(MetricError::Width { .. })));
    assert!(matches!(mcd(&p, &g[MGC_DIM..]), Err(MetricError::Length { .. })));
}

#[test]
fn bapd_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random(&mut rng, 11 * BAP_DIM, -60.0, 0.0);
    assert_eq!(bapd(&g, &g).unwrap(), 0.0);
    let shifted: Vec<f64> = g.iter().map(|v| v + 3.0).collect();
    assert!((bapd(&shifted, &g).unwrap() - 3.0).abs() < 1e-12);
    let p = random(&mut rng, 11 * BAP_DIM, -60.0, 0.0);
    assert!((bapd(&p, &g).unwrap() - naive_bapd(&p, &g)).abs() < 1e-12);
}

#[test]
fn vuv_error_examples() {
    assert_eq!(vuv_error(&[1.0, 0.0, 0.0, 1.0], &[1.0, 1.0, 0.0, 0.0]).unwrap(), 50.0);
    assert_eq!(vuv_error(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(vuv_error(&[1.0; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 50.0);
    // Predictions are probabilities thresholded at one half.
    assert_eq!(vuv_error(&[0.7, 0.2, 0.5, 0.49], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.0);
}

#[test]
fn gv_examples() {
    let constant = vec![0.3; 5 * MGC_DIM];
    assert!(gv(&[&constant]).unwrap().values.iter().all(|&v| v == 0.0));

    let alternating: Vec<f64> = (0..4).flat_map(|t| vec![if t % 2 == 0 { 0.0 } else { 2.0 }; MGC_DIM]).collect();
    let g = gv(&[&alternating]).unwrap();
    assert!(g.values.iter().all(|&v| v == 1.0));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (random(&mut rng, 6 * MGC_DIM, -1.0, 1.0), random(&mut rng, 3 * MGC_DIM, -2.0, 2.0));
    let (ga, gb) = (gv(&[&a]).unwrap(), gv(&[&b]).unwrap());
    let tiny = vec![1.0; MGC_DIM];
    let both = gv(&[&a, &tiny, &b]).unwrap();
    assert_eq!((both.utterances, both.skipped.clone()), (2, vec![1]));
    for c in 0..MGC_DIM {
        assert!((both.values[c] - (ga.values[c] + gb.values[c]) / 2.0).abs() < 1e-15);
    }
    let table = both.to_table();
    assert_eq!(table.lines().count(), MGC_DIM + 1);
    assert!(table.starts_with("coefficient\tgv\n0\t"));
    assert!(matches!(gv(&[&tiny]), Err(MetricError::Empty(_))));
}

#[test]
fn report_keys_round_trip_and_self_comparison() {
    assert_eq!(
        REPORT_KEYS,
        ["Dur RMSE", "Dur CORR", "F0 RMSE (Hz)", "F0 CORR", "MCD (dB)", "BAPD (dB)", "V/UV Error (%)"]
    );
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (random_features(&mut rng, 30), random_features(&mut rng, 12));
    let durations = [3usize, 9, 4, 14];
    let pairs = [
        EvalPair { name: "a", pred: &a, gt: &a, durations: Some((&durations, &durations)) },
        EvalPair { name: "b", pred: &b, gt: &b, durations: None },
    ];
    let report = evaluate(&pairs).unwrap();
    assert_eq!(report.values(), [Some(0.0), Some(1.0), Some(0.0), Some(1.0), Some(0.0), Some(0.0), Some(0.0)]);
    assert_eq!(report.utterances[1].dur_rmse, None);

    let text = report.to_text();
    let keys: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(keys, REPORT_KEYS);
    assert_eq!(EvalReport::from_text(&text).unwrap(), EvalReport { utterances: vec![], ..report.clone() });

    let table = report.utterance_table();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(2).unwrap().starts_with("b\t12\tundefined\tundefined\t0\t"));

    let noted = EvalReport { notes: vec!["aligned".into()], dur_corr: None, ..report };
    let text = noted.to_text();
    assert!(text.starts_with("# aligned\n") && text.contains("Dur CORR\tundefined\n"));
    assert_eq!(EvalReport::from_text(&text).unwrap(), EvalReport { utterances: vec![], ..noted });
    assert!(EvalReport::from_text("Dur RMSE\t1\n").is_err());
    assert!(EvalReport::from_text(&text.replace("MCD (dB)", "MCD")).is_err());
}

#[test]
fn corpus_figures_pool_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (ga, gb) = (random_features(&mut rng, 30), random_features(&mut rng, 10));
    let (pa, pb) = (random_features(&mut rng, 30), random_features(&mut rng, 10));
    let pairs = [
        EvalPair { name: "a", pred: &pa, gt: &ga, durations: None },
        EvalPair { name: "b", pred: &pb, gt: &gb, durations: None },
    ];
    let r = evaluate(&pairs).unwrap();
    let (ua, ub) = (&r.utterances[0], &r.utterances[1]);
    let mcd_pooled = (30.0 * ua.mcd_db.unwrap() + 10.0 * ub.mcd_db.unwrap()) / 40.0;
    assert!((r.mcd_db.unwrap() - mcd_pooled).abs() < 1e-12);
    let vuv_pooled = (30.0 * ua.vuv_error_pct.unwrap() + 10.0 * ub.vuv_error_pct.unwrap()) / 40.0;
    assert!((r.vuv_error_pct.unwrap() - vuv_pooled).abs() < 1e-12);
    assert_eq!(r.dur_rmse, None);

    let short = random_features(&mut rng, 9);
    let bad = [EvalPair { name: "c", pred: &short, gt: &ga, durations: None }];
    assert!(matches!(evaluate(&bad), Err(MetricError::Length { .. })));
    assert!(matches!(evaluate(&[]), Err(MetricError::Empty(_))));
}

#[test]
fn model_evaluation_covers_every_utterance() {
    let lex = PhonemeLexicon::builtin();
    let songs: Vec<_> = ["tempo 120\nla 60 1\nshi 62 0.5\n- 0 0.5\n", "tempo 150\nna 64 2\nna 65 1 ~\n"]
        .iter()
        .map(|s| oracle_sing(&parse_score(s).unwrap(), &lex, &OracleConfig::default()).unwrap())
        .collect();
    let refs: Vec<Reference<'_>> = songs
        .iter()
        .enumerate()
        .map(|(i, (t, f))| Reference { name: ["x", "y"][i], tokens: t, features: f })
        .collect();
    let model = AcousticModel::new(crate::model::ModelConfig::tiny(), 7).unwrap();
    let report = evaluate_model(&model, &refs).unwrap();
    assert_eq!(report.notes, vec![ALIGNMENT_NOTE.to_string()]);
    assert_eq!(report.utterances.len(), 2);
    assert_eq!(report.utterances[0].frames, songs[0].1.frames());
    assert!(report.dur_rmse.unwrap() > 0.0 && report.mcd_db.unwrap() > 0.0);
    let syl = syllable_duration_rmse(&model, &refs).unwrap();
    assert!(syl.is_finite() && syl > 0.0);
    let bare = songs[0].0.clone();
    let bare = PhonemeTokenSequence::new(
        bare.phoneme_ids().to_vec(),
        bare.pitch_ids().to_vec(),
        bare.note_frame_counts().to_vec(),
        bare.syllable_spans().to_vec(),
        None,
    )
    .unwrap();
    let missing = [Reference { name: "z", tokens: &bare, features: &songs[0].1 }];
    assert!(matches!(evaluate_model(&model, &missing), Err(MetricError::Report(_))));
}

fn pair_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| (prop::collection::vec(-50.0..50.0f64, n), prop::collection::vec(-50.0..50.0f64, n)))
}

proptest! {
    #[test]
    fn metrics_are_symmetric_and_bounded((x, y) in pair_strategy(), scale in 0.01..100.0f64) {
        let r = rmse_corr(&x, &y).unwrap();
        prop_assert_eq!(r.rmse, rmse_corr(&y, &x).unwrap().rmse);
        prop_assert!(r.rmse >= 0.0);
        if let Some(c) = r.corr {
            prop_assert!((-1.0..=1.0).contains(&c));
            let xs: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * scale).collect();
            prop_assert!((pearson(&xs, &ys).unwrap() - c).abs() < 1e-12);
        }
        let vx: Vec<f64> = x.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
        let vy: Vec<f64> = y.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
        let e = vuv_error(&vx, &vy).unwrap();
        prop_assert!((0.0..=100.0).contains(&e));
        prop_assert_eq!(e, vuv_error(&vy, &vx).unwrap());
    }

    #[test]
    fn mcd_and_bapd_match_naive_loops(seed in any::<u64>(), t in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, g) = (random(&mut rng, t * MGC_DIM, -3.0, 3.0), random(&mut rng, t * MGC_DIM, -3.0, 3.0));
        let m = mcd(&p, &g).unwrap();
        prop_assert!((m - naive_mcd(&p, &g)).abs() < 1e-12);
        prop_assert_eq!(m, mcd(&g, &p).unwrap());
        let (p, g) = (random(&mut rng, t * BAP_DIM, -60.0, 0.0), random(&mut rng, t * BAP_DIM, -60.0, 0.0));
        let b = bapd(&p, &g).unwrap();
        prop_assert!((b - naive_bapd(&p, &g)).abs() < 1e-12);
        prop_assert!(b >= 0.0);
        prop_assert_eq!(bapd(&p, &p).unwrap(), 0.0);
    }
}
