use foley_bridge::curation::{
    active_fraction, curate, score_filter, silence_filter, ClipRecord, Direction, ScorerSpec, SilenceSpec, Stage,
    Status,
};
use foley_bridge::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RATE: u32 = 16_000;

fn sine(seconds: f64, amp: f64) -> Vec<f64> {
    let n = (seconds * RATE as f64) as usize;
    (0..n).map(|i| amp * (std::f64::consts::TAU * 440.0 * i as f64 / RATE as f64).sin()).collect()
}

#[test]
fn silence_examples() {
    let spec = SilenceSpec::default();
    assert!(!silence_filter(&vec![0.0; RATE as usize], RATE, spec.rms_threshold, spec.min_active_fraction).unwrap());
    assert!(silence_filter(&sine(2.0, 0.1), RATE, spec.rms_threshold, spec.min_active_fraction).unwrap());

    // 10 s of silence with a 0.2 s burst aligned to two 100 ms windows.
    let mut w = vec![0.0; 10 * RATE as usize];
    let burst = sine(0.2, 0.1);
    let at = 3 * RATE as usize;
    w[at..at + burst.len()].copy_from_slice(&burst);
    assert_eq!(active_fraction(&w, RATE, spec.rms_threshold).unwrap(), 2.0 / 100.0);
    assert!(!silence_filter(&w, RATE, spec.rms_threshold, 0.05).unwrap());

    assert!(matches!(silence_filter(&[], RATE, 1e-3, 0.05), Err(Error::Input(_))));
}

fn records(n: usize) -> Vec<ClipRecord> {
    (0..n).map(|i| ClipRecord::pending(format!("c{i:05}"), 4.0, format!("clips/c{i:05}"))).collect()
}

#[test]
fn score_filter_examples() {
    let spec = |t: f64| ScorerSpec { scorer_id: "q".into(), threshold: t, direction: Direction::KeepAbove };
    let scores = [0.2, 0.6, 0.9];
    let scorer = |r: &ClipRecord| -> Result<f64> { Ok(scores[r.id[1..].parse::<usize>().unwrap()]) };
    let m = records(3);
    let dropped = |out: &[ClipRecord]| out.iter().filter(|r| r.is_dropped()).count();
    assert_eq!(dropped(&score_filter(&m, &spec(0.1), &scorer)), 0);
    assert_eq!(dropped(&score_filter(&m, &spec(1.0), &scorer)), 3);
    let mixed = score_filter(&m, &spec(0.5), &scorer);
    assert_eq!(dropped(&mixed), 1);
    assert_eq!(mixed[0].drop_reason.as_deref(), Some("q"));
    assert!(mixed.iter().all(|r| r.scores.contains_key("q")));

    let failing = |r: &ClipRecord| -> Result<f64> {
        if r.id == "c00001" {
            Err(Error::Input("unreadable".into()))
        } else {
            Ok(1.0)
        }
    };
    let out = score_filter(&m, &spec(0.5), &failing);
    assert_eq!(out[1].drop_reason.as_deref(), Some("scorer_error:q"));
    assert_eq!((out[0].status, out[2].status), (Status::Kept, Status::Kept));
}

#[test]
fn thousand_record_pipeline_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let quality: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0)).collect();
    let agreement: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let silent: Vec<bool> = (0..1000).map(|_| rng.random_bool(0.1)).collect();
    let idx = |r: &ClipRecord| r.id[1..].parse::<usize>().unwrap();
    let source = |r: &ClipRecord| -> Result<(Vec<f64>, u32)> {
        Ok((if silent[idx(r)] { vec![0.0; 1600] } else { sine(0.1, 0.1) }, RATE))
    };
    let q = |r: &ClipRecord| -> Result<f64> { Ok(quality[idx(r)]) };
    let a = |r: &ClipRecord| -> Result<f64> {
        let v = agreement[idx(r)];
        if v > 0.95 {
            Err(Error::Input("scorer timeout".into()))
        } else {
            Ok(v)
        }
    };
    let stages = [
        Stage::Silence { spec: SilenceSpec::default(), source: &source },
        Stage::Score { spec: ScorerSpec { scorer_id: "quality".into(), threshold: 0.3, direction: Direction::KeepAbove }, scorer: &q },
        Stage::Score { spec: ScorerSpec { scorer_id: "agreement".into(), threshold: 0.5, direction: Direction::KeepBelow }, scorer: &a },
    ];
    let input = records(1000);
    let (out, summary) = curate(&input, &stages).unwrap();

    let mut remaining = 1000;
    for (st, expect) in summary.stages.iter().zip([
        (0..1000).filter(|&i| silent[i]).count(),
        (0..1000).filter(|&i| !silent[i] && quality[i] < 0.3).count(),
        (0..1000).filter(|&i| !silent[i] && quality[i] >= 0.3 && agreement[i] > 0.5).count(),
    ]) {
        assert_eq!(st.dropped, expect, "{}", st.stage);
        remaining -= expect;
        assert_eq!(st.remaining, remaining);
    }
    assert_eq!(summary.kept + summary.dropped, 1000);
    for (i, r) in out.iter().enumerate() {
        let reason = r.drop_reason.as_deref();
        if silent[i] {
            assert_eq!(reason, Some("silence"));
        } else if quality[i] < 0.3 {
            assert_eq!(reason, Some("quality"));
        } else if agreement[i] > 0.95 {
            assert_eq!(reason, Some("scorer_error:agreement"));
        } else if agreement[i] > 0.5 {
            assert_eq!(reason, Some("agreement"));
        } else {
            assert_eq!(r.status, Status::Kept);
        }
    }

    let (again, s2) = curate(&out, &stages).unwrap();
    assert_eq!(again, out);
    assert!(s2.stages.iter().all(|s| s.dropped == 0));
    assert_eq!(s2.previously_dropped, summary.dropped);

    let mut dup = records(3);
    dup[2].id = dup[0].id.clone();
    assert!(matches!(curate(&dup, &stages), Err(Error::Manifest(_))));
    let (same, s0) = curate(&input, &[]).unwrap();
    assert_eq!(same, input);
    assert_eq!((s0.kept, s0.dropped), (1000, 0));
}
