use foresight_core::curation::*;
use foresight_core::se3::{PoseSE3, Rotation};
use nalgebra::Vector3;
use proptest::prelude::*;

fn sig(v: &[u8]) -> Vec<bool> {
    v.iter().map(|b| *b == 1).collect()
}

#[test]
fn smoothing_examples() {
    assert_eq!(smooth_with(&sig(&[1, 1, 1, 1]), 3), sig(&[1, 1, 1, 1]));
    assert_eq!(smooth_with(&sig(&[1, 1, 0, 1, 1]), 2), sig(&[1, 1, 1, 1, 1]));
    assert_eq!(smooth_with(&sig(&[0, 0, 1, 0, 0]), 2), sig(&[0, 0, 0, 0, 0]));
    // edge gaps are not interior and stay
    assert_eq!(smooth_with(&sig(&[0, 1, 1, 1]), 2), sig(&[0, 1, 1, 1]));
    assert_eq!(smoothing_threshold(10), 1);
    assert_eq!(smoothing_threshold(40), 2);
    assert_eq!(smoothing_threshold(100), 5);
    let s = BinarySignal { values: sig(&[1, 1, 0, 1, 1]), fps: 6.0 };
    assert_eq!(run_length_smooth(&s, 40).values, sig(&[1, 1, 1, 1, 1]));
}

#[test]
fn mask_examples() {
    let a = Mask::rect(8, 8, 0, 0, 2, 2);
    let b = Mask::rect(8, 8, 1, 0, 3, 2);
    assert!((iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-15);
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    assert_eq!(iou(&a, &Mask::rect(8, 8, 5, 5, 7, 7)).unwrap(), 0.0);
    assert_eq!(iou(&Mask::empty(8, 8), &Mask::empty(8, 8)).unwrap(), 0.0);
    assert!(matches!(iou(&a, &Mask::empty(4, 4)), Err(CurationError::DimensionMismatch { .. })));

    assert_eq!(consensus_mask(&[&a, &a, &a]).unwrap(), a);
    assert!(consensus_mask(&[&a, &Mask::rect(8, 8, 5, 5, 7, 7)]).unwrap().is_empty());
    let c = Mask::rect(8, 8, 1, 1, 4, 4);
    let one = consensus_mask(&[&a, &b, &c]).unwrap();
    assert_eq!(one, Mask::rect(8, 8, 1, 1, 2, 2));
    assert_eq!(one.count(), 1);
    assert_eq!(consensus_mask(&[]), Err(CurationError::EmptyWindow));
    assert!(consensus_mask(&[&a, &Mask::empty(8, 4)]).is_err());

    let bb = Mask::rect(10, 5, 2, 1, 6, 3).bbox().unwrap();
    assert_eq!(bb, [0.4, 0.4, 0.4, 0.4]);
    assert_eq!(Mask::empty(3, 3).bbox(), None);
    let rle = c.to_rle();
    assert_eq!(rle[0], [9, 3]);
    assert_eq!(Mask::from_rle(8, 8, &rle).unwrap(), c);
    assert!(Mask::from_rle(2, 2, &[[3, 2]]).is_err());
}

#[test]
fn dedup_examples() {
    let a = Mask::rect(10, 10, 0, 0, 4, 4);
    let far = Mask::rect(10, 10, 6, 6, 9, 9);
    assert_eq!(dedup(&a, &[(3, vec![&a])], 0.7, 3), Dedup::Reject(3));
    assert_eq!(dedup(&far, &[(3, vec![&a])], 0.7, 3), Dedup::Accept);
    // 0.5 exactly: 4x4 vs 4x2 subset
    let half = Mask::rect(10, 10, 0, 0, 4, 2);
    assert_eq!(iou(&a, &half).unwrap(), 0.5);
    assert_eq!(dedup(&half, &[(1, vec![&a])], 0.5, 3), Dedup::Reject(1));
    // only the last `window` masks count
    assert_eq!(dedup(&a, &[(1, vec![&a, &far, &far, &far])], 0.7, 3), Dedup::Accept);
}

fn moving_square(frames: usize, x0: usize) -> Vec<Mask> {
    (0..frames).map(|f| Mask::rect(96, 16, x0 + f, 2, x0 + f + 16, 10)).collect()
}

#[test]
fn linking_examples() {
    let p = LinkParams { min_len: 5, ..LinkParams::default() };
    let frames: Vec<Vec<Mask>> = moving_square(20, 0).into_iter().map(|m| vec![m]).collect();
    let r = link_tracks(&frames, &p).unwrap();
    assert_eq!(r.tracks.len(), 1);
    assert_eq!(r.tracks[0].span(), 20);

    // vanish for gap_tol frames, then reappear
    let mut gappy = frames.clone();
    gappy[7].clear();
    gappy[8].clear();
    let r = link_tracks(&gappy, &p).unwrap();
    assert_eq!(r.tracks.len(), 1);
    assert_eq!(r.tracks[0].members[7], None);
    assert_eq!(r.tracks[0].span(), 20);
    // one frame too many splits the track
    gappy[9].clear();
    let r = link_tracks(&gappy, &p).unwrap();
    assert_eq!(r.tracks.len(), 2);

    let two: Vec<Vec<Mask>> =
        moving_square(12, 0).into_iter().zip(moving_square(12, 40)).map(|(a, b)| vec![b, a]).collect();
    let r = link_tracks(&two, &p).unwrap();
    assert_eq!(r.tracks.len(), 2);
    for t in &r.tracks {
        assert_eq!(t.span(), 12);
        let first = t.members[0].unwrap();
        assert!(t.members.iter().all(|m| *m == Some(first)));
    }

    let short: Vec<Vec<Mask>> = moving_square(4, 0).into_iter().map(|m| vec![m]).collect();
    let r = link_tracks(&short, &p).unwrap();
    assert!(r.tracks.is_empty());
    assert_eq!(r.short, 1);
}

#[test]
fn duplicates_do_not_seed_tracks() {
    let p = LinkParams { min_len: 1, ..LinkParams::default() };
    let mut frames: Vec<Vec<Mask>> = moving_square(10, 0).into_iter().map(|m| vec![m]).collect();
    let dup = frames[5][0].clone();
    frames[5].push(dup);
    let r = link_tracks(&frames, &p).unwrap();
    assert_eq!(r.tracks.len(), 1);
    assert_eq!(r.duplicates, 1);
}

#[test]
fn scale_examples() {
    let mut s = ScaleEstimator::new();
    assert_eq!(s.estimate(&[(0.05, 10.0)], 0.05).unwrap(), 1.0);
    assert_eq!(s.locked(), Some(1.0));
    assert_eq!(s.estimate(&[(0.1, 1.0)], 0.05), Err(CurationError::AlreadyLocked(1.0)));

    // lower weighted median: first value whose cumulative weight reaches W/2
    let mut s = ScaleEstimator::new();
    assert_eq!(s.estimate(&[(1.0, 1.0), (1.2, 1.0), (5.0, 0.1)], 1.0).unwrap(), 1.2);
    let mut s = ScaleEstimator::new();
    assert_eq!(s.estimate(&[(1.2, 1.0), (1.0, 1.0)], 1.0).unwrap(), 1.0);
    let mut s = ScaleEstimator::new();
    assert_eq!(s.estimate(&[(0.0, 1.0), (f64::NAN, 1.0), (1.0, 0.0)], 1.0), Err(CurationError::NoValidFrames));
    assert_eq!(s.locked(), None);
}

#[test]
fn segment_examples() {
    assert_eq!(segment_registrations(&[0.5; 6]), vec![0..6]);
    let mut iou = vec![0.8; 20];
    iou[10] = 0.05;
    assert_eq!(segment_registrations(&iou), vec![0..10, 10..20]);
    let all_low = segment_registrations(&[0.0; 4]);
    assert_eq!(all_low, vec![0..1, 1..2, 2..3, 3..4]);
}

fn track(iou: Vec<f64>, fps: f64) -> TrackRecord {
    let n = iou.len();
    let poses: Vec<PoseSE3> = (0..n)
        .map(|k| PoseSE3::new(Rotation::identity(), Vector3::new(0.01 * k as f64, 0.0, 0.8)))
        .collect();
    TrackRecord {
        track_id: 0,
        clip_id: "t".into(),
        fps,
        clip_frames: n,
        start_frame: 0,
        intrinsics: [500.0, 500.0, 320.0, 240.0],
        image_size: [640, 480],
        masks: vec![None; n],
        segments: segment_registrations(&iou),
        iou,
        poses,
        extrinsics: vec![PoseSE3::identity(); n],
        object_extent: [0.06, 0.06, 0.06],
    }
}

fn params() -> SliceParams {
    SliceParams { n_points: 8, ..SliceParams::default() }
}

#[test]
fn slicing_examples() {
    let t = track(vec![0.9; 20], 6.0);
    let (w, c) = slice_windows(&t, 3, 8, &params()).unwrap();
    assert_eq!(w.len(), 10);
    assert_eq!(c, SliceCounts { pre_filter: 10, post_filter: 10 });
    assert_eq!(w[0].window.context_poses.len(), 3);
    assert_eq!(w[0].window.future_poses.len(), 8);
    assert_eq!(w[0].window.anchor_points.len(), 8);
    w[0].window.validate().unwrap();

    let mut iou = vec![0.9; 20];
    iou[10] = 0.05;
    let t = track(iou, 6.0);
    let (w, _) = slice_windows(&t, 3, 8, &params()).unwrap();
    assert!(w.iter().all(|s| s.start + 11 <= 10 || s.start >= 10));
    assert!(w.is_empty());

    let mut iou = vec![0.9; 12];
    iou[5] = 0.7;
    let (w, c) = slice_windows(&track(iou, 6.0), 3, 8, &params()).unwrap();
    assert!(w.is_empty());
    assert_eq!(c.pre_filter, 2);

    // 61 frames at 6 fps exceeds 10 s
    let (w, c) = slice_windows(&track(vec![0.9; 61], 6.0), 3, 8, &params()).unwrap();
    assert!(w.is_empty());
    assert_eq!(c, SliceCounts::default());

    // an object crossing behind the camera is rejected by depth
    let mut t = track(vec![0.9; 11], 6.0);
    t.poses[10].translation.z = -0.1;
    let (w, c) = slice_windows(&t, 3, 8, &params()).unwrap();
    assert!(w.is_empty());
    assert_eq!(c.pre_filter, 1);

    let mut bad = track(vec![0.9; 11], 6.0);
    bad.segments = vec![0..5];
    assert!(slice_windows(&bad, 3, 8, &params()).is_err());
}

#[test]
fn anchor_points_are_deterministic() {
    let t = track(vec![0.9; 12], 6.0);
    let a = slice_windows(&t, 3, 8, &params()).unwrap().0;
    let b = slice_windows(&t, 3, 8, &params()).unwrap().0;
    assert_eq!(a, b);
    assert_ne!(a[0].window.anchor_points, a[1].window.anchor_points);
}

#[test]
fn funnel_csv_and_monotonicity() {
    let f = FunnelStats {
        segments: 10,
        selected_clips: 8,
        tracks: 12,
        filtered_tracks: 9,
        models: 9,
        pose_tracks: 7,
        pre_filter_windows: 100,
        post_filter_windows: 60,
    };
    assert!(f.is_monotone());
    let csv = f.to_csv();
    assert!(csv.starts_with("stage,count\nsegments,10\nselected_clips,8\n"));
    assert_eq!(csv.lines().count(), 9);
    assert!(!FunnelStats { post_filter_windows: 101, ..f }.is_monotone());
}

#[test]
fn clean_view_gate() {
    let m = Mask::rect(8, 8, 0, 0, 4, 4);
    let far = Mask::rect(8, 8, 5, 5, 8, 8);
    assert!(clean_view(&[Some(m.clone()), Some(m.clone()), Some(m.clone())], 3, 0.5));
    let flicker: Vec<Option<Mask>> = (0..6).map(|k| Some(if k % 2 == 0 { m.clone() } else { far.clone() })).collect();
    assert!(!clean_view(&flicker, 3, 0.5));
}

#[test]
fn synthetic_stream_curates_deterministically() {
    let cfg = StreamConfig { clips: 12, seed: 5, ..StreamConfig::default() };
    let frames = synthetic_stream(&cfg);
    assert_eq!(frames, synthetic_stream(&cfg));
    let line = serde_json::to_string(&frames[0]).unwrap();
    let back: FrameRecord = serde_json::from_str(&line).unwrap();
    assert_eq!(back, frames[0]);

    let p = CurateParams::default();
    let (w, stats) = curate_stream(&frames, &p).unwrap();
    assert_eq!(stats.segments, 12);
    assert!(stats.is_monotone(), "{stats:?}");
    assert!(stats.selected_clips < stats.segments);
    assert!(stats.post_filter_windows > 0);
    assert!(stats.post_filter_windows < stats.pre_filter_windows);
    assert_eq!(w.len(), stats.post_filter_windows);
    for win in &w {
        win.validate().unwrap();
    }
    let again = curate_stream(&frames, &p).unwrap();
    assert_eq!(again.0, w);
    assert_eq!(again.1, stats);
}

/// Brute-force gate: every frame of the window in one segment, every IoU
/// at least 0.1, every consecutive drop at most 0.1.
fn oracle_accepts(iou: &[f64], bounds: &[usize], start: usize, len: usize) -> bool {
    let crosses = bounds.iter().any(|&b| b > start && b < start + len);
    let mut ok = !crosses;
    for k in start..start + len {
        ok &= iou[k] >= 0.1;
        if k > start {
            ok &= iou[k - 1] - iou[k] <= 0.1 + 1e-12;
        }
    }
    ok
}

#[test]
fn exhaustive_gates_on_short_tracks() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let levels = [0.05, 0.5, 0.6, 0.7, 0.8, 0.9];
    let mut checked = 0;
    for span in 1..=30usize {
        for (c, h) in [(1, 1), (2, 3), (3, 8), (3, 5)] {
            for trial in 0..20 {
                let iou: Vec<f64> = if trial == 0 {
                    vec![0.9; span]
                } else {
                    let mut v = vec![0.8; span];
                    for x in v.iter_mut() {
                        if rng.random::<f64>() < 0.15 {
                            *x = levels[rng.random_range(0..levels.len())];
                        }
                    }
                    v
                };
                let t = track(iou.clone(), 6.0);
                let bounds: Vec<usize> = t.segments.iter().map(|s| s.start).collect();
                let (w, counts) = slice_windows(&t, c, h, &params()).unwrap();
                let len = c + h;
                let expect: Vec<usize> =
                    (0..(span + 1).saturating_sub(len)).filter(|&s| oracle_accepts(&iou, &bounds, s, len)).collect();
                let got: Vec<usize> = w.iter().map(|s| s.start).collect();
                assert_eq!(got, expect, "span {span} C {c} H {h} iou {iou:?}");
                assert_eq!(counts.pre_filter, (span + 1).saturating_sub(len));
                assert!(counts.post_filter <= counts.pre_filter);
                if trial == 0 {
                    assert_eq!(got.len(), (span + 1).saturating_sub(len));
                }
                for s in &w {
                    let inside = t.segments.iter().any(|g| g.start <= s.start && s.start + len <= g.end);
                    assert!(inside);
                    for k in s.start + 1..s.start + len {
                        assert!(iou[k - 1] - iou[k] <= 0.1 + 1e-12);
                    }
                }
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 30 * 4 * 20);
}

proptest! {
    #[test]
    fn smoothing_is_idempotent(v in prop::collection::vec(any::<bool>(), 1..60), m in 1usize..6) {
        let once = smooth_with(&v, m);
        prop_assert_eq!(smooth_with(&once, m), once.clone());
        prop_assert_eq!(once.len(), v.len());
    }

    #[test]
    fn consensus_is_subset_and_iou_symmetric(
        a in prop::collection::vec(any::<bool>(), 24),
        b in prop::collection::vec(any::<bool>(), 24),
    ) {
        let a = Mask { width: 6, height: 4, bits: a };
        let b = Mask { width: 6, height: 4, bits: b };
        let c = consensus_mask(&[&a, &b]).unwrap();
        for i in 0..24 {
            prop_assert!(!c.bits[i] || (a.bits[i] && b.bits[i]));
        }
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(Mask::from_rle(6, 4, &a.to_rle()).unwrap(), a);
    }

    #[test]
    fn segments_partition(iou in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let s = segment_registrations(&iou);
        prop_assert_eq!(s[0].start, 0);
        prop_assert_eq!(s.last().unwrap().end, iou.len());
        for w in s.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
        for g in &s[1..] {
            prop_assert!(iou[g.start] < 0.1);
        }
    }

    #[test]
    fn weighted_median_is_an_input(items in prop::collection::vec((0.01f64..10.0, 0.01f64..5.0), 1..20)) {
        let mut v = items.clone();
        let m = weighted_lower_median(&mut v);
        prop_assert!(items.iter().any(|(x, _)| *x == m));
        let total: f64 = items.iter().map(|i| i.1).sum();
        let below: f64 = items.iter().filter(|i| i.0 < m).map(|i| i.1).sum();
        let upto: f64 = items.iter().filter(|i| i.0 <= m).map(|i| i.1).sum();
        prop_assert!(below < total / 2.0 + 1e-12);
        prop_assert!(upto >= total / 2.0 - 1e-12);
    }
}
