use slq_web::DemoState;

#[test]
fn demo_operations_agree_with_plain_scans() {
    let mut demo = DemoState::new("uni", 150, 8, 60, 3).unwrap();
    let layout = demo.layout();
    assert_eq!(layout.points.len(), 150);
    assert!(layout.leaves > 1);
    assert!(layout.buckets.iter().any(|b| b.dummy));
    for (x, y, bk) in &layout.points {
        let b = &layout.buckets[bk - 1];
        let m = b.mbr.unwrap();
        assert!(m[0] <= *x && *x <= m[2] && m[1] <= *y && *y <= m[3]);
    }

    for (x1, y1, x2, y2) in [(0.1, 0.1, 0.5, 0.4), (0.6, 0.2, 0.3, 0.9), (2.0, 2.0, 3.0, 3.0)] {
        let v = demo.query(x1, y1, x2, y2).unwrap();
        assert_eq!(v.results.len(), v.expected);
        for (x, y) in &v.results {
            assert!(x1.min(x2) <= *x && *x <= x1.max(x2) && y1.min(y2) <= *y && *y <= y1.max(y2));
        }
    }

    let curve = demo.predictor_curve();
    assert_eq!(curve.len(), 150);
    assert!(curve.windows(2).all(|w| w[0].bucket <= w[1].bucket));
    assert!(curve.iter().all(|c| (c.predicted - c.bucket as i64).abs() <= c.err_max));
}

#[test]
fn demo_rejects_bad_settings() {
    assert!(DemoState::new("cauchy", 100, 8, 60, 1).is_err());
    assert!(DemoState::new("uni", 4, 8, 60, 1).is_err());
    assert!(DemoState::new("uni", 100, 8, 4, 1).is_err());
}
