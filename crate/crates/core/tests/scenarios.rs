use monovtr::eval::{evaluate, failure_episodes};
use monovtr::pipeline::{run_repeat, run_teach, Scenario};
use monovtr::presets::{add_low_texture_patch, exact_flat_route, flat_route, rough_route};
use monovtr::repeat::{build_local_map, Mode};
use monovtr::sim::scripted_teach_drive;

#[test]
fn rendered_frames_stay_inside_the_envelope() {
    let cfg = rough_route(6.0, 0.5);
    let s = Scenario::new(cfg.clone()).unwrap();
    let k = s.rig.intrinsics;
    let mut frames = 0;
    for f in scripted_teach_drive(&s.world, &s.script, &s.rig, &cfg.noise, &cfg.render_options(), 4) {
        let r = &f.rendered;
        assert!(r.observations.len() <= cfg.features.budget);
        assert!(r.observations.len() > 100, "frame {} has {}", f.index, r.observations.len());
        assert_eq!(r.landmark_ids.len(), r.observations.len());
        for (o, p) in r.observations.iter().zip(&r.camera_points) {
            assert!(k.contains(o.u, o.v));
            assert!(p.z > 0.0 && p.norm() <= cfg.features.render_distance + 1e-9);
        }
        frames += 1;
    }
    assert_eq!(frames, s.script.frame_times().len());
}

#[test]
fn exact_keypoints_match_true_landmarks() {
    let cfg = exact_flat_route(2.0, 0.6);
    let s = Scenario::new(cfg.clone()).unwrap();
    let f = scripted_teach_drive(&s.world, &s.script, &s.rig, &cfg.noise, &cfg.render_options(), 1)
        .next()
        .unwrap();
    let kps = s.keypoints(&f.rendered);
    assert!(!kps.is_empty());
    for k in &kps {
        let truth = f.rendered.camera_points[f.rendered.observations.iter().position(|o| o.u == k.source_pixel.x && o.v == k.source_pixel.y).unwrap()];
        assert!((k.position - truth).norm() < 1e-9 * (1.0 + truth.norm()));
    }
}

#[test]
fn fused_landmarks_sit_on_their_landmarks() {
    let cfg = exact_flat_route(3.0, 0.6);
    let s = Scenario::new(cfg.clone()).unwrap();
    let path = run_teach(&s).unwrap().path;
    let anchor = path.len() / 2;
    let map = build_local_map(&path, anchor, cfg.localization.window_size);
    let multi = map.sources.iter().filter(|g| g.len() > 1).count();
    assert!(multi > 50, "only {multi} landmarks seen twice");
    let poses = path.reconstruct();
    let to_anchor = poses[anchor].inverse();
    for (fused, group) in map.fused_keypoints.iter().zip(&map.sources) {
        for &(kf, idx) in group {
            let p = to_anchor.compose(&poses[kf]).transform_point(&path.keyframes[kf].keypoints[idx].position);
            assert!((p - fused.position).norm() < 1e-4, "fused point off by {}", (p - fused.position).norm());
        }
    }
}

#[test]
fn low_texture_stretch_causes_recoverable_failure() {
    let teach = rough_route(20.0, 0.3);
    let mut repeat = teach.clone();
    add_low_texture_patch(&mut repeat, 6.0, 4.0, 1.0);
    let path = run_teach(&Scenario::new(teach).unwrap()).unwrap().path;
    let run = run_repeat(&Scenario::new(repeat).unwrap(), &path).unwrap();
    let report = evaluate(&run.log);
    let episodes = failure_episodes(&run.log);
    assert!(!episodes.is_empty());
    assert!(run.log.records.iter().any(|r| r.mode == Mode::VoOnly));
    assert!(report.autonomy < 100.0, "{}", report.to_text());
    assert!(episodes.iter().all(|e| e.recovered), "{}", report.to_text());
    assert!(run.reached_destination);
}

#[test]
fn noisy_short_route_tracks_closely() {
    let cfg = flat_route(10.0, 0.6);
    let s = Scenario::new(cfg).unwrap();
    let path = run_teach(&s).unwrap().path;
    assert!((path.length() - 10.0).abs() < 0.1);
    let run = run_repeat(&s, &path).unwrap();
    let r = evaluate(&run.log);
    assert!(run.reached_destination);
    assert_eq!(r.autonomy, 100.0);
    assert!(r.lateral_max < 0.05, "{}", r.lateral_max);
}
