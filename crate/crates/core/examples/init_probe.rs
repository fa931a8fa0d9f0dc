use pri3d::contrastive::{evaluate_objective, train, view_invariance_score, eval_pairs_of, EncoderParams, TrainConfig, TrainingTuple};
use pri3d::matching::match_frames;
use pri3d::scenes::{default_light_dir, generate_scene, render_frame, CameraPath};
use pri3d::voxels::{crop_chunk, frustum_aabb, pixel_voxel_correspondences, sequence_surface_points};

fn build(n_pairs: usize, w: u32, h: u32, seed: u64, fov: f64, step_deg: f64, boxes: usize) -> Vec<TrainingTuple> {
    let scene = generate_scene(seed, boxes);
    let path = CameraPath::circular_arc(n_pairs + 1, w, h, fov, step_deg * (n_pairs + 1) as f64);
    let frames: Vec<_> = path.poses.iter().enumerate()
        .map(|(i, p)| render_frame(&scene, i as u32, p, &path.intrinsics, default_light_dir()))
        .collect();
    let surface = sequence_surface_points(&frames, 2);
    let mut out = Vec::new();
    for win in frames.windows(2) {
        let (fa, fb) = (&win[0], &win[1]);
        let view = match_frames(fa, fb, 0.02);
        if view.is_empty() { continue; }
        let ba = frustum_aabb(fa, 0.02).unwrap();
        let bb = frustum_aabb(fb, 0.02).unwrap();
        let ca = crop_chunk(&surface, fa.frame_index, &ba, 0.02);
        let cb = crop_chunk(&surface, fb.frame_index, &bb, 0.02);
        let ga = pixel_voxel_correspondences(fa, &ca, 0.02);
        let gb = pixel_voxel_correspondences(fb, &cb, 0.02);
        if ga.matches.is_empty() || gb.matches.is_empty() { continue; }
        out.push(TrainingTuple { color_a: fa.color.clone(), color_b: fb.color.clone(),
            chunk_a: ca, chunk_b: cb, view, geo_a: ga, geo_b: gb });
    }
    out
}

fn main() {
    for (name, fov, step, boxes, trunk_gain) in [
        ("fov60_s7.5_b12_t1", 60.0, 7.5, 12usize, 1.0),
        ("fov60_s7.5_b12_t2", 60.0, 7.5, 12, 2.0),
        ("fov90_s15_b6_t2",   90.0, 15.0, 6, 2.0),
        ("fov60_s15_b12_t2",  60.0, 15.0, 12, 2.0),
    ] {
        let dataset = build(20, 64, 48, 2024, fov, step, boxes);
        if dataset.len() != 20 { println!("{name}: only {} tuples", dataset.len()); continue; }
        let nview: usize = dataset.iter().map(|t| t.view.len()).sum::<usize>() / 20;
        let cfg = TrainConfig { iterations: 200, sample_k: 256, invariance_every: 0, momentum: 0.5, ..TrainConfig::default() };
        let ev = eval_pairs_of(&dataset);
        let mut params = EncoderParams::init(32, true, 7);
        for w in params.conv1_w.iter_mut() { *w *= trunk_gain; }
        for w in params.conv2_w.iter_mut() { *w *= trunk_gain; }
        for w in params.fc1_w.iter_mut() { *w *= trunk_gain; }
        let l0 = evaluate_objective(&params, &dataset, &cfg, 1234).unwrap();
        let s0 = view_invariance_score(&params, &ev, 512, 99).unwrap();
        let r = train(&params, &dataset, &cfg, 11).unwrap();
        let l1 = evaluate_objective(&r.params, &dataset, &cfg, 1234).unwrap();
        let s1 = view_invariance_score(&r.params, &ev, 512, 99).unwrap();
        println!("{name:>20}: |view|~{nview} loss {l0:.3} -> {l1:.3} (ratio {:.3})  inv {s0:+.3} -> {s1:+.3}", l1 / l0);
    }
}
