use pri3d::contrastive::{
    eval_pairs_of, evaluate_objective, train, view_invariance_score, EncoderParams, TrainConfig,
    TrainingTuple,
};
use pri3d::matching::match_frames;
use pri3d::scenes::{default_light_dir, generate_scene, render_frame, CameraPath};
use pri3d::voxels::{crop_chunk, frustum_aabb, pixel_voxel_correspondences, sequence_surface_points};
use std::time::Instant;

fn build(n_pairs: usize, w: u32, h: u32, seed: u64) -> Vec<TrainingTuple> {
    let scene = generate_scene(seed, 6);
    let path = CameraPath::circular_arc(n_pairs + 1, w, h, 90.0, 15.0 * (n_pairs + 1) as f64);
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
    let t0 = Instant::now();
    let dataset = build(20, 64, 48, 2024);
    println!("dataset: {} tuples in {:.1?}", dataset.len(), t0.elapsed());
    for t in dataset.iter().take(3) {
        println!("  |view|={} |geoA|={} |geoB|={} chunkA={}", t.view.len(), t.geo_a.matches.len(), t.geo_b.matches.len(), t.chunk_a.len());
    }
    let cfg = TrainConfig { iterations: 200, sample_k: 256, ..TrainConfig::default() };
    let params = EncoderParams::init(32, true, 7);

    let ev = eval_pairs_of(&dataset);
    let s0 = view_invariance_score(&params, &ev, 512, 99).unwrap();
    let l0 = evaluate_objective(&params, &dataset, &cfg, 1234).unwrap();
    println!("untrained: objective {l0:.4}, invariance {s0:.4}");

    let t1 = Instant::now();
    let result = train(&params, &dataset, &cfg, 11).unwrap();
    println!("train 200 iters: {:.1?}", t1.elapsed());
    let l1 = evaluate_objective(&result.params, &dataset, &cfg, 1234).unwrap();
    let s1 = view_invariance_score(&result.params, &ev, 512, 99).unwrap();
    println!("trained:   objective {l1:.4} (ratio {:.3}), invariance {s1:.4}", l1 / l0);

    for (name, cfg2) in [("view-only", TrainConfig { w_geo: 0.0, ..cfg.clone() }), ("geo-only", TrainConfig { w_view: 0.0, ..cfg.clone() })] {
        let l0 = evaluate_objective(&params, &dataset, &cfg2, 1234).unwrap();
        let r = train(&params, &dataset, &cfg2, 11).unwrap();
        let l1 = evaluate_objective(&r.params, &dataset, &cfg2, 1234).unwrap();
        println!("{name}: {l0:.4} -> {l1:.4} (ratio {:.3})", l1 / l0);
    }
}
