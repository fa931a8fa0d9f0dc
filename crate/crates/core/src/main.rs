//! Command-line frontend: synthetic sequence generation, pair and
//! correspondence mining, chunk extraction, training, evaluation, and
//! visualization. `PRI3D_THREADS` caps the worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pri3d::contrastive::{
    train, view_invariance_score, EncoderParams, TrainConfig, TrainingTuple, ViewEvalPair,
};
use pri3d::geometry::CameraFrame;
use pri3d::io::{
    load_checkpoint, load_chunk, load_correspondences, load_pairs, load_sequence, save_checkpoint,
    save_chunk, save_correspondences, save_pairs, visualize_pair, write_sequence, PairsFile,
};
use pri3d::matching::{match_frames_strided, mine_pairs, subsample_matches, MineConfig};
use pri3d::scenes::{
    apply_depth_noise, default_light_dir, generate_scene, render_frame, CameraPath,
};
use pri3d::voxels::{
    crop_chunk, frustum_aabb, pixel_voxel_correspondences, sequence_surface_points,
    OccupancyChunk,
};

#[derive(Parser)]
#[command(name = "pri3d", version, about = "Multi-view correspondence mining and contrastive pre-training on RGB-D sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGB-D sequence in the standard layout.
    Synth {
        #[arg(long)]
        seed: u64,
        /// Number of boxes scattered in the room.
        #[arg(long, default_value_t = 6)]
        boxes: usize,
        /// Number of frames on the circular path.
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        width: u32,
        #[arg(long, default_value_t = 48)]
        height: u32,
        /// Horizontal field of view in degrees.
        #[arg(long, default_value_t = 90.0)]
        fov: f64,
        /// Gaussian depth noise sigma in meters (0 disables).
        #[arg(long, default_value_t = 0.0)]
        depth_noise: f64,
    },
    /// Mine overlapping frame pairs from a sequence.
    MinePairs {
        #[arg(long)]
        seq: PathBuf,
        /// Keep every Nth frame.
        #[arg(long, default_value_t = 25)]
        stride: usize,
        #[arg(long, default_value_t = 0.3)]
        min_overlap: f64,
        /// World-space matching radius in meters.
        #[arg(long, default_value_t = 0.02)]
        radius: f64,
        /// Sample every Nth pixel when matching.
        #[arg(long, default_value_t = 1)]
        pixel_stride: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract pixel correspondences for mined pairs.
    MineCorrs {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep at most this many matches per pair (0 keeps all).
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build per-frame occupancy chunks from the sequence surface.
    Chunk {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        voxel: f64,
        /// Pixel stride for surface point sampling.
        #[arg(long, default_value_t = 1)]
        surface_stride: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoders with the joint view + geo objective.
    Train {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        corrs: PathBuf,
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0.4)]
        tau: f64,
        #[arg(long, default_value_t = 1.0)]
        w_view: f64,
        #[arg(long, default_value_t = 1.0)]
        w_geo: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Correspondences sampled per set per step.
        #[arg(long, default_value_t = 1024)]
        k: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Disable L2 normalization of features.
        #[arg(long)]
        no_normalize: bool,
        #[arg(long, default_value_t = 0.0)]
        momentum: f64,
        /// Matching radius used for the pixel-voxel sets.
        #[arg(long, default_value_t = 0.02)]
        radius: f64,
        /// Checkpoint output path; the loss trace goes to <out>.trace.csv.
        #[arg(long)]
        out: PathBuf,
        /// Override the loss trace path.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score view invariance of a checkpoint on a sequence.
    EvalInvariance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 0.3)]
        min_overlap: f64,
        #[arg(long, default_value_t = 0.02)]
        radius: f64,
        /// Positive/negative samples per pair.
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a side-by-side correspondence visualization.
    Viz {
        #[arg(long)]
        seq: PathBuf,
        /// Frame pair as I,J.
        #[arg(long)]
        pair: String,
        #[arg(long)]
        corrs: PathBuf,
        #[arg(long, default_value_t = 50)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("PRI3D_THREADS") {
        match value.parse::<usize>() {
            Ok(n) if n >= 1 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .expect("thread pool is initialized once at startup");
            }
            _ => eprintln!("warning: ignoring invalid PRI3D_THREADS={value:?}"),
        }
    }
}

fn run(cmd: Command) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Command::Synth { seed, boxes, frames, out, width, height, fov, depth_noise } => {
            if frames == 0 {
                return Err("--frames must be at least 1".into());
            }
            let scene = generate_scene(seed, boxes);
            let path = CameraPath::circular(frames, width, height, fov);
            let light = default_light_dir();
            let rendered: Vec<CameraFrame> = path
                .poses
                .iter()
                .enumerate()
                .map(|(i, pose)| {
                    let mut f = render_frame(&scene, i as u32, pose, &path.intrinsics, light);
                    if depth_noise > 0.0 {
                        apply_depth_noise(&mut f, depth_noise, seed ^ (i as u64));
                    }
                    f
                })
                .collect();
            write_sequence(&out, &format!("synth-{seed}"), &rendered, 0.001)?;
            println!("wrote {} frames to {}", rendered.len(), out.display());
            Ok(())
        }

        Command::MinePairs { seq, stride, min_overlap, radius, pixel_stride, out } => {
            let frames = load_sequence(&seq)?;
            let cfg = MineConfig { frame_stride: stride, min_overlap, radius, pixel_stride };
            let pairs = mine_pairs(&frames, &cfg);
            let file = PairsFile {
                version: 1,
                frame_stride: stride,
                min_overlap,
                radius,
                pixel_stride,
                pairs,
            };
            save_pairs(&out, &file)?;
            println!("retained {} pairs -> {}", file.pairs.len(), out.display());
            Ok(())
        }

        Command::MineCorrs { seq, pairs, out, sample, seed } => {
            let frames = index_frames(load_sequence(&seq)?);
            let file = load_pairs(&pairs)?;
            std::fs::create_dir_all(&out)?;
            let mut written = 0usize;
            for pair in &file.pairs {
                let fa = frames
                    .get(&pair.i)
                    .ok_or_else(|| format!("frame {} not in sequence", pair.i))?;
                let fb = frames
                    .get(&pair.j)
                    .ok_or_else(|| format!("frame {} not in sequence", pair.j))?;
                let mut set = match_frames_strided(fa, fb, file.radius, file.pixel_stride);
                if sample > 0 {
                    set = subsample_matches(&set, sample, seed);
                }
                save_correspondences(&out.join(corr_name(pair.i, pair.j)), &set)?;
                written += 1;
            }
            println!("wrote {written} correspondence files to {}", out.display());
            Ok(())
        }

        Command::Chunk { seq, voxel, surface_stride, out } => {
            let frames = load_sequence(&seq)?;
            let surface = sequence_surface_points(&frames, surface_stride);
            std::fs::create_dir_all(&out)?;
            let mut written = 0usize;
            for frame in &frames {
                let bounds = match frustum_aabb(frame, voxel) {
                    Ok(b) => b,
                    Err(e) => {
                        eprintln!("skipping frame {}: {e}", frame.frame_index);
                        continue;
                    }
                };
                let chunk = crop_chunk(&surface, frame.frame_index, &bounds, voxel);
                save_chunk(&out.join(chunk_name(frame.frame_index)), &chunk)?;
                written += 1;
            }
            println!("wrote {written} chunks to {}", out.display());
            Ok(())
        }

        Command::Train {
            seq,
            corrs,
            chunks,
            iters,
            lr,
            batch,
            tau,
            w_view,
            w_geo,
            seed,
            k,
            dim,
            no_normalize,
            momentum,
            radius,
            out,
            trace,
        } => {
            let frames = index_frames(load_sequence(&seq)?);
            let dataset = assemble_dataset(&frames, &corrs, &chunks, radius, w_geo > 0.0)?;
            if dataset.is_empty() {
                return Err("no usable training tuples were assembled".into());
            }
            let cfg = TrainConfig {
                learning_rate: lr,
                batch_size: batch,
                iterations: iters,
                tau,
                sample_k: k,
                w_view,
                w_geo,
                momentum,
                ..TrainConfig::default()
            };
            let initial = EncoderParams::init(dim, !no_normalize, seed);
            let result = train(&initial, &dataset, &cfg, seed)?;
            save_checkpoint(&out, &result.params)?;
            let trace_path = trace.unwrap_or_else(|| {
                let mut s = out.as_os_str().to_owned();
                s.push(".trace.csv");
                PathBuf::from(s)
            });
            write_trace_csv(&trace_path, &result.trace)?;
            let last = result.trace.last().expect("at least one step");
            println!(
                "trained {} steps on {} tuples; final objective {:.6}; checkpoint {}",
                iters,
                dataset.len(),
                last.objective,
                out.display()
            );
            Ok(())
        }

        Command::EvalInvariance { ckpt, seq, out, stride, min_overlap, radius, samples, seed } => {
            let params = load_checkpoint(&ckpt)?;
            let frames = load_sequence(&seq)?;
            let cfg = MineConfig { frame_stride: stride, min_overlap, radius, pixel_stride: 1 };
            let pairs = mine_pairs(&frames, &cfg);
            if pairs.is_empty() {
                return Err("no overlapping pairs to evaluate".into());
            }
            let by_index = index_frames(frames);
            let mut csv = String::from("frame_i,frame_j,invariance_score\n");
            let mut per_pair = Vec::new();
            for p in &pairs {
                let fa = &by_index[&p.i];
                let fb = &by_index[&p.j];
                let set = match_frames_strided(fa, fb, radius, 1);
                let eval =
                    [ViewEvalPair { color_a: &fa.color, color_b: &fb.color, matches: &set }];
                let score = view_invariance_score(&params, &eval, samples, seed)?;
                writeln!(csv, "{},{},{}", p.i, p.j, score).unwrap();
                per_pair.push(score);
            }
            let mean: f64 = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
            writeln!(csv, "mean,,{mean}").unwrap();
            std::fs::write(&out, csv)?;
            println!(
                "mean invariance score {mean:.4} over {} pairs -> {}",
                per_pair.len(),
                out.display()
            );
            Ok(())
        }

        Command::Viz { seq, pair, corrs, sample, seed, out } => {
            let (i, j) = parse_pair(&pair)?;
            let frames = index_frames(load_sequence(&seq)?);
            let fa = frames.get(&i).ok_or_else(|| format!("frame {i} not in sequence"))?;
            let fb = frames.get(&j).ok_or_else(|| format!("frame {j} not in sequence"))?;
            let set = load_correspondences(&corrs)?;
            if set.frame_a != i || set.frame_b != j {
                return Err(format!(
                    "correspondence file is for pair ({}, {}), not ({i}, {j})",
                    set.frame_a, set.frame_b
                )
                .into());
            }
            visualize_pair(fa, fb, &set, sample, seed, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn corr_name(i: u32, j: u32) -> String {
    format!("corr_{i:06}_{j:06}.cor")
}

fn chunk_name(i: u32) -> String {
    format!("chunk_{i:06}.chk")
}

fn index_frames(frames: Vec<CameraFrame>) -> BTreeMap<u32, CameraFrame> {
    frames.into_iter().map(|f| (f.frame_index, f)).collect()
}

fn parse_pair(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("--pair expects I,J, got {s:?}"))?;
    let i = a.trim().parse::<u32>().map_err(|e| format!("bad pair index {a:?}: {e}"))?;
    let j = b.trim().parse::<u32>().map_err(|e| format!("bad pair index {b:?}: {e}"))?;
    Ok((i, j))
}

/// Builds training tuples by joining correspondence files with per-frame
/// chunks; pixel-voxel sets are computed here. Pairs missing any piece are
/// skipped with a warning.
fn assemble_dataset(
    frames: &BTreeMap<u32, CameraFrame>,
    corrs_dir: &Path,
    chunks_dir: &Path,
    radius: f64,
    need_geo: bool,
) -> Result<Vec<TrainingTuple>, Box<dyn std::error::Error>> {
    let mut corr_paths: Vec<PathBuf> = std::fs::read_dir(corrs_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cor"))
        .collect();
    corr_paths.sort();

    let mut chunk_cache: BTreeMap<u32, OccupancyChunk> = BTreeMap::new();
    let mut load_chunk_for = |idx: u32| -> Result<OccupancyChunk, Box<dyn std::error::Error>> {
        if let Some(c) = chunk_cache.get(&idx) {
            return Ok(c.clone());
        }
        let c = load_chunk(&chunks_dir.join(chunk_name(idx)))?;
        chunk_cache.insert(idx, c.clone());
        Ok(c)
    };

    let mut dataset = Vec::new();
    for path in corr_paths {
        let view = load_correspondences(&path)?;
        if view.is_empty() {
            eprintln!("skipping {}: empty correspondence set", path.display());
            continue;
        }
        let (Some(fa), Some(fb)) = (frames.get(&view.frame_a), frames.get(&view.frame_b)) else {
            eprintln!("skipping {}: frames not in sequence", path.display());
            continue;
        };
        let chunk_a = load_chunk_for(view.frame_a)?;
        let chunk_b = load_chunk_for(view.frame_b)?;
        let geo_a = pixel_voxel_correspondences(fa, &chunk_a, radius);
        let geo_b = pixel_voxel_correspondences(fb, &chunk_b, radius);
        if need_geo && (geo_a.matches.is_empty() || geo_b.matches.is_empty()) {
            eprintln!("skipping {}: no pixel-voxel matches", path.display());
            continue;
        }
        dataset.push(TrainingTuple {
            color_a: fa.color.clone(),
            color_b: fb.color.clone(),
            chunk_a,
            chunk_b,
            view,
            geo_a,
            geo_b,
        });
    }
    Ok(dataset)
}

fn write_trace_csv(
    path: &Path,
    trace: &[pri3d::contrastive::TraceRow],
) -> Result<(), std::io::Error> {
    let mut csv = String::from("step,lr,loss_view_mean,loss_geo_mean,invariance_score\n");
    for row in trace {
        let inv = row.invariance.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{},{}",
            row.step, row.lr, row.loss_view_mean, row.loss_geo_mean, inv
        )
        .unwrap();
    }
    std::fs::write(path, csv)
}
